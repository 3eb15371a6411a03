#pragma once

#include <stdexcept>
#include <string>

namespace anl {

/// Invalid configuration value or unknown key. CLI exit code 2.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& field, const std::string& msg)
        : std::invalid_argument(field + ": " + msg), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// Malformed input file. CLI exit code 2.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    InputError(const std::string& path, std::size_t line, const std::string& msg)
        : std::runtime_error(path + ":" + std::to_string(line) + ": " + msg) {}
};

/// Failure inside a pipeline stage. CLI exit code 1.
class StageError : public std::runtime_error {
public:
    StageError(const std::string& stage, const std::string& msg)
        : std::runtime_error("[" + stage + "] " + msg), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

}  // namespace anl
