#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace anl::csv {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

std::vector<std::string> split(std::string_view line, char sep = ',');

/// Strict parsers; throw InputError(path, line, ...) on bad fields.
double parse_double(std::string_view field, const std::string& path, std::size_t line);
long long parse_int(std::string_view field, const std::string& path, std::size_t line);

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;  // 1-based source line of each row
};

/// Reads a header line plus rows; blank lines are skipped.
Table read(const std::filesystem::path& path);

/// Writes with '\n' line endings; throws std::runtime_error naming the path.
void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows);

}  // namespace anl::csv
