#pragma once

#include <functional>
#include <string>

namespace anl::log {

using Sink = std::function<void(const std::string&)>;

/// Replaces the warning sink (default: stderr). Returns the previous one.
Sink set_sink(Sink sink);
void warn(const std::string& msg);
/// Number of warnings emitted since start or the last reset.
long warning_count();
void reset_count();

}  // namespace anl::log
