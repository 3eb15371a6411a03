#include "anl/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace anl::log {

namespace {
std::mutex g_mutex;
std::atomic<long> g_count{0};
Sink& sink_ref() {
    static Sink s = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
    return s;
}
}  // namespace

Sink set_sink(Sink sink) {
    std::lock_guard lock(g_mutex);
    Sink old = std::move(sink_ref());
    sink_ref() = std::move(sink);
    return old;
}

void warn(const std::string& msg) {
    ++g_count;
    std::lock_guard lock(g_mutex);
    if (sink_ref()) sink_ref()(msg);
}

long warning_count() { return g_count.load(); }
void reset_count() { g_count = 0; }

}  // namespace anl::log
