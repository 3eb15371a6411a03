#include "anl/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "anl/errors.hpp"

namespace anl::csv {

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

std::vector<std::string> split(std::string_view line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(line.substr(start));
            break;
        }
        out.emplace_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    for (auto& f : out) {
        while (!f.empty() && (f.back() == ' ' || f.back() == '\r' || f.back() == '\t')) f.pop_back();
        std::size_t b = 0;
        while (b < f.size() && (f[b] == ' ' || f[b] == '\t')) ++b;
        f.erase(0, b);
    }
    return out;
}

double parse_double(std::string_view field, const std::string& path, std::size_t line) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(v))
        throw InputError(path, line, "bad number '" + std::string(field) + "'");
    return v;
}

long long parse_int(std::string_view field, const std::string& path, std::size_t line) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size())
        throw InputError(path, line, "bad integer '" + std::string(field) + "'");
    return v;
}

Table read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path.string());
    Table t;
    std::string line;
    std::size_t n = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (!have_header) {
            t.header = split(line);
            have_header = true;
            continue;
        }
        auto fields = split(line);
        if (fields.size() != t.header.size())
            throw InputError(path.string(), n,
                             "expected " + std::to_string(t.header.size()) + " fields, got " +
                                 std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
        t.line_numbers.push_back(n);
    }
    if (!have_header) throw InputError(path.string(), 1, "missing header");
    return t;
}

void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    auto emit = [&](const std::vector<std::string>& r) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i) out << ',';
            out << r[i];
        }
        out << '\n';
    };
    emit(header);
    for (const auto& r : rows) emit(r);
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace anl::csv
