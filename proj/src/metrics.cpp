#include "anl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "anl/csv.hpp"
#include "anl/log.hpp"

namespace anl {

namespace {

struct QueryScore {
    bool valid = false;
    std::size_t first_hit = 0;
    double ap = 0.0;
};

QueryScore score_query(std::span<const double> dist_row, const RetrievalSet& query, std::size_t q,
                       const RetrievalSet& gallery) {
    std::vector<std::size_t> order;
    order.reserve(gallery.ids.size());
    for (std::size_t g = 0; g < gallery.ids.size(); ++g) {
        if (gallery.ids[g] == query.ids[q] && gallery.cameras[g] == query.cameras[q]) continue;
        order.push_back(g);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist_row[a] < dist_row[b]; });
    QueryScore s;
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (gallery.ids[order[r]] != query.ids[q]) continue;
        if (hits == 0) s.first_hit = r;
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits == 0) return s;
    s.valid = true;
    s.ap = precision_sum / static_cast<double>(hits);
    return s;
}

void check_set(const RetrievalSet& s, const char* what) {
    check_same_size(s.features.rows(), s.ids.size(), what);
    check_same_size(s.features.rows(), s.cameras.size(), what);
}

}  // namespace

RetrievalResult cmc_map_from_distances(const Mat64& dist, const RetrievalSet& query, const RetrievalSet& gallery,
                                       std::size_t max_rank) {
    check_same_size(dist.rows(), query.ids.size(), "cmc_map: distance rows vs queries");
    check_same_size(dist.cols(), gallery.ids.size(), "cmc_map: distance cols vs gallery");
    check_same_size(query.ids.size(), query.cameras.size(), "cmc_map: query meta");
    check_same_size(gallery.ids.size(), gallery.cameras.size(), "cmc_map: gallery meta");
    if (gallery.ids.empty()) throw std::invalid_argument("cmc_map: empty gallery");

    const std::size_t nq = query.ids.size();
    std::vector<QueryScore> scores(nq);
    const auto n = static_cast<std::int64_t>(nq);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::int64_t q = 0; q < n; ++q) {
        const auto qi = static_cast<std::size_t>(q);
        scores[qi] = score_query(dist.row(qi), query, qi, gallery);
    }

    const std::size_t len = max_rank == 0 ? gallery.ids.size() : std::min(max_rank, gallery.ids.size());
    RetrievalResult res;
    res.cmc.assign(len, 0.0);
    double ap_sum = 0.0;
    for (std::size_t q = 0; q < nq; ++q) {
        if (!scores[q].valid) {
            ++res.skipped_queries;
            continue;
        }
        ++res.evaluated_queries;
        ap_sum += scores[q].ap;
        for (std::size_t k = scores[q].first_hit; k < len; ++k) res.cmc[k] += 1.0;
    }
    if (res.skipped_queries > 0)
        log::warn("cmc_map: " + std::to_string(res.skipped_queries) + " queries without a valid match excluded");
    if (res.evaluated_queries > 0) {
        const auto denom = static_cast<double>(res.evaluated_queries);
        for (double& c : res.cmc) c /= denom;
        res.map = ap_sum / denom;
    }
    return res;
}

RetrievalResult cmc_map(const RetrievalSet& query, const RetrievalSet& gallery, std::size_t max_rank) {
    check_set(query, "cmc_map: query");
    check_set(gallery, "cmc_map: gallery");
    if (gallery.ids.empty()) throw std::invalid_argument("cmc_map: empty gallery");
    check_same_size(query.features.cols(), gallery.features.cols(), "cmc_map: feature dims");
    const std::size_t nq = query.features.rows();
    const std::size_t ng = gallery.features.rows();
    const std::size_t d = query.features.cols();
    Mat64 dist(nq, ng);
    const auto n = static_cast<std::int64_t>(nq);
#pragma omp parallel for schedule(static)
    for (std::int64_t q = 0; q < n; ++q) {
        const auto qi = static_cast<std::size_t>(q);
        for (std::size_t g = 0; g < ng; ++g) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = query.features(qi, k) - gallery.features(g, k);
                s += diff * diff;
            }
            dist(qi, g) = std::sqrt(s);
        }
    }
    return cmc_map_from_distances(dist, query, gallery, max_rank);
}

PairScore pairwise_f_value(std::span<const int> predicted, std::span<const int> truth) {
    check_same_size(predicted.size(), truth.size(), "pairwise_f_value");
    if (predicted.empty()) throw std::invalid_argument("pairwise_f_value: empty sample set");
    auto pairs = [](std::uint64_t n) { return n * (n - 1) / 2; };
    std::map<int, std::uint64_t> pred_sizes, true_sizes;
    std::map<std::pair<int, int>, std::uint64_t> joint;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        ++true_sizes[truth[i]];
        if (predicted[i] < 0) continue;
        ++pred_sizes[predicted[i]];
        ++joint[{predicted[i], truth[i]}];
    }
    std::uint64_t pred_pairs = 0, true_pairs = 0, tp = 0;
    for (const auto& kv : pred_sizes) pred_pairs += pairs(kv.second);
    for (const auto& kv : true_sizes) true_pairs += pairs(kv.second);
    for (const auto& kv : joint) tp += pairs(kv.second);
    PairScore s;
    if (pred_pairs > 0) s.precision = static_cast<double>(tp) / static_cast<double>(pred_pairs);
    if (true_pairs > 0) s.recall = static_cast<double>(tp) / static_cast<double>(true_pairs);
    if (s.precision + s.recall > 0.0) s.f = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

std::string report_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["format"] = "anl-metrics-report";
    j["version"] = kReportVersion;
    j["seed"] = r.seed;
    j["cmc"] = r.cmc;
    j["map"] = r.map;
    j["f_trace"] = nlohmann::ordered_json::array();
    for (const auto& e : r.f_trace)
        j["f_trace"].push_back({{"stage", e.stage}, {"precision", e.precision}, {"recall", e.recall}, {"f", e.f}});
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& s : r.stages) j["stages"].push_back({{"stage", s.stage}, {"cmc", s.cmc}, {"map", s.map}});
    j["traces"] = nlohmann::ordered_json::array();
    for (const auto& t : r.traces)
        j["traces"].push_back({{"name", t.name}, {"columns", t.columns}, {"rows", t.rows}});
    j["config"] = r.config;
    return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
    const auto j = nlohmann::ordered_json::parse(text);
    if (j.value("format", "") != "anl-metrics-report") throw std::invalid_argument("not an anl-metrics-report");
    MetricsReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.cmc = j.at("cmc").get<std::vector<double>>();
    r.map = j.at("map").get<double>();
    for (const auto& e : j.at("f_trace"))
        r.f_trace.push_back({e.at("stage").get<std::string>(), e.at("precision").get<double>(),
                             e.at("recall").get<double>(), e.at("f").get<double>()});
    for (const auto& s : j.at("stages"))
        r.stages.push_back(
            {s.at("stage").get<std::string>(), s.at("cmc").get<std::vector<double>>(), s.at("map").get<double>()});
    for (const auto& t : j.at("traces"))
        r.traces.push_back({t.at("name").get<std::string>(), t.at("columns").get<std::vector<std::string>>(),
                            t.at("rows").get<std::vector<std::vector<double>>>()});
    r.config = j.at("config");
    return r;
}

void write_report(const MetricsReport& r, const std::filesystem::path& run_dir) {
    std::error_code ec;
    std::filesystem::create_directories(run_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + run_dir.string() + ": " + ec.message());
    const auto path = run_dir / "report.json";
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out << report_to_json(r);
        if (!out) throw std::runtime_error("write failed: " + path.string());
    }
    std::vector<std::vector<std::string>> f_rows;
    for (const auto& e : r.f_trace)
        f_rows.push_back({e.stage, csv::format_double(e.precision), csv::format_double(e.recall),
                          csv::format_double(e.f)});
    csv::write(run_dir / "f_trace.csv", {"stage", "precision", "recall", "f"}, f_rows);
    for (const auto& t : r.traces) {
        std::vector<std::vector<std::string>> rows;
        for (const auto& row : t.rows) {
            std::vector<std::string> cells;
            for (double v : row) cells.push_back(csv::format_double(v));
            rows.push_back(std::move(cells));
        }
        csv::write(run_dir / (t.name + ".csv"), t.columns, rows);
    }
}

MetricsReport read_report(const std::filesystem::path& run_dir) {
    const auto path = run_dir / "report.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return report_from_json(ss.str());
}

}  // namespace anl
