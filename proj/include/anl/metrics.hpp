#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "anl/core_math.hpp"

namespace anl {

/// Identity and camera of each row of a query or gallery matrix.
struct RetrievalSet {
    Mat64 features;
    std::vector<int> ids;
    std::vector<int> cameras;
};

struct RetrievalResult {
    std::vector<double> cmc;  // cmc[k]: match within top k+1
    double map = 0.0;
    std::size_t evaluated_queries = 0;
    std::size_t skipped_queries = 0;  // no valid cross-camera match
};

/// Single-query protocol with Euclidean ranking. Gallery entries sharing both
/// identity and camera with the query are dropped from its ranking; distance
/// ties go to the lower gallery index. max_rank 0 means the full gallery.
RetrievalResult cmc_map(const RetrievalSet& query, const RetrievalSet& gallery, std::size_t max_rank = 0);

/// Same, from a precomputed query x gallery distance matrix.
RetrievalResult cmc_map_from_distances(const Mat64& dist, const RetrievalSet& query,
                                       const RetrievalSet& gallery, std::size_t max_rank = 0);

struct PairScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

/// Pair-level agreement of a predicted labelling (negative = outlier, forms
/// no pairs) with the true identities. Zero denominators give 0.
PairScore pairwise_f_value(std::span<const int> predicted, std::span<const int> truth);

struct FTraceEntry {
    std::string stage;
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;

    friend bool operator==(const FTraceEntry&, const FTraceEntry&) = default;
};

struct StageMetrics {
    std::string stage;
    std::vector<double> cmc;
    double map = 0.0;

    friend bool operator==(const StageMetrics&, const StageMetrics&) = default;
};

/// Named CSV trace: fixed column header plus numeric rows.
struct Trace {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    friend bool operator==(const Trace&, const Trace&) = default;
};

inline constexpr int kReportVersion = 1;

struct MetricsReport {
    std::vector<double> cmc;
    double map = 0.0;
    std::vector<FTraceEntry> f_trace;
    std::vector<StageMetrics> stages;
    std::vector<Trace> traces;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::uint64_t seed = 0;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

std::string report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const std::string& text);

/// report.json plus one <trace name>.csv per trace, all under run_dir.
void write_report(const MetricsReport& r, const std::filesystem::path& run_dir);
/// Reads report.json (traces are embedded there as well).
MetricsReport read_report(const std::filesystem::path& run_dir);

}  // namespace anl
