#include "anl/clusterer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <stdexcept>

#include "anl/csv.hpp"
#include "anl/errors.hpp"

namespace anl {

std::size_t ClusterAssignment::n_outliers() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kOutlier));
}

void ClusterAssignment::validate() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(n_clusters, 0)), 0);
    for (int l : labels) {
        if (l == kOutlier) continue;
        if (l < 0 || l >= n_clusters) throw std::invalid_argument("ClusterAssignment: label out of range");
        ++counts[static_cast<std::size_t>(l)];
    }
    for (auto c : counts)
        if (c == 0) throw std::invalid_argument("ClusterAssignment: empty cluster");
}

double nearest_rank_quantile(std::vector<double> d, double p) {
    if (d.empty()) throw std::invalid_argument("nearest_rank_quantile: no values");
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("nearest_rank_quantile: p must be in (0,1]");
    const auto m = d.size();
    auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(m)));
    rank = std::clamp<std::size_t>(rank, 1, m);
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(rank - 1), d.end());
    return d[rank - 1];
}

double select_eps(const Mat64& dist, double p) {
    const std::size_t n = dist.rows();
    if (n < 2) throw std::invalid_argument("select_eps: need at least 2 samples");
    if (dist.cols() != n) throw std::invalid_argument("select_eps: distance matrix not square");
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("select_eps: p must be in (0,1)");
    std::vector<double> d;
    d.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d.push_back(dist(i, j));
    return nearest_rank_quantile(std::move(d), p);
}

std::vector<int> canonical_labels(std::span<const int> labels, int* n_clusters) {
    std::map<int, int> remap;
    std::vector<int> out(labels.size(), kOutlier);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        auto [it, inserted] = remap.emplace(labels[i], static_cast<int>(remap.size()));
        out[i] = it->second;
    }
    if (n_clusters) *n_clusters = static_cast<int>(remap.size());
    return out;
}

ClusterAssignment dbscan(const Mat64& dist, double eps, int min_pts) {
    const std::size_t n = dist.rows();
    if (dist.cols() != n) throw std::invalid_argument("dbscan: distance matrix not square");
    if (!(eps > 0.0)) throw std::invalid_argument("dbscan: eps must be > 0");
    if (min_pts < 1) throw std::invalid_argument("dbscan: min_pts must be >= 1");

    std::vector<std::vector<std::size_t>> nbrs(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i == j || dist(i, j) <= eps) nbrs[i].push_back(j);
    std::vector<char> core(n);
    for (std::size_t i = 0; i < n; ++i) core[i] = nbrs[i].size() >= static_cast<std::size_t>(min_pts);

    constexpr int unassigned = -2;
    std::vector<int> label(n, unassigned);
    int next = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != unassigned || !core[i]) continue;
        const int c = next++;
        label[i] = c;
        std::deque<std::size_t> frontier{i};
        while (!frontier.empty()) {
            const auto p = frontier.front();
            frontier.pop_front();
            if (!core[p]) continue;
            for (auto q : nbrs[p]) {
                if (label[q] != unassigned) continue;
                label[q] = c;
                frontier.push_back(q);
            }
        }
    }
    for (int& l : label)
        if (l == unassigned) l = kOutlier;

    ClusterAssignment a;
    a.labels = canonical_labels(label, &a.n_clusters);
    return a;
}

Mat64 centroids(const Mat64& embeddings, const ClusterAssignment& assignment) {
    check_same_size(embeddings.rows(), assignment.labels.size(), "centroids");
    const auto k = static_cast<std::size_t>(assignment.n_clusters);
    Mat64 c(k, embeddings.cols());
    std::vector<double> counts(k, 0.0);
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
        const int l = assignment.labels[i];
        if (l == kOutlier) continue;
        const auto li = static_cast<std::size_t>(l);
        counts[li] += 1.0;
        for (std::size_t d = 0; d < embeddings.cols(); ++d) c(li, d) += embeddings(i, d);
    }
    for (std::size_t r = 0; r < k; ++r) {
        if (counts[r] == 0.0) throw std::invalid_argument("centroids: empty cluster");
        for (double& v : c.row(r)) v /= counts[r];
    }
    return c;
}

void attach_centroids(ClusterAssignment& assignment, const Mat64& embeddings) {
    assignment.centroids = centroids(embeddings, assignment);
}

void write_assignment_csv(const ClusterAssignment& a, const std::filesystem::path& path) {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < a.labels.size(); ++i) rows.push_back({std::to_string(i), std::to_string(a.labels[i])});
    csv::write(path, {"index", "label"}, rows);
}

ClusterAssignment read_assignment_csv(const std::filesystem::path& path) {
    const auto t = csv::read(path);
    const std::string p = path.string();
    if (t.header != std::vector<std::string>{"index", "label"}) throw InputError(p, 1, "expected header index,label");
    ClusterAssignment a;
    a.labels.assign(t.rows.size(), kOutlier);
    std::vector<char> seen(t.rows.size(), 0);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto idx = csv::parse_int(t.rows[r][0], p, t.line_numbers[r]);
        if (idx < 0 || static_cast<std::size_t>(idx) >= t.rows.size() || seen[static_cast<std::size_t>(idx)])
            throw InputError(p, t.line_numbers[r], "index out of range or duplicated");
        seen[static_cast<std::size_t>(idx)] = 1;
        const auto l = csv::parse_int(t.rows[r][1], p, t.line_numbers[r]);
        if (l < kOutlier) throw InputError(p, t.line_numbers[r], "label must be >= -1");
        a.labels[static_cast<std::size_t>(idx)] = static_cast<int>(l);
    }
    a.labels = canonical_labels(a.labels, &a.n_clusters);
    return a;
}

}  // namespace anl
