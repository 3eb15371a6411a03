#pragma once

#include <filesystem>
#include <vector>

#include "anl/core_math.hpp"

namespace anl {

inline constexpr int kOutlier = -1;

struct ClusterAssignment {
    std::vector<int> labels;  // 0..K-1 or kOutlier
    int n_clusters = 0;
    Mat64 centroids;  // K x d, filled by attach_centroids()

    std::size_t size() const { return labels.size(); }
    std::size_t n_outliers() const;
    /// Throws if a label is out of range or a cluster is empty.
    void validate() const;
};

/// Nearest-rank p-quantile: the ceil(p*n)-th smallest value, at least the first.
double nearest_rank_quantile(std::vector<double> values, double p);

/// Nearest-rank p-quantile of the off-diagonal (i < j) distances.
double select_eps(const Mat64& dist, double p);

/// Core-point expansion on a precomputed distance matrix. A point's
/// neighbourhood is every j with dist(i,j) <= eps, itself included; core
/// points have at least min_pts. Labels are renumbered by first appearance
/// over ascending sample index.
ClusterAssignment dbscan(const Mat64& dist, double eps, int min_pts);

/// Row k = mean of the rows labelled k.
Mat64 centroids(const Mat64& embeddings, const ClusterAssignment& assignment);

void attach_centroids(ClusterAssignment& assignment, const Mat64& embeddings);

/// Relabels 0..K-1 in order of first appearance; outliers untouched.
std::vector<int> canonical_labels(std::span<const int> labels, int* n_clusters = nullptr);

/// CSV: index,label  (label -1 = outlier)
void write_assignment_csv(const ClusterAssignment& a, const std::filesystem::path& path);
ClusterAssignment read_assignment_csv(const std::filesystem::path& path);

}  // namespace anl
