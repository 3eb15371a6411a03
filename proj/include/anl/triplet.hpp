#pragma once

#include <vector>

#include "anl/core_math.hpp"
#include "anl/rng.hpp"

namespace anl {

struct TripletResult {
    double loss = 0.0;
    Mat64 grad_features;  // same shape as features
    Mat64 grad_variants;  // same shape as outlier_variants
    std::size_t anchors = 0;           // anchors in the mean
    std::size_t outlier_anchors = 0;   // of which outliers
    std::size_t excluded_anchors = 0;  // no positive or no negative
};

/// Batch-hard triplet loss, averaged over anchors.
///
/// labels[i] < 0 marks row i as an outlier; the k-th outlier row (in row
/// order) is paired with outlier_variants row k, which is its only positive.
/// Labelled anchors take positives from rows with the same label and
/// negatives from every row with a different label or no label. Outlier
/// anchors take every other feature row as a negative. Variant rows are
/// positives only. Hardest positive/negative ties resolve to the lower row.
TripletResult batch_hard_triplet_loss_grad(const Mat64& features, std::span<const int> labels,
                                           const Mat64& outlier_variants, double margin);

/// Rows of a P x K identity batch plus outlier rows.
struct TripletBatch {
    std::vector<std::size_t> labeled;  // sample positions, grouped by identity
    std::vector<int> labels;          // label of each labeled row
    std::vector<std::size_t> outliers;  // sample positions
};

/// P labels drawn without replacement (all of them if fewer), K rows per
/// label (with replacement only when a label has fewer than K members), and
/// up to max_outliers outlier positions.
TripletBatch sample_triplet_batch(std::span<const std::size_t> positions, std::span<const int> labels,
                                  std::span<const std::size_t> outlier_pool, int p, int k, int max_outliers,
                                  Rng& rng);

}  // namespace anl
