#pragma once

#include <cstdint>
#include <vector>

#include "anl/core_math.hpp"
#include "anl/dense_net.hpp"
#include "anl/triplet.hpp"

namespace anl {

struct MainModels {
    DenseNet encoder;
    DenseNet classifier;  // one logit per current cluster
};

struct MainOptimizers {
    AdamState encoder;
    AdamState classifier;
};

struct MainEpochConfig {
    int p_ids = 8;
    int k_per_id = 4;
    int max_outliers = 8;
    int iters_per_epoch = 0;  // 0: one pass over the reliable set
    double margin = 0.3;
    double variant_sigma = 0.1;
    bool instance_outliers = true;
    std::uint64_t seed = 1;
};

struct MainEpochStats {
    double ce = 0.0;
    double triplet = 0.0;
    std::size_t iterations = 0;
    std::size_t outlier_anchors = 0;
    bool skipped = false;
    /// Every sample position that contributed a cross-entropy term.
    std::vector<std::size_t> ce_positions;
};

/// Loss and parameter gradients of one batch. Rows of x: labeled samples
/// (with labels), then outliers, then one variant per outlier in the same order.
struct MainLoss {
    double ce = 0.0;
    double triplet = 0.0;
    double total = 0.0;
    std::size_t outlier_anchors = 0;
    GradTape encoder;
    GradTape classifier;
};
MainLoss main_loss_grad(const MainModels& models, const Mat64& x, std::span<const int> labels,
                        std::size_t n_outliers, double margin);

/// One epoch of cross-entropy on reliable samples plus batch-hard triplet
/// over reliable samples and outliers (each outlier paired with a fresh
/// feature-space variant of itself). Outliers never enter cross-entropy.
MainEpochStats main_epoch(MainModels& models, MainOptimizers& opt, const Mat64& features,
                          std::span<const std::size_t> reliable, std::span<const int> reliable_labels,
                          std::span<const std::size_t> outliers, const MainEpochConfig& cfg, int epoch);

}  // namespace anl
