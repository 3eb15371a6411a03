#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "anl/core_math.hpp"
#include "anl/dense_net.hpp"
#include "anl/metrics.hpp"
#include "anl/synth_world.hpp"

namespace anl {

/// One unit-norm variant feature per target sample, EMA-updated.
struct MemoryBank {
    Mat64 cells;
    double alpha = 0.2;

    std::size_t size() const { return cells.rows(); }
    std::size_t dim() const { return cells.cols(); }
};

/// Cells are the L2-normalized rows of `variant_features`.
MemoryBank init_bank(const Mat64& variant_features, double alpha);

/// cell <- alpha * cell + (1 - alpha) * feature, then renormalized. A zero
/// result keeps the previous cell and logs a warning. Returns false in that case.
bool bank_update(MemoryBank& bank, std::size_t index, std::span<const double> feature, double alpha);

struct NeighborSets {
    std::vector<std::vector<std::size_t>> intra;  // same camera, most similar first
    std::vector<std::vector<std::size_t>> cross;  // other cameras, most similar first
};

/// Top-r1 same-camera and top-r2 cross-camera bank cells by cosine
/// similarity to each embedding; self excluded, ties to the lower index.
NeighborSets build_neighbor_sets(const Mat64& embeddings, const MemoryBank& bank, std::span<const int> cameras,
                                 int r1, int r2);

/// Sparse rows of s_ij. Each row holds (j, s_ij) with the diagonal first.
struct SimilarityTargets {
    std::vector<std::vector<std::pair<std::size_t, double>>> rows;

    std::size_t size() const { return rows.size(); }
    double at(std::size_t i, std::size_t j) const;
};

/// s_ii = 1, s_ij = cos(f_i, bank_j) on the neighbour support, 0 elsewhere.
/// row_normalize rescales each row to sum to 1 (off by default).
SimilarityTargets similarity_targets(const Mat64& embeddings, const MemoryBank& bank, const NeighborSets& sets,
                                     bool row_normalize = false);

struct LossGrad {
    double loss = 0.0;
    Mat64 grad;
};

/// Memory-bank contrastive loss over the rows of a batch. Rows are
/// L2-normalized before the dot products with the bank; the partition
/// function runs over every bank cell. Averaged over batch rows; the
/// gradient is wrt the raw (pre-normalization) rows. Throws ConfigError for
/// tau outside (0,1).
LossGrad contrastive_loss_grad(const Mat64& batch, std::span<const std::size_t> batch_index,
                               const MemoryBank& bank, const SimilarityTargets& targets, double tau);

/// Mean softmax cross-entropy and its gradient wrt the logits.
LossGrad source_ce_loss_grad(const Mat64& logits, std::span<const int> labels);

struct AdversarialResult {
    double generator_loss = 0.0;      // mean_t (D(f)-1)^2
    Mat64 grad_target;                // d generator_loss / d target rows
    double discriminator_loss = 0.0;  // mean_s (D(f)-1)^2 + mean_t D(f)^2
    GradTape disc_grad;               // d discriminator_loss / d disc params
};

/// Least-squares adversarial losses on raw discriminator outputs.
AdversarialResult adversarial_losses(const DenseNet& disc, const Mat64& source_emb, const Mat64& target_emb);

struct FdaConfig {
    int epochs = 10;
    int batch_size = 64;  // per domain
    int iters_per_epoch = 0;  // 0: one pass over the larger domain
    double lr = 0.00035;
    double tau = 0.05;
    double alpha = 0.2;
    int r1 = 2;
    int r2 = 4;
    double variant_sigma = 0.1;
    bool use_contrastive = true;
    bool use_adversarial = true;
    bool per_iter_neighbors = false;
    bool freeze_variants = false;
    bool row_normalize_targets = false;
    std::uint64_t seed = 1;

    void validate() const;
};

struct FdaModels {
    DenseNet encoder;
    DenseNet classifier;  // source identities
    DenseNet disc;
};

struct FdaResult {
    FdaModels models;
    MemoryBank bank;
    /// columns: epoch, l_ce, l_cl, l_g, l_d (epoch means)
    Trace trace;
};

/// Joint source cross-entropy, target contrastive and adversarial training.
/// With use_contrastive and use_adversarial off this is plain source training.
FdaResult fda_train(FdaModels models, const SourceView& source, const TargetView& target, const FdaConfig& cfg);

/// Encoder output on every row, L2-normalized.
Mat64 embed_normalized(const DenseNet& encoder, const Mat64& x);

}  // namespace anl
