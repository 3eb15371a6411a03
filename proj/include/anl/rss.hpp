#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "anl/clusterer.hpp"
#include "anl/core_math.hpp"
#include "anl/dense_net.hpp"
#include "anl/fda.hpp"
#include "anl/metrics.hpp"

namespace anl {

/// Label-logit parameterization of per-sample pseudo-label distributions.
/// Row r belongs to target position members[r].
struct SoftLabelMatrix {
    Mat64 logits;
    std::vector<std::size_t> members;
    double lr = 1.0;

    std::size_t rows() const { return logits.rows(); }
    std::size_t n_classes() const { return logits.cols(); }
    Simplex distribution(std::size_t r) const { return softmax(logits.row(r)); }
    Mat64 distributions() const { return softmax_rows(logits); }
};

/// logits = mu * onehot(label) for every non-outlier sample.
SoftLabelMatrix init_soft_labels(const ClusterAssignment& assignment, double mu, double lr = 1.0);

struct SampleSplit {
    std::vector<std::size_t> labeled;  // S_l positions
    std::vector<int> labeled_labels;
    std::vector<std::size_t> unlabeled;  // S_u positions
};

/// Per cluster, the k members closest (Euclidean) to the centroid form S_l;
/// every other non-outlier goes to S_u. Ties go to the lower position.
SampleSplit init_clean_set(const Mat64& embeddings, const ClusterAssignment& assignment, int k);

struct RssLosses {
    double kl = 0.0;
    double c = 0.0;
    double e = 0.0;
    double total = 0.0;
    Mat64 grad_class_logits;  // d total / d classifier logits
    Mat64 grad_label_logits;  // d total / d label logits
};

/// z = softmax(class_logits), y~ = softmax(label_logits), hard = pseudo-labels.
/// kl = mean sum z log(z / y~)   (reverse_kl: mean sum y~ log(y~ / z))
/// c  = -mean sum onehot(hard) log y~
/// e  = -mean sum z log z
/// total = kl + lambda_c c + lambda_e e
RssLosses rss_losses(const Mat64& class_logits, const Mat64& label_logits, std::span<const int> hard,
                     double lambda_c, double lambda_e, bool reverse_kl = false);

/// -mean sum z log z with z = softmax(logits), gradient wrt logits.
LossGrad entropy_loss_grad(const Mat64& logits);

struct AuxModels {
    DenseNet encoder;
    DenseNet classifier;
};

struct RssConfig {
    int k_clean = 12;
    double lambda_conf = 0.9;
    double mu = 10.0;
    double lambda_c = 0.1;
    double lambda_e = 0.1;
    double label_lr = 1.0;
    bool reverse_kl = false;
    int stage1_epochs = 10;
    int stage2_epochs = 10;
    int batch_size = 64;
    int iters_per_epoch = 0;  // 0: one pass
    int p_ids = 8;
    int k_per_id = 4;
    double margin = 0.3;
    double lr = 0.00035;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Stage1Stats {
    double ce = 0.0;
    double triplet = 0.0;
    double entropy = 0.0;
    std::size_t labeled_before = 0;
    std::size_t labeled_after = 0;
};

struct AuxOptimizers {
    AdamState encoder;
    AdamState classifier;
};

AuxOptimizers make_aux_optimizers(const AuxModels& m, double lr);

/// One epoch of initialization training, then migration of confident S_u
/// samples (max probability > lambda_conf) into S_l under their argmax label.
Stage1Stats stage1_epoch(AuxModels& models, AuxOptimizers& opt, SampleSplit& split, const Mat64& features,
                         const RssConfig& cfg, int epoch);

struct Stage2Stats {
    double kl = 0.0;
    double c = 0.0;
    double e = 0.0;
    double total = 0.0;
    double mean_label_entropy = 0.0;
};

/// One epoch of joint network / label-logit optimization over soft.members.
/// Network parameters take Adam steps on the batch-mean loss; each label row
/// takes a plain gradient step of size soft.lr on its own sample's loss.
Stage2Stats stage2_epoch(AuxModels& models, AuxOptimizers& opt, SoftLabelMatrix& soft, std::span<const int> hard,
                         const Mat64& features, const RssConfig& cfg, int epoch);

struct ReliableVerdict {
    std::vector<std::size_t> positions;  // rows of the soft-label matrix
    std::vector<int> original;           // Y^c
    std::vector<int> corrected;          // Y^n
    std::vector<char> kept;
    std::vector<std::size_t> reliable;  // kept positions
    std::vector<std::size_t> rejected;  // routed to instance training
    std::size_t ties = 0;

    /// CSV: index,y_c,y_n,kept
    void write_csv(const std::filesystem::path& path) const;
    static ReliableVerdict read_csv(const std::filesystem::path& path);
};

/// Y^n = argmax of each soft-label row; kept iff Y^n == Y^c. Under a tie the
/// sample is kept when Y^c is among the maxima.
ReliableVerdict filter_reliable(const SoftLabelMatrix& soft, std::span<const int> hard);

struct RssRoundResult {
    ReliableVerdict verdict;
    SoftLabelMatrix soft;
    SampleSplit split;
    std::vector<std::size_t> labeled_sizes;  // |S_l| after each stage-1 epoch
    /// columns: stage, epoch, ce, triplet, entropy, l_kl, l_c, l_e, labeled
    Trace trace;
};

/// Full round: fresh auxiliary model from main_encoder with a classifier
/// sized to the cluster count, stage 1, stage 2, filter.
RssRoundResult run_rss_round(const DenseNet& main_encoder, const Mat64& features,
                             const ClusterAssignment& assignment, const RssConfig& cfg);

}  // namespace anl
