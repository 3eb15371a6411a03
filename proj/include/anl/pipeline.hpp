#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "anl/clusterer.hpp"
#include "anl/core_math.hpp"
#include "anl/dense_net.hpp"
#include "anl/fda.hpp"
#include "anl/metrics.hpp"
#include "anl/rss.hpp"
#include "anl/synth_world.hpp"
#include "anl/trainer.hpp"

namespace anl {

struct PipelineConfig {
    WorldConfig world;

    // networks
    int hidden_dim = 64;
    int embed_dim = 32;
    int disc_hidden = 32;
    int disc_depth = 2;

    // shared optimization
    int batch_size = 64;
    double lr = 0.00035;
    int iters_per_epoch = 60;

    // feature distribution alignment
    int fda_epochs = 10;
    double tau = 0.05;
    double alpha = 0.2;
    int r1 = 2;
    int r2 = 4;
    bool per_iter_neighbors = false;
    bool freeze_variants = false;
    bool row_normalize_targets = false;

    // clustering + main model
    int main_epochs = 40;
    int rss_period = 5;
    bool recluster_every_epoch = false;
    double cluster_p = 5e-3;
    int min_pts = 4;
    Metric cluster_metric = Metric::cosine_dist;
    double margin = 0.3;
    int p_ids = 8;
    int k_per_id = 4;
    int max_outliers = 8;
    bool instance_outliers = true;

    // reliable sample selection
    bool use_rss = true;
    int k_clean = 4;
    double lambda_conf = 0.9;
    double mu = 10.0;
    double lambda_c = 0.1;
    double lambda_e = 0.1;
    double label_lr = 0.3;
    bool reverse_kl = false;
    int aux_stage1_epochs = 10;
    int aux_stage2_epochs = 10;
    double label_noise = 0.0;

    int eval_max_rank = 20;
    std::uint64_t seed = 7;

    /// Throws ConfigError naming the field.
    void validate() const;

    /// World parameters with the seed derived from `seed`.
    WorldConfig world_config() const;
    FdaConfig fda_config() const;
    RssConfig rss_config(int round) const;
    MainEpochConfig main_config() const;
};

/// Every key with its current value, in a fixed order.
nlohmann::ordered_json config_to_json(const PipelineConfig& cfg);
/// Flat JSON object; unknown keys and wrong types are ConfigErrors.
PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base = {});
/// key=value lines; '#' starts a comment.
PipelineConfig config_from_kv(const std::string& text, PipelineConfig base = {});
/// Sets one key from its textual value.
void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);
/// JSON when the first non-blank character is '{', key=value otherwise.
PipelineConfig load_config(const std::filesystem::path& path);
std::vector<std::string> config_keys();

/// FNV-1a of the canonical key=value dump, as 16 hex digits.
std::string config_hash(const PipelineConfig& cfg);
/// "<hash>-s<seed>"
std::string run_dir_name(const PipelineConfig& cfg);

/// Networks at their seeded initial values.
FdaModels init_models(const PipelineConfig& cfg, int raw_dim, int n_source_classes);

/// Clustering of L2-normalized embeddings (select_eps + dbscan).
struct ClusterRound {
    ClusterAssignment assignment;
    double eps = 0.0;
};
ClusterRound cluster_embeddings(const Mat64& normalized_embeddings, const PipelineConfig& cfg);

/// Reassigns round(fraction * non-outliers) clustered samples to a different
/// random cluster. flipped[i] marks the changed samples.
ClusterAssignment corrupt_labels(const ClusterAssignment& a, double fraction, std::uint64_t seed,
                                 std::vector<char>* flipped = nullptr);

/// CMC/mAP of L2-normalized target embeddings over the dataset's query/gallery split.
RetrievalResult evaluate_retrieval(const DenseNet& encoder, const Dataset& ds, std::size_t max_rank);

/// Reliable/outlier partition of one round, checked against the full target set.
struct PartitionAudit {
    int round = 0;
    int epoch = 0;
    std::size_t total = 0;
    std::size_t reliable = 0;
    std::size_t rejected = 0;
    std::size_t cluster_outliers = 0;
    bool covers_all = false;
    bool disjoint = false;
    std::size_t ce_outlier_violations = 0;  // outliers that received a CE term
};

struct MainStageResult {
    DenseNet encoder;
    std::vector<PartitionAudit> audits;
    std::vector<std::vector<std::size_t>> labeled_sizes;  // per RSS round
    std::vector<FTraceEntry> f_trace;
    std::vector<StageMetrics> stages;
    Trace main_trace;
    Trace partition_trace;
    Trace rss_trace;
};

/// main_epochs of pseudo-label training starting from `encoder`. Target
/// identities, when the dataset has them, feed only the F/CMC diagnostics.
MainStageResult run_main_stage(const DenseNet& encoder, const Dataset& ds, const PipelineConfig& cfg);

/// Top-1 accuracy of encoder + source classifier on the source set.
double source_accuracy(const FdaModels& models, const SourceView& source);

struct PipelineResult {
    MetricsReport report;
    double direct_source_accuracy = 0.0;
    std::vector<PartitionAudit> audits;
    std::vector<std::vector<std::size_t>> labeled_sizes;  // per RSS round
    DenseNet final_encoder;
    Dataset dataset;
};

/// End-to-end run: world, direct transfer, alignment, then the main stage
/// with a recluster + RSS round every rss_period epochs. Stage failures
/// surface as StageError.
PipelineResult run_pipeline(const PipelineConfig& cfg);

/// run.json: config hash, seed, stages with their artifacts (relative to
/// run_dir, all required to exist), tool version. created_at is written only
/// when non-empty so that default runs stay byte-identical.
void write_run_manifest(const PipelineConfig& cfg, const std::filesystem::path& run_dir,
                        const std::vector<std::pair<std::string, std::vector<std::string>>>& stages,
                        const std::string& created_at = {});

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace anl
