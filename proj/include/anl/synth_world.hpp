#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "anl/core_math.hpp"

namespace anl {

enum class Domain { source, target };

std::string to_string(Domain d);

inline constexpr int kUnknownId = -1;

struct Sample {
    Vec64 raw;
    int camera = 0;
    Domain domain = Domain::source;
    int true_id = kUnknownId;
    std::size_t index = 0;  // unique across the dataset
};

struct WorldConfig {
    int n_identities = 50;  // per domain
    int n_cameras = 4;      // per domain
    int samples_per_identity = 8;
    int raw_dim = 32;
    double camera_scale = 0.3;
    double domain_shift = 3.0;
    double noise_sigma = 0.35;
    int cameras_per_identity = 4;
    double variant_sigma = 0.1;
    double query_fraction = 0.5;
    std::uint64_t seed = 7;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
};

/// Supervised view of the source domain.
struct SourceView {
    Mat64 features;
    std::vector<int> labels;   // 0..n_classes-1
    std::vector<int> cameras;
    int n_classes = 0;
};

/// Training view of the target domain. Carries no identity labels.
struct TargetView {
    Mat64 features;
    std::vector<int> cameras;
};

struct Dataset {
    std::vector<Sample> source;
    std::vector<Sample> target;
    std::vector<std::size_t> query;    // positions into target
    std::vector<std::size_t> gallery;  // positions into target
    int raw_dim = 0;

    SourceView source_view() const;
    TargetView target_view() const;
    /// Ground truth for evaluation only.
    std::vector<int> target_truth() const;
};

Dataset generate_world(const WorldConfig& cfg);

/// x + sigma * N(0, I), seeded.
Vec64 make_variant(std::span<const double> x, double sigma, std::uint64_t seed);

/// Variants of every row; row i uses stream (seed, i).
Mat64 make_variants(const Mat64& x, double sigma, std::uint64_t seed);

/// Per identity, one image from each of round(fraction * cams) cameras goes to
/// query (at most cams - 1), everything else to gallery.
Dataset split_query_gallery(Dataset dataset, double fraction, std::uint64_t seed);

/// CSV: index,domain,camera,f0..f{d-1},true_id  (true_id may be empty).
void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset_csv(const std::filesystem::path& path);

/// dataset.csv + manifest.json (config echo, counts, query/gallery positions).
void export_dataset(const Dataset& ds, const WorldConfig& cfg, const std::filesystem::path& dir);
Dataset import_dataset(const std::filesystem::path& dir);

}  // namespace anl
