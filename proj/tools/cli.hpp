#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "anl/core_math.hpp"
#include "anl/synth_world.hpp"

namespace anl::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kUsageError = 2;

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// embeddings.csv: index,e0..e{d-1}. Rows are target positions.
void write_embeddings(const std::filesystem::path& path, const Mat64& emb);

struct Embeddings {
    std::vector<long long> index;
    Mat64 values;
};
Embeddings read_embeddings(const std::filesystem::path& path);

/// meta.csv: index,role,camera,true_id with role query|gallery|train.
void write_meta(const std::filesystem::path& path, const Dataset& ds);

struct MetaRow {
    long long index = 0;
    std::string role;
    int camera = 0;
    int true_id = kUnknownId;
};
std::vector<MetaRow> read_meta(const std::filesystem::path& path);

}  // namespace anl::cli
