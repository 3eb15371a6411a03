#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "anl/core_math.hpp"

namespace anl {

enum class Activation { relu, tanh, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
    Mat64 weight;  // out x in
    Vec64 bias;    // out
    Activation act = Activation::identity;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }
};

/// Feedforward stack of dense layers. Rows of a batch are samples.
class DenseNet {
public:
    DenseNet() = default;
    explicit DenseNet(std::vector<Layer> layers);

    /// Xavier-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
    /// dims = {in, h1, ..., out}; acts.size() == dims.size() - 1.
    static DenseNet xavier(const std::vector<std::size_t>& dims, const std::vector<Activation>& acts,
                           std::uint64_t seed);

    std::size_t in_dim() const;
    std::size_t out_dim() const;
    std::size_t num_params() const;

    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }

    /// Flat parameter vector: per layer, row-major weight then bias.
    std::vector<double> flat_params() const;
    void set_flat_params(std::span<const double> p);

    friend bool operator==(const DenseNet& a, const DenseNet& b);

private:
    std::vector<Layer> layers_;
};

struct ForwardCache {
    std::vector<Mat64> inputs;  // input to each layer
    std::vector<Mat64> pre;     // pre-activation of each layer
};

struct LayerGrad {
    Mat64 weight;
    Vec64 bias;
};

struct GradTape {
    std::vector<LayerGrad> layers;
    Mat64 input;  // dLoss/dBatch

    std::vector<double> flat_params() const;
    /// this += other (shapes must agree).
    void accumulate(const GradTape& other);
};

struct ForwardResult {
    Mat64 output;
    ForwardCache cache;
};

ForwardResult forward(const DenseNet& net, const Mat64& batch);
/// Output only; same arithmetic as forward().
Mat64 predict(const DenseNet& net, const Mat64& batch);

GradTape backward(const DenseNet& net, const ForwardCache& cache, const Mat64& d_output);

GradTape zero_tape(const DenseNet& net, std::size_t batch_rows);

struct AdamState {
    double lr = 0.00035;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<double> m;
    std::vector<double> v;

    static AdamState for_net(const DenseNet& net, double lr = 0.00035);
};

void adam_step(DenseNet& net, const GradTape& tape, AdamState& state);

/// JSON checkpoint: {"format":"anl-densenet","version":1,"layers":[{in,out,act,weight,bias}]}
std::string net_to_json(const DenseNet& net);
DenseNet net_from_json(const std::string& text);
void save_net(const DenseNet& net, const std::filesystem::path& path);
DenseNet load_net(const std::filesystem::path& path);

}  // namespace anl
