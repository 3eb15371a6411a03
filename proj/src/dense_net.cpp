#include "anl/dense_net.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "anl/kernels.hpp"
#include "anl/rng.hpp"

namespace anl {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw std::invalid_argument("unknown activation: " + s);
}

DenseNet::DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw std::invalid_argument("DenseNet: no layers");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        check_same_size(layers_[l].bias.size(), layers_[l].out_dim(), "DenseNet bias");
        if (l > 0) check_same_size(layers_[l].in_dim(), layers_[l - 1].out_dim(), "DenseNet layer chain");
    }
}

DenseNet DenseNet::xavier(const std::vector<std::size_t>& dims, const std::vector<Activation>& acts,
                          std::uint64_t seed) {
    if (dims.size() < 2 || acts.size() != dims.size() - 1)
        throw std::invalid_argument("DenseNet::xavier: need dims.size() == acts.size() + 1 >= 2");
    Rng rng(seed, "xavier");
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t in = dims[l];
        const std::size_t out = dims[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        Layer layer{Mat64(out, in), Vec64(out), acts[l]};
        for (double& w : layer.weight.flat()) w = rng.uniform(-bound, bound);
        layers.push_back(std::move(layer));
    }
    return DenseNet(std::move(layers));
}

std::size_t DenseNet::in_dim() const { return layers_.front().in_dim(); }
std::size_t DenseNet::out_dim() const { return layers_.back().out_dim(); }

std::size_t DenseNet::num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

std::vector<double> DenseNet::flat_params() const {
    std::vector<double> p;
    p.reserve(num_params());
    for (const auto& l : layers_) {
        p.insert(p.end(), l.weight.flat().begin(), l.weight.flat().end());
        p.insert(p.end(), l.bias.begin(), l.bias.end());
    }
    return p;
}

void DenseNet::set_flat_params(std::span<const double> p) {
    check_same_size(p.size(), num_params(), "DenseNet::set_flat_params");
    std::size_t o = 0;
    for (auto& l : layers_) {
        for (double& w : l.weight.flat()) w = p[o++];
        for (double& b : l.bias) b = p[o++];
    }
}

bool operator==(const DenseNet& a, const DenseNet& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l) {
        const auto& x = a.layers_[l];
        const auto& y = b.layers_[l];
        if (x.act != y.act || !(x.weight == y.weight) || !(x.bias == y.bias)) return false;
    }
    return true;
}

namespace {

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::tanh: return std::tanh(x);
        case Activation::identity: return x;
    }
    return x;
}

// Derivative expressed through the pre-activation.
inline double activate_grad(Activation a, double pre) {
    switch (a) {
        case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: {
            const double t = std::tanh(pre);
            return 1.0 - t * t;
        }
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

Mat64 affine(const Layer& layer, const Mat64& x) {
    Mat64 z;
    kernels::gemm_abt(x, layer.weight, z);
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += layer.bias[j];
    return z;
}

}  // namespace

ForwardResult forward(const DenseNet& net, const Mat64& batch) {
    check_same_size(batch.cols(), net.in_dim(), "forward: batch cols vs input dim");
    ForwardResult r;
    Mat64 x = batch;
    for (const auto& layer : net.layers()) {
        Mat64 z = affine(layer, x);
        r.cache.inputs.push_back(std::move(x));
        x = z;
        for (double& v : x.flat()) v = activate(layer.act, v);
        r.cache.pre.push_back(std::move(z));
    }
    r.output = std::move(x);
    return r;
}

Mat64 predict(const DenseNet& net, const Mat64& batch) {
    check_same_size(batch.cols(), net.in_dim(), "predict: batch cols vs input dim");
    Mat64 x = batch;
    for (const auto& layer : net.layers()) {
        x = affine(layer, x);
        for (double& v : x.flat()) v = activate(layer.act, v);
    }
    return x;
}

GradTape backward(const DenseNet& net, const ForwardCache& cache, const Mat64& d_output) {
    const auto& layers = net.layers();
    if (cache.inputs.size() != layers.size() || cache.pre.size() != layers.size())
        throw std::invalid_argument("backward: cache does not match network");
    check_same_size(d_output.rows(), cache.pre.back().rows(), "backward: dOutput rows");
    check_same_size(d_output.cols(), net.out_dim(), "backward: dOutput cols");

    GradTape tape;
    tape.layers.resize(layers.size());
    Mat64 g = d_output;
    for (std::size_t l = layers.size(); l-- > 0;) {
        const auto& layer = layers[l];
        const Mat64& pre = cache.pre[l];
        for (std::size_t i = 0; i < g.size(); ++i) g.flat()[i] *= activate_grad(layer.act, pre.flat()[i]);

        LayerGrad lg{Mat64(), Vec64(layer.out_dim())};
        kernels::gemm_atb(g, cache.inputs[l], lg.weight);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) lg.bias[j] += g(i, j);

        Mat64 dx;
        kernels::gemm_ab(g, layer.weight, dx);
        tape.layers[l] = std::move(lg);
        g = std::move(dx);
    }
    tape.input = std::move(g);
    return tape;
}

GradTape zero_tape(const DenseNet& net, std::size_t batch_rows) {
    GradTape t;
    for (const auto& l : net.layers()) t.layers.push_back({Mat64(l.out_dim(), l.in_dim()), Vec64(l.out_dim())});
    t.input = Mat64(batch_rows, net.in_dim());
    return t;
}

std::vector<double> GradTape::flat_params() const {
    std::vector<double> p;
    for (const auto& l : layers) {
        p.insert(p.end(), l.weight.flat().begin(), l.weight.flat().end());
        p.insert(p.end(), l.bias.begin(), l.bias.end());
    }
    return p;
}

void GradTape::accumulate(const GradTape& other) {
    check_same_size(layers.size(), other.layers.size(), "GradTape::accumulate");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        check_same_size(layers[l].weight.size(), other.layers[l].weight.size(), "GradTape::accumulate weight");
        for (std::size_t i = 0; i < layers[l].weight.size(); ++i)
            layers[l].weight.flat()[i] += other.layers[l].weight.flat()[i];
        for (std::size_t i = 0; i < layers[l].bias.size(); ++i) layers[l].bias[i] += other.layers[l].bias[i];
    }
    if (input.size() == other.input.size())
        for (std::size_t i = 0; i < input.size(); ++i) input.flat()[i] += other.input.flat()[i];
}

AdamState AdamState::for_net(const DenseNet& net, double lr) {
    AdamState s;
    s.lr = lr;
    s.m.assign(net.num_params(), 0.0);
    s.v.assign(net.num_params(), 0.0);
    return s;
}

void adam_step(DenseNet& net, const GradTape& tape, AdamState& state) {
    const std::vector<double> g = tape.flat_params();
    check_same_size(g.size(), net.num_params(), "adam_step: tape vs params");
    if (state.m.size() != g.size()) state.m.assign(g.size(), 0.0);
    if (state.v.size() != g.size()) state.v.assign(g.size(), 0.0);

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    std::vector<double> p = net.flat_params();
    for (std::size_t i = 0; i < p.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    check_finite(p, "adam_step: parameters");
    net.set_flat_params(p);
}

std::string net_to_json(const DenseNet& net) {
    nlohmann::ordered_json j;
    j["format"] = "anl-densenet";
    j["version"] = 1;
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : net.layers()) {
        nlohmann::ordered_json lj;
        lj["in"] = l.in_dim();
        lj["out"] = l.out_dim();
        lj["act"] = to_string(l.act);
        lj["weight"] = l.weight.flat();
        lj["bias"] = l.bias.values();
        j["layers"].push_back(std::move(lj));
    }
    return j.dump();
}

DenseNet net_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "anl-densenet") throw std::invalid_argument("not an anl-densenet checkpoint");
    std::vector<Layer> layers;
    for (const auto& lj : j.at("layers")) {
        const auto in = lj.at("in").get<std::size_t>();
        const auto out = lj.at("out").get<std::size_t>();
        layers.push_back({Mat64(out, in, lj.at("weight").get<std::vector<double>>()),
                          Vec64(lj.at("bias").get<std::vector<double>>()),
                          activation_from_string(lj.at("act").get<std::string>())});
    }
    return DenseNet(std::move(layers));
}

void save_net(const DenseNet& net, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << net_to_json(net) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

DenseNet load_net(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return net_from_json(ss.str());
}

}  // namespace anl
