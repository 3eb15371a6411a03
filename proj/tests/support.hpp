#pragma once
// Shared helpers for the unit tests and the acceptance binary: independent
// reference implementations written from the definitions, plus
// finite-difference utilities.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "anl/core_math.hpp"
#include "anl/dense_net.hpp"
#include "anl/log.hpp"
#include "anl/rng.hpp"

namespace anl::test {

inline Mat64 random_mat(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Mat64 m(rows, cols);
    for (double& v : m.flat()) v = rng.uniform(lo, hi);
    return m;
}

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

/// Relative error between an analytic gradient and central differences of
/// f over the entries of x.
inline double fd_error(const std::function<double(const Mat64&)>& f, const Mat64& x, const Mat64& analytic,
                       double h = 1e-5) {
    const Vec64 x0(x.flat());
    const Vec64 num = finite_diff_grad(
        [&](const Vec64& v) {
            Mat64 m(x.rows(), x.cols(), v.values());
            return f(m);
        },
        x0, h);
    return relative_error(num.span(), analytic.flat());
}

/// Same over the flat parameters of a network.
inline double fd_error_params(const std::function<double(const DenseNet&)>& f, const DenseNet& net,
                              const std::vector<double>& analytic, double h = 1e-5) {
    const Vec64 p0(net.flat_params());
    DenseNet probe = net;
    const Vec64 num = finite_diff_grad(
        [&](const Vec64& v) {
            probe.set_flat_params(v.span());
            return f(probe);
        },
        p0, h);
    return relative_error(num.span(), analytic);
}

/// Collects warnings for the lifetime of the object.
class WarningCapture {
public:
    WarningCapture() {
        prev_ = log::set_sink([this](const std::string& m) { messages.push_back(m); });
    }
    ~WarningCapture() { log::set_sink(prev_); }
    WarningCapture(const WarningCapture&) = delete;
    WarningCapture& operator=(const WarningCapture&) = delete;
    bool contains(const std::string& needle) const {
        return std::any_of(messages.begin(), messages.end(),
                           [&](const std::string& m) { return m.find(needle) != std::string::npos; });
    }
    std::vector<std::string> messages;

private:
    log::Sink prev_;
};

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name) {
        path_ = std::filesystem::temp_directory_path() /
                ("anl-" + name + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

namespace oracle {

inline Mat64 matmul_abt(const Mat64& a, const Mat64& b) {
    Mat64 out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
    return out;
}

inline double euclid(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    return ab / std::sqrt(aa * bb);
}

inline Mat64 distances(const Mat64& x, bool cosine_metric) {
    Mat64 d(x.rows(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.rows(); ++j)
            d(i, j) = i == j ? 0.0 : cosine_metric ? 1.0 - cosine(x.row(i), x.row(j)) : euclid(x.row(i), x.row(j));
    return d;
}

/// Layer-by-layer evaluation with explicit loops.
inline Mat64 net_forward(const DenseNet& net, const Mat64& x) {
    Mat64 h = x;
    for (const auto& layer : net.layers()) {
        Mat64 next(h.rows(), layer.out_dim());
        for (std::size_t r = 0; r < h.rows(); ++r)
            for (std::size_t o = 0; o < layer.out_dim(); ++o) {
                double s = layer.bias[o];
                for (std::size_t i = 0; i < layer.in_dim(); ++i) s += layer.weight(o, i) * h(r, i);
                switch (layer.act) {
                    case Activation::relu: s = s > 0.0 ? s : 0.0; break;
                    case Activation::tanh: s = std::tanh(s); break;
                    case Activation::identity: break;
                }
                next(r, o) = s;
            }
        h = std::move(next);
    }
    return h;
}

/// Density clustering from the definition: core points, the transitive
/// closure of core-core eps-adjacency, border points attached to the
/// adjacent component whose smallest core index is lowest, labels numbered
/// by first appearance.
inline std::vector<int> dbscan(const Mat64& dist, double eps, int min_pts) {
    const std::size_t n = dist.rows();
    std::vector<char> core(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int c = 0;
        for (std::size_t j = 0; j < n; ++j) c += (i == j || dist(i, j) <= eps) ? 1 : 0;
        core[i] = c >= min_pts;
    }
    // reach[i][j]: core i and core j connected by a chain of core points
    std::vector<std::vector<char>> reach(n, std::vector<char>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) reach[i][j] = core[i] && core[j] && (i == j || dist(i, j) <= eps);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            if (reach[i][k])
                for (std::size_t j = 0; j < n; ++j)
                    if (reach[k][j]) reach[i][j] = 1;
    // component id = smallest core index in the component
    std::vector<long> comp(n, -1);
    for (std::size_t i = 0; i < n; ++i)
        if (core[i])
            for (std::size_t j = 0; j <= i; ++j)
                if (reach[i][j]) {
                    comp[i] = static_cast<long>(j);
                    break;
                }
    for (std::size_t i = 0; i < n; ++i) {
        if (core[i]) continue;
        long best = -1;
        for (std::size_t j = 0; j < n; ++j)
            if (core[j] && dist(i, j) <= eps && (best < 0 || comp[j] < best)) best = comp[j];
        comp[i] = best;
    }
    // clusters are numbered by their smallest core index, then renumbered
    // by first appearance over sample order
    std::map<long, int> by_core;
    for (long c : comp)
        if (c >= 0) by_core.emplace(c, 0);
    int k = 0;
    for (auto& [c, id] : by_core) id = k++;
    std::vector<int> labels(n, -1);
    for (std::size_t i = 0; i < n; ++i)
        if (comp[i] >= 0) labels[i] = by_core[comp[i]];
    std::map<int, int> first;
    for (int& l : labels) {
        if (l < 0) continue;
        auto [it, _] = first.emplace(l, static_cast<int>(first.size()));
        l = it->second;
    }
    return labels;
}

struct Retrieval {
    std::vector<double> cmc;
    double map = 0.0;
    std::size_t evaluated = 0;
};

/// Rank of each candidate counted by direct comparison; AP and CMC from the
/// ranks of the relevant candidates.
inline Retrieval retrieval(const Mat64& dist, const std::vector<int>& qid, const std::vector<int>& qcam,
                           const std::vector<int>& gid, const std::vector<int>& gcam, std::size_t len) {
    Retrieval out;
    out.cmc.assign(len, 0.0);
    double ap_sum = 0.0;
    for (std::size_t q = 0; q < qid.size(); ++q) {
        auto valid = [&](std::size_t g) { return !(gid[g] == qid[q] && gcam[g] == qcam[q]); };
        std::vector<std::size_t> relevant_ranks;
        for (std::size_t g = 0; g < gid.size(); ++g) {
            if (!valid(g) || gid[g] != qid[q]) continue;
            std::size_t rank = 1;
            for (std::size_t h = 0; h < gid.size(); ++h)
                if (h != g && valid(h) && (dist(q, h) < dist(q, g) || (dist(q, h) == dist(q, g) && h < g))) ++rank;
            relevant_ranks.push_back(rank);
        }
        if (relevant_ranks.empty()) continue;
        std::sort(relevant_ranks.begin(), relevant_ranks.end());
        double ap = 0.0;
        for (std::size_t i = 0; i < relevant_ranks.size(); ++i)
            ap += static_cast<double>(i + 1) / static_cast<double>(relevant_ranks[i]);
        ap_sum += ap / static_cast<double>(relevant_ranks.size());
        for (std::size_t k = 0; k < len; ++k)
            if (relevant_ranks.front() <= k + 1) out.cmc[k] += 1.0;
        ++out.evaluated;
    }
    if (out.evaluated > 0) {
        for (double& c : out.cmc) c /= static_cast<double>(out.evaluated);
        out.map = ap_sum / static_cast<double>(out.evaluated);
    }
    return out;
}

struct Pairs {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

inline std::set<std::pair<std::size_t, std::size_t>> predicted_pairs(const std::vector<int>& pred) {
    std::set<std::pair<std::size_t, std::size_t>> s;
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (std::size_t j = i + 1; j < pred.size(); ++j)
            if (pred[i] >= 0 && pred[i] == pred[j]) s.emplace(i, j);
    return s;
}

inline Pairs pairwise_f(const std::vector<int>& pred, const std::vector<int>& truth) {
    const auto p = predicted_pairs(pred);
    std::set<std::pair<std::size_t, std::size_t>> t;
    for (std::size_t i = 0; i < truth.size(); ++i)
        for (std::size_t j = i + 1; j < truth.size(); ++j)
            if (truth[i] == truth[j]) t.emplace(i, j);
    std::size_t both = 0;
    for (const auto& e : p) both += t.count(e);
    Pairs r;
    if (!p.empty()) r.precision = static_cast<double>(both) / static_cast<double>(p.size());
    if (!t.empty()) r.recall = static_cast<double>(both) / static_cast<double>(t.size());
    if (r.precision + r.recall > 0.0) r.f = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

/// Smallest distance of a batch-hard triplet configuration from a kink:
/// runner-up gaps of the hardest positive and negative, and the hinge value.
inline double triplet_kink_gap(const Mat64& f, const std::vector<int>& labels, const Mat64& variants, double margin) {
    double gap = 1e300;
    std::size_t k = 0;
    std::vector<std::size_t> variant_row(f.rows());
    for (std::size_t i = 0; i < f.rows(); ++i)
        if (labels[i] < 0) variant_row[i] = k++;
    for (std::size_t a = 0; a < f.rows(); ++a) {
        std::vector<double> pos, neg;
        if (labels[a] < 0) pos.push_back(euclid(f.row(a), variants.row(variant_row[a])));
        for (std::size_t j = 0; j < f.rows(); ++j) {
            if (j == a) continue;
            const double d = euclid(f.row(a), f.row(j));
            (labels[a] >= 0 && labels[j] == labels[a] ? pos : neg).push_back(d);
        }
        if (pos.empty() || neg.empty()) continue;
        std::sort(pos.rbegin(), pos.rend());
        std::sort(neg.begin(), neg.end());
        if (pos.size() > 1) gap = std::min(gap, pos[0] - pos[1]);
        if (neg.size() > 1) gap = std::min(gap, neg[1] - neg[0]);
        gap = std::min(gap, std::abs(margin + pos[0] - neg[0]));
    }
    return gap;
}

/// Mean of sigma * chi_k.
inline double chi_mean(double sigma, int k) {
    return sigma * std::sqrt(2.0) * std::exp(std::lgamma((k + 1) / 2.0) - std::lgamma(k / 2.0));
}

}  // namespace oracle
}  // namespace anl::test
