#include "anl/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "anl/kernels.hpp"

namespace anl {

void check_finite(std::span<const double> values, const char* what) {
    for (double v : values)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite value");
}

void check_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b)
        throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                                    " vs " + std::to_string(b) + ")");
}

Vec64::Vec64(std::size_t n, double fill) : data_(n, fill) { check_finite(data_, "Vec64"); }

Vec64::Vec64(std::initializer_list<double> values) : data_(values) { check_finite(data_, "Vec64"); }

Vec64::Vec64(std::vector<double> values) : data_(std::move(values)) { check_finite(data_, "Vec64"); }

Vec64::Vec64(std::span<const double> values) : data_(values.begin(), values.end()) {
    check_finite(data_, "Vec64");
}

Mat64::Mat64(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    check_finite(data_, "Mat64");
}

Mat64::Mat64(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
    check_same_size(data_.size(), rows * cols, "Mat64 storage");
    check_finite(data_, "Mat64");
}

Mat64 Mat64::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    const std::size_t cols = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        check_same_size(r.size(), cols, "Mat64::from_rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Mat64(rows.size(), cols, std::move(flat));
}

Mat64 Mat64::identity(std::size_t n) {
    Mat64 m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Mat64 Mat64::gather_rows(std::span<const std::size_t> idx) const {
    Mat64 out(idx.size(), cols_);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= rows_) throw std::out_of_range("Mat64::gather_rows: index out of range");
        std::copy_n(data_.data() + idx[r] * cols_, cols_, out.data() + r * cols_);
    }
    return out;
}

std::size_t Simplex::argmax() const {
    return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

double dot(std::span<const double> a, std::span<const double> b) {
    check_same_size(a.size(), b.size(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    check_same_size(a.size(), b.size(), "cosine_sim");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine_sim: zero-norm input");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double log_sum_exp(std::span<const double> x) {
    if (x.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    const double m = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

Simplex softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
    check_finite(logits, "softmax");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        s += p[i];
    }
    // exp underflow below ~ -745 would produce an exact zero
    for (double& v : p) v = std::max(v / s, std::numeric_limits<double>::min());
    return Simplex(Vec64(std::move(p)));
}

Mat64 softmax_rows(const Mat64& logits) {
    Mat64 out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto s = softmax(logits.row(i));
        std::copy(s.probs().begin(), s.probs().end(), out.row(i).begin());
    }
    return out;
}

Mat64 pairwise_distance(const Mat64& x, Metric metric) {
    if (x.rows() == 0) throw std::invalid_argument("pairwise_distance: empty input");
    Mat64 out;
    kernels::pairwise_distance(x, metric, out);
    return out;
}

Vec64 finite_diff_grad(const std::function<double(const Vec64&)>& f, const Vec64& x, double h) {
    Vec64 g(x.size());
    Vec64 probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        probe[i] = xi + h;
        const double fp = f(probe);
        probe[i] = xi - h;
        const double fm = f(probe);
        probe[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

Mat64 l2_normalize_rows(const Mat64& x, std::vector<double>* norms) {
    Mat64 out = x;
    if (norms) norms->assign(x.rows(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double n = norm2(x.row(i));
        if (n == 0.0) throw std::domain_error("l2_normalize_rows: zero-norm row");
        for (double& v : out.row(i)) v /= n;
        if (norms) (*norms)[i] = n;
    }
    return out;
}

Mat64 l2_normalize_backward(const Mat64& normalized, std::span<const double> norms,
                            const Mat64& grad_normalized) {
    check_same_size(normalized.rows(), grad_normalized.rows(), "l2_normalize_backward rows");
    check_same_size(normalized.cols(), grad_normalized.cols(), "l2_normalize_backward cols");
    check_same_size(normalized.rows(), norms.size(), "l2_normalize_backward norms");
    Mat64 out(normalized.rows(), normalized.cols());
    for (std::size_t i = 0; i < normalized.rows(); ++i) {
        const double proj = dot(normalized.row(i), grad_normalized.row(i));
        for (std::size_t k = 0; k < normalized.cols(); ++k)
            out(i, k) = (grad_normalized(i, k) - normalized(i, k) * proj) / norms[i];
    }
    return out;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
    check_same_size(a.size(), b.size(), "relative_error");
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
    const double scale = std::max({norm2(a), norm2(b), floor});
    return std::sqrt(diff) / scale;
}

}  // namespace anl
