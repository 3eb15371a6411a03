#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace anl {

/// Dense double-precision vector. Rejects NaN/Inf at construction.
class Vec64 {
public:
    Vec64() = default;
    explicit Vec64(std::size_t n, double fill = 0.0);
    Vec64(std::initializer_list<double> values);
    explicit Vec64(std::vector<double> values);
    explicit Vec64(std::span<const double> values);

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    const std::vector<double>& values() const { return data_; }

    friend bool operator==(const Vec64&, const Vec64&) = default;

private:
    std::vector<double> data_;
};

/// Row-major dense matrix; rows are samples throughout the library.
class Mat64 {
public:
    Mat64() = default;
    Mat64(std::size_t rows, std::size_t cols, double fill = 0.0);
    Mat64(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Mat64 from_rows(const std::vector<std::vector<double>>& rows);
    static Mat64 identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }

    /// Rows selected by index, in the given order.
    Mat64 gather_rows(std::span<const std::size_t> idx) const;

    friend bool operator==(const Mat64&, const Mat64&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Probability vector: strictly positive entries summing to 1.
/// Only produced by softmax of finite logits.
class Simplex {
public:
    std::size_t size() const { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }
    const Vec64& probs() const { return probs_; }
    std::span<const double> span() const { return probs_.span(); }
    std::size_t argmax() const;

private:
    friend Simplex softmax(std::span<const double> logits);
    explicit Simplex(Vec64 p) : probs_(std::move(p)) {}
    Vec64 probs_;
};

enum class Metric { euclidean, cosine_dist };

void check_finite(std::span<const double> values, const char* what);
void check_same_size(std::size_t a, std::size_t b, const char* what);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

/// a.b / (|a||b|). Throws std::domain_error on a zero-norm input.
double cosine_sim(std::span<const double> a, std::span<const double> b);

Simplex softmax(std::span<const double> logits);

/// Row-wise softmax into a plain matrix (same stabilization as softmax()).
Mat64 softmax_rows(const Mat64& logits);

double log_sum_exp(std::span<const double> x);

/// Symmetric N x N distance matrix with an exact zero diagonal.
Mat64 pairwise_distance(const Mat64& x, Metric metric);

/// Central differences, one coordinate at a time.
Vec64 finite_diff_grad(const std::function<double(const Vec64&)>& f, const Vec64& x,
                       double h = 1e-5);

/// Row-wise L2 normalization. Throws std::domain_error on a zero row.
Mat64 l2_normalize_rows(const Mat64& x, std::vector<double>* norms = nullptr);

/// Pulls a gradient wrt normalized rows back to the raw rows:
/// dx = (g - xhat (xhat.g)) / |x|.
Mat64 l2_normalize_backward(const Mat64& normalized, std::span<const double> norms,
                            const Mat64& grad_normalized);

/// |a - b|_2 relative to the larger of the two norms, floored at `floor`.
double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor = 1e-8);

}  // namespace anl
