#include "anl/kernels.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace anl::kernels {

namespace {

void shape_abt(const Mat64& a, const Mat64& b, Mat64& out) {
    check_same_size(a.cols(), b.cols(), "gemm_abt inner dimension");
    if (out.rows() != a.rows() || out.cols() != b.rows()) out = Mat64(a.rows(), b.rows());
}

void shape_ab(const Mat64& a, const Mat64& b, Mat64& out) {
    check_same_size(a.cols(), b.rows(), "gemm_ab inner dimension");
    if (out.rows() != a.rows() || out.cols() != b.cols()) out = Mat64(a.rows(), b.cols());
}

void shape_atb(const Mat64& a, const Mat64& b, Mat64& out) {
    check_same_size(a.rows(), b.rows(), "gemm_atb inner dimension");
    if (out.rows() != a.cols() || out.cols() != b.cols()) out = Mat64(a.cols(), b.cols());
}

inline double row_dot(const double* x, const double* y, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += x[k] * y[k];
    return s;
}

inline void abt_row(const Mat64& a, const Mat64& b, Mat64& out, std::size_t i) {
    const double* ai = a.data() + i * a.cols();
    for (std::size_t j = 0; j < b.rows(); ++j)
        out(i, j) = row_dot(ai, b.data() + j * b.cols(), a.cols());
}

inline void ab_row(const Mat64& a, const Mat64& b, Mat64& out, std::size_t i) {
    double* oi = out.data() + i * out.cols();
    for (std::size_t j = 0; j < out.cols(); ++j) oi[j] = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) {
        const double aik = a(i, k);
        const double* bk = b.data() + k * b.cols();
        for (std::size_t j = 0; j < out.cols(); ++j) oi[j] += aik * bk[j];
    }
}

inline void atb_row(const Mat64& a, const Mat64& b, Mat64& out, std::size_t i) {
    double* oi = out.data() + i * out.cols();
    for (std::size_t j = 0; j < out.cols(); ++j) oi[j] = 0.0;
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double aki = a(k, i);
        if (aki == 0.0) continue;
        const double* bk = b.data() + k * b.cols();
        for (std::size_t j = 0; j < out.cols(); ++j) oi[j] += aki * bk[j];
    }
}

std::vector<double> row_norms(const Mat64& x, Metric metric) {
    std::vector<double> norms(x.rows(), 1.0);
    if (metric != Metric::cosine_dist) return norms;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        norms[i] = std::sqrt(row_dot(x.data() + i * x.cols(), x.data() + i * x.cols(), x.cols()));
        if (norms[i] == 0.0) throw std::domain_error("pairwise_distance: zero-norm row under cosine");
    }
    return norms;
}

// Upper triangle entry; the caller mirrors it.
inline double pair_entry(const Mat64& x, const std::vector<double>& norms, Metric metric,
                         std::size_t i, std::size_t j) {
    const double* xi = x.data() + i * x.cols();
    const double* xj = x.data() + j * x.cols();
    if (metric == Metric::euclidean) {
        double s = 0.0;
        for (std::size_t k = 0; k < x.cols(); ++k) {
            const double d = xi[k] - xj[k];
            s += d * d;
        }
        return std::sqrt(s);
    }
    const double c = row_dot(xi, xj, x.cols()) / (norms[i] * norms[j]);
    return std::max(0.0, 1.0 - c);
}

inline void distance_row(const Mat64& x, const std::vector<double>& norms, Metric metric,
                         Mat64& out, std::size_t i) {
    out(i, i) = 0.0;
    for (std::size_t j = i + 1; j < x.rows(); ++j) out(i, j) = pair_entry(x, norms, metric, i, j);
}

void mirror_upper(Mat64& out) {
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < i; ++j) out(i, j) = out(j, i);
}

}  // namespace

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void gemm_abt(const Mat64& a, const Mat64& b, Mat64& out) {
    shape_abt(a, b, out);
    const auto n = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) abt_row(a, b, out, static_cast<std::size_t>(i));
}

void gemm_ab(const Mat64& a, const Mat64& b, Mat64& out) {
    shape_ab(a, b, out);
    const auto n = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) ab_row(a, b, out, static_cast<std::size_t>(i));
}

void gemm_atb(const Mat64& a, const Mat64& b, Mat64& out) {
    shape_atb(a, b, out);
    const auto n = static_cast<std::int64_t>(a.cols());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) atb_row(a, b, out, static_cast<std::size_t>(i));
}

void pairwise_distance(const Mat64& x, Metric metric, Mat64& out) {
    const auto norms = row_norms(x, metric);
    out = Mat64(x.rows(), x.rows());
    const auto n = static_cast<std::int64_t>(x.rows());
#pragma omp parallel for schedule(dynamic, 8)
    for (std::int64_t i = 0; i < n; ++i) distance_row(x, norms, metric, out, static_cast<std::size_t>(i));
    mirror_upper(out);
}

namespace serial {

void gemm_abt(const Mat64& a, const Mat64& b, Mat64& out) {
    shape_abt(a, b, out);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
}

void gemm_ab(const Mat64& a, const Mat64& b, Mat64& out) {
    shape_ab(a, b, out);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
}

void gemm_atb(const Mat64& a, const Mat64& b, Mat64& out) {
    shape_atb(a, b, out);
    for (std::size_t i = 0; i < a.cols(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.rows(); ++k) s += a(k, i) * b(k, j);
            out(i, j) = s;
        }
}

void pairwise_distance(const Mat64& x, Metric metric, Mat64& out) {
    out = Mat64(x.rows(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.rows(); ++j) {
            if (i == j) continue;
            if (metric == Metric::euclidean) {
                double s = 0.0;
                for (std::size_t k = 0; k < x.cols(); ++k) s += (x(i, k) - x(j, k)) * (x(i, k) - x(j, k));
                out(i, j) = std::sqrt(s);
            } else {
                out(i, j) = std::max(0.0, 1.0 - cosine_sim(x.row(i), x.row(j)));
            }
        }
}

}  // namespace serial

}  // namespace anl::kernels
