#pragma once

// Data-parallel inner loops. Each kernel has an OpenMP version in
// anl::kernels and a plain serial reference in anl::kernels::serial.
// Every output element is produced by one thread with a fixed
// accumulation order, so results do not depend on the thread count.

#include "anl/core_math.hpp"

namespace anl::kernels {

void set_num_threads(int n);
int max_threads();

/// out = a * b^T  (a: n x d, b: m x d, out: n x m)
void gemm_abt(const Mat64& a, const Mat64& b, Mat64& out);
/// out = a * b    (a: n x k, b: k x m)
void gemm_ab(const Mat64& a, const Mat64& b, Mat64& out);
/// out = a^T * b  (a: k x n, b: k x m, out: n x m)
void gemm_atb(const Mat64& a, const Mat64& b, Mat64& out);
/// Euclidean or cosine distance between all row pairs.
void pairwise_distance(const Mat64& x, Metric metric, Mat64& out);

namespace serial {
void gemm_abt(const Mat64& a, const Mat64& b, Mat64& out);
void gemm_ab(const Mat64& a, const Mat64& b, Mat64& out);
void gemm_atb(const Mat64& a, const Mat64& b, Mat64& out);
void pairwise_distance(const Mat64& x, Metric metric, Mat64& out);
}  // namespace serial

}  // namespace anl::kernels
