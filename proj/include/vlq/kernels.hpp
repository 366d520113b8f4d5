#pragma once

// Dense kernels used by the transformer towers and the couplers.
//
// Two implementations live here:
//   vlq::kernels            OpenMP row-parallel versions used by the library
//   vlq::kernels::reference plain serial loops kept for testing and benchmarks
//
// Both accumulate every output element in the same order (inner index
// ascending), so their results are bit-identical for any thread count.

#include <cstddef>
#include <span>

#include "vlq/tensor.hpp"

namespace vlq::kernels {

// Work (multiply-adds) below which a kernel stays single-threaded.
inline constexpr std::size_t kParallelThreshold = 1 << 15;

// y = x * w^T + bias.  x: n x in, w: out x in, bias: empty or out.
template <typename T>
void linear(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias, Matrix<T>& y);

// dx = dy * w.  dy: n x out, w: out x in.
template <typename T>
void linear_backward_input(const Matrix<T>& dy, const Matrix<T>& w, Matrix<T>& dx);

// dw += dy^T * x, db += column sums of dy (db may be empty).
template <typename T>
void linear_backward_params(const Matrix<T>& dy, const Matrix<T>& x, Matrix<T>& dw, std::span<T> db);

// c = a * b.  a: n x m, b: m x p.
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

// c = a^T * b.  a: m x n, b: m x p.
template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

// Row-wise layer normalization. Stores the normalized input and the
// reciprocal standard deviation for the backward pass.
template <typename T>
void layer_norm(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps, Matrix<T>& y,
                Matrix<T>& xhat, std::span<T> rstd);

template <typename T>
void layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, std::span<const T> rstd,
                         std::span<const T> gamma, Matrix<T>& dx);

// In-place row softmax. With `causal`, entry (i, j) for j > i is masked out.
template <typename T>
void softmax_rows(Matrix<T>& s, bool causal);

// ds = a * (da - rowsum(da * a)).
template <typename T>
void softmax_rows_backward(const Matrix<T>& a, const Matrix<T>& da, Matrix<T>& ds);

// x * sigmoid(1.702 x), the activation used by CLIP transformers.
template <typename T>
void quick_gelu(const Matrix<T>& x, Matrix<T>& y);

template <typename T>
void quick_gelu_backward(const Matrix<T>& x, const Matrix<T>& dy, Matrix<T>& dx);

namespace reference {

template <typename T>
void linear(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias, Matrix<T>& y);

template <typename T>
void linear_backward_input(const Matrix<T>& dy, const Matrix<T>& w, Matrix<T>& dx);

template <typename T>
void linear_backward_params(const Matrix<T>& dy, const Matrix<T>& x, Matrix<T>& dw, std::span<T> db);

template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

template <typename T>
void layer_norm(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps, Matrix<T>& y,
                Matrix<T>& xhat, std::span<T> rstd);

template <typename T>
void softmax_rows(Matrix<T>& s, bool causal);

} // namespace reference

} // namespace vlq::kernels
