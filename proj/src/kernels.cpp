#include "vlq/kernels.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace vlq::kernels {

namespace {

template <typename T>
void require_shape(const Matrix<T>& m, std::size_t rows, std::size_t cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw DimensionError(std::string(what) + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                             ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
}

template <typename T>
void ensure_shape(Matrix<T>& m, std::size_t rows, std::size_t cols) {
    if (m.rows() != rows || m.cols() != cols) {
        m = Matrix<T>(rows, cols);
    }
}

bool go_parallel(std::size_t work) { return work >= kParallelThreshold; }

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

constexpr double kGeluSlope = 1.702;

} // namespace

template <typename T>
void linear(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias, Matrix<T>& y) {
    if (x.cols() != w.cols()) {
        throw DimensionError("linear: input width " + std::to_string(x.cols()) + " vs weight width " +
                             std::to_string(w.cols()));
    }
    if (!bias.empty() && bias.size() != w.rows()) {
        throw DimensionError("linear: bias length mismatch");
    }
    const std::size_t n = x.rows();
    const std::size_t out = w.rows();
    const std::size_t in = w.cols();
    ensure_shape(y, n, out);
    const T* xd = x.data();
    const T* wd = w.data();
    T* yd = y.data();
    const bool has_bias = !bias.empty();
    const auto total = static_cast<std::ptrdiff_t>(n * out);
#pragma omp parallel for schedule(static) if (go_parallel(n * out * in))
    for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
        const std::size_t i = static_cast<std::size_t>(idx) / out;
        const std::size_t j = static_cast<std::size_t>(idx) % out;
        const T* xr = xd + i * in;
        const T* wr = wd + j * in;
        T acc = T(0);
        for (std::size_t c = 0; c < in; ++c) {
            acc += xr[c] * wr[c];
        }
        yd[idx] = has_bias ? acc + bias[j] : acc;
    }
}

template <typename T>
void linear_backward_input(const Matrix<T>& dy, const Matrix<T>& w, Matrix<T>& dx) {
    if (dy.cols() != w.rows()) {
        throw DimensionError("linear_backward_input: gradient width mismatch");
    }
    const std::size_t n = dy.rows();
    const std::size_t out = w.rows();
    const std::size_t in = w.cols();
    ensure_shape(dx, n, in);
    dx.fill(T(0));
#pragma omp parallel for schedule(static) if (go_parallel(n * out * in))
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        T* dxr = dx.row(static_cast<std::size_t>(i)).data();
        const T* dyr = dy.row(static_cast<std::size_t>(i)).data();
        for (std::size_t j = 0; j < out; ++j) {
            const T a = dyr[j];
            const T* wr = w.row(j).data();
            for (std::size_t c = 0; c < in; ++c) {
                dxr[c] += a * wr[c];
            }
        }
    }
}

template <typename T>
void linear_backward_params(const Matrix<T>& dy, const Matrix<T>& x, Matrix<T>& dw, std::span<T> db) {
    const std::size_t n = dy.rows();
    const std::size_t out = dy.cols();
    const std::size_t in = x.cols();
    if (x.rows() != n) {
        throw DimensionError("linear_backward_params: row count mismatch");
    }
    require_shape(dw, out, in, "linear_backward_params dw");
    if (!db.empty() && db.size() != out) {
        throw DimensionError("linear_backward_params: bias gradient length mismatch");
    }
#pragma omp parallel for schedule(static) if (go_parallel(n * out * in))
    for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(out); ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        T* dwr = dw.row(j).data();
        for (std::size_t c = 0; c < in; ++c) {
            T acc = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                acc += dy(i, j) * x(i, c);
            }
            dwr[c] += acc;
        }
        if (!db.empty()) {
            T acc = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                acc += dy(i, j);
            }
            db[j] += acc;
        }
    }
}

template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimension mismatch");
    }
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    const std::size_t p = b.cols();
    ensure_shape(c, n, p);
    c.fill(T(0));
#pragma omp parallel for schedule(static) if (go_parallel(n * m * p))
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        T* cr = c.row(static_cast<std::size_t>(i)).data();
        const T* ar = a.row(static_cast<std::size_t>(i)).data();
        for (std::size_t k = 0; k < m; ++k) {
            const T s = ar[k];
            const T* br = b.row(k).data();
            for (std::size_t j = 0; j < p; ++j) {
                cr[j] += s * br[j];
            }
        }
    }
}

template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: inner dimension mismatch");
    }
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    const std::size_t p = b.cols();
    ensure_shape(c, n, p);
    c.fill(T(0));
#pragma omp parallel for schedule(static) if (go_parallel(n * m * p))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        T* cr = c.row(i).data();
        for (std::size_t k = 0; k < m; ++k) {
            const T s = a(k, i);
            const T* br = b.row(k).data();
            for (std::size_t j = 0; j < p; ++j) {
                cr[j] += s * br[j];
            }
        }
    }
}

template <typename T>
void layer_norm(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps, Matrix<T>& y,
                Matrix<T>& xhat, std::span<T> rstd) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d || rstd.size() != n) {
        throw DimensionError("layer_norm: parameter length mismatch");
    }
    ensure_shape(y, n, d);
    ensure_shape(xhat, n, d);
#pragma omp parallel for schedule(static) if (go_parallel(n * d * 8))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const T* xr = x.row(i).data();
        T mean = T(0);
        for (std::size_t c = 0; c < d; ++c) {
            mean += xr[c];
        }
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t c = 0; c < d; ++c) {
            const T diff = xr[c] - mean;
            var += diff * diff;
        }
        var /= static_cast<T>(d);
        const T r = T(1) / std::sqrt(var + eps);
        rstd[i] = r;
        T* hr = xhat.row(i).data();
        T* yr = y.row(i).data();
        for (std::size_t c = 0; c < d; ++c) {
            hr[c] = (xr[c] - mean) * r;
            yr[c] = hr[c] * gamma[c] + beta[c];
        }
    }
}

template <typename T>
void layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, std::span<const T> rstd,
                         std::span<const T> gamma, Matrix<T>& dx) {
    const std::size_t n = dy.rows();
    const std::size_t d = dy.cols();
    require_shape(xhat, n, d, "layer_norm_backward xhat");
    ensure_shape(dx, n, d);
#pragma omp parallel for schedule(static) if (go_parallel(n * d * 8))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        T mean_g = T(0);
        T mean_gx = T(0);
        for (std::size_t c = 0; c < d; ++c) {
            const T g = dy(i, c) * gamma[c];
            mean_g += g;
            mean_gx += g * xhat(i, c);
        }
        mean_g /= static_cast<T>(d);
        mean_gx /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
            const T g = dy(i, c) * gamma[c];
            dx(i, c) = rstd[i] * (g - mean_g - xhat(i, c) * mean_gx);
        }
    }
}

template <typename T>
void softmax_rows(Matrix<T>& s, bool causal) {
    const std::size_t n = s.rows();
    const std::size_t m = s.cols();
#pragma omp parallel for schedule(static) if (go_parallel(n * m * 8))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        T* r = s.row(i).data();
        const std::size_t live = causal ? std::min(m, i + 1) : m;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < live; ++j) {
            mx = std::max(mx, r[j]);
        }
        T sum = T(0);
        for (std::size_t j = 0; j < live; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (std::size_t j = 0; j < live; ++j) {
            r[j] /= sum;
        }
        for (std::size_t j = live; j < m; ++j) {
            r[j] = T(0);
        }
    }
}

template <typename T>
void softmax_rows_backward(const Matrix<T>& a, const Matrix<T>& da, Matrix<T>& ds) {
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    require_shape(da, n, m, "softmax_rows_backward");
    ensure_shape(ds, n, m);
    for (std::size_t i = 0; i < n; ++i) {
        T inner = T(0);
        for (std::size_t j = 0; j < m; ++j) {
            inner += da(i, j) * a(i, j);
        }
        for (std::size_t j = 0; j < m; ++j) {
            ds(i, j) = a(i, j) * (da(i, j) - inner);
        }
    }
}

template <typename T>
void quick_gelu(const Matrix<T>& x, Matrix<T>& y) {
    ensure_shape(y, x.rows(), x.cols());
    auto xv = x.flat();
    auto yv = y.flat();
    const T k = static_cast<T>(kGeluSlope);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        yv[i] = xv[i] * sigmoid(k * xv[i]);
    }
}

template <typename T>
void quick_gelu_backward(const Matrix<T>& x, const Matrix<T>& dy, Matrix<T>& dx) {
    ensure_shape(dx, x.rows(), x.cols());
    auto xv = x.flat();
    auto gv = dy.flat();
    auto dv = dx.flat();
    const T k = static_cast<T>(kGeluSlope);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T sg = sigmoid(k * xv[i]);
        dv[i] = gv[i] * (sg + xv[i] * k * sg * (T(1) - sg));
    }
}

namespace reference {

template <typename T>
void linear(const Matrix<T>& x, const Matrix<T>& w, std::span<const T> bias, Matrix<T>& y) {
    y = Matrix<T>(x.rows(), w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < w.rows(); ++j) {
            T acc = T(0);
            for (std::size_t c = 0; c < x.cols(); ++c) {
                acc += x(i, c) * w(j, c);
            }
            y(i, j) = bias.empty() ? acc : acc + bias[j];
        }
    }
}

template <typename T>
void linear_backward_input(const Matrix<T>& dy, const Matrix<T>& w, Matrix<T>& dx) {
    dx = Matrix<T>(dy.rows(), w.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            T acc = T(0);
            for (std::size_t j = 0; j < w.rows(); ++j) {
                acc += dy(i, j) * w(j, c);
            }
            dx(i, c) = acc;
        }
    }
}

template <typename T>
void linear_backward_params(const Matrix<T>& dy, const Matrix<T>& x, Matrix<T>& dw, std::span<T> db) {
    for (std::size_t j = 0; j < dy.cols(); ++j) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            T acc = T(0);
            for (std::size_t i = 0; i < dy.rows(); ++i) {
                acc += dy(i, j) * x(i, c);
            }
            dw(j, c) += acc;
        }
        if (!db.empty()) {
            T acc = T(0);
            for (std::size_t i = 0; i < dy.rows(); ++i) {
                acc += dy(i, j);
            }
            db[j] += acc;
        }
    }
}

template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    c = Matrix<T>(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += a(i, k) * b(k, j);
            }
            c(i, j) = acc;
        }
    }
}

template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    c = Matrix<T>(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < a.rows(); ++k) {
                acc += a(k, i) * b(k, j);
            }
            c(i, j) = acc;
        }
    }
}

template <typename T>
void layer_norm(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps, Matrix<T>& y,
                Matrix<T>& xhat, std::span<T> rstd) {
    y = Matrix<T>(x.rows(), x.cols());
    xhat = Matrix<T>(x.rows(), x.cols());
    const auto d = static_cast<T>(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        T mean = T(0);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            mean += x(i, c);
        }
        mean /= d;
        T var = T(0);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            var += (x(i, c) - mean) * (x(i, c) - mean);
        }
        var /= d;
        rstd[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            xhat(i, c) = (x(i, c) - mean) * rstd[i];
            y(i, c) = xhat(i, c) * gamma[c] + beta[c];
        }
    }
}

template <typename T>
void softmax_rows(Matrix<T>& s, bool causal) {
    for (std::size_t i = 0; i < s.rows(); ++i) {
        const std::size_t live = causal ? std::min(s.cols(), i + 1) : s.cols();
        T mx = s(i, 0);
        for (std::size_t j = 1; j < live; ++j) {
            if (s(i, j) > mx) {
                mx = s(i, j);
            }
        }
        T sum = T(0);
        for (std::size_t j = 0; j < live; ++j) {
            s(i, j) = std::exp(s(i, j) - mx);
            sum += s(i, j);
        }
        for (std::size_t j = 0; j < s.cols(); ++j) {
            s(i, j) = j < live ? s(i, j) / sum : T(0);
        }
    }
}

} // namespace reference

#define VLQ_INSTANTIATE_KERNELS(T)                                                                              \
    template void linear<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>, Matrix<T>&);               \
    template void linear_backward_input<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                    \
    template void linear_backward_params<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, std::span<T>);     \
    template void matmul<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                                   \
    template void matmul_tn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                                \
    template void layer_norm<T>(const Matrix<T>&, std::span<const T>, std::span<const T>, T, Matrix<T>&,       \
                                Matrix<T>&, std::span<T>);                                                     \
    template void layer_norm_backward<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>,               \
                                         std::span<const T>, Matrix<T>&);                                      \
    template void softmax_rows<T>(Matrix<T>&, bool);                                                           \
    template void softmax_rows_backward<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                    \
    template void quick_gelu<T>(const Matrix<T>&, Matrix<T>&);                                                 \
    template void quick_gelu_backward<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                      \
    template void reference::linear<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>, Matrix<T>&);    \
    template void reference::linear_backward_input<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);         \
    template void reference::linear_backward_params<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&,         \
                                                       std::span<T>);                                          \
    template void reference::matmul<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                        \
    template void reference::matmul_tn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                     \
    template void reference::layer_norm<T>(const Matrix<T>&, std::span<const T>, std::span<const T>, T,        \
                                           Matrix<T>&, Matrix<T>&, std::span<T>);                              \
    template void reference::softmax_rows<T>(Matrix<T>&, bool);

VLQ_INSTANTIATE_KERNELS(float)
VLQ_INSTANTIATE_KERNELS(double)

#undef VLQ_INSTANTIATE_KERNELS

} // namespace vlq::kernels
