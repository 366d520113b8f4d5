#include "vlq/conditioning.hpp"

#include <string>

#include "vlq/error.hpp"
#include "vlq/kernels.hpp"

namespace vlq {

namespace {

template <typename T>
void check_inputs(const CouplerStack<T>& couplers, std::span<const Matrix<T>> q_align,
                  std::span<const Matrix<T>> q_percept) {
    const std::size_t k = couplers.layers();
    if (q_align.size() != k || q_percept.size() != k || couplers.biases.size() != k) {
        throw DimensionError("condition_prompts: expected " + std::to_string(k) + " layers, got " +
                             std::to_string(q_align.size()) + " align / " + std::to_string(q_percept.size()) +
                             " percept");
    }
    for (std::size_t i = 0; i < k; ++i) {
        const auto& a = q_align[i];
        const auto& p = q_percept[i];
        if (a.rows() != p.rows() || a.cols() != p.cols()) {
            throw DimensionError("condition_prompts: layer " + std::to_string(i) + " prompt shapes differ");
        }
        const auto& w = couplers.weights[i];
        if (a.rows() > 0 && (w.cols() != 2 * a.cols() || w.rows() != a.cols())) {
            throw DimensionError("condition_prompts: layer " + std::to_string(i) + " coupler is " +
                                 std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + " for prompt width " +
                                 std::to_string(a.cols()));
        }
    }
}

template <typename T>
Matrix<T> concat_cols(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> out(a.rows(), a.cols() + b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto dst = out.row(r);
        std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
        std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return out;
}

} // namespace

template <typename T>
CouplerStack<T> make_identity_couplers(std::size_t layers, std::size_t width) {
    CouplerStack<T> stack;
    for (std::size_t i = 0; i < layers; ++i) {
        Matrix<T> w(width, 2 * width);
        for (std::size_t r = 0; r < width; ++r) {
            w(r, width + r) = T(1);
        }
        stack.weights.push_back(std::move(w));
        stack.biases.emplace_back(1, width);
    }
    return stack;
}

template <typename T>
std::vector<Matrix<T>> condition_prompts(const CouplerStack<T>& couplers, std::span<const Matrix<T>> q_align,
                                         std::span<const Matrix<T>> q_percept) {
    check_inputs(couplers, q_align, q_percept);
    std::vector<Matrix<T>> out(couplers.layers());
    for (std::size_t i = 0; i < couplers.layers(); ++i) {
        if (q_percept[i].rows() == 0) {
            out[i] = q_percept[i];
            continue;
        }
        kernels::linear(concat_cols(q_align[i], q_percept[i]), couplers.weights[i], couplers.biases[i].flat(), out[i]);
    }
    return out;
}

template <typename T>
void condition_prompts_backward(const CouplerStack<T>& couplers, std::span<const Matrix<T>> q_align,
                                std::span<const Matrix<T>> q_percept, std::span<const Matrix<T>> d_out,
                                CouplerStack<T>& d_couplers, std::span<Matrix<T>> d_align,
                                std::span<Matrix<T>> d_percept) {
    check_inputs(couplers, q_align, q_percept);
    const std::size_t k = couplers.layers();
    if (d_out.size() != k || d_align.size() != k || d_percept.size() != k || d_couplers.layers() != k) {
        throw DimensionError("condition_prompts_backward: gradient lists have the wrong length");
    }
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t b = q_percept[i].rows();
        if (b == 0) {
            continue;
        }
        const std::size_t d = q_percept[i].cols();
        const Matrix<T> joined = concat_cols(q_align[i], q_percept[i]);
        kernels::linear_backward_params(d_out[i], joined, d_couplers.weights[i], d_couplers.biases[i].flat());
        Matrix<T> d_joined;
        kernels::linear_backward_input(d_out[i], couplers.weights[i], d_joined);
        for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                d_align[i](r, c) += d_joined(r, c);
                d_percept[i](r, c) += d_joined(r, d + c);
            }
        }
    }
}

#define VLQ_INSTANTIATE_CONDITIONING(T)                                                                       \
    template CouplerStack<T> make_identity_couplers<T>(std::size_t, std::size_t);                             \
    template std::vector<Matrix<T>> condition_prompts<T>(const CouplerStack<T>&, std::span<const Matrix<T>>,  \
                                                         std::span<const Matrix<T>>);                         \
    template void condition_prompts_backward<T>(const CouplerStack<T>&, std::span<const Matrix<T>>,           \
                                                std::span<const Matrix<T>>, std::span<const Matrix<T>>,       \
                                                CouplerStack<T>&, std::span<Matrix<T>>, std::span<Matrix<T>>);

VLQ_INSTANTIATE_CONDITIONING(float)
VLQ_INSTANTIATE_CONDITIONING(double)

#undef VLQ_INSTANTIATE_CONDITIONING

} // namespace vlq
