#pragma once

// Per-layer couplers that condition the perceptual task's visual prompts on
// the alignment task's visual prompts:
//
//   Qc_i[j] = W_i * concat(Qa_i[j], Qp_i[j]) + c_i
//
// One affine map per layer, shared by all b prompt rows, no activation.

#include <span>
#include <vector>

#include "vlq/tensor.hpp"

namespace vlq {

template <typename T>
struct CouplerStack {
    std::vector<Matrix<T>> weights; // d_v x 2 d_v each
    std::vector<Matrix<T>> biases;  // 1 x d_v each

    std::size_t layers() const { return weights.size(); }
    bool empty() const { return weights.empty(); }

    template <typename U>
    CouplerStack<U> cast() const {
        CouplerStack<U> out;
        for (const auto& w : weights) out.weights.push_back(matrix_cast<U>(w));
        for (const auto& b : biases) out.biases.push_back(matrix_cast<U>(b));
        return out;
    }
};

// W = [0 | I], c = 0, so the conditioned prompts equal the perceptual prompts.
template <typename T>
CouplerStack<T> make_identity_couplers(std::size_t layers, std::size_t width);

template <typename T>
std::vector<Matrix<T>> condition_prompts(const CouplerStack<T>& couplers, std::span<const Matrix<T>> q_align,
                                         std::span<const Matrix<T>> q_percept);

// Given d_out (gradient w.r.t. the conditioned prompts), accumulates into the
// coupler gradients and both prompt gradients.
template <typename T>
void condition_prompts_backward(const CouplerStack<T>& couplers, std::span<const Matrix<T>> q_align,
                                std::span<const Matrix<T>> q_percept, std::span<const Matrix<T>> d_out,
                                CouplerStack<T>& d_couplers, std::span<Matrix<T>> d_align,
                                std::span<Matrix<T>> d_percept);

} // namespace vlq
