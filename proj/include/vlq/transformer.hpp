#pragma once

// Pre-norm transformer block shared by the vision and text towers:
//
//   h = x + Attn(LN1(x))
//   y = h + W2 * quick_gelu(W1 * LN2(h) + b1) + b2
//
// Weights are frozen, so the backward pass only propagates gradients to the
// block input; no weight gradients are formed.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "vlq/tensor.hpp"

namespace vlq {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct BlockWeights {
    Matrix<T> ln1_gamma, ln1_beta;
    Matrix<T> q_weight, q_bias;
    Matrix<T> k_weight, k_bias;
    Matrix<T> v_weight, v_bias;
    Matrix<T> out_weight, out_bias;
    Matrix<T> ln2_gamma, ln2_beta;
    Matrix<T> fc_weight, fc_bias;
    Matrix<T> proj_weight, proj_bias;
    std::size_t heads = 1;
    bool causal = false;

    std::size_t width() const { return q_weight.cols(); }

    template <typename F>
    void for_each(F&& f) const {
        f("ln_1.weight", ln1_gamma);
        f("ln_1.bias", ln1_beta);
        f("attn.q_proj.weight", q_weight);
        f("attn.q_proj.bias", q_bias);
        f("attn.k_proj.weight", k_weight);
        f("attn.k_proj.bias", k_bias);
        f("attn.v_proj.weight", v_weight);
        f("attn.v_proj.bias", v_bias);
        f("attn.out_proj.weight", out_weight);
        f("attn.out_proj.bias", out_bias);
        f("ln_2.weight", ln2_gamma);
        f("ln_2.bias", ln2_beta);
        f("mlp.c_fc.weight", fc_weight);
        f("mlp.c_fc.bias", fc_bias);
        f("mlp.c_proj.weight", proj_weight);
        f("mlp.c_proj.bias", proj_bias);
    }

    template <typename F>
    void for_each(F&& f) {
        std::as_const(*this).for_each([&](const char* name, const Matrix<T>& m) { f(name, const_cast<Matrix<T>&>(m)); });
    }
};

// Shapes of every block tensor for a given width / MLP width, in for_each order.
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> block_tensor_shapes(std::size_t width,
                                                                                             std::size_t mlp_width);

// Intermediate values kept by block_forward for block_backward.
template <typename T>
struct BlockCache {
    Matrix<T> xhat1;
    std::vector<T> rstd1;
    Matrix<T> normed1;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs;
    Matrix<T> context;
    Matrix<T> xhat2;
    std::vector<T> rstd2;
    Matrix<T> pre_act;
    Matrix<T> act;
};

template <typename T>
Matrix<T> block_forward(const BlockWeights<T>& w, const Matrix<T>& x, BlockCache<T>* cache = nullptr);

// Gradient w.r.t. the block input given the gradient w.r.t. its output.
template <typename T>
Matrix<T> block_backward(const BlockWeights<T>& w, const BlockCache<T>& cache, const Matrix<T>& dy);

} // namespace vlq
