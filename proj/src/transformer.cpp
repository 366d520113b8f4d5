#include "vlq/transformer.hpp"

#include <cmath>

#include "vlq/kernels.hpp"

namespace vlq {

namespace {

template <typename T>
std::span<const T> vec(const Matrix<T>& m) {
    return m.flat();
}

// Columns [head * hd, (head + 1) * hd) of m.
template <typename T>
Matrix<T> head_slice(const Matrix<T>& m, std::size_t head, std::size_t hd) {
    Matrix<T> out(m.rows(), hd);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < hd; ++c) {
            out(r, c) = m(r, head * hd + c);
        }
    }
    return out;
}

template <typename T>
void head_store(Matrix<T>& m, const Matrix<T>& part, std::size_t head, std::size_t hd) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < hd; ++c) {
            m(r, head * hd + c) = part(r, c);
        }
    }
}

} // namespace

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> block_tensor_shapes(std::size_t width,
                                                                                             std::size_t mlp_width) {
    const std::size_t d = width;
    const std::size_t h = mlp_width;
    return {
        {"ln_1.weight", {1, d}},          {"ln_1.bias", {1, d}},
        {"attn.q_proj.weight", {d, d}},   {"attn.q_proj.bias", {1, d}},
        {"attn.k_proj.weight", {d, d}},   {"attn.k_proj.bias", {1, d}},
        {"attn.v_proj.weight", {d, d}},   {"attn.v_proj.bias", {1, d}},
        {"attn.out_proj.weight", {d, d}}, {"attn.out_proj.bias", {1, d}},
        {"ln_2.weight", {1, d}},          {"ln_2.bias", {1, d}},
        {"mlp.c_fc.weight", {h, d}},      {"mlp.c_fc.bias", {1, h}},
        {"mlp.c_proj.weight", {d, h}},    {"mlp.c_proj.bias", {1, d}},
    };
}

template <typename T>
Matrix<T> block_forward(const BlockWeights<T>& w, const Matrix<T>& x, BlockCache<T>* cache) {
    const std::size_t len = x.rows();
    const std::size_t d = w.width();
    if (x.cols() != d) {
        throw DimensionError("block_forward: token width " + std::to_string(x.cols()) + " vs layer width " +
                             std::to_string(d));
    }
    const std::size_t hd = d / w.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T eps = static_cast<T>(kLayerNormEps);

    BlockCache<T> local;
    BlockCache<T>& c = cache ? *cache : local;

    c.rstd1.assign(len, T(0));
    kernels::layer_norm(x, vec(w.ln1_gamma), vec(w.ln1_beta), eps, c.normed1, c.xhat1, std::span<T>(c.rstd1));
    kernels::linear(c.normed1, w.q_weight, vec(w.q_bias), c.q);
    kernels::linear(c.normed1, w.k_weight, vec(w.k_bias), c.k);
    kernels::linear(c.normed1, w.v_weight, vec(w.v_bias), c.v);

    c.probs.assign(w.heads, Matrix<T>());
    c.context = Matrix<T>(len, d);
    for (std::size_t head = 0; head < w.heads; ++head) {
        const Matrix<T> qh = head_slice(c.q, head, hd);
        const Matrix<T> kh = head_slice(c.k, head, hd);
        const Matrix<T> vh = head_slice(c.v, head, hd);
        Matrix<T>& scores = c.probs[head];
        kernels::linear(qh, kh, std::span<const T>(), scores);
        for (auto& s : scores.flat()) {
            s *= scale;
        }
        kernels::softmax_rows(scores, w.causal);
        Matrix<T> ctx;
        kernels::matmul(scores, vh, ctx);
        head_store(c.context, ctx, head, hd);
    }

    Matrix<T> attn_out;
    kernels::linear(c.context, w.out_weight, vec(w.out_bias), attn_out);
    Matrix<T> h = x;
    add_inplace(h, attn_out);

    Matrix<T> normed2;
    c.rstd2.assign(len, T(0));
    kernels::layer_norm(h, vec(w.ln2_gamma), vec(w.ln2_beta), eps, normed2, c.xhat2, std::span<T>(c.rstd2));
    kernels::linear(normed2, w.fc_weight, vec(w.fc_bias), c.pre_act);
    kernels::quick_gelu(c.pre_act, c.act);
    Matrix<T> mlp_out;
    kernels::linear(c.act, w.proj_weight, vec(w.proj_bias), mlp_out);
    add_inplace(h, mlp_out);
    return h;
}

template <typename T>
Matrix<T> block_backward(const BlockWeights<T>& w, const BlockCache<T>& c, const Matrix<T>& dy) {
    const std::size_t d = w.width();
    const std::size_t hd = d / w.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    // MLP branch
    Matrix<T> d_act;
    kernels::linear_backward_input(dy, w.proj_weight, d_act);
    Matrix<T> d_pre;
    kernels::quick_gelu_backward(c.pre_act, d_act, d_pre);
    Matrix<T> d_normed2;
    kernels::linear_backward_input(d_pre, w.fc_weight, d_normed2);
    Matrix<T> dh;
    kernels::layer_norm_backward(d_normed2, c.xhat2, std::span<const T>(c.rstd2), vec(w.ln2_gamma), dh);
    add_inplace(dh, dy);

    // attention branch
    Matrix<T> d_context;
    kernels::linear_backward_input(dh, w.out_weight, d_context);
    Matrix<T> dq(dy.rows(), d);
    Matrix<T> dk(dy.rows(), d);
    Matrix<T> dv(dy.rows(), d);
    for (std::size_t head = 0; head < w.heads; ++head) {
        const Matrix<T> qh = head_slice(c.q, head, hd);
        const Matrix<T> kh = head_slice(c.k, head, hd);
        const Matrix<T> vh = head_slice(c.v, head, hd);
        const Matrix<T> dctx = head_slice(d_context, head, hd);
        const Matrix<T>& probs = c.probs[head];

        Matrix<T> d_probs;
        kernels::linear(dctx, vh, std::span<const T>(), d_probs);
        Matrix<T> dvh;
        kernels::matmul_tn(probs, dctx, dvh);
        Matrix<T> d_scores;
        kernels::softmax_rows_backward(probs, d_probs, d_scores);
        for (auto& s : d_scores.flat()) {
            s *= scale;
        }
        Matrix<T> dqh;
        kernels::matmul(d_scores, kh, dqh);
        Matrix<T> dkh;
        kernels::matmul_tn(d_scores, qh, dkh);
        head_store(dq, dqh, head, hd);
        head_store(dk, dkh, head, hd);
        head_store(dv, dvh, head, hd);
    }

    Matrix<T> d_normed1;
    Matrix<T> part;
    kernels::linear_backward_input(dq, w.q_weight, d_normed1);
    kernels::linear_backward_input(dk, w.k_weight, part);
    add_inplace(d_normed1, part);
    kernels::linear_backward_input(dv, w.v_weight, part);
    add_inplace(d_normed1, part);

    Matrix<T> dx;
    kernels::layer_norm_backward(d_normed1, c.xhat1, std::span<const T>(c.rstd1), vec(w.ln1_gamma), dx);
    add_inplace(dx, dh);
    return dx;
}

template Matrix<float> block_forward<float>(const BlockWeights<float>&, const Matrix<float>&, BlockCache<float>*);
template Matrix<double> block_forward<double>(const BlockWeights<double>&, const Matrix<double>&, BlockCache<double>*);
template Matrix<float> block_backward<float>(const BlockWeights<float>&, const BlockCache<float>&,
                                             const Matrix<float>&);
template Matrix<double> block_backward<double>(const BlockWeights<double>&, const BlockCache<double>&,
                                               const Matrix<double>&);

} // namespace vlq
