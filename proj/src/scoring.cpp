#include "vlq/scoring.hpp"

#include <cmath>

#include "vlq/error.hpp"

namespace vlq {

AntonymPair AntonymPair::defaults(TaskTag task) {
    if (task == TaskTag::align) {
        return {"Aligned photo.", "Misaligned photo.", task};
    }
    return {"Good photo.", "Bad photo.", task};
}

void AntonymPair::validate() const {
    if (positive.empty() || negative.empty()) {
        throw ConfigError("antonym pair for " + to_string(task) + " task has an empty text");
    }
}

template <typename T>
T cosine_similarity(std::span<const T> x, std::span<const T> z) {
    if (x.size() != z.size()) {
        throw DimensionError("cosine_similarity: lengths " + std::to_string(x.size()) + " and " +
                             std::to_string(z.size()));
    }
    const T nx = l2_norm(x);
    const T nz = l2_norm(z);
    if (!(nx > T(0)) || !(nz > T(0)) || !std::isfinite(nx) || !std::isfinite(nz)) {
        throw NumericalError("cosine_similarity: degenerate embedding (zero or non-finite norm)");
    }
    const T s = dot(x, z) / (nx * nz);
    return std::clamp(s, T(-1), T(1));
}

template <typename T>
void cosine_similarity_backward(std::span<const T> x, std::span<const T> z, T d_s, std::span<T> dx, std::span<T> dz) {
    const T nx = l2_norm(x);
    const T nz = l2_norm(z);
    const T s = dot(x, z) / (nx * nz);
    const T inv = T(1) / (nx * nz);
    const T sx = s / (nx * nx);
    const T sz = s / (nz * nz);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!dx.empty()) dx[i] += d_s * (z[i] * inv - x[i] * sx);
        if (!dz.empty()) dz[i] += d_s * (x[i] * inv - z[i] * sz);
    }
}

template <typename T>
T pair_score(T s_pos, T s_neg, T temperature) {
    if (!std::isfinite(s_pos) || !std::isfinite(s_neg) || !std::isfinite(temperature)) {
        throw NumericalError("pair_score: non-finite similarity");
    }
    // exp(a) / (exp(a) + exp(b)) == 1 / (1 + exp(b - a))
    return T(1) / (T(1) + std::exp(temperature * (s_neg - s_pos)));
}

template <typename T>
T logistic(T s) {
    if (!std::isfinite(s)) {
        throw NumericalError("logistic: non-finite input");
    }
    return T(1) / (T(1) + std::exp(-s));
}

template <typename T>
PreparedHead<T> prepare_head(const Backbone<T>& backbone, TaskHead<T> head) {
    head.pair.validate();
    PreparedHead<T> out;
    const auto pos_ids = backbone.tokenize(head.pair.positive);
    const auto neg_ids = backbone.tokenize(head.pair.negative);
    out.positive = encode_text_prompted(backbone, pos_ids, std::span<const Matrix<T>>(head.textual));
    out.negative = encode_text_prompted(backbone, neg_ids, std::span<const Matrix<T>>(head.textual));
    out.head = std::move(head);
    return out;
}

template <typename T>
T score_representations(std::span<const T> image_rep, std::span<const T> positive_rep,
                        std::span<const T> negative_rep, T temperature) {
    const T s_pos = cosine_similarity(image_rep, positive_rep);
    const T s_neg = cosine_similarity(image_rep, negative_rep);
    return pair_score(s_pos, s_neg, temperature);
}

template <typename T>
QualityScore score_image(const Backbone<T>& backbone, const Image& image, const PreparedHead<T>& head) {
    const auto x = encode_image_prompted(backbone, image, std::span<const Matrix<T>>(head.head.visual));
    const T q = score_representations<T>(x, head.positive, head.negative, head.head.temperature);
    return {static_cast<double>(q), head.head.task};
}

template <typename T>
QualityScore score_image(const Backbone<T>& backbone, const Image& image, const TaskHead<T>& head) {
    return score_image(backbone, image, prepare_head(backbone, head));
}

template <typename T>
QualityScore score_alignment_text_conditioned(const Backbone<T>& backbone, const Image& image,
                                              std::span<const int> user_prompt_tokens,
                                              std::span<const Matrix<T>> visual_prompts) {
    // framing tokens alone mean the prompt text was empty
    if (user_prompt_tokens.size() <= 2) {
        throw ConfigError("text-conditioned alignment requires a non-empty user prompt");
    }
    const auto x = encode_image_prompted(backbone, image, visual_prompts);
    const auto z = encode_text_raw(backbone, user_prompt_tokens);
    return {static_cast<double>(logistic(cosine_similarity<T>(x, z))), TaskTag::align};
}

#define VLQ_INSTANTIATE_SCORING(T)                                                                              \
    template T cosine_similarity<T>(std::span<const T>, std::span<const T>);                                    \
    template void cosine_similarity_backward<T>(std::span<const T>, std::span<const T>, T, std::span<T>,        \
                                                std::span<T>);                                                  \
    template T pair_score<T>(T, T, T);                                                                          \
    template T logistic<T>(T);                                                                                  \
    template PreparedHead<T> prepare_head<T>(const Backbone<T>&, TaskHead<T>);                                  \
    template T score_representations<T>(std::span<const T>, std::span<const T>, std::span<const T>, T);         \
    template QualityScore score_image<T>(const Backbone<T>&, const Image&, const PreparedHead<T>&);              \
    template QualityScore score_image<T>(const Backbone<T>&, const Image&, const TaskHead<T>&);                 \
    template QualityScore score_alignment_text_conditioned<T>(const Backbone<T>&, const Image&,                 \
                                                              std::span<const int>, std::span<const Matrix<T>>);

VLQ_INSTANTIATE_SCORING(float)
VLQ_INSTANTIATE_SCORING(double)

#undef VLQ_INSTANTIATE_SCORING

} // namespace vlq
