#pragma once

// Antonym prompt-pairing heads. An image representation x is compared with
// the encodings of a positive and a negative text; the quality is the
// softmax over the two raw cosine similarities, taken at the positive slot:
//
//   q = exp(s+) / (exp(s+) + exp(s-))
//
// No logit scale is applied unless a temperature other than 1 is configured.
// Since cosines lie in [-1, 1], q lies in [sigmoid(-2), sigmoid(2)].

#include <span>
#include <string>
#include <vector>

#include "vlq/backbone.hpp"
#include "vlq/prompted.hpp"

namespace vlq {

struct AntonymPair {
    std::string positive;
    std::string negative;
    TaskTag task = TaskTag::percept;

    // "Aligned photo." / "Misaligned photo." and "Good photo." / "Bad photo."
    static AntonymPair defaults(TaskTag task);
    void validate() const;
};

struct QualityScore {
    double value = 0.5;
    TaskTag task = TaskTag::percept;
};

template <typename T>
T cosine_similarity(std::span<const T> x, std::span<const T> z);

// Accumulates d_s * ds/dx into dx and d_s * ds/dz into dz.
template <typename T>
void cosine_similarity_backward(std::span<const T> x, std::span<const T> z, T d_s, std::span<T> dx, std::span<T> dz);

template <typename T>
T pair_score(T s_pos, T s_neg, T temperature = T(1));

// d q / d s_pos; d q / d s_neg is its negation.
template <typename T>
T pair_score_slope(T q, T temperature = T(1)) {
    return temperature * q * (T(1) - q);
}

// Map for the single-text alignment variant: q = 1 / (1 + exp(-s)).
template <typename T>
T logistic(T s);

// Resolved state of one task at inference: prompts (visual prompts already
// conditioned for the perceptual task) and its antonym pair.
template <typename T>
struct TaskHead {
    TaskTag task = TaskTag::percept;
    AntonymPair pair;
    std::vector<Matrix<T>> textual;
    std::vector<Matrix<T>> visual;
    T temperature = T(1);
};

// A task head with its two antonym encodings computed once.
template <typename T>
struct PreparedHead {
    TaskHead<T> head;
    std::vector<T> positive;
    std::vector<T> negative;
};

template <typename T>
PreparedHead<T> prepare_head(const Backbone<T>& backbone, TaskHead<T> head);

template <typename T>
T score_representations(std::span<const T> image_rep, std::span<const T> positive_rep,
                        std::span<const T> negative_rep, T temperature = T(1));

// Encodes the image once and both antonym texts, returns the pair score.
template <typename T>
QualityScore score_image(const Backbone<T>& backbone, const Image& image, const TaskHead<T>& head);
template <typename T>
QualityScore score_image(const Backbone<T>& backbone, const Image& image, const PreparedHead<T>& head);

// Alignment scored against the user's own prompt text (no learnable textual
// prompts): q = logistic(cos(x, z_user)).
template <typename T>
QualityScore score_alignment_text_conditioned(const Backbone<T>& backbone, const Image& image,
                                              std::span<const int> user_prompt_tokens,
                                              std::span<const Matrix<T>> visual_prompts);

} // namespace vlq
