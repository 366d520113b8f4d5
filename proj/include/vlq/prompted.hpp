#pragma once

// Deep prompt injection into the frozen towers.
//
// Vision: at layer i the input is [class, patches, Q_i]; after the layer the
// outputs at the prompt positions are dropped and layer i+1 receives fresh
// prompts Q_{i+1}.
// Text: at layer i the input is [P_i, words]; the prompt outputs are dropped
// the same way. The text representation is read from the last word token.
//
// Prompt tokens carry no positional embedding.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vlq/backbone.hpp"

namespace vlq {

enum class TaskTag { align, percept };

std::string to_string(TaskTag tag);

template <typename T>
struct PromptSet {
    TaskTag task = TaskTag::percept;
    std::size_t length = 0;
    // Either one b x d_l matrix per layer, or empty when textual prompting is off.
    std::vector<Matrix<T>> textual;
    // Either one b x d_v matrix per layer, or empty when visual prompting is off.
    std::vector<Matrix<T>> visual;

    void validate(const BackboneConfig& cfg) const;

    template <typename U>
    PromptSet<U> cast() const {
        PromptSet<U> out{task, length, {}, {}};
        for (const auto& m : textual) out.textual.push_back(matrix_cast<U>(m));
        for (const auto& m : visual) out.visual.push_back(matrix_cast<U>(m));
        return out;
    }
};

inline constexpr double kPromptInitStd = 0.02;

// Zero-mean normal initialization (std 0.02); each matrix draws from its own
// named sub-stream of `seed`.
template <typename T>
PromptSet<T> make_prompt_set(std::uint64_t seed, TaskTag task, std::size_t length, const BackboneConfig& cfg,
                             bool with_textual, bool with_visual);

template <typename T>
struct EncoderTrace {
    std::vector<BlockCache<T>> layers;
    std::size_t word_rows = 0;   // class + patch rows, or word rows
    std::size_t prompt_rows = 0; // b
    Matrix<T> final_xhat;
    std::vector<T> final_rstd;
};

// Image path. The embedded overload lets callers share one patch embedding
// between several prompt sets.
template <typename T>
std::vector<T> encode_image_prompted(const Backbone<T>& backbone, const TokenSequence<T>& embedded,
                                     std::span<const Matrix<T>> visual_prompts, EncoderTrace<T>* trace = nullptr);
template <typename T>
std::vector<T> encode_image_prompted(const Backbone<T>& backbone, const Image& image,
                                     std::span<const Matrix<T>> visual_prompts, EncoderTrace<T>* trace = nullptr);

// Accumulates d(rep)/d(Q_i) into d_prompts (one matrix per layer, pre-sized).
template <typename T>
void encode_image_backward(const Backbone<T>& backbone, const EncoderTrace<T>& trace, std::span<const T> d_rep,
                           std::span<Matrix<T>> d_prompts);

template <typename T>
std::vector<T> encode_text_prompted(const Backbone<T>& backbone, std::span<const int> token_ids,
                                    std::span<const Matrix<T>> textual_prompts, EncoderTrace<T>* trace = nullptr);

template <typename T>
void encode_text_backward(const Backbone<T>& backbone, const EncoderTrace<T>& trace, std::span<const T> d_rep,
                          std::span<Matrix<T>> d_prompts);

// Prompt-free text path, used for user prompts in the text-conditioned
// alignment variant.
template <typename T>
std::vector<T> encode_text_raw(const Backbone<T>& backbone, std::span<const int> token_ids);

} // namespace vlq
