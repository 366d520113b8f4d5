#include "vlq/prompted.hpp"

#include "vlq/error.hpp"
#include "vlq/kernels.hpp"
#include "vlq/rng.hpp"

namespace vlq {

namespace {

template <typename T>
void check_prompts(std::span<const Matrix<T>> prompts, std::size_t layers, std::size_t width, const char* what) {
    if (prompts.empty()) {
        return;
    }
    if (prompts.size() != layers) {
        throw DimensionError(std::string(what) + ": expected " + std::to_string(layers) + " prompt matrices, got " +
                             std::to_string(prompts.size()));
    }
    const std::size_t b = prompts[0].rows();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto& p = prompts[i];
        if (p.rows() != b || (p.rows() > 0 && p.cols() != width)) {
            throw DimensionError(std::string(what) + ": prompt matrix " + std::to_string(i) + " is " +
                                 std::to_string(p.rows()) + "x" + std::to_string(p.cols()) + ", expected " +
                                 std::to_string(b) + "x" + std::to_string(width));
        }
        if (!all_finite(p.flat())) {
            throw NumericalError(std::string(what) + ": non-finite value in prompt matrix " + std::to_string(i));
        }
    }
}

template <typename T>
std::size_t prompt_rows(std::span<const Matrix<T>> prompts) {
    return prompts.empty() ? 0 : prompts[0].rows();
}

// Final layer norm on one row, keeping what the backward pass needs.
template <typename T>
std::vector<T> final_norm(std::span<const T> row, const Matrix<T>& gamma, const Matrix<T>& beta,
                          EncoderTrace<T>* trace) {
    Matrix<T> in = Matrix<T>::row_vector(row);
    Matrix<T> out;
    Matrix<T> xhat;
    std::vector<T> rstd(1);
    kernels::layer_norm(in, gamma.flat(), beta.flat(), static_cast<T>(kLayerNormEps), out, xhat, std::span<T>(rstd));
    if (trace) {
        trace->final_xhat = std::move(xhat);
        trace->final_rstd = std::move(rstd);
    }
    return {out.flat().begin(), out.flat().end()};
}

// Gradient at the pre-norm token given the gradient at the representation.
template <typename T>
Matrix<T> final_backward(const EncoderTrace<T>& trace, std::span<const T> d_rep, const Matrix<T>& projection,
                         const Matrix<T>& gamma) {
    Matrix<T> d_out = Matrix<T>::row_vector(d_rep);
    Matrix<T> d_normed;
    kernels::linear_backward_input(d_out, projection, d_normed);
    Matrix<T> d_token;
    kernels::layer_norm_backward(d_normed, trace.final_xhat, std::span<const T>(trace.final_rstd), gamma.flat(),
                                 d_token);
    return d_token;
}

} // namespace

std::string to_string(TaskTag tag) { return tag == TaskTag::align ? "align" : "percept"; }

template <typename T>
void PromptSet<T>::validate(const BackboneConfig& cfg) const {
    check_prompts<T>(textual, cfg.num_layers, cfg.text_width, "textual prompts");
    check_prompts<T>(visual, cfg.num_layers, cfg.vision_width, "visual prompts");
    for (const auto& m : textual) {
        if (m.rows() != length) throw DimensionError("textual prompts: row count differs from prompt length");
    }
    for (const auto& m : visual) {
        if (m.rows() != length) throw DimensionError("visual prompts: row count differs from prompt length");
    }
}

template <typename T>
PromptSet<T> make_prompt_set(std::uint64_t seed, TaskTag task, std::size_t length, const BackboneConfig& cfg,
                             bool with_textual, bool with_visual) {
    PromptSet<T> set;
    set.task = task;
    set.length = length;
    auto draw = [&](const std::string& name, std::size_t width) {
        Rng rng(derive_seed(seed, name));
        Matrix<T> m(length, width);
        for (auto& v : m.flat()) {
            v = static_cast<T>(static_cast<float>(kPromptInitStd * rng.normal()));
        }
        return m;
    };
    const std::string prefix = to_string(task);
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        if (with_textual) {
            set.textual.push_back(draw(prefix + ".textual." + std::to_string(i), cfg.text_width));
        }
        if (with_visual) {
            set.visual.push_back(draw(prefix + ".visual." + std::to_string(i), cfg.vision_width));
        }
    }
    return set;
}

template <typename T>
std::vector<T> encode_image_prompted(const Backbone<T>& backbone, const TokenSequence<T>& embedded,
                                     std::span<const Matrix<T>> visual_prompts, EncoderTrace<T>* trace) {
    const auto& cfg = backbone.config();
    check_prompts(visual_prompts, cfg.num_layers, cfg.vision_width, "encode_image_prompted");
    if (embedded.width() != cfg.vision_width) {
        throw DimensionError("encode_image_prompted: token width mismatch");
    }
    const std::size_t base = embedded.length();
    if (trace) {
        trace->layers.assign(cfg.num_layers, BlockCache<T>());
        trace->word_rows = base;
        trace->prompt_rows = prompt_rows(visual_prompts);
    }
    Matrix<T> tokens = embedded.tokens;
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        const Matrix<T> input = visual_prompts.empty() ? tokens : vstack(tokens, visual_prompts[i]);
        const Matrix<T> output = block_forward(backbone.weights().vision_blocks[i], input,
                                               trace ? &trace->layers[i] : nullptr);
        tokens = output.rows() == base ? output : slice_rows(output, 0, base);
    }
    const auto& w = backbone.weights();
    const auto normed = final_norm<T>(tokens.row(0), w.ln_post_gamma, w.ln_post_beta, trace);
    return backbone.project_image(normed);
}

template <typename T>
std::vector<T> encode_image_prompted(const Backbone<T>& backbone, const Image& image,
                                     std::span<const Matrix<T>> visual_prompts, EncoderTrace<T>* trace) {
    return encode_image_prompted(backbone, backbone.embed_patches(image), visual_prompts, trace);
}

template <typename T>
void encode_image_backward(const Backbone<T>& backbone, const EncoderTrace<T>& trace, std::span<const T> d_rep,
                           std::span<Matrix<T>> d_prompts) {
    const auto& w = backbone.weights();
    const std::size_t base = trace.word_rows;
    const std::size_t b = trace.prompt_rows;
    const std::size_t d = backbone.config().vision_width;
    const bool has_prompts = b > 0;
    if (has_prompts && d_prompts.size() != trace.layers.size()) {
        throw DimensionError("encode_image_backward: prompt gradient list has wrong length");
    }

    const Matrix<T> d_cls = final_backward(trace, d_rep, w.image_projection, w.ln_post_gamma);
    Matrix<T> d_tokens(base, d);
    std::copy(d_cls.flat().begin(), d_cls.flat().end(), d_tokens.row(0).begin());

    for (std::size_t li = trace.layers.size(); li-- > 0;) {
        const Matrix<T> d_out = has_prompts ? vstack(d_tokens, Matrix<T>(b, d)) : d_tokens;
        const Matrix<T> d_in = block_backward(w.vision_blocks[li], trace.layers[li], d_out);
        if (has_prompts) {
            add_inplace(d_prompts[li], slice_rows(d_in, base, base + b));
            d_tokens = slice_rows(d_in, 0, base);
        } else {
            d_tokens = d_in;
        }
    }
}

template <typename T>
std::vector<T> encode_text_prompted(const Backbone<T>& backbone, std::span<const int> token_ids,
                                    std::span<const Matrix<T>> textual_prompts, EncoderTrace<T>* trace) {
    const auto& cfg = backbone.config();
    check_prompts(textual_prompts, cfg.num_layers, cfg.text_width, "encode_text_prompted");
    TokenSequence<T> seq = backbone.embed_text(token_ids);
    const std::size_t len = seq.length();
    const std::size_t b = prompt_rows(textual_prompts);
    if (trace) {
        trace->layers.assign(cfg.num_layers, BlockCache<T>());
        trace->word_rows = len;
        trace->prompt_rows = b;
    }
    Matrix<T> tokens = std::move(seq.tokens);
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        const Matrix<T> input = textual_prompts.empty() ? tokens : vstack(textual_prompts[i], tokens);
        const Matrix<T> output = block_forward(backbone.weights().text_blocks[i], input,
                                               trace ? &trace->layers[i] : nullptr);
        tokens = b == 0 ? output : slice_rows(output, b, b + len);
    }
    const auto& w = backbone.weights();
    const auto normed = final_norm<T>(tokens.row(len - 1), w.ln_final_gamma, w.ln_final_beta, trace);
    return backbone.project_text(normed);
}

template <typename T>
void encode_text_backward(const Backbone<T>& backbone, const EncoderTrace<T>& trace, std::span<const T> d_rep,
                          std::span<Matrix<T>> d_prompts) {
    const auto& w = backbone.weights();
    const std::size_t len = trace.word_rows;
    const std::size_t b = trace.prompt_rows;
    const std::size_t d = backbone.config().text_width;
    if (b > 0 && d_prompts.size() != trace.layers.size()) {
        throw DimensionError("encode_text_backward: prompt gradient list has wrong length");
    }

    const Matrix<T> d_last = final_backward(trace, d_rep, w.text_projection, w.ln_final_gamma);
    Matrix<T> d_tokens(len, d);
    std::copy(d_last.flat().begin(), d_last.flat().end(), d_tokens.row(len - 1).begin());

    for (std::size_t li = trace.layers.size(); li-- > 0;) {
        const Matrix<T> d_out = b > 0 ? vstack(Matrix<T>(b, d), d_tokens) : d_tokens;
        const Matrix<T> d_in = block_backward(w.text_blocks[li], trace.layers[li], d_out);
        if (b > 0) {
            add_inplace(d_prompts[li], slice_rows(d_in, 0, b));
            d_tokens = slice_rows(d_in, b, b + len);
        } else {
            d_tokens = d_in;
        }
    }
}

template <typename T>
std::vector<T> encode_text_raw(const Backbone<T>& backbone, std::span<const int> token_ids) {
    return encode_text_prompted(backbone, token_ids, std::span<const Matrix<T>>());
}

#define VLQ_INSTANTIATE_PROMPTED(T)                                                                                  \
    template struct PromptSet<T>;                                                                                    \
    template PromptSet<T> make_prompt_set<T>(std::uint64_t, TaskTag, std::size_t, const BackboneConfig&, bool, bool); \
    template std::vector<T> encode_image_prompted<T>(const Backbone<T>&, const TokenSequence<T>&,                   \
                                                     std::span<const Matrix<T>>, EncoderTrace<T>*);                 \
    template std::vector<T> encode_image_prompted<T>(const Backbone<T>&, const Image&, std::span<const Matrix<T>>,  \
                                                     EncoderTrace<T>*);                                             \
    template void encode_image_backward<T>(const Backbone<T>&, const EncoderTrace<T>&, std::span<const T>,          \
                                           std::span<Matrix<T>>);                                                   \
    template std::vector<T> encode_text_prompted<T>(const Backbone<T>&, std::span<const int>,                       \
                                                    std::span<const Matrix<T>>, EncoderTrace<T>*);                  \
    template void encode_text_backward<T>(const Backbone<T>&, const EncoderTrace<T>&, std::span<const T>,           \
                                          std::span<Matrix<T>>);                                                    \
    template std::vector<T> encode_text_raw<T>(const Backbone<T>&, std::span<const int>);

VLQ_INSTANTIATE_PROMPTED(float)
VLQ_INSTANTIATE_PROMPTED(double)

#undef VLQ_INSTANTIATE_PROMPTED

} // namespace vlq
