#pragma once

// Frozen dual-encoder backbone: a vision tower over image patches and a text
// tower over token ids, each followed by a final layer norm and a linear
// projection into the joint embedding space.
//
// Construction goes through make_toy_backbone() or load_pretrained(); the
// resulting object is immutable, so it can be shared read-only by any number
// of threads.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlq/image.hpp"
#include "vlq/tensor.hpp"
#include "vlq/tokenizer.hpp"
#include "vlq/transformer.hpp"

namespace vlq {

struct BackboneConfig {
    std::size_t num_layers = 4;
    std::size_t vision_width = 32;
    std::size_t text_width = 32;
    std::size_t joint_dim = 32;
    std::size_t patch_count = 16;
    std::size_t image_size = 32;
    std::size_t vocab_size = ByteTokenizer::kVocabSize;
    std::size_t max_text_len = 32;
    std::size_t vision_heads = 4;
    std::size_t text_heads = 4;
    std::size_t mlp_ratio = 2;
    bool causal_text = false;
    std::array<float, 3> pixel_mean{0.5f, 0.5f, 0.5f};
    std::array<float, 3> pixel_std{0.5f, 0.5f, 0.5f};

    // Throws ConfigError naming the first offending field.
    void validate() const;

    std::size_t patch_grid() const;
    std::size_t patch_side() const { return image_size / patch_grid(); }
    std::size_t patch_dim() const { return 3 * patch_side() * patch_side(); }

    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class TokenRole : std::uint8_t { cls, patch, word, prompt };

template <typename T>
struct TokenSequence {
    Matrix<T> tokens;
    std::vector<TokenRole> roles;

    std::size_t length() const { return tokens.rows(); }
    std::size_t width() const { return tokens.cols(); }
};

template <typename T>
struct BackboneWeights {
    // vision tower
    Matrix<T> patch_weight;      // d_v x (3 * p * p), input ordered (channel, row, col)
    Matrix<T> class_embedding;   // 1 x d_v
    Matrix<T> vision_positional; // (M + 1) x d_v
    Matrix<T> ln_pre_gamma, ln_pre_beta;
    std::vector<BlockWeights<T>> vision_blocks;
    Matrix<T> ln_post_gamma, ln_post_beta;
    Matrix<T> image_projection; // d_vl x d_v

    // text tower
    Matrix<T> token_embedding; // vocab x d_l
    Matrix<T> text_positional; // N x d_l
    std::vector<BlockWeights<T>> text_blocks;
    Matrix<T> ln_final_gamma, ln_final_beta;
    Matrix<T> text_projection; // d_vl x d_l

    // Visits every tensor with its checkpoint name, in a fixed order.
    template <typename F>
    void for_each(F&& f) const;
    template <typename F>
    void for_each(F&& f);

    template <typename U>
    BackboneWeights<U> cast() const;
};

// Expected checkpoint tensor names and shapes for a configuration.
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> backbone_tensor_shapes(
    const BackboneConfig& cfg);

template <typename T>
class Backbone {
public:
    Backbone(BackboneConfig cfg, BackboneWeights<T> weights, std::shared_ptr<const Tokenizer> tokenizer);

    const BackboneConfig& config() const { return cfg_; }
    const BackboneWeights<T>& weights() const { return weights_; }
    const Tokenizer& tokenizer() const { return *tokenizer_; }
    std::shared_ptr<const Tokenizer> shared_tokenizer() const { return tokenizer_; }
    constexpr bool frozen() const { return true; }

    std::vector<int> tokenize(std::string_view text) const;

    // Class token followed by M patch tokens, positional embeddings added,
    // pre-transformer layer norm applied.
    TokenSequence<T> embed_patches(const Image& image) const;
    TokenSequence<T> embed_text(std::span<const int> token_ids) const;

    // `layer` is zero-based, in [0, num_layers).
    TokenSequence<T> vision_layer_forward(std::size_t layer, const TokenSequence<T>& seq) const;
    TokenSequence<T> text_layer_forward(std::size_t layer, const TokenSequence<T>& seq) const;

    // Final layer norms applied to the class token / last word token before projection.
    std::vector<T> normalize_image_token(std::span<const T> class_token) const;
    std::vector<T> normalize_text_token(std::span<const T> last_token) const;

    // Linear maps into the joint space (no bias).
    std::vector<T> project_image(std::span<const T> class_token) const;
    std::vector<T> project_text(std::span<const T> last_token) const;

    // Prompt-free encoders.
    std::vector<T> encode_image(const Image& image) const;
    std::vector<T> encode_text(std::span<const int> token_ids) const;

    // FNV-1a over all parameter bytes in checkpoint order.
    std::uint64_t parameter_hash() const;

    template <typename U>
    Backbone<U> cast() const {
        return Backbone<U>(cfg_, weights_.template cast<U>(), tokenizer_);
    }

private:
    BackboneConfig cfg_;
    BackboneWeights<T> weights_;
    std::shared_ptr<const Tokenizer> tokenizer_;
};

// Seeded toy backbone. Every weight is drawn from its own named sub-stream
// and rounded to float32, so float and double instances hold identical values.
Backbone<float> make_toy_backbone(std::uint64_t seed, const BackboneConfig& cfg = {});

inline constexpr int kBackboneFormatVersion = 1;

void save_backbone(const Backbone<float>& backbone, const std::filesystem::path& path);

// Loads a backbone container. With `expected`, every tensor is checked
// against the shapes that configuration implies.
Backbone<float> load_pretrained(const std::filesystem::path& path,
                                const std::optional<BackboneConfig>& expected = std::nullopt);

// ---------------------------------------------------------------------------

template <typename T>
template <typename F>
void BackboneWeights<T>::for_each(F&& f) const {
    f(std::string("visual.patch_embedding.weight"), patch_weight);
    f(std::string("visual.class_embedding"), class_embedding);
    f(std::string("visual.positional_embedding"), vision_positional);
    f(std::string("visual.ln_pre.weight"), ln_pre_gamma);
    f(std::string("visual.ln_pre.bias"), ln_pre_beta);
    for (std::size_t i = 0; i < vision_blocks.size(); ++i) {
        const std::string prefix = "visual.blocks." + std::to_string(i) + ".";
        vision_blocks[i].for_each([&](const char* name, const Matrix<T>& m) { f(prefix + name, m); });
    }
    f(std::string("visual.ln_post.weight"), ln_post_gamma);
    f(std::string("visual.ln_post.bias"), ln_post_beta);
    f(std::string("visual.proj"), image_projection);
    f(std::string("text.token_embedding"), token_embedding);
    f(std::string("text.positional_embedding"), text_positional);
    for (std::size_t i = 0; i < text_blocks.size(); ++i) {
        const std::string prefix = "text.blocks." + std::to_string(i) + ".";
        text_blocks[i].for_each([&](const char* name, const Matrix<T>& m) { f(prefix + name, m); });
    }
    f(std::string("text.ln_final.weight"), ln_final_gamma);
    f(std::string("text.ln_final.bias"), ln_final_beta);
    f(std::string("text.proj"), text_projection);
}

template <typename T>
template <typename F>
void BackboneWeights<T>::for_each(F&& f) {
    std::as_const(*this).for_each(
        [&](const std::string& name, const Matrix<T>& m) { f(name, const_cast<Matrix<T>&>(m)); });
}

template <typename T>
template <typename U>
BackboneWeights<U> BackboneWeights<T>::cast() const {
    BackboneWeights<U> out;
    out.vision_blocks.resize(vision_blocks.size());
    out.text_blocks.resize(text_blocks.size());
    for (std::size_t i = 0; i < vision_blocks.size(); ++i) {
        out.vision_blocks[i].heads = vision_blocks[i].heads;
        out.vision_blocks[i].causal = vision_blocks[i].causal;
    }
    for (std::size_t i = 0; i < text_blocks.size(); ++i) {
        out.text_blocks[i].heads = text_blocks[i].heads;
        out.text_blocks[i].causal = text_blocks[i].causal;
    }
    std::vector<const Matrix<T>*> src;
    for_each([&](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
    std::size_t idx = 0;
    out.for_each([&](const std::string&, Matrix<U>& m) { m = matrix_cast<U>(*src[idx++]); });
    return out;
}

} // namespace vlq
