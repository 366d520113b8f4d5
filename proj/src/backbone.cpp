#include "vlq/backbone.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "vlq/container.hpp"
#include "vlq/error.hpp"
#include "vlq/kernels.hpp"
#include "vlq/rng.hpp"

namespace vlq {

namespace {

void require_positive(std::size_t v, const char* field) {
    if (v == 0) {
        throw ConfigError(std::string("backbone config: ") + field + " must be >= 1");
    }
}

std::string shape_str(std::size_t r, std::size_t c) { return std::to_string(r) + "x" + std::to_string(c); }

template <typename T>
std::vector<T> layer_norm_row(std::span<const T> x, const Matrix<T>& gamma, const Matrix<T>& beta) {
    Matrix<T> in = Matrix<T>::row_vector(x);
    Matrix<T> out;
    Matrix<T> xhat;
    std::vector<T> rstd(1);
    kernels::layer_norm(in, gamma.flat(), beta.flat(), static_cast<T>(kLayerNormEps), out, xhat, std::span<T>(rstd));
    return {out.flat().begin(), out.flat().end()};
}

template <typename T>
std::vector<T> project_row(std::span<const T> x, const Matrix<T>& w, const char* what) {
    if (x.size() != w.cols()) {
        throw DimensionError(std::string(what) + ": input width " + std::to_string(x.size()) + " vs " +
                             std::to_string(w.cols()));
    }
    Matrix<T> in = Matrix<T>::row_vector(x);
    Matrix<T> out;
    kernels::linear(in, w, std::span<const T>(), out);
    return {out.flat().begin(), out.flat().end()};
}

} // namespace

void BackboneConfig::validate() const {
    require_positive(num_layers, "num_layers");
    require_positive(vision_width, "vision_width");
    require_positive(text_width, "text_width");
    require_positive(joint_dim, "joint_dim");
    require_positive(patch_count, "patch_count");
    require_positive(image_size, "image_size");
    require_positive(vocab_size, "vocab_size");
    require_positive(max_text_len, "max_text_len");
    require_positive(vision_heads, "vision_heads");
    require_positive(text_heads, "text_heads");
    require_positive(mlp_ratio, "mlp_ratio");
    if (max_text_len < 2) {
        throw ConfigError("backbone config: max_text_len must be >= 2");
    }
    const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patch_count))));
    if (grid * grid != patch_count) {
        throw ConfigError("backbone config: patch_count " + std::to_string(patch_count) + " is not a square grid");
    }
    if (image_size % grid != 0) {
        throw ConfigError("backbone config: image_size " + std::to_string(image_size) +
                          " not divisible by the patch grid " + std::to_string(grid));
    }
    if (vision_width % vision_heads != 0) {
        throw ConfigError("backbone config: vision_width not divisible by vision_heads");
    }
    if (text_width % text_heads != 0) {
        throw ConfigError("backbone config: text_width not divisible by text_heads");
    }
    for (float s : pixel_std) {
        if (!(s > 0.0f)) {
            throw ConfigError("backbone config: pixel_std entries must be positive");
        }
    }
}

std::size_t BackboneConfig::patch_grid() const {
    return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patch_count))));
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"num_layers", num_layers},     {"vision_width", vision_width}, {"text_width", text_width},
            {"joint_dim", joint_dim},       {"patch_count", patch_count},   {"image_size", image_size},
            {"vocab_size", vocab_size},     {"max_text_len", max_text_len}, {"vision_heads", vision_heads},
            {"text_heads", text_heads},     {"mlp_ratio", mlp_ratio},       {"causal_text", causal_text},
            {"pixel_mean", pixel_mean},     {"pixel_std", pixel_std}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    BackboneConfig c;
    try {
        c.num_layers = j.at("num_layers").get<std::size_t>();
        c.vision_width = j.at("vision_width").get<std::size_t>();
        c.text_width = j.at("text_width").get<std::size_t>();
        c.joint_dim = j.at("joint_dim").get<std::size_t>();
        c.patch_count = j.at("patch_count").get<std::size_t>();
        c.image_size = j.at("image_size").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_text_len = j.at("max_text_len").get<std::size_t>();
        c.vision_heads = j.at("vision_heads").get<std::size_t>();
        c.text_heads = j.at("text_heads").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.causal_text = j.at("causal_text").get<bool>();
        c.pixel_mean = j.at("pixel_mean").get<std::array<float, 3>>();
        c.pixel_std = j.at("pixel_std").get<std::array<float, 3>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("backbone config: ") + e.what());
    }
    return c;
}

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> backbone_tensor_shapes(
    const BackboneConfig& cfg) {
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
    const std::size_t dv = cfg.vision_width;
    const std::size_t dl = cfg.text_width;
    out.push_back({"visual.patch_embedding.weight", {dv, cfg.patch_dim()}});
    out.push_back({"visual.class_embedding", {1, dv}});
    out.push_back({"visual.positional_embedding", {cfg.patch_count + 1, dv}});
    out.push_back({"visual.ln_pre.weight", {1, dv}});
    out.push_back({"visual.ln_pre.bias", {1, dv}});
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        for (auto& [name, shape] : block_tensor_shapes(dv, dv * cfg.mlp_ratio)) {
            out.push_back({"visual.blocks." + std::to_string(i) + "." + name, shape});
        }
    }
    out.push_back({"visual.ln_post.weight", {1, dv}});
    out.push_back({"visual.ln_post.bias", {1, dv}});
    out.push_back({"visual.proj", {cfg.joint_dim, dv}});
    out.push_back({"text.token_embedding", {cfg.vocab_size, dl}});
    out.push_back({"text.positional_embedding", {cfg.max_text_len, dl}});
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        for (auto& [name, shape] : block_tensor_shapes(dl, dl * cfg.mlp_ratio)) {
            out.push_back({"text.blocks." + std::to_string(i) + "." + name, shape});
        }
    }
    out.push_back({"text.ln_final.weight", {1, dl}});
    out.push_back({"text.ln_final.bias", {1, dl}});
    out.push_back({"text.proj", {cfg.joint_dim, dl}});
    return out;
}

template <typename T>
Backbone<T>::Backbone(BackboneConfig cfg, BackboneWeights<T> weights, std::shared_ptr<const Tokenizer> tokenizer)
    : cfg_(std::move(cfg)), weights_(std::move(weights)), tokenizer_(std::move(tokenizer)) {
    cfg_.validate();
    if (!tokenizer_) {
        throw ConfigError("backbone requires a tokenizer");
    }
    if (tokenizer_->vocab_size() > cfg_.vocab_size) {
        throw ConfigError("tokenizer vocabulary (" + std::to_string(tokenizer_->vocab_size()) +
                          ") exceeds backbone vocab_size (" + std::to_string(cfg_.vocab_size) + ")");
    }
    if (weights_.vision_blocks.size() != cfg_.num_layers || weights_.text_blocks.size() != cfg_.num_layers) {
        throw DimensionError("backbone weights: layer count does not match config");
    }
    const auto shapes = backbone_tensor_shapes(cfg_);
    std::size_t idx = 0;
    weights_.for_each([&](const std::string& name, const Matrix<T>& m) {
        const auto& [exp_name, exp_shape] = shapes[idx++];
        if (m.rows() != exp_shape.first || m.cols() != exp_shape.second) {
            throw ShapeMismatchError(name, "expected " + shape_str(exp_shape.first, exp_shape.second) + ", got " +
                                               shape_str(m.rows(), m.cols()));
        }
    });
}

template <typename T>
std::vector<int> Backbone<T>::tokenize(std::string_view text) const {
    return tokenizer_->encode(text, cfg_.max_text_len);
}

template <typename T>
TokenSequence<T> Backbone<T>::embed_patches(const Image& image) const {
    if (image.width != cfg_.image_size || image.height != cfg_.image_size ||
        image.pixels.size() != image.width * image.height * Image::kChannels) {
        throw DimensionError("embed_patches: expected " + std::to_string(cfg_.image_size) + "x" +
                             std::to_string(cfg_.image_size) + " RGB image, got " + std::to_string(image.width) + "x" +
                             std::to_string(image.height));
    }
    const std::size_t grid = cfg_.patch_grid();
    const std::size_t side = cfg_.patch_side();
    const std::size_t m = cfg_.patch_count;

    Matrix<T> patches(m, cfg_.patch_dim());
    for (std::size_t gy = 0; gy < grid; ++gy) {
        for (std::size_t gx = 0; gx < grid; ++gx) {
            auto row = patches.row(gy * grid + gx);
            std::size_t col = 0;
            for (std::size_t c = 0; c < Image::kChannels; ++c) {
                for (std::size_t py = 0; py < side; ++py) {
                    for (std::size_t px = 0; px < side; ++px) {
                        const float v = image.at(gy * side + py, gx * side + px, c);
                        row[col++] = static_cast<T>((v - cfg_.pixel_mean[c]) / cfg_.pixel_std[c]);
                    }
                }
            }
        }
    }
    Matrix<T> projected;
    kernels::linear(patches, weights_.patch_weight, std::span<const T>(), projected);

    Matrix<T> tokens = vstack(weights_.class_embedding, projected);
    add_inplace(tokens, weights_.vision_positional);

    TokenSequence<T> seq;
    std::vector<T> rstd(tokens.rows());
    Matrix<T> xhat;
    kernels::layer_norm(tokens, weights_.ln_pre_gamma.flat(), weights_.ln_pre_beta.flat(),
                        static_cast<T>(kLayerNormEps), seq.tokens, xhat, std::span<T>(rstd));
    seq.roles.assign(m + 1, TokenRole::patch);
    seq.roles[0] = TokenRole::cls;
    return seq;
}

template <typename T>
TokenSequence<T> Backbone<T>::embed_text(std::span<const int> token_ids) const {
    if (token_ids.empty()) {
        throw DimensionError("embed_text: empty token sequence");
    }
    if (token_ids.size() > cfg_.max_text_len) {
        throw DimensionError("embed_text: " + std::to_string(token_ids.size()) + " tokens exceed max_text_len " +
                             std::to_string(cfg_.max_text_len));
    }
    TokenSequence<T> seq;
    seq.tokens = Matrix<T>(token_ids.size(), cfg_.text_width);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        const int id = token_ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
            throw DimensionError("embed_text: token id " + std::to_string(id) + " out of vocabulary");
        }
        auto dst = seq.tokens.row(i);
        auto emb = weights_.token_embedding.row(static_cast<std::size_t>(id));
        auto pos = weights_.text_positional.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) {
            dst[c] = emb[c] + pos[c];
        }
    }
    seq.roles.assign(token_ids.size(), TokenRole::word);
    return seq;
}

template <typename T>
TokenSequence<T> Backbone<T>::vision_layer_forward(std::size_t layer, const TokenSequence<T>& seq) const {
    if (layer >= cfg_.num_layers) {
        throw DimensionError("vision_layer_forward: layer " + std::to_string(layer) + " out of range");
    }
    return {block_forward(weights_.vision_blocks[layer], seq.tokens), seq.roles};
}

template <typename T>
TokenSequence<T> Backbone<T>::text_layer_forward(std::size_t layer, const TokenSequence<T>& seq) const {
    if (layer >= cfg_.num_layers) {
        throw DimensionError("text_layer_forward: layer " + std::to_string(layer) + " out of range");
    }
    return {block_forward(weights_.text_blocks[layer], seq.tokens), seq.roles};
}

template <typename T>
std::vector<T> Backbone<T>::normalize_image_token(std::span<const T> class_token) const {
    if (class_token.size() != cfg_.vision_width) {
        throw DimensionError("normalize_image_token: width mismatch");
    }
    return layer_norm_row(class_token, weights_.ln_post_gamma, weights_.ln_post_beta);
}

template <typename T>
std::vector<T> Backbone<T>::normalize_text_token(std::span<const T> last_token) const {
    if (last_token.size() != cfg_.text_width) {
        throw DimensionError("normalize_text_token: width mismatch");
    }
    return layer_norm_row(last_token, weights_.ln_final_gamma, weights_.ln_final_beta);
}

template <typename T>
std::vector<T> Backbone<T>::project_image(std::span<const T> class_token) const {
    return project_row(class_token, weights_.image_projection, "project_image");
}

template <typename T>
std::vector<T> Backbone<T>::project_text(std::span<const T> last_token) const {
    return project_row(last_token, weights_.text_projection, "project_text");
}

template <typename T>
std::vector<T> Backbone<T>::encode_image(const Image& image) const {
    TokenSequence<T> seq = embed_patches(image);
    for (std::size_t i = 0; i < cfg_.num_layers; ++i) {
        seq = vision_layer_forward(i, seq);
    }
    const auto normed = normalize_image_token(seq.tokens.row(0));
    return project_image(normed);
}

template <typename T>
std::vector<T> Backbone<T>::encode_text(std::span<const int> token_ids) const {
    TokenSequence<T> seq = embed_text(token_ids);
    for (std::size_t i = 0; i < cfg_.num_layers; ++i) {
        seq = text_layer_forward(i, seq);
    }
    const auto normed = normalize_text_token(seq.tokens.row(seq.length() - 1));
    return project_text(normed);
}

template <typename T>
std::uint64_t Backbone<T>::parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    weights_.for_each([&](const std::string& name, const Matrix<T>& m) {
        h = fnv1a(name, h);
        h = fnv1a(std::as_bytes(m.flat()), h);
    });
    return h;
}

template class Backbone<float>;
template class Backbone<double>;

Backbone<float> make_toy_backbone(std::uint64_t seed, const BackboneConfig& cfg) {
    cfg.validate();
    BackboneWeights<float> w;
    w.vision_blocks.resize(cfg.num_layers);
    w.text_blocks.resize(cfg.num_layers);
    for (auto& b : w.vision_blocks) {
        b.heads = cfg.vision_heads;
    }
    for (auto& b : w.text_blocks) {
        b.heads = cfg.text_heads;
        b.causal = cfg.causal_text;
    }

    std::map<std::string, std::pair<std::size_t, std::size_t>> shapes;
    for (auto& [name, shape] : backbone_tensor_shapes(cfg)) {
        shapes[name] = shape;
    }
    auto ends_with = [](const std::string& s, std::string_view suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };

    w.for_each([&](const std::string& name, Matrix<float>& m) {
        const auto [rows, cols] = shapes.at(name);
        Rng rng(derive_seed(seed, name));
        m = Matrix<float>(rows, cols);
        const bool is_norm = name.find("ln_") != std::string::npos;
        for (auto& v : m.flat()) {
            const double z = rng.normal();
            double value = 0.0;
            if (is_norm && ends_with(name, ".weight")) {
                value = 1.0 + 0.1 * z;
            } else if (is_norm || ends_with(name, ".bias")) {
                value = 0.1 * z;
            } else if (ends_with(name, "embedding") && name.find("positional") != std::string::npos) {
                value = 0.1 * z;
            } else if (ends_with(name, "embedding")) {
                value = 0.5 * z;
            } else {
                value = z / std::sqrt(static_cast<double>(cols));
            }
            v = static_cast<float>(value);
        }
    });
    return Backbone<float>(cfg, std::move(w), std::make_shared<ByteTokenizer>());
}

void save_backbone(const Backbone<float>& backbone, const std::filesystem::path& path) {
    TensorFile file;
    file.kind = "backbone";
    file.format_version = kBackboneFormatVersion;
    file.metadata["config"] = backbone.config().to_json();
    file.metadata["tokenizer"] = backbone.tokenizer().describe();
    backbone.weights().for_each([&](const std::string& name, const Matrix<float>& m) {
        file.tensors.push_back(NamedTensor::from_matrix(name, m, DType::f32));
    });
    write_tensor_file(path, file);
}

Backbone<float> load_pretrained(const std::filesystem::path& path, const std::optional<BackboneConfig>& expected) {
    if (!std::filesystem::exists(path)) {
        throw IoError("backbone checkpoint '" + path.string() + "' does not exist");
    }
    const TensorFile file = read_tensor_file(path);
    if (file.kind != "backbone") {
        throw FormatError("'" + path.string() + "' holds a " + file.kind + ", not a backbone");
    }
    if (file.format_version != kBackboneFormatVersion) {
        throw FormatError("unknown backbone format version " + std::to_string(file.format_version));
    }
    const BackboneConfig stored = BackboneConfig::from_json(file.metadata.at("config"));
    const BackboneConfig& cfg = expected ? *expected : stored;
    cfg.validate();

    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : file.tensors) {
        by_name[t.name] = &t;
    }
    for (const auto& [name, shape] : backbone_tensor_shapes(cfg)) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError("backbone checkpoint is missing tensor '" + name + "'");
        }
        if (it->second->rows != shape.first || it->second->cols != shape.second) {
            throw ShapeMismatchError(name, "expected " + shape_str(shape.first, shape.second) + ", file has " +
                                               shape_str(it->second->rows, it->second->cols));
        }
    }
    if (expected && !(stored == *expected)) {
        throw ConfigError("backbone checkpoint config differs from the expected config in non-shape fields");
    }

    BackboneWeights<float> w;
    w.vision_blocks.resize(cfg.num_layers);
    w.text_blocks.resize(cfg.num_layers);
    for (auto& b : w.vision_blocks) {
        b.heads = cfg.vision_heads;
    }
    for (auto& b : w.text_blocks) {
        b.heads = cfg.text_heads;
        b.causal = cfg.causal_text;
    }
    w.for_each([&](const std::string& name, Matrix<float>& m) { m = by_name.at(name)->to_matrix<float>(); });

    auto tokenizer = make_tokenizer(file.metadata.value("tokenizer", nlohmann::json{{"type", "byte"}}),
                                    path.parent_path());
    return Backbone<float>(cfg, std::move(w), std::move(tokenizer));
}

} // namespace vlq
