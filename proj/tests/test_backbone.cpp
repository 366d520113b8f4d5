#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vlq/backbone.hpp"
#include "vlq/container.hpp"
#include "vlq/data.hpp"
#include "vlq/rng.hpp"

using namespace vlq;

namespace {

Image noise_image(std::size_t size, std::uint64_t seed) {
    Image img(size, size);
    Rng rng(seed);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

bool finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace

TEST_CASE("patch embedding shape contract") {
    BackboneConfig cfg;
    cfg.patch_count = 4;
    cfg.vision_width = 8;
    cfg.vision_heads = 2;
    const auto bb = make_toy_backbone(1, cfg);
    const auto seq = bb.embed_patches(noise_image(cfg.image_size, 2));
    CHECK(seq.length() == 5);
    CHECK(seq.width() == 8);
    CHECK(seq.roles.front() == TokenRole::cls);
    CHECK(seq.roles.back() == TokenRole::patch);
    const auto out = bb.vision_layer_forward(0, seq);
    CHECK(out.length() == 5);
    CHECK(out.width() == 8);
    CHECK_THROWS_AS(bb.vision_layer_forward(cfg.num_layers, seq), DimensionError);
    CHECK_THROWS_AS(bb.embed_patches(Image(cfg.image_size + 1, cfg.image_size)), DimensionError);
}

TEST_CASE("one pixel change touches only its patch token before mixing") {
    const auto cfg = testing::small_config();
    const auto bb = make_toy_backbone(3, cfg);
    auto img = noise_image(cfg.image_size, 4);
    const auto a = bb.embed_patches(img);
    img.at(0, 0, 1) = 1.0f - img.at(0, 0, 1);
    const auto b = bb.embed_patches(img);
    // class token untouched, first patch token changed, others untouched
    for (std::size_t r = 0; r < a.length(); ++r) {
        bool same = true;
        for (std::size_t c = 0; c < a.width(); ++c) same = same && a.tokens(r, c) == b.tokens(r, c);
        CHECK(same == (r != 1));
    }
    CHECK(bb.encode_image(img) != bb.encode_image(noise_image(cfg.image_size, 4)));
}

TEST_CASE("encoders are finite on extreme inputs") {
    const auto cfg = testing::small_config();
    const auto bb = make_toy_backbone(5, cfg);
    CHECK(finite(bb.encode_image(Image(cfg.image_size, cfg.image_size, 0.0f))));
    CHECK(finite(bb.encode_image(Image(cfg.image_size, cfg.image_size, 1.0f))));
    CHECK(finite(bb.encode_text(bb.tokenize(""))));
    CHECK(finite(bb.encode_text(bb.tokenize(std::string(200, 'z')))));
    CHECK(bb.encode_image(Image(cfg.image_size, cfg.image_size, 0.5f)).size() == cfg.joint_dim);
}

TEST_CASE("toy backbone is seeded and frozen") {
    const auto cfg = testing::small_config();
    const auto a = make_toy_backbone(9, cfg);
    const auto b = make_toy_backbone(9, cfg);
    const auto c = make_toy_backbone(10, cfg);
    CHECK(a.parameter_hash() == b.parameter_hash());
    CHECK(a.parameter_hash() != c.parameter_hash());
    CHECK(a.frozen());
    // float and double instances hold the same values
    const auto d = a.cast<double>();
    CHECK(d.cast<float>().parameter_hash() == a.parameter_hash());
}

TEST_CASE("encoders agree with the independent reference model") {
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        auto cfg = testing::small_config();
        cfg.causal_text = seed % 2 == 0;
        const auto bb = make_toy_backbone(seed, cfg);
        const auto bd = bb.cast<double>();
        const auto table = testing::to_table(bb);
        const auto dims = testing::dims_of(cfg);
        const auto img = noise_image(cfg.image_size, 100 + seed);
        const auto mine = bd.encode_image(img);
        const auto ref = oracle::image_representation(table, dims, testing::to_picture(img), {});
        REQUIRE(mine.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(testing::rel_err(mine[i], ref[i], 1e-6) < 1e-9);

        const auto ids = bb.tokenize("a photo of a cat");
        const auto tm = bd.encode_text(ids);
        const auto tr = oracle::text_representation(table, dims, ids, {});
        for (std::size_t i = 0; i < tr.size(); ++i) CHECK(testing::rel_err(tm[i], tr[i], 1e-6) < 1e-9);

        // the float path stays close to the double reference
        const auto mf = bb.encode_image(img);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(mf[i] - ref[i]) < 1e-4);
    }
}

TEST_CASE("projection is linear without bias") {
    const auto cfg = testing::small_config();
    const auto bb = make_toy_backbone(6, cfg).cast<double>();
    std::vector<double> x(cfg.vision_width), y(cfg.vision_width), s(cfg.vision_width);
    Rng rng(7);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.normal();
        y[i] = rng.normal();
        s[i] = 2.0 * x[i] - y[i];
    }
    const auto px = bb.project_image(x), py = bb.project_image(y), ps = bb.project_image(s);
    for (std::size_t i = 0; i < px.size(); ++i) CHECK(ps[i] == doctest::Approx(2.0 * px[i] - py[i]).epsilon(1e-12));
    CHECK(bb.project_image(std::vector<double>(cfg.vision_width, 0.0)) == std::vector<double>(cfg.joint_dim, 0.0));
}

TEST_CASE("backbone save and load") {
    testing::TempDir dir;
    const auto cfg = testing::small_config();
    const auto bb = make_toy_backbone(8, cfg);
    save_backbone(bb, dir / "bb.ckpt");
    const auto loaded = load_pretrained(dir / "bb.ckpt");
    CHECK(loaded.config() == cfg);
    CHECK(loaded.parameter_hash() == bb.parameter_hash());
    const auto img = noise_image(cfg.image_size, 1);
    CHECK(loaded.encode_image(img) == bb.encode_image(img));
    CHECK_NOTHROW(load_pretrained(dir / "bb.ckpt", cfg));

    CHECK_THROWS_AS(load_pretrained(dir / "missing.ckpt"), IoError);

    auto wider = cfg;
    wider.vision_width = 32;
    try {
        load_pretrained(dir / "bb.ckpt", wider);
        FAIL("expected a shape mismatch");
    } catch (const ShapeMismatchError& e) {
        CHECK(e.tensor() == "visual.patch_embedding.weight");
        CHECK(std::string(e.what()).find("visual.patch_embedding.weight") != std::string::npos);
    }

    auto file = read_tensor_file(dir / "bb.ckpt");
    file.tensors.erase(file.tensors.begin() + 3);
    write_tensor_file(dir / "cut.ckpt", file);
    CHECK_THROWS_AS(load_pretrained(dir / "cut.ckpt"), FormatError);

    file.kind = "vlq.trainable_state";
    write_tensor_file(dir / "kind.ckpt", file);
    CHECK_THROWS_AS(load_pretrained(dir / "kind.ckpt"), FormatError);
}

TEST_CASE("byte tokenizer framing and truncation") {
    ByteTokenizer tok;
    const auto ids = tok.encode("ab", 32);
    CHECK(ids == std::vector<int>{ByteTokenizer::kStart, 'a', 'b', ByteTokenizer::kEnd});
    const auto cut = tok.encode(std::string(100, 'x'), 8);
    CHECK(cut.size() == 8);
    CHECK(cut.front() == ByteTokenizer::kStart);
    CHECK(cut.back() == ByteTokenizer::kEnd);
    CHECK(tok.encode("", 4) == std::vector<int>{ByteTokenizer::kStart, ByteTokenizer::kEnd});
    CHECK_THROWS_AS(tok.encode("a", 1), ConfigError);
}

TEST_CASE("bpe tokenizer merges by rank") {
    BpeTokenizer tok({"h e", "l l", "he ll", "hell o</w>"});
    CHECK(tok.bpe("hello") == std::vector<std::string>{"hello</w>"});
    CHECK(tok.bpe("hel") == std::vector<std::string>{"he", "l</w>"});
    const auto ids = tok.encode("Hello   HELLO", 16);
    const int hello = 512 + 3;
    CHECK(ids == std::vector<int>{tok.start_id(), hello, hello, tok.end_id()});
    CHECK(tok.vocab_size() == 512 + 4 + 2);
    CHECK_THROWS_AS(BpeTokenizer({"nospace"}), FormatError);
}
