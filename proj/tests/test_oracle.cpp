#include <doctest.h>

#include "support.hpp"
#include "vlq/rng.hpp"
#include "vlq/training.hpp"

using namespace vlq;

// Full scoring path (conditioned visual prompts, deep textual prompts,
// antonym pair) against the straight-line reference over varied shapes.
TEST_CASE("scores match the reference composition on seeded cases") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        CAPTURE(seed);
        Rng pick(derive_seed(seed, "shape"));
        BackboneConfig bcfg;
        bcfg.num_layers = 1 + pick.uniform_index(3);
        bcfg.vision_width = bcfg.text_width = bcfg.joint_dim = pick.uniform_index(2) ? 8 : 16;
        bcfg.vision_heads = bcfg.text_heads = pick.uniform_index(2) ? 1 : 2;
        bcfg.patch_count = pick.uniform_index(2) ? 4 : 16;
        bcfg.image_size = 16;
        bcfg.max_text_len = 24;
        bcfg.causal_text = pick.uniform_index(2) == 1;

        TrainConfig cfg;
        cfg.prompt_length = 1 + pick.uniform_index(3);
        cfg.seed = seed;
        cfg.crop_size = bcfg.image_size;

        const auto bb = make_toy_backbone(seed, bcfg);
        const auto bd = bb.cast<double>();
        auto params = init_state<double>(cfg, bcfg).params;
        Rng jig(derive_seed(seed, "jitter"));
        params.for_each([&](const std::string&, Matrix<double>& m) {
            for (auto& v : m.flat()) v += 0.05 * jig.normal();
        });

        Image img(bcfg.image_size, bcfg.image_size);
        for (auto& p : img.pixels) p = static_cast<float>(jig.uniform());

        const double qp = score_image(bd, img, percept_head(params, cfg)).value;
        const double qa = score_image(bd, img, align_head(params, cfg)).value;

        const auto table = testing::to_table(bb);
        const auto dims = testing::dims_of(bcfg);
        std::vector<oracle::Tensor> w, c;
        for (const auto& m : params.couplers.weights) w.push_back(testing::to_tensor(m));
        for (const auto& m : params.couplers.biases) c.push_back(testing::to_tensor(m));
        const auto qa_rows = testing::to_rows(params.align.visual);
        const auto conditioned = oracle::couple(w, c, qa_rows, testing::to_rows(params.percept.visual));
        const auto pic = testing::to_picture(img);

        const auto xp = oracle::image_representation(table, dims, pic, conditioned);
        const auto pt = testing::to_rows(params.percept.textual);
        const auto zpos = oracle::text_representation(table, dims, bb.tokenize("Good photo."), pt);
        const auto zneg = oracle::text_representation(table, dims, bb.tokenize("Bad photo."), pt);
        const double ref_p = oracle::softmax_first(oracle::cosine(xp, zpos), oracle::cosine(xp, zneg));

        const auto xa = oracle::image_representation(table, dims, pic, qa_rows);
        const auto at = testing::to_rows(params.align.textual);
        const auto apos = oracle::text_representation(table, dims, bb.tokenize("Aligned photo."), at);
        const auto aneg = oracle::text_representation(table, dims, bb.tokenize("Misaligned photo."), at);
        const double ref_a = oracle::softmax_first(oracle::cosine(xa, apos), oracle::cosine(xa, aneg));

        CHECK(testing::rel_err(qp, ref_p) < 1e-10);
        CHECK(testing::rel_err(qa, ref_a) < 1e-10);

        // float inference stays within a loose band of the reference
        const double qf = score_image(bb, img, percept_head(cast_params<float>(params), cfg)).value;
        CHECK(std::abs(qf - ref_p) < 1e-4);
    }
}
