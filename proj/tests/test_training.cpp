#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "support.hpp"
#include "vlq/container.hpp"
#include "vlq/rng.hpp"
#include "vlq/training.hpp"

using namespace vlq;

namespace {

TrainConfig small_train_config(const BackboneConfig& bcfg) {
    TrainConfig cfg;
    cfg.prompt_length = 2;
    cfg.batch_size = 4;
    cfg.crop_size = bcfg.image_size;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 2;
    cfg.seed = 17;
    return cfg;
}

std::vector<std::string> names_of(const TrainableParams<double>& p) {
    std::vector<std::string> out;
    p.for_each([&](const std::string& name, const Matrix<double>&) { out.push_back(name); });
    return out;
}

std::vector<std::string> expected_names(std::size_t layers, std::initializer_list<const char*> groups) {
    std::vector<std::string> out;
    for (const char* g : groups)
        for (std::size_t i = 0; i < layers; ++i) out.push_back(std::string(g) + std::to_string(i));
    return out;
}

// Moves every parameter off its initial value so gradients are generic.
void jitter(TrainableParams<double>& p, std::uint64_t seed, double scale) {
    Rng rng(seed);
    p.for_each([&](const std::string&, Matrix<double>& m) {
        for (auto& v : m.flat()) v += scale * rng.normal();
    });
}

double flat_distance(const TrainableParams<double>& a, const TrainableParams<double>& b) {
    std::vector<const Matrix<double>*> bm;
    b.for_each([&](const std::string&, const Matrix<double>& m) { bm.push_back(&m); });
    double d = 0.0;
    std::size_t k = 0;
    a.for_each([&](const std::string&, const Matrix<double>& m) {
        for (std::size_t i = 0; i < m.size(); ++i) d = std::max(d, std::abs(m.flat()[i] - bm[k]->flat()[i]));
        ++k;
    });
    return d;
}

bool params_equal(const TrainableParams<double>& a, const TrainableParams<double>& b) {
    return names_of(a) == names_of(b) && flat_distance(a, b) == 0.0;
}

} // namespace

TEST_CASE("loss worked examples") {
    CHECK(loss_percept({0.5}, {0.0}) == 0.25);
    CHECK(loss_percept({0.5, 1.0}, {0.0, 1.0}) == 0.125);
    CHECK(loss_align({0.2, 0.4}, {0.2, 0.4}) == 0.0);
    CHECK(loss_total(0.2, 0.5, 0.1) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(loss_total(0.2, 0.5, 0.0) == 0.2);
    CHECK_THROWS_AS(loss_total(0.2, 0.5, -1.0), NumericalError);
    CHECK_THROWS_AS(loss_total(std::nan(""), 0.5, 0.1), NumericalError);
    CHECK_THROWS_AS(loss_percept({0.1}, {0.1, 0.2}), DimensionError);
    CHECK_THROWS_AS(loss_percept({}, {}), DimensionError);
}

TEST_CASE("train config json round trip and validation") {
    TrainConfig cfg;
    cfg.prompt_length = 3;
    cfg.lambda = 0.7;
    cfg.ablation.conditioning = false;
    cfg.alignment_mode = AlignmentMode::text_conditioned;
    cfg.percept_pair.positive = "Sharp photo.";
    const auto back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.alignment_mode == AlignmentMode::text_conditioned);

    auto j = cfg.to_json();
    j["bogus"] = 1;
    CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
    CHECK_THROWS_AS(parse_alignment_mode("sideways"), ConfigError);

    TrainConfig bad;
    bad.lambda = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("trainable set is exactly what the flags allow") {
    const auto bcfg = testing::small_config();
    const std::size_t L = bcfg.num_layers;
    struct Case {
        AblationFlags flags;
        AlignmentMode mode;
        std::vector<std::string> names;
    };
    const std::vector<Case> cases = {
        {{false, false, false, false}, AlignmentMode::blind, {}},
        {{true, false, false, false}, AlignmentMode::blind, expected_names(L, {"percept.textual."})},
        {{true, true, false, false}, AlignmentMode::blind, expected_names(L, {"percept.textual.", "percept.visual."})},
        {{true, true, true, true},
         AlignmentMode::blind,
         expected_names(L, {"percept.textual.", "percept.visual.", "align.textual.", "align.visual.", "coupler.weight.",
                            "coupler.bias."})},
        {{true, true, true, true},
         AlignmentMode::text_conditioned,
         expected_names(L, {"percept.textual.", "percept.visual.", "align.visual.", "coupler.weight.", "coupler.bias."})},
        {{true, true, true, false},
         AlignmentMode::blind,
         expected_names(L, {"percept.textual.", "percept.visual.", "align.visual.", "coupler.weight.", "coupler.bias."})},
        {{true, true, false, true},
         AlignmentMode::blind,
         expected_names(L, {"percept.textual.", "percept.visual.", "align.textual.", "align.visual."})},
        {{false, true, false, true}, AlignmentMode::blind, expected_names(L, {"percept.visual.", "align.visual."})},
    };
    for (const auto& c : cases) {
        auto cfg = small_train_config(bcfg);
        cfg.ablation = c.flags;
        cfg.alignment_mode = c.mode;
        const auto state = init_state<double>(cfg, bcfg);
        CHECK(names_of(state.params) == c.names);
        CHECK(names_of(state.adam_m) == c.names);
        CHECK(names_of(state.adam_v) == c.names);
        std::size_t count = 0;
        state.params.for_each([&](const std::string&, const Matrix<double>& m) { count += m.size(); });
        CHECK(state.params.parameter_count() == count);
    }

    // full model: b * (d_l + d_v) per layer per task, plus the couplers
    auto cfg = small_train_config(bcfg);
    const auto full = init_state<double>(cfg, bcfg);
    const std::size_t b = cfg.prompt_length, dv = bcfg.vision_width, dl = bcfg.text_width;
    CHECK(full.params.parameter_count() == L * (2 * b * (dl + dv) + dv * 2 * dv + dv));
    CHECK(condition_prompts(full.params.couplers, std::span<const Matrix<double>>(full.params.align.visual),
                            std::span<const Matrix<double>>(full.params.percept.visual)) ==
          full.params.percept.visual);
}

TEST_CASE("gradients match central differences on sampled coordinates") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg).cast<double>();
    const auto samples = testing::synthetic_samples(5, 4, 2, bcfg);
    for (auto mode : {AlignmentMode::blind, AlignmentMode::text_conditioned}) {
        auto cfg = small_train_config(bcfg);
        cfg.lambda = 0.6;
        cfg.temperature = 3.0;
        cfg.alignment_mode = mode;
        auto params = init_state<double>(cfg, bcfg).params;
        jitter(params, 8, 0.1);
        const auto batch = testing::make_batch(samples, cfg);
        auto grads = zeros_like(params);
        const auto loss = compute_gradients(bb, params, batch, cfg, grads);
        CHECK(loss.total == doctest::Approx(evaluate_loss(bb, params, batch, cfg).total).epsilon(1e-13));

        std::vector<std::pair<Matrix<double>*, const Matrix<double>*>> pairs;
        std::vector<Matrix<double>*> gm;
        grads.for_each([&](const std::string&, Matrix<double>& m) { gm.push_back(&m); });
        std::size_t k = 0;
        params.for_each([&](const std::string&, Matrix<double>& m) { pairs.push_back({&m, gm[k++]}); });

        Rng pick(11);
        const double h = 1e-6;
        std::size_t checked = 0;
        for (auto& [p, g] : pairs) {
            // at least 1% of every tensor, and never fewer than 3 entries
            const std::size_t n = std::max<std::size_t>(3, p->size() / 100);
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t i = pick.uniform_index(p->size());
                double& v = p->flat()[i];
                const double keep = v;
                v = keep + h;
                const double fp = evaluate_loss(bb, params, batch, cfg).total;
                v = keep - h;
                const double fm = evaluate_loss(bb, params, batch, cfg).total;
                v = keep;
                const double fd = (fp - fm) / (2 * h);
                CHECK(testing::rel_err(g->flat()[i], fd, 1e-6) < 1e-4);
                ++checked;
            }
        }
        CHECK(checked >= 30);
    }
}

TEST_CASE("alignment textual prompts never influence the perceptual loss") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg).cast<double>();
    auto cfg = small_train_config(bcfg);
    const auto batch = testing::make_batch(testing::synthetic_samples(5, 4, 2, bcfg), cfg);
    auto params = init_state<double>(cfg, bcfg).params;
    const auto before = evaluate_loss(bb, params, batch, cfg);
    Rng rng(4);
    for (auto& m : params.align.textual)
        for (auto& v : m.flat()) v += 0.5 * rng.normal();
    const auto after = evaluate_loss(bb, params, batch, cfg);
    CHECK(after.percept == before.percept);
    CHECK(after.align != before.align);

    // prompt rows enter each block through a layer norm, so a uniform shift is invisible
    auto shifted = params;
    for (auto& m : shifted.align.textual)
        for (auto& v : m.flat()) v += 0.5;
    CHECK(evaluate_loss(bb, shifted, batch, cfg).align == doctest::Approx(after.align).epsilon(1e-12));

    auto grads = zeros_like(params);
    cfg.lambda = 0.0;
    compute_gradients(bb, params, batch, cfg, grads);
    for (const auto& m : grads.align.textual)
        for (double v : m.flat()) CHECK(v == 0.0);
}

TEST_CASE("the conditioning channel trains the alignment visual prompts at lambda zero") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg).cast<double>();
    auto cfg = small_train_config(bcfg);
    cfg.lambda = 0.0;
    const auto batch = testing::make_batch(testing::synthetic_samples(5, 4, 2, bcfg), cfg);
    auto state = init_state<double>(cfg, bcfg);
    const auto start = state.params;
    train_step(bb, state, batch, cfg);
    // identity couplers block the path on the first step; the coupler weights move
    CHECK(state.params.align.visual == start.align.visual);
    CHECK(state.params.couplers.weights != start.couplers.weights);
    train_step(bb, state, batch, cfg);
    CHECK(state.params.align.visual != start.align.visual);
    CHECK(state.params.align.textual == start.align.textual);

    // without conditioning nothing reaches the alignment visual prompts
    cfg.ablation.conditioning = false;
    auto plain = init_state<double>(cfg, bcfg);
    const auto plain_start = plain.params;
    train_step(bb, plain, batch, cfg);
    train_step(bb, plain, batch, cfg);
    CHECK(plain.params.align.visual == plain_start.align.visual);
    CHECK(plain.params.percept.visual != plain_start.percept.visual);
}

TEST_CASE("without the auxiliary task the alignment loss is zero") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg).cast<double>();
    auto cfg = small_train_config(bcfg);
    cfg.ablation.auxiliary_task = false;
    const auto batch = testing::make_batch(testing::synthetic_samples(5, 4, 2, bcfg), cfg);
    CHECK(batch.g_align.empty());
    auto state = init_state<double>(cfg, bcfg);
    const auto loss = train_step(bb, state, batch, cfg);
    CHECK(loss.align == 0.0);
    CHECK(loss.total == loss.percept);
    CHECK(state.params.align.textual.empty());
}

TEST_CASE("repeated steps on one batch reduce the loss") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(4, bcfg);
    auto cfg = small_train_config(bcfg);
    cfg.learning_rate = 5e-3;
    const auto batch = testing::make_batch(testing::synthetic_samples(6, 8, 4, bcfg), cfg);
    auto state = init_state<float>(cfg, bcfg);
    const double first = evaluate_loss(bb, state.params, batch, cfg).total;
    double mid = 0.0;
    for (int s = 0; s < 200; ++s) {
        train_step(bb, state, batch, cfg);
        if (s == 99) mid = evaluate_loss(bb, state.params, batch, cfg).total;
    }
    const double last = evaluate_loss(bb, state.params, batch, cfg).total;
    CHECK(state.step == 200);
    // scores live in a bounded band, so the loss flattens above zero
    CHECK(last < 0.75 * first);
    CHECK(last <= mid);
}

TEST_CASE("train_step rejects non-finite values and leaves the state untouched") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg).cast<double>();
    auto cfg = small_train_config(bcfg);
    auto batch = testing::make_batch(testing::synthetic_samples(5, 4, 2, bcfg), cfg);
    auto state = init_state<double>(cfg, bcfg);
    state.params.percept.visual[1](0, 0) = std::numeric_limits<double>::quiet_NaN();
    const auto snapshot = state;
    CHECK_THROWS_AS(train_step(bb, state, batch, cfg), NumericalError);
    CHECK(state.step == snapshot.step);
    CHECK(names_of(state.params) == names_of(snapshot.params));

    auto clean = init_state<double>(cfg, bcfg);
    batch.g_percept[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train_step(bb, clean, batch, cfg), NumericalError);
    CHECK(clean.step == 0);
    CHECK(params_equal(clean.params, init_state<double>(cfg, bcfg).params));
}

TEST_CASE("fit is deterministic and leaves the backbone untouched") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg);
    const auto hash = bb.parameter_hash();
    auto cfg = small_train_config(bcfg);
    const auto samples = testing::synthetic_samples(7, 10, 5, bcfg);

    auto a = init_state<float>(cfg, bcfg);
    auto b = init_state<float>(cfg, bcfg);
    std::vector<EpochLog> seen;
    const auto ra = fit(bb, a, samples, cfg, [&](const EpochLog& e) { seen.push_back(e); });
    const auto rb = fit(bb, b, samples, cfg);
    REQUIRE(ra.log.size() == 2);
    CHECK(seen.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
        CHECK(ra.log[e].epoch == e + 1);
        CHECK(ra.log[e].l_total == rb.log[e].l_total);
        CHECK(ra.log[e].l_percept == rb.log[e].l_percept);
    }
    CHECK(params_equal(cast_params<double>(a.params), cast_params<double>(b.params)));
    CHECK(a.step == 3 * 2); // 10 samples, batches of 4
    CHECK(bb.parameter_hash() == hash);

    const auto line = format_epoch_log(ra.log[0]);
    CHECK(line.rfind("epoch=1 L_percept=", 0) == 0);
    CHECK(line.find(" wall_seconds=") != std::string::npos);

    // a different seed gives a different trajectory
    auto c = init_state<float>(cfg, bcfg);
    auto other = cfg;
    other.seed = 18;
    fit(bb, c, samples, other);
    CHECK_FALSE(params_equal(cast_params<double>(a.params), cast_params<double>(c.params)));
}

TEST_CASE("fit edge cases") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg);
    auto cfg = small_train_config(bcfg);
    const auto samples = testing::synthetic_samples(7, 6, 3, bcfg);

    auto zero = cfg;
    zero.epochs = 0;
    auto s = init_state<float>(zero, bcfg);
    CHECK(fit(bb, s, samples, zero).log.empty());
    CHECK(s.step == 0);

    auto wrong_crop = cfg;
    wrong_crop.crop_size = 224;
    CHECK_THROWS_AS(fit(bb, s, samples, wrong_crop), ConfigError);
    CHECK_THROWS_AS(fit(bb, s, std::vector<TrainingSample>{}, cfg), ConfigError);

    auto missing = samples;
    missing[2].g_align.reset();
    CHECK_THROWS_AS(fit(bb, s, missing, cfg), ConfigError);
}

TEST_CASE("state checkpoints round trip and reject mismatches") {
    testing::TempDir dir;
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg);
    auto cfg = small_train_config(bcfg);
    auto state = init_state<float>(cfg, bcfg);
    fit(bb, state, testing::synthetic_samples(7, 6, 3, bcfg), cfg);

    StateMetadata meta{cfg, bcfg, bb.parameter_hash(), TargetNormalizer{{1.0, 5.0}, MinMaxNormalizer{0.0, 4.0}}};
    save_state(dir / "s.ckpt", state, meta);
    const auto loaded = load_state(dir / "s.ckpt", shape_fingerprint(cfg, bcfg));
    const auto back = cast_state<float>(loaded.state);
    CHECK(back.step == state.step);
    CHECK(params_equal(cast_params<double>(back.params), cast_params<double>(state.params)));
    CHECK(params_equal(cast_params<double>(back.adam_m), cast_params<double>(state.adam_m)));
    CHECK(params_equal(cast_params<double>(back.adam_v), cast_params<double>(state.adam_v)));
    CHECK(loaded.meta.backbone_hash == bb.parameter_hash());
    CHECK(loaded.meta.backbone == bcfg);
    CHECK(loaded.meta.train.to_json() == cfg.to_json());
    REQUIRE(loaded.meta.normalizer.has_value());
    CHECK(loaded.meta.normalizer->percept.max == 5.0);
    CHECK(loaded.meta.normalizer->align->max == 4.0);

    // resuming from the checkpoint matches continuing in memory
    const auto batch = testing::make_batch(testing::synthetic_samples(9, 4, 2, bcfg), cfg);
    auto resumed = back;
    train_step(bb, state, batch, cfg);
    train_step(bb, resumed, batch, cfg);
    CHECK(params_equal(cast_params<double>(resumed.params), cast_params<double>(state.params)));

    SUBCASE("shape mismatch names the field") {
        auto other = cfg;
        other.prompt_length = 3;
        try {
            load_state(dir / "s.ckpt", shape_fingerprint(other, bcfg));
            FAIL("expected a mismatch");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("prompt_length") != std::string::npos);
            CHECK(msg.find("checkpoint has 2") != std::string::npos);
        }
        auto flags = cfg;
        flags.ablation.conditioning = false;
        CHECK_THROWS_AS(load_state(dir / "s.ckpt", shape_fingerprint(flags, bcfg)), ConfigError);
    }
    SUBCASE("truncated file") {
        std::ifstream in(dir / "s.ckpt", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
        bytes.resize(bytes.size() - 7);
        std::ofstream(dir / "cut.ckpt", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        CHECK_THROWS_AS(load_state(dir / "cut.ckpt"), FormatError);
    }
    SUBCASE("missing and reshaped tensors") {
        auto file = read_tensor_file(dir / "s.ckpt");
        auto dropped = file;
        dropped.tensors.erase(dropped.tensors.begin());
        write_tensor_file(dir / "drop.ckpt", dropped);
        CHECK_THROWS_AS(load_state(dir / "drop.ckpt"), FormatError);

        auto reshaped = file;
        reshaped.tensors[0].rows = 1;
        reshaped.tensors[0].values.resize(reshaped.tensors[0].cols);
        write_tensor_file(dir / "shape.ckpt", reshaped);
        CHECK_THROWS_AS(load_state(dir / "shape.ckpt"), ShapeMismatchError);

        auto extra = file;
        extra.tensors.push_back(NamedTensor::from_matrix("param.stray.0", Matrix<float>(1, 1), DType::f32));
        write_tensor_file(dir / "extra.ckpt", extra);
        CHECK_THROWS_AS(load_state(dir / "extra.ckpt"), FormatError);
    }
    SUBCASE("a backbone file is not a state") {
        save_backbone(bb, dir / "bb.ckpt");
        CHECK_THROWS_AS(load_state(dir / "bb.ckpt"), FormatError);
    }
}

TEST_CASE("crop scoring") {
    const auto bcfg = testing::small_config();
    const auto bb = make_toy_backbone(3, bcfg);
    auto cfg = small_train_config(bcfg);
    const auto params = init_state<float>(cfg, bcfg).params;
    const auto head = prepare_head(bb, percept_head(params, cfg));
    Image big(48, 40);
    Rng rng(1);
    for (auto& p : big.pixels) p = static_cast<float>(rng.uniform());

    const double a = score_crops(bb, big, head, bcfg.image_size, 5, 3, "x.png");
    CHECK(a == score_crops(bb, big, head, bcfg.image_size, 5, 3, "x.png"));
    CHECK(a != score_crops(bb, big, head, bcfg.image_size, 5, 3, "y.png"));

    // the mean over crops lies within the single-crop extremes
    Rng crop_rng(derive_seed(3, "eval.crop.x.png"));
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double q = score_image(bb, sample_crop(big, bcfg.image_size, crop_rng), head).value;
        lo = std::min(lo, q);
        hi = std::max(hi, q);
    }
    CHECK(a >= lo - 1e-7);
    CHECK(a <= hi + 1e-7);

    // an image of exactly the crop size has a single crop
    Image exact(bcfg.image_size, bcfg.image_size, 0.4f);
    CHECK(score_crops(bb, exact, head, bcfg.image_size, 1, 3, "e") == doctest::Approx(score_image(bb, exact, head).value).epsilon(1e-7));
    CHECK_THROWS_AS(score_crops(bb, exact, head, bcfg.image_size, 0, 3, "e"), ConfigError);
}
