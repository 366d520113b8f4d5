#include <doctest.h>

#include <cmath>
#include <limits>

#include "support.hpp"
#include "vlq/rng.hpp"
#include "vlq/scoring.hpp"

using namespace vlq;

TEST_CASE("pair score worked examples") {
    // a logit gap of ln 8 gives 8/9
    CHECK(pair_score(0.5, -0.5, std::log(8.0)) == doctest::Approx(8.0 / 9.0).epsilon(1e-14));
    CHECK(pair_score(0.3, -0.2) == doctest::Approx(0.622459331201854).epsilon(1e-12));
    CHECK(pair_score(0.3, -0.2) == doctest::Approx(oracle::softmax_first(0.3, -0.2)).epsilon(1e-14));
    CHECK(pair_score(0.4, 0.4) == 0.5);
    CHECK(pair_score(-1.0, -1.0) == 0.5);
}

TEST_CASE("pair score properties") {
    Rng rng(1);
    const double lo = 1.0 / (1.0 + std::exp(2.0));
    const double hi = 1.0 / (1.0 + std::exp(-2.0));
    for (int i = 0; i < 1000; ++i) {
        const double a = 2 * rng.uniform() - 1;
        const double b = 2 * rng.uniform() - 1;
        const double q = pair_score(a, b);
        CHECK(q + pair_score(b, a) == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(q >= lo);
        CHECK(q <= hi);
        CHECK(q == doctest::Approx(oracle::softmax_first(a, b)).epsilon(1e-13));
        const double a2 = std::min(1.0, a + 0.01);
        CHECK(pair_score(a2, b) >= q);
        CHECK(pair_score(a, std::min(1.0, b + 0.01)) <= q);
    }
    CHECK(pair_score(1.0, -1.0) == doctest::Approx(hi));
    CHECK(pair_score(-1.0, 1.0) == doctest::Approx(lo));
    CHECK_THROWS_AS(pair_score(std::nan(""), 0.0), NumericalError);
    CHECK_THROWS_AS(pair_score(0.0, std::numeric_limits<double>::infinity()), NumericalError);
}

TEST_CASE("pair score slope matches a difference quotient") {
    for (double t : {1.0, 2.5}) {
        const double q = pair_score(0.2, -0.1, t);
        const double h = 1e-6;
        const double fd = (pair_score(0.2 + h, -0.1, t) - pair_score(0.2 - h, -0.1, t)) / (2 * h);
        CHECK(pair_score_slope(q, t) == doctest::Approx(fd).epsilon(1e-8));
    }
}

TEST_CASE("cosine similarity and its gradient") {
    std::vector<double> x{1, 2, 3}, z{-1, 0.5, 2};
    const double c = cosine_similarity<double>(x, z);
    CHECK(c == doctest::Approx(oracle::cosine(x, z)).epsilon(1e-14));
    std::vector<double> x3{3, 6, 9};
    CHECK(cosine_similarity<double>(x3, z) == doctest::Approx(c).epsilon(1e-14));
    CHECK(cosine_similarity<double>(x, x) == doctest::Approx(1.0));

    std::vector<double> dx(3, 0.0), dz(3, 0.0);
    cosine_similarity_backward<double>(x, z, 1.0, dx, dz);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 3; ++i) {
        auto xp = x, xm = x, zp = z, zm = z;
        xp[i] += h;
        xm[i] -= h;
        zp[i] += h;
        zm[i] -= h;
        CHECK(dx[i] == doctest::Approx((cosine_similarity<double>(xp, z) - cosine_similarity<double>(xm, z)) / (2 * h)).epsilon(1e-7));
        CHECK(dz[i] == doctest::Approx((cosine_similarity<double>(x, zp) - cosine_similarity<double>(x, zm)) / (2 * h)).epsilon(1e-7));
    }

    std::vector<double> zero(3, 0.0), shorter(2, 1.0);
    CHECK_THROWS_AS(cosine_similarity<double>(x, zero), NumericalError);
    CHECK_THROWS_AS(cosine_similarity<double>(x, shorter), DimensionError);
}

TEST_CASE("scores are invariant to positive rescaling of representations") {
    Rng rng(3);
    std::vector<double> x(8), p(8), n(8);
    for (std::size_t i = 0; i < 8; ++i) {
        x[i] = rng.normal();
        p[i] = rng.normal();
        n[i] = rng.normal();
    }
    const double q = score_representations<double>(x, p, n);
    for (auto& v : x) v *= 7.5;
    for (auto& v : p) v *= 0.01;
    CHECK(score_representations<double>(x, p, n) == doctest::Approx(q).epsilon(1e-13));
    // identical antonym encodings carry no information
    CHECK(score_representations<double>(x, p, p) == 0.5);
}

TEST_CASE("score_image follows the definition") {
    const auto cfg = testing::small_config();
    const auto bb = make_toy_backbone(2, cfg).cast<double>();
    Image img(cfg.image_size, cfg.image_size, 0.3f);
    TaskHead<double> head;
    head.pair = AntonymPair::defaults(TaskTag::percept);
    const auto q = score_image(bb, img, head);
    const auto x = bb.encode_image(img);
    const auto zp = bb.encode_text(bb.tokenize("Good photo."));
    const auto zn = bb.encode_text(bb.tokenize("Bad photo."));
    CHECK(q.task == TaskTag::percept);
    CHECK(q.value == doctest::Approx(oracle::softmax_first(oracle::cosine(x, zp), oracle::cosine(x, zn))).epsilon(1e-12));
    const auto prepared = prepare_head(bb, head);
    CHECK(score_image(bb, img, prepared).value == q.value);
}

TEST_CASE("antonym pair defaults and validation") {
    const auto p = AntonymPair::defaults(TaskTag::percept);
    CHECK(p.positive == "Good photo.");
    CHECK(p.negative == "Bad photo.");
    const auto a = AntonymPair::defaults(TaskTag::align);
    CHECK(a.positive == "Aligned photo.");
    CHECK(a.negative == "Misaligned photo.");
    AntonymPair bad{"", "Bad photo.", TaskTag::percept};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("text-conditioned alignment score") {
    CHECK(logistic(0.0) == 0.5);
    CHECK(logistic(1.0) == doctest::Approx(0.731058578630005).epsilon(1e-12));
    CHECK(logistic(-1.0) == doctest::Approx(0.268941421369995).epsilon(1e-12));
    CHECK_THROWS_AS(logistic(std::nan("")), NumericalError);

    const auto cfg = testing::small_config();
    const auto bb = make_toy_backbone(2, cfg).cast<double>();
    Image img(cfg.image_size, cfg.image_size, 0.6f);
    const auto ids = bb.tokenize("a red cube");
    const auto q = score_alignment_text_conditioned(bb, img, std::span<const int>(ids), std::span<const Matrix<double>>());
    CHECK(q.task == TaskTag::align);
    const double expect = 1.0 / (1.0 + std::exp(-oracle::cosine(bb.encode_image(img), bb.encode_text(ids))));
    CHECK(q.value == doctest::Approx(expect).epsilon(1e-12));
    CHECK(q.value > logistic(-1.0));
    CHECK(q.value < logistic(1.0));

    const auto empty = bb.tokenize("");
    CHECK_THROWS_AS(score_alignment_text_conditioned(bb, img, std::span<const int>(empty), std::span<const Matrix<double>>()),
                    ConfigError);
}
