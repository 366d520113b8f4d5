#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <unistd.h>

namespace testing {

vlq::BackboneConfig small_config() {
    vlq::BackboneConfig cfg;
    cfg.num_layers = 2;
    cfg.vision_width = cfg.text_width = cfg.joint_dim = 16;
    cfg.vision_heads = cfg.text_heads = 2;
    return cfg;
}

oracle::Table to_table(const vlq::Backbone<float>& backbone) {
    oracle::Table t;
    backbone.weights().for_each([&](const std::string& name, const vlq::Matrix<float>& m) { t[name] = to_tensor(m); });
    return t;
}

oracle::Dims dims_of(const vlq::BackboneConfig& cfg) {
    oracle::Dims d;
    d.layers = cfg.num_layers;
    d.vision_heads = cfg.vision_heads;
    d.text_heads = cfg.text_heads;
    d.image_size = cfg.image_size;
    d.patch_side = cfg.patch_side();
    d.causal_text = cfg.causal_text;
    for (std::size_t c = 0; c < 3; ++c) {
        d.mean[c] = cfg.pixel_mean[c];
        d.std[c] = cfg.pixel_std[c];
    }
    return d;
}

oracle::Picture to_picture(const vlq::Image& image) { return {image.width, image.pixels}; }

std::vector<vlq::TrainingSample> synthetic_samples(std::uint64_t seed, std::size_t n, std::size_t groups,
                                                   const vlq::BackboneConfig& cfg) {
    const auto data = vlq::make_synthetic_dataset(seed, n, groups, cfg.image_size);
    std::vector<double> p, a;
    for (const auto& s : data) {
        p.push_back(s.record.mos_percept);
        a.push_back(*s.record.mos_align);
    }
    const auto np = vlq::MinMaxNormalizer::fit(p);
    const auto na = vlq::MinMaxNormalizer::fit(a);
    std::vector<vlq::TrainingSample> out;
    for (const auto& s : data) {
        out.push_back({s.image, vlq::normalize_target(s.record.mos_percept, np),
                       vlq::normalize_target(*s.record.mos_align, na), s.record.user_prompt});
    }
    return out;
}

vlq::Batch make_batch(const std::vector<vlq::TrainingSample>& samples, const vlq::TrainConfig& cfg) {
    vlq::Batch b;
    for (const auto& s : samples) {
        b.images.push_back(s.image);
        b.g_percept.push_back(s.g_percept);
        if (cfg.ablation.auxiliary_task) b.g_align.push_back(*s.g_align);
        if (cfg.ablation.auxiliary_task && cfg.alignment_mode == vlq::AlignmentMode::text_conditioned)
            b.user_prompts.push_back(*s.user_prompt);
    }
    return b;
}

double rel_err(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

TempDir::TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vlq_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

} // namespace testing
