#pragma once

// Joint optimization of the two tasks' prompts and the couplers over a frozen
// backbone.
//
//   L_percept = mean (q_percept - g_percept)^2
//   L_align   = mean (q_align   - g_align)^2
//   L         = L_percept + lambda * L_align
//
// Gradients are derived by hand: every backbone block is run backwards for
// its input gradient only, so no backbone tensor is ever written.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlq/backbone.hpp"
#include "vlq/conditioning.hpp"
#include "vlq/data.hpp"
#include "vlq/prompted.hpp"
#include "vlq/scoring.hpp"

namespace vlq {

struct AblationFlags {
    bool textual_prompts = true;
    bool visual_prompts = true;
    bool conditioning = true;
    bool auxiliary_task = true;

    friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

enum class AlignmentMode { blind, text_conditioned };

std::string to_string(AlignmentMode mode);
AlignmentMode parse_alignment_mode(const std::string& tag);

struct TrainConfig {
    std::size_t prompt_length = 8;
    double lambda = 0.1;
    double learning_rate = 1e-4;
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    std::size_t crop_size = 224;
    std::uint64_t seed = 0;
    AblationFlags ablation;
    AlignmentMode alignment_mode = AlignmentMode::blind;
    double temperature = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    AntonymPair percept_pair = AntonymPair::defaults(TaskTag::percept);
    AntonymPair align_pair = AntonymPair::defaults(TaskTag::align);

    void validate() const;
    nlohmann::json to_json() const;
    // Missing keys keep their defaults; unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json& j);

    // Which tensor groups exist under the ablation flags.
    bool has_percept_textual() const { return ablation.textual_prompts; }
    bool has_percept_visual() const { return ablation.visual_prompts; }
    bool has_couplers() const { return ablation.visual_prompts && ablation.conditioning; }
    bool has_align_visual() const {
        return ablation.visual_prompts && (ablation.conditioning || ablation.auxiliary_task);
    }
    bool has_align_textual() const {
        return ablation.textual_prompts && ablation.auxiliary_task && alignment_mode == AlignmentMode::blind;
    }
};

// Shape-affecting fields only; two configs with equal fingerprints produce
// interchangeable state tensors.
nlohmann::json shape_fingerprint(const TrainConfig& cfg, const BackboneConfig& backbone);

template <typename T>
struct TrainableParams {
    PromptSet<T> percept;
    PromptSet<T> align;
    CouplerStack<T> couplers;

    // Fixed order: percept.textual.i, percept.visual.i, align.textual.i,
    // align.visual.i, coupler.weight.i, coupler.bias.i.
    template <typename F>
    void for_each(F&& fn) {
        visit(*this, fn);
    }
    template <typename F>
    void for_each(F&& fn) const {
        visit(*this, fn);
    }

    std::size_t parameter_count() const;

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& fn) {
        auto list = [&](const std::string& prefix, auto& mats) {
            for (std::size_t i = 0; i < mats.size(); ++i) fn(prefix + std::to_string(i), mats[i]);
        };
        list("percept.textual.", self.percept.textual);
        list("percept.visual.", self.percept.visual);
        list("align.textual.", self.align.textual);
        list("align.visual.", self.align.visual);
        list("coupler.weight.", self.couplers.weights);
        list("coupler.bias.", self.couplers.biases);
    }
};

// Same layout as `p` with every entry zero.
template <typename T>
TrainableParams<T> zeros_like(const TrainableParams<T>& p);

template <typename T>
struct TrainableState {
    TrainableParams<T> params;
    TrainableParams<T> adam_m;
    TrainableParams<T> adam_v;
    std::uint64_t step = 0;
};

template <typename T>
TrainableState<T> init_state(const TrainConfig& cfg, const BackboneConfig& backbone);

// One training example after cropping. Targets are already normalized.
struct TrainingSample {
    Image image;
    double g_percept = 0.0;
    std::optional<double> g_align;
    std::optional<std::string> user_prompt;
};

struct Batch {
    std::vector<Image> images;
    std::vector<double> g_percept;
    std::vector<double> g_align; // empty when the auxiliary task is off
    std::vector<std::string> user_prompts; // text-conditioned mode only

    std::size_t size() const { return images.size(); }
    void validate(const TrainConfig& cfg) const;
};

double loss_align(const std::vector<double>& predictions, const std::vector<double>& targets);
double loss_percept(const std::vector<double>& predictions, const std::vector<double>& targets);
double loss_total(double l_percept, double l_align, double lambda);

struct LossBreakdown {
    double percept = 0.0;
    double align = 0.0;
    double total = 0.0;
};

// Task heads resolved from the parameters (percept visual prompts conditioned).
template <typename T>
TaskHead<T> percept_head(const TrainableParams<T>& params, const TrainConfig& cfg);
template <typename T>
TaskHead<T> align_head(const TrainableParams<T>& params, const TrainConfig& cfg);

// Loss over a batch without gradients.
template <typename T>
LossBreakdown evaluate_loss(const Backbone<T>& backbone, const TrainableParams<T>& params, const Batch& batch,
                            const TrainConfig& cfg);

// Loss and gradient of L with respect to every trainable tensor. Samples are
// processed in parallel and reduced in sample order, so the result does not
// depend on the thread count.
template <typename T>
LossBreakdown compute_gradients(const Backbone<T>& backbone, const TrainableParams<T>& params, const Batch& batch,
                                const TrainConfig& cfg, TrainableParams<T>& grads);

// One Adam step. Throws NumericalError (state untouched) on a non-finite loss
// or gradient.
template <typename T>
LossBreakdown train_step(const Backbone<T>& backbone, TrainableState<T>& state, const Batch& batch,
                         const TrainConfig& cfg);

struct EpochLog {
    std::size_t epoch = 0;
    double l_percept = 0.0;
    double l_align = 0.0;
    double l_total = 0.0;
    double wall_seconds = 0.0;
};

std::string format_epoch_log(const EpochLog& log);

using EpochCallback = std::function<void(const EpochLog&)>;

struct FitResult {
    std::vector<EpochLog> log;
};

// Each epoch shuffles the samples, cuts them into batches of batch_size (the
// last one may be short) and draws one random crop per sample.
template <typename T>
FitResult fit(const Backbone<T>& backbone, TrainableState<T>& state, const std::vector<TrainingSample>& samples,
              const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Loads and normalizes images for `records`. Images are resolved relative to
// the manifest directory.
std::vector<TrainingSample> load_samples(const std::vector<SampleRecord>& records,
                                         const std::filesystem::path& manifest_path,
                                         const TargetNormalizer& normalizer, bool need_align);

// Mean perceptual (or alignment) score over `crops` seeded random crops. The
// crop stream for an image is keyed by `key` so that different commands
// scoring the same image draw the same crops.
template <typename T>
double score_crops(const Backbone<T>& backbone, const Image& image, const PreparedHead<T>& head,
                   std::size_t crop_size, std::size_t crops, std::uint64_t seed, const std::string& key);

template <typename T>
double score_crops_text_conditioned(const Backbone<T>& backbone, const Image& image, const TaskHead<T>& head,
                                    const std::string& user_prompt, std::size_t crop_size, std::size_t crops,
                                    std::uint64_t seed, const std::string& key);

inline constexpr int kStateFormatVersion = 1;

struct StateMetadata {
    TrainConfig train;
    BackboneConfig backbone;
    std::uint64_t backbone_hash = 0;
    std::optional<TargetNormalizer> normalizer;
};

template <typename T>
void save_state(const std::filesystem::path& path, const TrainableState<T>& state, const StateMetadata& meta);

struct LoadedState {
    TrainableState<double> state;
    StateMetadata meta;
};

// With `expected`, every shape-affecting field is compared and the first
// difference is reported by name.
LoadedState load_state(const std::filesystem::path& path, const std::optional<nlohmann::json>& expected = {});

template <typename U, typename T>
TrainableParams<U> cast_params(const TrainableParams<T>& p) {
    return {p.percept.template cast<U>(), p.align.template cast<U>(), p.couplers.template cast<U>()};
}

template <typename U, typename T>
TrainableState<U> cast_state(const TrainableState<T>& s) {
    return {cast_params<U>(s.params), cast_params<U>(s.adam_m), cast_params<U>(s.adam_v), s.step};
}

} // namespace vlq
