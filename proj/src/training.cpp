#include "vlq/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <set>

#include "vlq/container.hpp"
#include "vlq/error.hpp"
#include "vlq/rng.hpp"

namespace vlq {

std::string to_string(AlignmentMode mode) {
    return mode == AlignmentMode::blind ? "blind" : "text_conditioned";
}

AlignmentMode parse_alignment_mode(const std::string& tag) {
    if (tag == "blind") return AlignmentMode::blind;
    if (tag == "text_conditioned") return AlignmentMode::text_conditioned;
    throw ConfigError("unknown alignment mode '" + tag + "' (expected blind or text_conditioned)");
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (crop_size < 1) throw ConfigError("crop_size must be >= 1");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    percept_pair.validate();
    align_pair.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {
        {"prompt_length", prompt_length},
        {"lambda", lambda},
        {"learning_rate", learning_rate},
        {"epochs", epochs},
        {"batch_size", batch_size},
        {"crop_size", crop_size},
        {"seed", seed},
        {"textual_prompts", ablation.textual_prompts},
        {"visual_prompts", ablation.visual_prompts},
        {"conditioning", ablation.conditioning},
        {"auxiliary_task", ablation.auxiliary_task},
        {"alignment_mode", to_string(alignment_mode)},
        {"temperature", temperature},
        {"adam_beta1", adam_beta1},
        {"adam_beta2", adam_beta2},
        {"adam_eps", adam_eps},
        {"percept_positive", percept_pair.positive},
        {"percept_negative", percept_pair.negative},
        {"align_positive", align_pair.positive},
        {"align_negative", align_pair.negative},
    };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("train config must be a JSON object");
    }
    TrainConfig c;
    const std::set<std::string> known = {
        "prompt_length", "lambda", "learning_rate", "epochs", "batch_size", "crop_size", "seed",
        "textual_prompts", "visual_prompts", "conditioning", "auxiliary_task", "alignment_mode",
        "temperature", "adam_beta1", "adam_beta2", "adam_eps", "percept_positive", "percept_negative",
        "align_positive", "align_negative"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
    }
    try {
        auto take = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        take("prompt_length", c.prompt_length);
        take("lambda", c.lambda);
        take("learning_rate", c.learning_rate);
        take("epochs", c.epochs);
        take("batch_size", c.batch_size);
        take("crop_size", c.crop_size);
        take("seed", c.seed);
        take("textual_prompts", c.ablation.textual_prompts);
        take("visual_prompts", c.ablation.visual_prompts);
        take("conditioning", c.ablation.conditioning);
        take("auxiliary_task", c.ablation.auxiliary_task);
        if (j.contains("alignment_mode")) c.alignment_mode = parse_alignment_mode(j.at("alignment_mode"));
        take("temperature", c.temperature);
        take("adam_beta1", c.adam_beta1);
        take("adam_beta2", c.adam_beta2);
        take("adam_eps", c.adam_eps);
        take("percept_positive", c.percept_pair.positive);
        take("percept_negative", c.percept_pair.negative);
        take("align_positive", c.align_pair.positive);
        take("align_negative", c.align_pair.negative);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    return c;
}

nlohmann::json shape_fingerprint(const TrainConfig& cfg, const BackboneConfig& backbone) {
    return {
        {"prompt_length", cfg.prompt_length},
        {"textual_prompts", cfg.ablation.textual_prompts},
        {"visual_prompts", cfg.ablation.visual_prompts},
        {"conditioning", cfg.ablation.conditioning},
        {"auxiliary_task", cfg.ablation.auxiliary_task},
        {"alignment_mode", to_string(cfg.alignment_mode)},
        {"num_layers", backbone.num_layers},
        {"vision_width", backbone.vision_width},
        {"text_width", backbone.text_width},
        {"joint_dim", backbone.joint_dim},
    };
}

template <typename T>
std::size_t TrainableParams<T>::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
    return n;
}

template <typename T>
TrainableParams<T> zeros_like(const TrainableParams<T>& p) {
    TrainableParams<T> z = p;
    z.for_each([](const std::string&, Matrix<T>& m) { m.fill(T(0)); });
    return z;
}

template <typename T>
TrainableState<T> init_state(const TrainConfig& cfg, const BackboneConfig& backbone) {
    cfg.validate();
    TrainableState<T> s;
    const std::uint64_t seed = derive_seed(cfg.seed, "prompts");
    s.params.percept = make_prompt_set<T>(seed, TaskTag::percept, cfg.prompt_length, backbone,
                                          cfg.has_percept_textual(), cfg.has_percept_visual());
    s.params.align = make_prompt_set<T>(seed, TaskTag::align, cfg.prompt_length, backbone,
                                        cfg.has_align_textual(), cfg.has_align_visual());
    if (cfg.has_couplers()) {
        s.params.couplers = make_identity_couplers<T>(backbone.num_layers, backbone.vision_width);
    }
    s.adam_m = zeros_like(s.params);
    s.adam_v = zeros_like(s.params);
    return s;
}

void Batch::validate(const TrainConfig& cfg) const {
    if (images.empty()) {
        throw ConfigError("batch is empty");
    }
    if (g_percept.size() != images.size()) {
        throw DimensionError("batch: perceptual targets do not match image count");
    }
    if (cfg.ablation.auxiliary_task && g_align.size() != images.size()) {
        throw DimensionError("batch: alignment targets do not match image count");
    }
    if (cfg.ablation.auxiliary_task && cfg.alignment_mode == AlignmentMode::text_conditioned &&
        user_prompts.size() != images.size()) {
        throw DimensionError("batch: text-conditioned alignment needs one user prompt per image");
    }
    for (double g : g_percept) {
        if (!std::isfinite(g)) throw NumericalError("batch: non-finite perceptual target");
    }
    for (double g : g_align) {
        if (!std::isfinite(g)) throw NumericalError("batch: non-finite alignment target");
    }
}

namespace {

double mse(const std::vector<double>& predictions, const std::vector<double>& targets, const char* what) {
    if (predictions.size() != targets.size()) {
        throw DimensionError(std::string(what) + ": " + std::to_string(predictions.size()) + " predictions vs " +
                             std::to_string(targets.size()) + " targets");
    }
    if (predictions.empty()) {
        throw DimensionError(std::string(what) + ": empty input");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - targets[i];
        acc += d * d;
    }
    return acc / static_cast<double>(predictions.size());
}

} // namespace

double loss_align(const std::vector<double>& p, const std::vector<double>& g) { return mse(p, g, "loss_align"); }
double loss_percept(const std::vector<double>& p, const std::vector<double>& g) { return mse(p, g, "loss_percept"); }

double loss_total(double l_percept, double l_align, double lambda) {
    if (!std::isfinite(l_percept) || !std::isfinite(l_align) || !std::isfinite(lambda) || lambda < 0.0) {
        throw NumericalError("loss_total: non-finite input or negative lambda");
    }
    return l_percept + lambda * l_align;
}

template <typename T>
TaskHead<T> percept_head(const TrainableParams<T>& params, const TrainConfig& cfg) {
    TaskHead<T> h;
    h.task = TaskTag::percept;
    h.pair = cfg.percept_pair;
    h.textual = params.percept.textual;
    h.visual = params.couplers.empty()
                   ? params.percept.visual
                   : condition_prompts(params.couplers, std::span<const Matrix<T>>(params.align.visual),
                                       std::span<const Matrix<T>>(params.percept.visual));
    h.temperature = static_cast<T>(cfg.temperature);
    return h;
}

template <typename T>
TaskHead<T> align_head(const TrainableParams<T>& params, const TrainConfig& cfg) {
    TaskHead<T> h;
    h.task = TaskTag::align;
    h.pair = cfg.align_pair;
    h.textual = params.align.textual;
    h.visual = params.align.visual;
    h.temperature = static_cast<T>(cfg.temperature);
    return h;
}

namespace {

template <typename T>
struct TextSide {
    std::vector<T> z;
    EncoderTrace<T> trace;
};

template <typename T>
TextSide<T> encode_side(const Backbone<T>& backbone, const std::string& text, const std::vector<Matrix<T>>& prompts,
                        bool with_trace) {
    TextSide<T> s;
    const auto ids = backbone.tokenize(text);
    s.z = encode_text_prompted(backbone, std::span<const int>(ids), std::span<const Matrix<T>>(prompts),
                               with_trace ? &s.trace : nullptr);
    return s;
}

template <typename T>
struct SampleResult {
    double q_percept = 0.0;
    double q_align = 0.0;
    std::vector<Matrix<T>> d_vis_percept;
    std::vector<Matrix<T>> d_vis_align;
    std::vector<T> dz_ppos, dz_pneg, dz_apos, dz_aneg;
};

template <typename T>
std::vector<Matrix<T>> zero_list(const std::vector<Matrix<T>>& like) {
    std::vector<Matrix<T>> out;
    out.reserve(like.size());
    for (const auto& m : like) out.push_back(zeros_like(m));
    return out;
}

template <typename T>
void add_vec(std::vector<T>& acc, const std::vector<T>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
}

// Runs the batch forward and, if `grads` is non-null, backward. `grads` must
// have the layout of `params` and is overwritten.
template <typename T>
LossBreakdown run_batch(const Backbone<T>& backbone, const TrainableParams<T>& params, const Batch& batch,
                        const TrainConfig& cfg, TrainableParams<T>* grads) {
    batch.validate(cfg);
    const bool want_grad = grads != nullptr;
    const bool aux = cfg.ablation.auxiliary_task;
    const bool text_cond = cfg.alignment_mode == AlignmentMode::text_conditioned;
    const std::size_t n = batch.size();
    const T tau = static_cast<T>(cfg.temperature);

    const TaskHead<T> ph = percept_head(params, cfg);
    const TaskHead<T> ah = align_head(params, cfg);

    // Antonym encodings do not depend on the image: one forward per step.
    const auto p_pos = encode_side(backbone, ph.pair.positive, ph.textual, want_grad);
    const auto p_neg = encode_side(backbone, ph.pair.negative, ph.textual, want_grad);
    TextSide<T> a_pos, a_neg;
    if (aux && !text_cond) {
        a_pos = encode_side(backbone, ah.pair.positive, ah.textual, want_grad);
        a_neg = encode_side(backbone, ah.pair.negative, ah.textual, want_grad);
    }

    std::vector<SampleResult<T>> results(n);
    std::exception_ptr failure;
    const T inv_n = T(1) / static_cast<T>(n);
    const T lambda = static_cast<T>(cfg.lambda);

#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t i = 0; i < n; ++i) {
        try {
            auto& r = results[i];
            const auto embedded = backbone.embed_patches(batch.images[i]);

            EncoderTrace<T> trace_p;
            const auto x_p = encode_image_prompted(backbone, embedded, std::span<const Matrix<T>>(ph.visual),
                                                   want_grad ? &trace_p : nullptr);
            const T sp = cosine_similarity<T>(x_p, p_pos.z);
            const T sn = cosine_similarity<T>(x_p, p_neg.z);
            const T q_p = pair_score(sp, sn, tau);
            r.q_percept = static_cast<double>(q_p);

            if (want_grad) {
                const T dq = T(2) * (q_p - static_cast<T>(batch.g_percept[i])) * inv_n;
                const T ds = dq * pair_score_slope(q_p, tau);
                std::vector<T> dx(x_p.size(), T(0));
                r.dz_ppos.assign(x_p.size(), T(0));
                r.dz_pneg.assign(x_p.size(), T(0));
                cosine_similarity_backward<T>(x_p, p_pos.z, ds, dx, r.dz_ppos);
                cosine_similarity_backward<T>(x_p, p_neg.z, -ds, dx, r.dz_pneg);
                if (!ph.visual.empty()) {
                    r.d_vis_percept = zero_list(ph.visual);
                    encode_image_backward(backbone, trace_p, std::span<const T>(dx),
                                          std::span<Matrix<T>>(r.d_vis_percept));
                }
            }

            if (aux) {
                EncoderTrace<T> trace_a;
                const auto x_a = encode_image_prompted(backbone, embedded, std::span<const Matrix<T>>(ah.visual),
                                                       want_grad ? &trace_a : nullptr);
                std::vector<T> dx(x_a.size(), T(0));
                T q_a;
                if (text_cond) {
                    const auto ids = backbone.tokenize(batch.user_prompts[i]);
                    if (ids.size() <= 2) {
                        throw ConfigError("text-conditioned alignment requires a non-empty user prompt");
                    }
                    const auto z_u = encode_text_raw(backbone, std::span<const int>(ids));
                    const T s = cosine_similarity<T>(x_a, z_u);
                    q_a = logistic(s);
                    if (want_grad) {
                        const T dq = lambda * T(2) * (q_a - static_cast<T>(batch.g_align[i])) * inv_n;
                        cosine_similarity_backward<T>(x_a, z_u, dq * q_a * (T(1) - q_a), dx, {});
                    }
                } else {
                    const T s1 = cosine_similarity<T>(x_a, a_pos.z);
                    const T s2 = cosine_similarity<T>(x_a, a_neg.z);
                    q_a = pair_score(s1, s2, tau);
                    if (want_grad) {
                        const T dq = lambda * T(2) * (q_a - static_cast<T>(batch.g_align[i])) * inv_n;
                        const T ds = dq * pair_score_slope(q_a, tau);
                        r.dz_apos.assign(x_a.size(), T(0));
                        r.dz_aneg.assign(x_a.size(), T(0));
                        cosine_similarity_backward<T>(x_a, a_pos.z, ds, dx, r.dz_apos);
                        cosine_similarity_backward<T>(x_a, a_neg.z, -ds, dx, r.dz_aneg);
                    }
                }
                r.q_align = static_cast<double>(q_a);
                if (want_grad && !ah.visual.empty()) {
                    r.d_vis_align = zero_list(ah.visual);
                    encode_image_backward(backbone, trace_a, std::span<const T>(dx),
                                          std::span<Matrix<T>>(r.d_vis_align));
                }
            }
        } catch (...) {
#pragma omp critical(vlq_run_batch_failure)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    std::vector<double> qp(n), qa;
    for (std::size_t i = 0; i < n; ++i) qp[i] = results[i].q_percept;
    LossBreakdown loss;
    loss.percept = loss_percept(qp, batch.g_percept);
    if (aux) {
        qa.resize(n);
        for (std::size_t i = 0; i < n; ++i) qa[i] = results[i].q_align;
        loss.align = loss_align(qa, batch.g_align);
    }
    if (!std::isfinite(loss.percept) || !std::isfinite(loss.align)) {
        throw NumericalError("non-finite loss (L_percept=" + std::to_string(loss.percept) +
                             ", L_align=" + std::to_string(loss.align) + ")");
    }
    loss.total = loss_total(loss.percept, loss.align, cfg.lambda);
    if (!want_grad) {
        return loss;
    }

    // Reduce in sample order.
    const std::size_t dj = backbone.config().joint_dim;
    std::vector<T> dz_ppos(dj, T(0)), dz_pneg(dj, T(0)), dz_apos(dj, T(0)), dz_aneg(dj, T(0));
    auto d_vis_p = zero_list(ph.visual);
    auto d_vis_a = zero_list(ah.visual);
    for (const auto& r : results) {
        add_vec(dz_ppos, r.dz_ppos);
        add_vec(dz_pneg, r.dz_pneg);
        add_vec(dz_apos, r.dz_apos);
        add_vec(dz_aneg, r.dz_aneg);
        for (std::size_t l = 0; l < r.d_vis_percept.size(); ++l) add_inplace(d_vis_p[l], r.d_vis_percept[l]);
        for (std::size_t l = 0; l < r.d_vis_align.size(); ++l) add_inplace(d_vis_a[l], r.d_vis_align[l]);
    }

    TrainableParams<T>& g = *grads;
    g = zeros_like(params);
    if (!ph.textual.empty()) {
        encode_text_backward(backbone, p_pos.trace, std::span<const T>(dz_ppos), std::span<Matrix<T>>(g.percept.textual));
        encode_text_backward(backbone, p_neg.trace, std::span<const T>(dz_pneg), std::span<Matrix<T>>(g.percept.textual));
    }
    if (aux && !text_cond && !ah.textual.empty()) {
        encode_text_backward(backbone, a_pos.trace, std::span<const T>(dz_apos), std::span<Matrix<T>>(g.align.textual));
        encode_text_backward(backbone, a_neg.trace, std::span<const T>(dz_aneg), std::span<Matrix<T>>(g.align.textual));
    }
    if (!params.couplers.empty()) {
        condition_prompts_backward(params.couplers, std::span<const Matrix<T>>(params.align.visual),
                                   std::span<const Matrix<T>>(params.percept.visual),
                                   std::span<const Matrix<T>>(d_vis_p), g.couplers,
                                   std::span<Matrix<T>>(g.align.visual), std::span<Matrix<T>>(g.percept.visual));
    } else {
        for (std::size_t l = 0; l < d_vis_p.size(); ++l) add_inplace(g.percept.visual[l], d_vis_p[l]);
    }
    for (std::size_t l = 0; l < d_vis_a.size(); ++l) add_inplace(g.align.visual[l], d_vis_a[l]);
    return loss;
}

} // namespace

template <typename T>
LossBreakdown evaluate_loss(const Backbone<T>& backbone, const TrainableParams<T>& params, const Batch& batch,
                            const TrainConfig& cfg) {
    return run_batch<T>(backbone, params, batch, cfg, nullptr);
}

template <typename T>
LossBreakdown compute_gradients(const Backbone<T>& backbone, const TrainableParams<T>& params, const Batch& batch,
                                const TrainConfig& cfg, TrainableParams<T>& grads) {
    return run_batch<T>(backbone, params, batch, cfg, &grads);
}

template <typename T>
LossBreakdown train_step(const Backbone<T>& backbone, TrainableState<T>& state, const Batch& batch,
                         const TrainConfig& cfg) {
    TrainableParams<T> grads;
    const LossBreakdown loss = compute_gradients(backbone, state.params, batch, cfg, grads);
    grads.for_each([&](const std::string& name, const Matrix<T>& g) {
        if (!all_finite(g.flat())) {
            throw NumericalError("non-finite gradient in '" + name + "' at step " + std::to_string(state.step + 1));
        }
    });

    const std::uint64_t t = state.step + 1;
    const double b1 = cfg.adam_beta1;
    const double b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));

    std::vector<Matrix<T>*> p, m, v;
    std::vector<const Matrix<T>*> gl;
    state.params.for_each([&](const std::string&, Matrix<T>& x) { p.push_back(&x); });
    state.adam_m.for_each([&](const std::string&, Matrix<T>& x) { m.push_back(&x); });
    state.adam_v.for_each([&](const std::string&, Matrix<T>& x) { v.push_back(&x); });
    grads.for_each([&](const std::string&, const Matrix<T>& x) { gl.push_back(&x); });
    if (m.size() != p.size() || v.size() != p.size() || gl.size() != p.size()) {
        throw DimensionError("train_step: optimizer state does not match parameters");
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
        auto pv = p[k]->flat();
        auto mv = m[k]->flat();
        auto vv = v[k]->flat();
        auto gv = gl[k]->flat();
        if (mv.size() != pv.size() || vv.size() != pv.size() || gv.size() != pv.size()) {
            throw DimensionError("train_step: optimizer buffer shape mismatch");
        }
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double g = static_cast<double>(gv[i]);
            const double mi = b1 * static_cast<double>(mv[i]) + (1.0 - b1) * g;
            const double vi = b2 * static_cast<double>(vv[i]) + (1.0 - b2) * g * g;
            mv[i] = static_cast<T>(mi);
            vv[i] = static_cast<T>(vi);
            const double update = cfg.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
            pv[i] = static_cast<T>(static_cast<double>(pv[i]) - update);
        }
    }
    state.step = t;
    return loss;
}

std::string format_epoch_log(const EpochLog& log) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "epoch=%zu L_percept=%.9g L_align=%.9g L=%.9g wall_seconds=%.3f", log.epoch,
                  log.l_percept, log.l_align, log.l_total, log.wall_seconds);
    return buf;
}

namespace {

void check_crop_size(std::size_t crop_size, const BackboneConfig& cfg) {
    if (crop_size != cfg.image_size) {
        throw ConfigError("crop_size " + std::to_string(crop_size) + " does not match the backbone input size " +
                          std::to_string(cfg.image_size));
    }
}

} // namespace

template <typename T>
FitResult fit(const Backbone<T>& backbone, TrainableState<T>& state, const std::vector<TrainingSample>& samples,
              const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    FitResult result;
    if (cfg.epochs == 0) {
        return result;
    }
    if (samples.empty()) {
        throw ConfigError("fit: training split is empty");
    }
    check_crop_size(cfg.crop_size, backbone.config());
    const bool aux = cfg.ablation.auxiliary_task;
    const bool text_cond = aux && cfg.alignment_mode == AlignmentMode::text_conditioned;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (aux && !samples[i].g_align) {
            throw ConfigError("fit: sample " + std::to_string(i) + " has no alignment target");
        }
        if (text_cond && (!samples[i].user_prompt || samples[i].user_prompt->empty())) {
            throw ConfigError("fit: sample " + std::to_string(i) + " has no user prompt");
        }
    }

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch." + std::to_string(epoch)));
        shuffle_rng.shuffle(order.begin(), order.end());

        double sum_p = 0.0, sum_a = 0.0, sum_t = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            Batch batch;
            batch.images.resize(end - begin);
#pragma omp parallel for schedule(static)
            for (std::size_t j = begin; j < end; ++j) {
                Rng crop_rng(derive_seed(cfg.seed, "crop." + std::to_string(epoch) + "." + std::to_string(order[j])));
                batch.images[j - begin] = sample_crop(samples[order[j]].image, cfg.crop_size, crop_rng);
            }
            for (std::size_t j = begin; j < end; ++j) {
                const auto& s = samples[order[j]];
                batch.g_percept.push_back(s.g_percept);
                if (aux) batch.g_align.push_back(*s.g_align);
                if (text_cond) batch.user_prompts.push_back(*s.user_prompt);
            }
            const LossBreakdown loss = train_step(backbone, state, batch, cfg);
            const double w = static_cast<double>(end - begin);
            sum_p += w * loss.percept;
            sum_a += w * loss.align;
            sum_t += w * loss.total;
        }
        const double n = static_cast<double>(samples.size());
        EpochLog log;
        log.epoch = epoch;
        log.l_percept = sum_p / n;
        log.l_align = sum_a / n;
        log.l_total = sum_t / n;
        log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return result;
}

std::vector<TrainingSample> load_samples(const std::vector<SampleRecord>& records,
                                         const std::filesystem::path& manifest_path,
                                         const TargetNormalizer& normalizer, bool need_align) {
    std::vector<TrainingSample> out(records.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t i = 0; i < records.size(); ++i) {
        try {
            const auto& r = records[i];
            auto& s = out[i];
            s.image = load_image(resolve_image_path(manifest_path, r));
            s.g_percept = normalize_target(r.mos_percept, normalizer.percept);
            if (r.mos_align && normalizer.align) {
                s.g_align = normalize_target(*r.mos_align, *normalizer.align);
            } else if (need_align) {
                throw ConfigError("record '" + r.image_path + "' has no alignment MOS");
            }
            s.user_prompt = r.user_prompt;
        } catch (...) {
#pragma omp critical(vlq_load_samples_failure)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    return out;
}

template <typename T>
double score_crops(const Backbone<T>& backbone, const Image& image, const PreparedHead<T>& head,
                   std::size_t crop_size, std::size_t crops, std::uint64_t seed, const std::string& key) {
    check_crop_size(crop_size, backbone.config());
    if (crops == 0) {
        throw ConfigError("eval_crops must be >= 1");
    }
    Rng rng(derive_seed(seed, "eval.crop." + key));
    double acc = 0.0;
    for (std::size_t c = 0; c < crops; ++c) {
        acc += score_image(backbone, sample_crop(image, crop_size, rng), head).value;
    }
    return acc / static_cast<double>(crops);
}

template <typename T>
double score_crops_text_conditioned(const Backbone<T>& backbone, const Image& image, const TaskHead<T>& head,
                                    const std::string& user_prompt, std::size_t crop_size, std::size_t crops,
                                    std::uint64_t seed, const std::string& key) {
    check_crop_size(crop_size, backbone.config());
    if (crops == 0) {
        throw ConfigError("eval_crops must be >= 1");
    }
    const auto ids = backbone.tokenize(user_prompt);
    Rng rng(derive_seed(seed, "eval.crop." + key));
    double acc = 0.0;
    for (std::size_t c = 0; c < crops; ++c) {
        acc += score_alignment_text_conditioned(backbone, sample_crop(image, crop_size, rng),
                                                std::span<const int>(ids), std::span<const Matrix<T>>(head.visual))
                   .value;
    }
    return acc / static_cast<double>(crops);
}

namespace {

constexpr const char* kStateKind = "vlq.trainable_state";

nlohmann::json normalizer_json(const TargetNormalizer& n) {
    nlohmann::json j = {{"percept", {n.percept.min, n.percept.max}}};
    if (n.align) j["align"] = {n.align->min, n.align->max};
    return j;
}

TargetNormalizer normalizer_from_json(const nlohmann::json& j) {
    TargetNormalizer n;
    n.percept = {j.at("percept").at(0).get<double>(), j.at("percept").at(1).get<double>()};
    if (j.contains("align")) n.align = MinMaxNormalizer{j.at("align").at(0).get<double>(), j.at("align").at(1).get<double>()};
    return n;
}

std::string describe(const nlohmann::json& v) { return v.dump(); }

} // namespace

template <typename T>
void save_state(const std::filesystem::path& path, const TrainableState<T>& state, const StateMetadata& meta) {
    TensorFile file;
    file.kind = kStateKind;
    file.format_version = kStateFormatVersion;
    file.metadata = {
        {"train_config", meta.train.to_json()},
        {"backbone_config", meta.backbone.to_json()},
        {"backbone_hash", meta.backbone_hash},
        {"fingerprint", shape_fingerprint(meta.train, meta.backbone)},
        {"step", state.step},
    };
    if (meta.normalizer) file.metadata["normalizer"] = normalizer_json(*meta.normalizer);
    const DType dtype = std::is_same_v<T, double> ? DType::f64 : DType::f32;
    auto add = [&](const std::string& prefix, const TrainableParams<T>& p) {
        p.for_each([&](const std::string& name, const Matrix<T>& m) {
            file.tensors.push_back(NamedTensor::from_matrix(prefix + name, m, dtype));
        });
    };
    add("param.", state.params);
    add("adam_m.", state.adam_m);
    add("adam_v.", state.adam_v);
    write_tensor_file(path, file);
}

LoadedState load_state(const std::filesystem::path& path, const std::optional<nlohmann::json>& expected) {
    const TensorFile file = read_tensor_file(path);
    if (file.kind != kStateKind) {
        throw FormatError("'" + path.string() + "' is not a trainable-state checkpoint (kind '" + file.kind + "')");
    }
    if (file.format_version != kStateFormatVersion) {
        throw FormatError("state checkpoint format version " + std::to_string(file.format_version) +
                          " is not supported (expected " + std::to_string(kStateFormatVersion) + ")");
    }
    LoadedState out;
    try {
        out.meta.train = TrainConfig::from_json(file.metadata.at("train_config"));
        out.meta.backbone = BackboneConfig::from_json(file.metadata.at("backbone_config"));
        out.meta.backbone_hash = file.metadata.at("backbone_hash").get<std::uint64_t>();
        if (file.metadata.contains("normalizer")) out.meta.normalizer = normalizer_from_json(file.metadata.at("normalizer"));
        out.state.step = file.metadata.at("step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("state checkpoint metadata: ") + e.what());
    }

    if (expected) {
        const auto actual = shape_fingerprint(out.meta.train, out.meta.backbone);
        for (const auto& [key, value] : expected->items()) {
            if (!actual.contains(key) || actual.at(key) != value) {
                throw ConfigError("state checkpoint mismatch on field '" + key + "': checkpoint has " +
                                  (actual.contains(key) ? describe(actual.at(key)) : std::string("nothing")) +
                                  ", expected " + describe(value));
            }
        }
    }

    TrainableState<double> layout = init_state<double>(out.meta.train, out.meta.backbone);
    std::size_t used = 0;
    auto fill = [&](const std::string& prefix, TrainableParams<double>& p) {
        p.for_each([&](const std::string& name, Matrix<double>& m) {
            const std::string full = prefix + name;
            if (!file.contains(full)) {
                throw FormatError("state checkpoint is missing tensor '" + full + "'");
            }
            const auto& t = file.get(full);
            if (t.rows != m.rows() || t.cols != m.cols()) {
                throw ShapeMismatchError(full, std::to_string(t.rows) + "x" + std::to_string(t.cols) + " vs expected " +
                                                   std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
            }
            m = t.to_matrix<double>();
            ++used;
        });
    };
    fill("param.", layout.params);
    fill("adam_m.", layout.adam_m);
    fill("adam_v.", layout.adam_v);
    if (used != file.tensors.size()) {
        throw FormatError("state checkpoint holds " + std::to_string(file.tensors.size() - used) +
                          " tensors not used by its configuration");
    }
    out.state.params = std::move(layout.params);
    out.state.adam_m = std::move(layout.adam_m);
    out.state.adam_v = std::move(layout.adam_v);
    return out;
}

#define VLQ_INSTANTIATE_TRAINING(T)                                                                                 \
    template struct TrainableParams<T>;                                                                             \
    template TrainableParams<T> zeros_like<T>(const TrainableParams<T>&);                                           \
    template TrainableState<T> init_state<T>(const TrainConfig&, const BackboneConfig&);                            \
    template TaskHead<T> percept_head<T>(const TrainableParams<T>&, const TrainConfig&);                            \
    template TaskHead<T> align_head<T>(const TrainableParams<T>&, const TrainConfig&);                              \
    template LossBreakdown evaluate_loss<T>(const Backbone<T>&, const TrainableParams<T>&, const Batch&,            \
                                            const TrainConfig&);                                                    \
    template LossBreakdown compute_gradients<T>(const Backbone<T>&, const TrainableParams<T>&, const Batch&,        \
                                                const TrainConfig&, TrainableParams<T>&);                           \
    template LossBreakdown train_step<T>(const Backbone<T>&, TrainableState<T>&, const Batch&, const TrainConfig&); \
    template FitResult fit<T>(const Backbone<T>&, TrainableState<T>&, const std::vector<TrainingSample>&,           \
                              const TrainConfig&, const EpochCallback&);                                            \
    template double score_crops<T>(const Backbone<T>&, const Image&, const PreparedHead<T>&, std::size_t,           \
                                   std::size_t, std::uint64_t, const std::string&);                                 \
    template double score_crops_text_conditioned<T>(const Backbone<T>&, const Image&, const TaskHead<T>&,           \
                                                    const std::string&, std::size_t, std::size_t, std::uint64_t,    \
                                                    const std::string&);                                            \
    template void save_state<T>(const std::filesystem::path&, const TrainableState<T>&, const StateMetadata&);

VLQ_INSTANTIATE_TRAINING(float)
VLQ_INSTANTIATE_TRAINING(double)

#undef VLQ_INSTANTIATE_TRAINING

} // namespace vlq
