#include "vlq/cli.hpp"

#include <chrono>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vlq/backbone.hpp"
#include "vlq/data.hpp"
#include "vlq/error.hpp"
#include "vlq/metrics.hpp"
#include "vlq/training.hpp"

namespace vlq {

namespace {

namespace fs = std::filesystem;

struct RunConfig {
    std::string command;
    std::string backbone = "toy";
    std::uint64_t backbone_seed = 0;
    std::size_t toy_layers = BackboneConfig{}.num_layers;
    std::size_t toy_width = BackboneConfig{}.vision_width;
    std::size_t toy_heads = BackboneConfig{}.vision_heads;
    std::string manifest;
    std::string format = "canonical";
    TrainConfig train;
    std::string alignment_mode = "blind";
    fs::path out_dir = ".";
    std::size_t eval_crops = 10;
    std::size_t repeats = 1;
    double split_ratio = 0.8;
    bool logistic_plcc = false;
    std::string task = "percept";
    std::string state_path;
    std::vector<std::string> images;
    std::string user_prompt;
    bool with_align = false;
    std::size_t synth_images = 40;
    std::size_t synth_groups = 10;
    std::string export_path;

    // Shape-affecting fields the user set explicitly (flag or config file).
    nlohmann::json explicit_shape = nlohmann::json::object();
    bool crop_size_set = false;
};

struct Context {
    RunConfig rc;
    std::ostream& out;
    std::ostream& err;
};

Backbone<float> make_backbone(const RunConfig& rc) {
    if (rc.backbone == "toy") {
        BackboneConfig cfg;
        cfg.num_layers = rc.toy_layers;
        cfg.vision_width = cfg.text_width = cfg.joint_dim = rc.toy_width;
        cfg.vision_heads = cfg.text_heads = rc.toy_heads;
        return make_toy_backbone(rc.backbone_seed, cfg);
    }
    return load_pretrained(rc.backbone);
}

TrainConfig resolved_train(const RunConfig& rc, const Backbone<float>& bb) {
    TrainConfig cfg = rc.train;
    cfg.alignment_mode = parse_alignment_mode(rc.alignment_mode);
    if (!rc.crop_size_set) {
        cfg.crop_size = bb.config().image_size;
    }
    cfg.validate();
    return cfg;
}

void ensure_out_dir(const RunConfig& rc) {
    std::error_code ec;
    fs::create_directories(rc.out_dir, ec);
    if (ec) {
        throw IoError("cannot create output directory '" + rc.out_dir.string() + "': " + ec.message());
    }
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    return f;
}

void write_lock(const RunConfig& rc, const TrainConfig& cfg, const Backbone<float>& bb,
                const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j = {
        {"command", rc.command},
        {"backbone", {{"source", rc.backbone}, {"seed", rc.backbone_seed}, {"config", bb.config().to_json()},
                      {"parameter_hash", bb.parameter_hash()}}},
        {"manifest", rc.manifest},
        {"format", rc.format},
        {"train", cfg.to_json()},
        {"fingerprint", shape_fingerprint(cfg, bb.config())},
        {"eval_crops", rc.eval_crops},
        {"repeats", rc.repeats},
        {"split_ratio", rc.split_ratio},
        {"logistic_plcc", rc.logistic_plcc},
    };
    for (const auto& [k, v] : extra.items()) j[k] = v;
    open_out(rc.out_dir / "config.lock") << j.dump(2) << '\n';
}

std::vector<SampleRecord> read_records(const Context& ctx) {
    if (ctx.rc.manifest.empty()) {
        throw ConfigError("--manifest is required for '" + ctx.rc.command + "'");
    }
    return load_manifest(ctx.rc.manifest, parse_manifest_format(ctx.rc.format), &ctx.err);
}

struct TrainOutcome {
    TrainableState<float> state;
    FitResult fit;
    double seconds = 0.0;
};

TrainOutcome train_split(const Backbone<float>& bb, const DatasetSplit& split, const std::string& manifest,
                         const TrainConfig& cfg, const EpochCallback& on_epoch) {
    TrainOutcome o;
    const auto start = std::chrono::steady_clock::now();
    o.state = init_state<float>(cfg, bb.config());
    if (cfg.epochs > 0) {
        const auto samples = load_samples(split.train, manifest, split.normalizer, cfg.ablation.auxiliary_task);
        o.fit = fit(bb, o.state, samples, cfg, on_epoch);
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return o;
}

std::string crop_key(const SampleRecord& r) { return fs::path(r.image_path).filename().string(); }

struct Scored {
    std::vector<double> predictions;
    std::vector<double> targets;
};

Scored score_records(const Backbone<float>& bb, const TrainableParams<float>& params, const TrainConfig& cfg,
                     const std::vector<SampleRecord>& records, const std::string& manifest,
                     const TargetNormalizer& normalizer, std::size_t crops, TaskTag task) {
    const bool align = task == TaskTag::align;
    if (align && !normalizer.align) {
        throw ConfigError("alignment evaluation needs alignment MOS values");
    }
    const bool text_cond = align && cfg.alignment_mode == AlignmentMode::text_conditioned;
    const TaskHead<float> head = align ? align_head(params, cfg) : percept_head(params, cfg);
    std::optional<PreparedHead<float>> prepared;
    if (!text_cond) prepared = prepare_head(bb, head);

    Scored s;
    s.predictions.resize(records.size());
    s.targets.resize(records.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t i = 0; i < records.size(); ++i) {
        try {
            const auto& r = records[i];
            const Image image = load_image(resolve_image_path(manifest, r));
            if (text_cond) {
                if (!r.user_prompt) throw ConfigError("record '" + r.image_path + "' has no user prompt");
                s.predictions[i] = score_crops_text_conditioned(bb, image, head, *r.user_prompt, cfg.crop_size, crops,
                                                                cfg.seed, crop_key(r));
            } else {
                s.predictions[i] = score_crops(bb, image, *prepared, cfg.crop_size, crops, cfg.seed, crop_key(r));
            }
            if (align) {
                if (!r.mos_align) throw ConfigError("record '" + r.image_path + "' has no alignment MOS");
                s.targets[i] = normalize_target(*r.mos_align, *normalizer.align);
            } else {
                s.targets[i] = normalize_target(r.mos_percept, normalizer.percept);
            }
        } catch (...) {
#pragma omp critical(vlq_cli_score_failure)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return s;
}

TaskTag parse_task(const std::string& t) {
    if (t == "percept") return TaskTag::percept;
    if (t == "align") return TaskTag::align;
    throw ConfigError("unknown task '" + t + "' (expected percept or align)");
}

void write_reports(const RunConfig& rc, const CorrelationReport& report) {
    auto csv = open_out(rc.out_dir / "report.csv");
    write_report_csv(csv, report);
    open_out(rc.out_dir / "report.json") << report.to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_train(Context& ctx) {
    const auto& rc = ctx.rc;
    const auto bb = make_backbone(rc);
    const TrainConfig cfg = resolved_train(rc, bb);
    const auto records = read_records(ctx);
    ensure_out_dir(rc);
    const DatasetSplit split = split_by_prompt(records, rc.split_ratio, cfg.seed);

    auto log = open_out(rc.out_dir / "train.log");
    const auto outcome = train_split(bb, split, rc.manifest, cfg, [&](const EpochLog& e) {
        const auto line = format_epoch_log(e);
        log << line << '\n' << std::flush;
        ctx.out << line << '\n';
    });
    save_state(rc.out_dir / "state.ckpt", outcome.state,
               StateMetadata{cfg, bb.config(), bb.parameter_hash(), split.normalizer});
    write_lock(rc, cfg, bb, {{"train_images", split.train.size()}, {"test_images", split.test.size()}});
    ctx.out << "trained " << outcome.state.step << " steps on " << split.train.size() << " images; wrote "
            << (rc.out_dir / "state.ckpt").string() << '\n';
    return kExitOk;
}

struct ResolvedState {
    TrainableState<float> state;
    StateMetadata meta;
};

ResolvedState open_state(const RunConfig& rc, const Backbone<float>& bb) {
    if (rc.state_path.empty()) {
        throw ConfigError("--state is required for '" + rc.command + "'");
    }
    nlohmann::json expected = rc.explicit_shape;
    const auto bfp = shape_fingerprint(TrainConfig{}, bb.config());
    for (const char* key : {"num_layers", "vision_width", "text_width", "joint_dim"}) expected[key] = bfp.at(key);
    LoadedState loaded = load_state(rc.state_path, expected);
    if (loaded.meta.backbone_hash != bb.parameter_hash()) {
        throw ConfigError("state checkpoint '" + rc.state_path +
                          "' was trained on a different backbone (parameter hash mismatch)");
    }
    return {cast_state<float>(loaded.state), loaded.meta};
}

int cmd_eval(Context& ctx) {
    const auto& rc = ctx.rc;
    const auto bb = make_backbone(rc);
    const auto records = read_records(ctx);
    const TaskTag task = parse_task(rc.task);
    ensure_out_dir(rc);

    std::vector<CorrelationTriple> triples;
    TrainConfig cfg;
    if (!rc.state_path.empty()) {
        const ResolvedState rs = open_state(rc, bb);
        cfg = rs.meta.train;
        const DatasetSplit split = split_by_prompt(records, rc.split_ratio, cfg.seed);
        const TargetNormalizer normalizer = rs.meta.normalizer.value_or(split.normalizer);
        const Scored s =
            score_records(bb, rs.state.params, cfg, split.test, rc.manifest, normalizer, rc.eval_crops, task);
        triples.push_back(correlate(s.predictions, s.targets, rc.logistic_plcc));
        auto csv = open_out(rc.out_dir / "predictions.csv");
        csv << "image_path,prediction,target\n" << std::setprecision(9);
        for (std::size_t i = 0; i < split.test.size(); ++i) {
            csv << split.test[i].image_path << ',' << s.predictions[i] << ',' << s.targets[i] << '\n';
        }
    } else {
        cfg = resolved_train(rc, bb);
        if (rc.repeats < 1) throw ConfigError("--repeats must be >= 1");
        for (std::size_t r = 0; r < rc.repeats; ++r) {
            TrainConfig rcfg = cfg;
            rcfg.seed = cfg.seed + r;
            const DatasetSplit split = split_by_prompt(records, rc.split_ratio, rcfg.seed);
            const auto outcome = train_split(bb, split, rc.manifest, rcfg, {});
            const Scored s = score_records(bb, outcome.state.params, rcfg, split.test, rc.manifest, split.normalizer,
                                           rc.eval_crops, task);
            triples.push_back(correlate(s.predictions, s.targets, rc.logistic_plcc));
            ctx.out << "repeat " << r << ": srcc=" << triples.back().srcc << " plcc=" << triples.back().plcc
                    << " krcc=" << triples.back().krcc << '\n';
        }
    }
    const CorrelationReport report = aggregate(triples);
    write_reports(rc, report);
    write_lock(rc, cfg, bb, {{"task", rc.task}, {"state", rc.state_path}});
    ctx.out << std::setprecision(6) << "srcc=" << report.mean.srcc << " plcc=" << report.mean.plcc
            << " krcc=" << report.mean.krcc << " n=" << report.mean.n << '\n';
    return kExitOk;
}

int cmd_predict(Context& ctx) {
    const auto& rc = ctx.rc;
    const auto bb = make_backbone(rc);
    const ResolvedState rs = open_state(rc, bb);
    const TrainConfig& cfg = rs.meta.train;
    if (rc.images.empty()) {
        throw ConfigError("predict needs at least one image path");
    }
    const bool text_cond = cfg.alignment_mode == AlignmentMode::text_conditioned;
    if (rc.with_align && text_cond && rc.user_prompt.empty()) {
        throw ConfigError("--with-align on a text-conditioned state needs --user-prompt");
    }
    const auto p_head = prepare_head(bb, percept_head(rs.state.params, cfg));
    const TaskHead<float> a_raw = align_head(rs.state.params, cfg);
    std::optional<PreparedHead<float>> a_head;
    if (rc.with_align && !text_cond) a_head = prepare_head(bb, a_raw);

    ctx.out << (rc.with_align ? "image,q_percept,q_align\n" : "image,q_percept\n");
    ctx.out << std::setprecision(9);
    for (const auto& path : rc.images) {
        const Image image = load_image(path);
        const std::string key = fs::path(path).filename().string();
        ctx.out << path << ',' << score_crops(bb, image, p_head, cfg.crop_size, rc.eval_crops, cfg.seed, key);
        if (rc.with_align) {
            const double qa = text_cond ? score_crops_text_conditioned(bb, image, a_raw, rc.user_prompt, cfg.crop_size,
                                                                       rc.eval_crops, cfg.seed, key)
                                        : score_crops(bb, image, *a_head, cfg.crop_size, rc.eval_crops, cfg.seed, key);
            ctx.out << ',' << qa;
        }
        ctx.out << '\n';
    }
    return kExitOk;
}

struct Variant {
    const char* name;
    AblationFlags flags;
    AlignmentMode mode;
    bool zero_shot;
};

int cmd_ablate(Context& ctx) {
    const auto& rc = ctx.rc;
    const auto bb = make_backbone(rc);
    const TrainConfig base = resolved_train(rc, bb);
    const auto records = read_records(ctx);
    ensure_out_dir(rc);
    const DatasetSplit split = split_by_prompt(records, rc.split_ratio, base.seed);

    const std::vector<Variant> grid = {
        {"zero_shot", {false, false, false, false}, AlignmentMode::blind, true},
        {"A1", {true, false, false, false}, AlignmentMode::blind, false},
        {"A2", {true, true, false, false}, AlignmentMode::blind, false},
        {"full", {true, true, true, true}, AlignmentMode::blind, false},
        {"B1", {true, true, true, true}, AlignmentMode::text_conditioned, false},
    };

    auto csv = open_out(rc.out_dir / "ablation.csv");
    csv << "variant,textual_prompts,visual_prompts,conditioning,auxiliary_task,alignment_mode,trainable_parameters,"
           "train_steps,srcc,plcc,krcc,n,train_seconds,eval_seconds\n";
    csv << std::setprecision(10);
    nlohmann::json variants = nlohmann::json::array();
    for (const auto& v : grid) {
        TrainConfig cfg = base;
        cfg.ablation = v.flags;
        cfg.alignment_mode = v.mode;
        if (v.zero_shot) cfg.epochs = 0;
        const auto outcome = train_split(bb, split, rc.manifest, cfg, {});
        const auto start = std::chrono::steady_clock::now();
        const Scored s = score_records(bb, outcome.state.params, cfg, split.test, rc.manifest, split.normalizer,
                                       rc.eval_crops, TaskTag::percept);
        const CorrelationTriple t = correlate(s.predictions, s.targets, rc.logistic_plcc);
        const double eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        csv << v.name << ',' << v.flags.textual_prompts << ',' << v.flags.visual_prompts << ','
            << v.flags.conditioning << ',' << v.flags.auxiliary_task << ',' << to_string(v.mode) << ','
            << outcome.state.params.parameter_count() << ',' << outcome.state.step << ',' << t.srcc << ',' << t.plcc
            << ',' << t.krcc << ',' << t.n << ',' << outcome.seconds << ',' << eval_seconds << '\n';
        ctx.out << v.name << ": srcc=" << t.srcc << " plcc=" << t.plcc << " krcc=" << t.krcc << " ("
                << outcome.state.step << " steps)\n";
        variants.push_back({{"name", v.name}, {"train", cfg.to_json()}});
    }
    write_lock(rc, base, bb, {{"variants", variants}});
    return kExitOk;
}

int cmd_analyze(Context& ctx) {
    const auto& rc = ctx.rc;
    const auto records = read_records(ctx);
    ensure_out_dir(rc);
    const auto rows = alignment_perception_analysis(records, &ctx.err);
    auto csv = open_out(rc.out_dir / "analysis.csv");
    write_analysis_csv(csv, rows);
    write_analysis_csv(ctx.out, rows);
    return kExitOk;
}

int cmd_report(Context& ctx) {
    const auto& rc = ctx.rc;
    bool found = false;
    const fs::path json_path = rc.out_dir / "report.json";
    if (fs::exists(json_path)) {
        std::ifstream in(json_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("'" + json_path.string() + "': " + e.what());
        }
        const auto& m = j.at("mean");
        const auto& s = j.at("stddev");
        ctx.out << "| metric | mean | std |\n|---|---|---|\n" << std::fixed << std::setprecision(4);
        for (const char* k : {"srcc", "plcc", "krcc"}) {
            ctx.out << "| " << k << " | " << m.at(k).get<double>() << " | " << s.at(k).get<double>() << " |\n";
        }
        ctx.out << "repeats: " << j.at("repeats").size() << "\n\n";
        found = true;
    }
    const fs::path ablation = rc.out_dir / "ablation.csv";
    if (fs::exists(ablation)) {
        std::ifstream in(ablation);
        std::string line;
        std::getline(in, line);
        ctx.out << "| variant | srcc | plcc | krcc | train s | eval s |\n|---|---|---|---|---|---|\n";
        while (std::getline(in, line)) {
            std::vector<std::string> f;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) f.push_back(cell);
            if (f.size() < 14) throw ParseError("malformed ablation row: " + line);
            ctx.out << "| " << f[0] << " | " << f[8] << " | " << f[9] << " | " << f[10] << " | " << f[12] << " | "
                    << f[13] << " |\n";
        }
        found = true;
    }
    if (!found) {
        throw IoError("no report.json or ablation.csv under '" + rc.out_dir.string() + "'");
    }
    return kExitOk;
}

int cmd_synth(Context& ctx) {
    const auto& rc = ctx.rc;
    const auto bb_cfg = BackboneConfig{};
    ensure_out_dir(rc);
    const auto data = make_synthetic_dataset(rc.train.seed, rc.synth_images, rc.synth_groups, bb_cfg.image_size);
    std::vector<SampleRecord> records;
    for (const auto& s : data) {
        save_image(rc.out_dir / s.record.image_path, s.image);
        records.push_back(s.record);
    }
    write_manifest(rc.out_dir / "manifest.csv", records);
    ctx.out << "wrote " << records.size() << " images and " << (rc.out_dir / "manifest.csv").string() << '\n';
    return kExitOk;
}

int cmd_export(Context& ctx) {
    const auto& rc = ctx.rc;
    if (rc.export_path.empty()) throw ConfigError("export-backbone needs an output path");
    const auto bb = make_backbone(rc);
    save_backbone(bb, rc.export_path);
    ctx.out << "wrote " << rc.export_path << " (hash " << bb.parameter_hash() << ")\n";
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig rc;
    CLI::App app{"Prompt-learning quality assessment for AI-generated images", "vlq"};
    app.set_config("--config", "", "TOML/INI file with option values; flags override it");
    app.require_subcommand(1);
    app.fallthrough();

    TrainConfig& t = rc.train;
    app.add_option("--backbone", rc.backbone, "'toy' or a backbone container path")->capture_default_str();
    app.add_option("--backbone-seed", rc.backbone_seed, "Seed of the toy backbone")->capture_default_str();
    app.add_option("--toy-layers", rc.toy_layers, "Toy backbone depth")->capture_default_str();
    app.add_option("--toy-width", rc.toy_width, "Toy backbone width (both towers and joint space)")
        ->capture_default_str();
    app.add_option("--toy-heads", rc.toy_heads, "Toy backbone attention heads")->capture_default_str();
    app.add_option("--manifest", rc.manifest, "Dataset manifest (CSV)");
    app.add_option("--format", rc.format, "canonical, agiqa3k or aigciqa2023")->capture_default_str();
    app.add_option("--out-dir", rc.out_dir, "Output directory")->capture_default_str();
    auto* o_b = app.add_option("--prompt-length", t.prompt_length, "Prompt tokens per layer")->capture_default_str();
    app.add_option("--lambda", t.lambda, "Weight of the alignment loss")->capture_default_str();
    app.add_option("--learning-rate", t.learning_rate, "Adam learning rate")->capture_default_str();
    app.add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
    app.add_option("--batch-size", t.batch_size, "Images per step")->capture_default_str();
    auto* o_crop = app.add_option("--crop-size", t.crop_size, "Crop side (defaults to the backbone input size)");
    app.add_option("--seed", t.seed, "Run seed (split, init, crops)")->capture_default_str();
    auto* o_tp = app.add_option("--textual-prompts", t.ablation.textual_prompts)->capture_default_str();
    auto* o_vp = app.add_option("--visual-prompts", t.ablation.visual_prompts)->capture_default_str();
    auto* o_cond = app.add_option("--conditioning", t.ablation.conditioning)->capture_default_str();
    auto* o_aux = app.add_option("--auxiliary-task", t.ablation.auxiliary_task)->capture_default_str();
    auto* o_mode = app.add_option("--alignment-mode", rc.alignment_mode, "blind or text_conditioned")
                       ->capture_default_str();
    app.add_option("--temperature", t.temperature, "Similarity scale before the pair softmax")->capture_default_str();
    app.add_option("--percept-positive", t.percept_pair.positive)->capture_default_str();
    app.add_option("--percept-negative", t.percept_pair.negative)->capture_default_str();
    app.add_option("--align-positive", t.align_pair.positive)->capture_default_str();
    app.add_option("--align-negative", t.align_pair.negative)->capture_default_str();
    app.add_option("--eval-crops", rc.eval_crops, "Random crops averaged per test image")->capture_default_str();
    app.add_option("--repeats", rc.repeats, "Re-split and retrain this many times (seed + r)")->capture_default_str();
    app.add_option("--split-ratio", rc.split_ratio, "Share of prompt groups used for training")
        ->capture_default_str();
    app.add_flag("--logistic-plcc", rc.logistic_plcc, "Fit a 4-parameter logistic before PLCC");

    auto* train = app.add_subcommand("train", "Train prompts and couplers; writes state.ckpt and train.log");
    auto* eval = app.add_subcommand("eval", "Evaluate a state (or retrain per repeat) on the test split");
    eval->add_option("--state", rc.state_path, "State checkpoint");
    eval->add_option("--task", rc.task, "percept or align")->capture_default_str();
    auto* predict = app.add_subcommand("predict", "Score images with a trained state");
    predict->add_option("--state", rc.state_path, "State checkpoint")->required();
    predict->add_option("images", rc.images, "Image files")->required();
    predict->add_flag("--with-align", rc.with_align, "Also print the alignment score");
    predict->add_option("--user-prompt", rc.user_prompt, "Prompt text for text-conditioned alignment");
    auto* ablate = app.add_subcommand("ablate", "Run the five-variant ablation grid");
    auto* analyze = app.add_subcommand("analyze", "Per-generator SRCC between alignment and perceptual MOS");
    auto* report = app.add_subcommand("report", "Summarize report.json / ablation.csv in --out-dir");
    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset with a canonical manifest");
    synth->add_option("--images", rc.synth_images)->capture_default_str();
    synth->add_option("--groups", rc.synth_groups)->capture_default_str();
    auto* exportb = app.add_subcommand("export-backbone", "Save the selected backbone as a container file");
    exportb->add_option("path", rc.export_path)->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    for (auto* sub : app.get_subcommands()) rc.command = sub->get_name();
    rc.crop_size_set = o_crop->count() > 0;
    if (o_b->count()) rc.explicit_shape["prompt_length"] = t.prompt_length;
    if (o_tp->count()) rc.explicit_shape["textual_prompts"] = t.ablation.textual_prompts;
    if (o_vp->count()) rc.explicit_shape["visual_prompts"] = t.ablation.visual_prompts;
    if (o_cond->count()) rc.explicit_shape["conditioning"] = t.ablation.conditioning;
    if (o_aux->count()) rc.explicit_shape["auxiliary_task"] = t.ablation.auxiliary_task;
    if (o_mode->count()) rc.explicit_shape["alignment_mode"] = rc.alignment_mode;

    Context ctx{rc, out, err};
    try {
        if (train->parsed()) return cmd_train(ctx);
        if (eval->parsed()) return cmd_eval(ctx);
        if (predict->parsed()) return cmd_predict(ctx);
        if (ablate->parsed()) return cmd_ablate(ctx);
        if (analyze->parsed()) return cmd_analyze(ctx);
        if (report->parsed()) return cmd_report(ctx);
        if (synth->parsed()) return cmd_synth(ctx);
        if (exportb->parsed()) return cmd_export(ctx);
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    err << "error: no command given\n";
    return kExitUsage;
}

} // namespace vlq
