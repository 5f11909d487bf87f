#include "pguard/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pguard/attribution.hpp"
#include "pguard/dataset.hpp"
#include "pguard/eval.hpp"
#include "pguard/monitor.hpp"
#include "pguard/nn.hpp"
#include "pguard/patterns.hpp"
#include "pguard/rng.hpp"
#include "pguard/train.hpp"
#include "pguard/util.hpp"

namespace pguard {
namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::vector<int> parse_dims(const std::string& text, std::size_t want, const char* what) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            out.push_back(std::stoi(part));
        } catch (const std::exception&) {
            throw ConfigError(std::string("bad ") + what + ": " + text);
        }
    }
    if (out.size() != want)
        throw ConfigError(std::string(what) + " must have " + std::to_string(want) +
                          " components: " + text);
    return out;
}

std::vector<float> parse_color(const std::string& text) {
    std::vector<float> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            out.push_back(std::stof(part));
        } catch (const std::exception&) {
            throw ConfigError("bad color value: " + text);
        }
    }
    if (out.empty()) throw ConfigError("empty color: " + text);
    return out;
}

PatchAnchor anchor_from_string(const std::string& s) {
    if (s == "top-left") return PatchAnchor::top_left;
    if (s == "top-right") return PatchAnchor::top_right;
    if (s == "bottom-left") return PatchAnchor::bottom_left;
    if (s == "bottom-right") return PatchAnchor::bottom_right;
    if (s == "fixed") return PatchAnchor::fixed;
    throw ConfigError("unknown anchor: " + s +
                      " (use top-left, top-right, bottom-left, bottom-right, fixed)");
}

std::string resolve_path(const fs::path& base_dir, const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path.string();
    return (base_dir / path).string();
}

PatternSet pattern_set_from_file(const PatternFile& pf) {
    PatternSet set;
    set.patterns = pf.patterns;
    std::stable_sort(set.patterns.begin(), set.patterns.end(),
                     [](const Pattern& a, const Pattern& b) { return a.support > b.support; });
    return set;
}

std::string default_architecture(int h, int w, int c, int classes) {
    std::ostringstream out;
    out << "input " << h << " " << w << " " << c << "\n";
    out << "classes " << classes << "\n";
    out << "conv2d out=8 kernel=3x3 stride=1 pad=1\n";
    out << "relu\n";
    out << "maxpool2d kernel=2x2 stride=2\n";
    out << "conv2d out=16 kernel=3x3 stride=1 pad=1\n";
    out << "relu\n";
    out << "maxpool2d kernel=2x2 stride=2\n";
    out << "flatten\n";
    out << "dense units=32 last=1\n";
    out << "relu\n";
    out << "dense units=" << classes << " last=0\n";
    return out.str();
}

PoisonSpec poison_spec_from_json(const ordered_json& j, int class_count) {
    PoisonSpec spec;
    if (j.contains("patch")) {
        const auto patch = j.at("patch").get<std::vector<int>>();
        if (patch.size() != 2) throw ConfigError("poison.patch must be [h, w]");
        spec.patch_h = patch[0];
        spec.patch_w = patch[1];
    }
    if (j.contains("anchor")) spec.anchor = anchor_from_string(j.at("anchor").get<std::string>());
    if (j.contains("row")) spec.row = j.at("row").get<int>();
    if (j.contains("col")) spec.col = j.at("col").get<int>();
    if (j.contains("color")) spec.color = j.at("color").get<std::vector<float>>();
    spec.target_label = j.at("target").get<int>();
    if (spec.target_label < 0 || spec.target_label >= class_count)
        throw ConfigError("poison.target out of class range");
    return spec;
}

ExperimentConfig experiment_config_from_json(const ordered_json& j) {
    ExperimentConfig cfg;
    if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
    if (j.contains("repetitions")) cfg.repetitions = j.at("repetitions").get<int>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("threshold")) {
        const auto& t = j.at("threshold");
        if (t.is_string()) {
            if (t.get<std::string>() != "auto")
                throw ConfigError("threshold must be a percentage or \"auto\"");
            cfg.threshold_percent = -1.0;
        } else {
            cfg.threshold_percent = t.get<double>();
        }
    }
    if (j.contains("candidates")) cfg.candidates = j.at("candidates").get<std::vector<double>>();
    if (j.contains("tree")) {
        const auto& t = j.at("tree");
        if (t.contains("min_leaf")) cfg.tree.min_leaf = t.at("min_leaf").get<int>();
        if (t.contains("max_depth")) cfg.tree.max_depth = t.at("max_depth").get<int>();
    }
    if (j.contains("method"))
        cfg.method = attribution_method_from_string(j.at("method").get<std::string>());
    if (j.contains("mask_value")) cfg.mask_value = j.at("mask_value").get<std::vector<float>>();
    if (j.contains("guess")) cfg.guess_enabled = j.at("guess").get<bool>();
    if (j.contains("strip")) {
        const auto& s = j.at("strip");
        if (s.contains("enabled")) cfg.strip_enabled = s.at("enabled").get<bool>();
        if (s.contains("overlays")) cfg.strip.overlay_count = s.at("overlays").get<int>();
        if (s.contains("blend_weight"))
            cfg.strip.blend_weight = s.at("blend_weight").get<float>();
        if (s.contains("fp_percentile"))
            cfg.strip.fp_percentile = s.at("fp_percentile").get<double>();
    }
    return cfg;
}

ordered_json load_json_config(const std::string& path) {
    try {
        return ordered_json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config " + path + " is not valid JSON: " + e.what());
    }
}

// --- subcommand bodies ---

struct ForgeArgs {
    int classes = 4;
    int per_class = 500;
    std::string shape = "16x16x3";
    std::uint64_t seed = 0;
    std::string out;
};

void run_forge(const ForgeArgs& a) {
    const auto dims = parse_dims(a.shape, 3, "shape");
    Dataset ds = gen_synthetic(a.classes, a.per_class, dims[0], dims[1], dims[2], a.seed);
    save_dataset(ds, a.out);
    std::cout << ordered_json{{"samples", ds.samples.size()},
                              {"classes", ds.class_count},
                              {"out", a.out}}
                     .dump()
              << "\n";
}

struct PoisonArgs {
    std::string data;
    std::string out;
    std::string patch = "3x3";
    std::string anchor = "bottom-right";
    int row = 0;
    int col = 0;
    std::string color = "1.0";
    int target = 0;
    double fraction = 0.1;
    std::uint64_t seed = 0;
    bool all = false;
};

void run_poison(const PoisonArgs& a) {
    Dataset ds = load_dataset(a.data);
    PoisonSpec spec;
    const auto patch = parse_dims(a.patch, 2, "patch");
    spec.patch_h = patch[0];
    spec.patch_w = patch[1];
    spec.anchor = anchor_from_string(a.anchor);
    spec.row = a.row;
    spec.col = a.col;
    spec.color = parse_color(a.color);
    spec.target_label = a.target;

    Dataset out = a.all ? apply_trigger_all(ds, spec)
                        : poison_training_set(ds, spec, a.fraction, a.seed);
    save_dataset(out, a.out);
    std::int64_t poisoned = 0;
    for (const auto& s : out.samples) poisoned += s.poisoned ? 1 : 0;
    std::cout << ordered_json{{"samples", out.samples.size()},
                              {"poisoned", poisoned},
                              {"out", a.out}}
                     .dump()
              << "\n";
}

struct SplitArgs {
    std::string clean;
    std::string poisoned;
    double alpha = 0.25;
    std::uint64_t seed = 0;
    std::string gen_out;
    std::string val_out;
};

void run_split(const SplitArgs& a) {
    Dataset clean = load_dataset(a.clean);
    Dataset poisoned = load_dataset(a.poisoned);
    auto [gen, val] = make_gen_val_split(clean, poisoned, SplitSpec{a.alpha, a.seed});
    save_dataset(gen, a.gen_out);
    save_dataset(val, a.val_out);
    std::cout << ordered_json{{"gen_samples", gen.samples.size()},
                              {"val_samples", val.samples.size()}}
                     .dump()
              << "\n";
}

struct TrainArgs {
    std::string spec;
    std::string data;
    int epochs = 12;
    int batch = 32;
    double lr = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out;
    std::string eval_data;
    std::string asr_data;
    int asr_target = 0;
};

void run_train(const TrainArgs& a) {
    Model m = parse_architecture(read_file(a.spec));
    m.weights = make_weight_tensors(m.input_shape, m.layers);
    init_weights(m, a.seed);
    Dataset data = load_dataset(a.data);

    TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.learning_rate = static_cast<float>(a.lr);
    cfg.momentum = static_cast<float>(a.momentum);
    cfg.seed = a.seed;
    cfg.threads = a.threads;
    TrainLog log = train(m, data, cfg);
    save_model(m, a.out);

    ordered_json quality;
    quality["out"] = a.out;
    quality["final_epoch_loss"] = log.epoch_loss.empty()
                                      ? ordered_json(nullptr)
                                      : ordered_json(log.epoch_loss.back());
    quality["train_accuracy"] = clean_accuracy(m, data, a.threads);
    if (!a.eval_data.empty())
        quality["clean_accuracy"] = clean_accuracy(m, load_dataset(a.eval_data), a.threads);
    if (!a.asr_data.empty())
        quality["attack_success_rate"] =
            attack_success_rate(m, load_dataset(a.asr_data), a.asr_target, a.threads);
    std::cout << quality.dump() << "\n";
}

struct MineArgs {
    std::string model;
    std::string gen_data;
    std::string out;
    std::string pc_out;
    int min_leaf = 1;
    int max_depth = 20;
    int threads = 1;
};

void run_mine(const MineArgs& a) {
    Model m = load_model(a.model);
    Dataset gen = load_dataset(a.gen_data);
    TreeParams params{a.min_leaf, a.max_depth};

    MineResult mine = mine_patterns(m, gen, params, a.threads);
    const int target = infer_target_label(mine.all_patterns);
    PatternSet P = select_P(mine.all_patterns, target);

    PatternFile pf;
    pf.layer_id = mine.layer_id;
    pf.class_count = m.class_count;
    pf.target_label = target;
    pf.patterns = P.patterns;
    pf.generator = "mine model=" + a.model + " gen=" + a.gen_data +
                   " min_leaf=" + std::to_string(a.min_leaf) +
                   " max_depth=" + std::to_string(a.max_depth);
    save_patterns(pf, a.out);

    ordered_json result{{"target_label", target},
                        {"pattern_count", P.patterns.size()},
                        {"out", a.out}};
    if (!a.pc_out.empty()) {
        PatternSet P_c = mine_correct_patterns(m, gen, params, a.threads);
        PatternFile pcf;
        pcf.layer_id = mine.layer_id;
        pcf.class_count = m.class_count;
        pcf.target_label = target;
        pcf.patterns = P_c.patterns;
        pcf.generator = "mine-correct model=" + a.model + " gen=" + a.gen_data +
                        " min_leaf=" + std::to_string(a.min_leaf) +
                        " max_depth=" + std::to_string(a.max_depth);
        save_patterns(pcf, a.pc_out);
        result["pc_pattern_count"] = P_c.patterns.size();
        result["pc_out"] = a.pc_out;
    }
    std::cout << result.dump() << "\n";
}

struct AttributeArgs {
    std::string model;
    std::string gen_data;
    std::string patterns;
    std::string threshold = "auto";
    std::string method = "gradcam";
    std::string out;
    std::string figures;
    int threads = 1;
};

void run_attribute(const AttributeArgs& a) {
    Model m = load_model(a.model);
    Dataset gen = load_dataset(a.gen_data);
    PatternFile pf = load_patterns(a.patterns);
    const AttributionMethod method = attribution_method_from_string(a.method);
    PatternSet P = pattern_set_from_file(pf);

    std::vector<DeltaHeatmap> deltas =
        build_delta_maps(m, gen, P, pf.target_label, method, a.threads);
    double pct;
    if (a.threshold == "auto") {
        pct = P.patterns.empty()
                  ? 10.0
                  : tune_threshold(m, gen, P, deltas, {2.0, 5.0, 10.0, 25.0}, {0.0f}, a.threads);
    } else {
        try {
            pct = std::stod(a.threshold);
        } catch (const std::exception&) {
            throw ConfigError("threshold must be a percentage or \"auto\"");
        }
    }
    ImportantPixels imp = select_important_pixels(deltas, pct);

    pf.patterns = P.patterns;  // persist in support order, matching imp_pixels
    pf.threshold_percent = pct;
    pf.imp_pixels = imp.pixel_lists;
    save_patterns(pf, a.out);

    if (!a.figures.empty()) {
        std::error_code ec;
        fs::create_directories(a.figures, ec);
        if (ec) throw DataError("cannot create directory " + a.figures + ": " + ec.message());
        const NormalizedHeatmap hm_c =
            normalize(summarize_correct_heatmap(m, gen, method, a.threads));
        export_heatmap_pgm(hm_c.h, hm_c.w, hm_c.v, (fs::path(a.figures) / "hm_c.pgm").string());
        for (std::size_t i = 0; i < deltas.size(); ++i)
            export_heatmap_pgm(
                deltas[i].h, deltas[i].w, deltas[i].v,
                (fs::path(a.figures) / ("delta_" + std::to_string(i) + ".pgm")).string());
    }
    std::cout << ordered_json{{"threshold_percent", pct},
                              {"pattern_count", P.patterns.size()},
                              {"out", a.out}}
                     .dump()
              << "\n";
}

struct MonitorArgs {
    std::string model;
    std::string patterns;
    std::string mode = "mask";
    std::string pc;
    std::string data;
    std::string out;
    std::string mask_value = "0.0";
    std::uint64_t seed = 0;
    int threads = 1;
    bool serve = false;
};

MonitorConfig monitor_config_from_args(const MonitorArgs& a, const Model& m) {
    PatternFile pf = load_patterns(a.patterns);
    MonitorConfig cfg;
    cfg.layer_id = pf.layer_id;
    cfg.class_count = m.class_count;
    cfg.target_label = pf.target_label;
    cfg.P = pattern_set_from_file(pf);
    cfg.mask_value = parse_color(a.mask_value);
    cfg.seed = a.seed;
    if (a.mode == "mask") {
        cfg.mode = CorrectionMode::input_mask;
        if (pf.imp_pixels.empty() && !pf.patterns.empty())
            throw DataError("pattern file lacks imp_pixels; run attribute first");
        cfg.imp_pixels = pf.imp_pixels;
    } else if (a.mode == "guess") {
        cfg.mode = CorrectionMode::label_guess;
        if (a.pc.empty()) throw ConfigError("guess mode needs --pc correct-pattern file");
        cfg.P_c = pattern_set_from_file(load_patterns(a.pc));
    } else {
        throw ConfigError("mode must be mask or guess");
    }
    validate_monitor_config(cfg, m);
    return cfg;
}

ordered_json result_line(int id, const DefenseResult& r) {
    ordered_json line;
    line["id"] = id;
    line["verdict"] = r.verdict.poisoned ? "poisoned" : "clean";
    if (r.verdict.poisoned)
        line["matched_pattern"] = r.verdict.matched_pattern;
    else
        line["matched_pattern"] = nullptr;
    line["original_label"] = r.original_label;
    line["final_label"] = r.final_label;
    return line;
}

void run_monitor_serve(const Model& m, const MonitorConfig& cfg) {
    const std::int64_t pixel_count = numel(m.input_shape);
    const std::size_t frame_bytes = static_cast<std::size_t>(pixel_count) * 4;
    int id = 0;
    for (;;) {
        unsigned char header[4];
        const std::size_t got = std::fread(header, 1, 4, stdin);
        if (got == 0) break;  // clean EOF between frames
        if (got != 4) throw FormatError("truncated frame header on stdin");
        const std::uint32_t len = read_u32_le(header);
        if (len != frame_bytes)
            throw FormatError("frame length " + std::to_string(len) + " != expected " +
                              std::to_string(frame_bytes) + " bytes");
        std::string payload(frame_bytes, '\0');
        if (std::fread(payload.data(), 1, frame_bytes, stdin) != frame_bytes)
            throw FormatError("truncated frame payload on stdin");
        Tensor x(m.input_shape);
        const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
        for (auto& v : x.data) {
            v = read_f32_le(p);
            p += 4;
        }
        DefenseResult r = classify_with_defense(m, x, cfg, id);
        std::cout << result_line(id, r).dump() << "\n" << std::flush;
        ++id;
    }
}

void run_monitor(const MonitorArgs& a) {
    Model m = load_model(a.model);
    MonitorConfig cfg = monitor_config_from_args(a, m);
    if (a.serve) {
        run_monitor_serve(m, cfg);
        return;
    }
    if (a.data.empty() || a.out.empty())
        throw ConfigError("monitor needs --data and --out (or --serve)");
    Dataset data = load_dataset(a.data);
    std::vector<DefenseResult> results(data.samples.size());
    parallel_for(data.samples.size(), a.threads, [&](std::size_t i) {
        results[i] = classify_with_defense(m, data.samples[i].pixels, cfg,
                                           data.samples[i].id);
    });
    std::string out;
    for (std::size_t i = 0; i < results.size(); ++i)
        out += result_line(data.samples[i].id, results[i]).dump() + "\n";
    atomic_write_file(a.out, out);
    std::int64_t flagged = 0;
    for (const auto& r : results) flagged += r.verdict.poisoned ? 1 : 0;
    std::cout << ordered_json{{"inputs", results.size()}, {"flagged", flagged}, {"out", a.out}}
                     .dump()
              << "\n";
}

struct EvaluateArgs {
    std::string config;
    std::string out;
    std::string timings_out;
    std::string figures;
    int threads = 1;
};

void run_evaluate(const EvaluateArgs& a) {
    const ordered_json j = load_json_config(a.config);
    const fs::path base = fs::path(a.config).parent_path();
    Model m = load_model(resolve_path(base, j.at("model").get<std::string>()));
    Dataset clean = load_dataset(resolve_path(base, j.at("clean_test").get<std::string>()));
    Dataset poisoned = load_dataset(resolve_path(base, j.at("poisoned_test").get<std::string>()));

    ExperimentConfig cfg = experiment_config_from_json(j);
    cfg.threads = a.threads;
    FigureBundle figures;
    ExperimentReport report =
        run_experiment(m, clean, poisoned, cfg, a.figures.empty() ? nullptr : &figures);
    export_report(report, a.out);
    if (!a.timings_out.empty()) export_timings(report, a.timings_out);
    if (!a.figures.empty()) export_figures(report, figures, a.figures);
    std::cout << ordered_json{{"completed", report.completed},
                              {"mean_poisoned_detection", report.mean_mask.poisoned_detection},
                              {"mean_poisoned_repair", report.mean_mask.poisoned_repair},
                              {"mean_clean_detection", report.mean_mask.clean_detection},
                              {"mean_clean_repair", report.mean_mask.clean_repair},
                              {"out", a.out}}
                     .dump()
              << "\n";
}

struct PipelineArgs {
    std::string config;
    std::string out_dir;
    std::string timings_out;
    std::string figures;
    int threads = 1;
};

void run_pipeline(const PipelineArgs& a) {
    const ordered_json j = load_json_config(a.config);
    const fs::path base = fs::path(a.config).parent_path();
    std::error_code ec;
    fs::create_directories(a.out_dir, ec);
    if (ec) throw DataError("cannot create directory " + a.out_dir + ": " + ec.message());
    const fs::path out(a.out_dir);

    const int classes = j.at("classes").get<int>();
    const int train_per_class = j.at("train_per_class").get<int>();
    const int test_per_class = j.at("test_per_class").get<int>();
    const int h = j.at("height").get<int>();
    const int w = j.at("width").get<int>();
    const int c = j.at("channels").get<int>();
    const std::uint64_t seed = j.contains("seed") ? j.at("seed").get<std::uint64_t>() : 0;
    const PoisonSpec poison = poison_spec_from_json(j.at("poison"), classes);
    const double fraction = j.at("poison").contains("fraction")
                                ? j.at("poison").at("fraction").get<double>()
                                : 0.1;

    Dataset train_set = gen_synthetic(classes, train_per_class, h, w, c, derive_seed(seed, 1));
    Dataset test_set = gen_synthetic(classes, test_per_class, h, w, c, derive_seed(seed, 2));
    Dataset train_poisoned = poison_training_set(train_set, poison, fraction, derive_seed(seed, 3));
    Dataset poisoned_test = apply_trigger_all(test_set, poison);
    save_dataset(train_poisoned, (out / "train_poisoned.antset").string());
    save_dataset(test_set, (out / "clean_test.antset").string());
    save_dataset(poisoned_test, (out / "poisoned_test.antset").string());

    Model m;
    if (j.contains("arch") && !j.at("arch").is_null())
        m = parse_architecture(read_file(resolve_path(base, j.at("arch").get<std::string>())));
    else
        m = parse_architecture(default_architecture(h, w, c, classes));
    m.weights = make_weight_tensors(m.input_shape, m.layers);
    init_weights(m, derive_seed(seed, 4));

    TrainConfig tc;
    if (j.contains("train")) {
        const auto& t = j.at("train");
        if (t.contains("epochs")) tc.epochs = t.at("epochs").get<int>();
        if (t.contains("batch")) tc.batch_size = t.at("batch").get<int>();
        if (t.contains("lr")) tc.learning_rate = t.at("lr").get<float>();
        if (t.contains("momentum")) tc.momentum = t.at("momentum").get<float>();
    }
    tc.seed = derive_seed(seed, 4);
    tc.threads = a.threads;
    train(m, train_poisoned, tc);
    save_model(m, (out / "model.antnet").string());

    const double acc = clean_accuracy(m, test_set, a.threads);
    const double asr = attack_success_rate(m, poisoned_test, poison.target_label, a.threads);

    ExperimentConfig ecfg = j.contains("eval") ? experiment_config_from_json(j.at("eval"))
                                               : ExperimentConfig{};
    if (!j.contains("eval") || !j.at("eval").contains("seed")) ecfg.seed = derive_seed(seed, 5);
    ecfg.threads = a.threads;
    FigureBundle figures;
    ExperimentReport report = run_experiment(m, test_set, poisoned_test, ecfg,
                                             a.figures.empty() ? nullptr : &figures);
    export_report(report, (out / "report.json").string());
    if (!a.timings_out.empty()) export_timings(report, a.timings_out);
    if (!a.figures.empty()) export_figures(report, figures, a.figures);

    std::cout << ordered_json{{"clean_accuracy", acc},
                              {"attack_success_rate", asr},
                              {"completed", report.completed},
                              {"mean_poisoned_detection", report.mean_mask.poisoned_detection},
                              {"mean_poisoned_repair", report.mean_mask.poisoned_repair},
                              {"mean_clean_detection", report.mean_mask.clean_detection},
                              {"mean_clean_repair", report.mean_mask.clean_repair},
                              {"out_dir", a.out_dir}}
                     .dump()
              << "\n";
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"Backdoor pattern mining, trigger localization, and run-time input repair"};
    app.require_subcommand(1);

    ForgeArgs forge_args;
    auto* forge = app.add_subcommand("forge", "Generate a synthetic glyph dataset");
    forge->add_option("--classes", forge_args.classes, "Class count (2..8)");
    forge->add_option("--per-class", forge_args.per_class, "Samples per class");
    forge->add_option("--shape", forge_args.shape, "HxWxC, e.g. 16x16x3");
    forge->add_option("--seed", forge_args.seed, "Master seed");
    forge->add_option("--out", forge_args.out, "Output dataset path")->required();

    PoisonArgs poison_args;
    auto* poison = app.add_subcommand("poison", "Stamp a patch trigger into a dataset");
    poison->add_option("--data", poison_args.data, "Input dataset")->required();
    poison->add_option("--out", poison_args.out, "Output dataset")->required();
    poison->add_option("--patch", poison_args.patch, "Patch HxW");
    poison->add_option("--anchor", poison_args.anchor,
                       "top-left|top-right|bottom-left|bottom-right|fixed");
    poison->add_option("--row", poison_args.row, "Patch row for --anchor fixed");
    poison->add_option("--col", poison_args.col, "Patch col for --anchor fixed");
    poison->add_option("--color", poison_args.color, "Patch color, one value or per channel");
    poison->add_option("--target", poison_args.target, "Poison target label");
    poison->add_option("--fraction", poison_args.fraction, "Fraction of samples to poison");
    poison->add_option("--seed", poison_args.seed, "Selection seed");
    poison->add_flag("--all", poison_args.all,
                     "Trigger every sample and offset ids (test-set construction)");

    SplitArgs split_args;
    auto* split = app.add_subcommand("split", "Build the GEN/VAL split");
    split->add_option("--clean", split_args.clean, "Clean test dataset")->required();
    split->add_option("--poisoned", split_args.poisoned, "Poisoned test dataset")->required();
    split->add_option("--alpha", split_args.alpha, "Poisoned fraction placed in GEN");
    split->add_option("--seed", split_args.seed, "Split seed");
    split->add_option("--gen-out", split_args.gen_out, "GEN output path")->required();
    split->add_option("--val-out", split_args.val_out, "VAL output path")->required();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a classifier with SGD + momentum");
    train_cmd->add_option("--spec", train_args.spec, "Architecture text file")->required();
    train_cmd->add_option("--data", train_args.data, "Training dataset")->required();
    train_cmd->add_option("--epochs", train_args.epochs, "Epochs");
    train_cmd->add_option("--batch", train_args.batch, "Batch size");
    train_cmd->add_option("--lr", train_args.lr, "Learning rate");
    train_cmd->add_option("--momentum", train_args.momentum, "Momentum");
    train_cmd->add_option("--seed", train_args.seed, "Init and shuffle seed");
    train_cmd->add_option("--threads", train_args.threads, "Worker threads");
    train_cmd->add_option("--out", train_args.out, "Output model path")->required();
    train_cmd->add_option("--eval-data", train_args.eval_data, "Clean dataset to report accuracy");
    train_cmd->add_option("--asr-data", train_args.asr_data,
                          "Triggered dataset to report attack success rate");
    train_cmd->add_option("--asr-target", train_args.asr_target, "Attack target label");

    MineArgs mine_args;
    auto* mine = app.add_subcommand("mine", "Mine mis-classification patterns on GEN");
    mine->add_option("--model", mine_args.model, "Model file")->required();
    mine->add_option("--gen-data", mine_args.gen_data, "GEN dataset")->required();
    mine->add_option("--out", mine_args.out, "Pattern JSON output")->required();
    mine->add_option("--pc-out", mine_args.pc_out, "Correct-label pattern JSON output");
    mine->add_option("--min-leaf", mine_args.min_leaf, "Tree min leaf size");
    mine->add_option("--max-depth", mine_args.max_depth, "Tree max depth");
    mine->add_option("--threads", mine_args.threads, "Worker threads");

    AttributeArgs attr_args;
    auto* attribute = app.add_subcommand("attribute",
                                         "Localize trigger pixels per pattern via heatmaps");
    attribute->add_option("--model", attr_args.model, "Model file")->required();
    attribute->add_option("--gen-data", attr_args.gen_data, "GEN dataset")->required();
    attribute->add_option("--patterns", attr_args.patterns, "Pattern JSON from mine")->required();
    attribute->add_option("--threshold", attr_args.threshold, "Pixel percent or \"auto\"");
    attribute->add_option("--method", attr_args.method, "gradcam|gradcam++|input_gradient");
    attribute->add_option("--out", attr_args.out, "Annotated pattern JSON output")->required();
    attribute->add_option("--figures", attr_args.figures, "Directory for heatmap PGMs");
    attribute->add_option("--threads", attr_args.threads, "Worker threads");

    MonitorArgs monitor_args;
    auto* monitor = app.add_subcommand("monitor", "Run the defended classifier over inputs");
    monitor->add_option("--model", monitor_args.model, "Model file")->required();
    monitor->add_option("--patterns", monitor_args.patterns, "Annotated pattern JSON")->required();
    monitor->add_option("--mode", monitor_args.mode, "mask|guess");
    monitor->add_option("--pc", monitor_args.pc, "Correct-label pattern JSON (guess mode)");
    monitor->add_option("--data", monitor_args.data, "Dataset to classify");
    monitor->add_option("--out", monitor_args.out, "JSONL results path");
    monitor->add_option("--mask-value", monitor_args.mask_value, "Mask value, one or per channel");
    monitor->add_option("--seed", monitor_args.seed, "Label-guess fallback seed");
    monitor->add_option("--threads", monitor_args.threads, "Worker threads");
    monitor->add_flag("--serve", monitor_args.serve,
                      "Read length-prefixed float32 frames from stdin, write verdict lines");

    EvaluateArgs eval_args;
    auto* evaluate = app.add_subcommand("evaluate", "Run the repeated seeded experiment");
    evaluate->add_option("--config", eval_args.config, "Experiment config JSON")->required();
    evaluate->add_option("--out", eval_args.out, "Report JSON path")->required();
    evaluate->add_option("--timings-out", eval_args.timings_out, "Wall-clock sidecar JSON path");
    evaluate->add_option("--emit-figures", eval_args.figures, "Directory for PGMs and CSV");
    evaluate->add_option("--threads", eval_args.threads, "Worker threads");

    PipelineArgs pipe_args;
    auto* pipeline = app.add_subcommand(
        "pipeline", "forge + poison + train + full evaluation from one config");
    pipeline->add_option("--config", pipe_args.config, "Pipeline config JSON")->required();
    pipeline->add_option("--out-dir", pipe_args.out_dir, "Artifact directory")->required();
    pipeline->add_option("--timings-out", pipe_args.timings_out, "Wall-clock sidecar JSON path");
    pipeline->add_option("--emit-figures", pipe_args.figures, "Directory for PGMs and CSV");
    pipeline->add_option("--threads", pipe_args.threads, "Worker threads");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (forge->parsed()) run_forge(forge_args);
        if (poison->parsed()) run_poison(poison_args);
        if (split->parsed()) run_split(split_args);
        if (train_cmd->parsed()) run_train(train_args);
        if (mine->parsed()) run_mine(mine_args);
        if (attribute->parsed()) run_attribute(attr_args);
        if (monitor->parsed()) run_monitor(monitor_args);
        if (evaluate->parsed()) run_evaluate(eval_args);
        if (pipeline->parsed()) run_pipeline(pipe_args);
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace pguard
