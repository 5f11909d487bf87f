#include "pguard/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include <nlohmann/json.hpp>

#include "pguard/rng.hpp"
#include "pguard/util.hpp"

namespace pguard {
namespace {

using ordered_json = nlohmann::ordered_json;

double seconds_since(std::chrono::steady_clock::time_point& mark) {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - mark).count();
    mark = now;
    return s;
}

Dataset clean_subset(const Dataset& ds) {
    Dataset out;
    out.class_count = ds.class_count;
    out.shape = ds.shape;
    out.seed = ds.seed;
    out.provenance = ds.provenance + " | clean-subset";
    for (const ImageSample& s : ds.samples)
        if (!s.poisoned) out.samples.push_back(s);
    return out;
}

ordered_json metrics_json(const Metrics& m) {
    ordered_json j;
    j["poisoned_detection"] = m.poisoned_detection;
    j["poisoned_repair"] = m.poisoned_repair;
    j["clean_detection"] = m.clean_detection;
    j["clean_repair"] = m.clean_repair;
    return j;
}

void run_mask_stage(const Model& m, const Dataset& val, const MonitorConfig& cfg, int threads,
                    std::vector<SampleOutcome>& outcomes) {
    outcomes.resize(val.samples.size());
    parallel_for(val.samples.size(), threads, [&](std::size_t i) {
        const ImageSample& s = val.samples[i];
        DefenseResult r = classify_with_defense(m, s.pixels, cfg, s.id);
        outcomes[i] = {s.poisoned, r.verdict.poisoned, r.final_label, s.ideal_label};
    });
}

}  // namespace

Metrics compute_metrics(const std::vector<SampleOutcome>& outcomes) {
    std::int64_t n_poisoned = 0, n_clean = 0;
    std::int64_t det_p = 0, det_c = 0, rep_p = 0, rep_c = 0;
    for (const SampleOutcome& o : outcomes) {
        if (o.truly_poisoned) {
            ++n_poisoned;
            det_p += o.flagged ? 1 : 0;
            rep_p += o.final_label == o.ideal_label ? 1 : 0;
        } else {
            ++n_clean;
            det_c += o.flagged ? 0 : 1;
            rep_c += o.final_label == o.ideal_label ? 1 : 0;
        }
    }
    if (n_poisoned == 0 || n_clean == 0)
        throw DataError("compute_metrics: need both clean and poisoned samples");
    Metrics m;
    m.poisoned_detection = static_cast<double>(det_p) / static_cast<double>(n_poisoned);
    m.poisoned_repair = static_cast<double>(rep_p) / static_cast<double>(n_poisoned);
    m.clean_detection = static_cast<double>(det_c) / static_cast<double>(n_clean);
    m.clean_repair = static_cast<double>(rep_c) / static_cast<double>(n_clean);
    return m;
}

double strip_entropy(const Model& m, const Tensor& X, const Dataset& pool,
                     const StripConfig& cfg, std::uint64_t sample_seed) {
    if (pool.samples.empty()) throw DataError("strip_entropy: empty overlay pool");
    if (cfg.overlay_count < 1) throw ConfigError("strip_entropy: overlay_count must be >= 1");
    SplitMix64 rng(sample_seed);
    const float w = cfg.blend_weight;
    double total = 0.0;
    Tensor blend(X.shape);
    for (int i = 0; i < cfg.overlay_count; ++i) {
        const Tensor& overlay =
            pool.samples[static_cast<std::size_t>(rng.below(pool.samples.size()))].pixels;
        if (overlay.shape != X.shape)
            throw ShapeError("strip_entropy: overlay shape differs from input");
        for (std::size_t j = 0; j < blend.data.size(); ++j)
            blend.data[j] =
                std::clamp(w * X.data[j] + (1.0f - w) * overlay.data[j], 0.0f, 1.0f);
        auto [logits, trace] = forward(m, blend);
        (void)trace;
        const std::vector<double> p = softmax_f64(logits.data);
        double h = 0.0;
        for (double pi : p)
            if (pi > 0.0) h -= pi * std::log2(pi);
        total += h;
    }
    return total / cfg.overlay_count;
}

bool strip_is_poisoned(double entropy, double threshold) { return entropy < threshold; }

double strip_calibrate(std::vector<double> clean_entropies, double fp_percentile) {
    if (clean_entropies.empty()) throw DataError("strip_calibrate: no clean entropies");
    if (fp_percentile < 0.0 || fp_percentile > 100.0)
        throw ConfigError("strip_calibrate: percentile must be in [0, 100]");
    std::sort(clean_entropies.begin(), clean_entropies.end());
    std::size_t idx = static_cast<std::size_t>(
        fp_percentile / 100.0 * static_cast<double>(clean_entropies.size()));
    idx = std::min(idx, clean_entropies.size() - 1);
    return clean_entropies[idx];
}

ExperimentReport run_experiment(const Model& m, const Dataset& clean_test,
                                const Dataset& poisoned_test, const ExperimentConfig& cfg,
                                FigureBundle* figures) {
    validate_model(m);
    if (cfg.repetitions < 1) throw ConfigError("run_experiment: repetitions must be >= 1");

    ExperimentReport report;
    report.class_count = m.class_count;
    report.alpha = cfg.alpha;
    report.repetitions = cfg.repetitions;
    report.seed = cfg.seed;
    report.threshold_percent = cfg.threshold_percent;
    report.candidates = cfg.candidates;
    report.method = attribution_method_name(cfg.method);
    report.tree = cfg.tree;
    report.guess_enabled = cfg.guess_enabled;
    report.strip_enabled = cfg.strip_enabled;
    report.strip = cfg.strip;

    for (int r = 0; r < cfg.repetitions; ++r) {
        RepetitionResult rep;
        rep.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(r));
        auto mark = std::chrono::steady_clock::now();
        try {
            SplitSpec split{cfg.alpha, rep.seed};
            auto [gen, val] = make_gen_val_split(clean_test, poisoned_test, split);
            rep.timings.split_s = seconds_since(mark);

            MineResult mine = mine_patterns(m, gen, cfg.tree, cfg.threads);
            rep.inferred_target = infer_target_label(mine.all_patterns);
            PatternSet P = select_P(mine.all_patterns, rep.inferred_target);
            rep.pattern_count = static_cast<int>(P.patterns.size());
            rep.timings.mine_s = seconds_since(mark);

            std::vector<DeltaHeatmap> deltas =
                build_delta_maps(m, gen, P, rep.inferred_target, cfg.method, cfg.threads);
            rep.threshold_used =
                cfg.threshold_percent > 0.0
                    ? cfg.threshold_percent
                    : (P.patterns.empty()
                           ? 10.0
                           : tune_threshold(m, gen, P, deltas, cfg.candidates, cfg.mask_value,
                                            cfg.threads));
            ImportantPixels imp = select_important_pixels(deltas, rep.threshold_used);
            if (figures && r == 0) {
                figures->present = true;
                figures->hm_c =
                    normalize(summarize_correct_heatmap(m, gen, cfg.method, cfg.threads));
                figures->deltas = deltas;
            }
            rep.timings.attribute_s = seconds_since(mark);

            MonitorConfig mask_cfg;
            mask_cfg.layer_id = mine.layer_id;
            mask_cfg.class_count = m.class_count;
            mask_cfg.target_label = rep.inferred_target;
            mask_cfg.mode = CorrectionMode::input_mask;
            mask_cfg.P = P;
            mask_cfg.imp_pixels = imp.pixel_lists;
            mask_cfg.mask_value = cfg.mask_value;
            validate_monitor_config(mask_cfg, m);

            std::vector<SampleOutcome> outcomes;
            run_mask_stage(m, val, mask_cfg, cfg.threads, outcomes);
            rep.mask = compute_metrics(outcomes);

            std::vector<int> bare_hits(val.samples.size(), -1);
            parallel_for(val.samples.size(), cfg.threads, [&](std::size_t i) {
                const ImageSample& s = val.samples[i];
                if (s.poisoned) return;
                bare_hits[i] = predict(m, s.pixels) == s.ideal_label ? 1 : 0;
            });
            std::int64_t bare_total = 0, bare_ok = 0;
            for (int h : bare_hits) {
                if (h < 0) continue;
                ++bare_total;
                bare_ok += h;
            }
            rep.bare_clean_accuracy =
                static_cast<double>(bare_ok) / static_cast<double>(bare_total);

            if (cfg.guess_enabled) {
                PatternSet P_c = mine_correct_patterns(m, gen, cfg.tree, cfg.threads);
                if (!P_c.patterns.empty()) {
                    MonitorConfig guess_cfg = mask_cfg;
                    guess_cfg.mode = CorrectionMode::label_guess;
                    guess_cfg.P_c = P_c;
                    guess_cfg.imp_pixels.clear();
                    guess_cfg.seed = derive_seed(rep.seed, 77);
                    validate_monitor_config(guess_cfg, m);
                    std::vector<SampleOutcome> guess_out(val.samples.size());
                    parallel_for(val.samples.size(), cfg.threads, [&](std::size_t i) {
                        const ImageSample& s = val.samples[i];
                        DefenseResult res = classify_with_defense(m, s.pixels, guess_cfg, s.id);
                        guess_out[i] = {s.poisoned, res.verdict.poisoned, res.final_label,
                                        s.ideal_label};
                    });
                    rep.guess = compute_metrics(guess_out);
                    std::int64_t detected = 0, hit = 0;
                    for (const SampleOutcome& o : guess_out) {
                        if (!o.truly_poisoned || !o.flagged) continue;
                        ++detected;
                        hit += o.final_label == o.ideal_label ? 1 : 0;
                    }
                    rep.guess_detected = static_cast<int>(detected);
                    rep.guess_accuracy =
                        detected == 0 ? 0.0
                                      : static_cast<double>(hit) / static_cast<double>(detected);
                    rep.guess_ran = true;
                }
            }
            rep.timings.monitor_s = seconds_since(mark);

            if (cfg.strip_enabled) {
                const Dataset pool = clean_subset(gen);
                const std::uint64_t strip_seed = derive_seed(rep.seed, 50);
                std::vector<double> calib(pool.samples.size());
                parallel_for(pool.samples.size(), cfg.threads, [&](std::size_t i) {
                    calib[i] = strip_entropy(
                        m, pool.samples[i].pixels, pool, cfg.strip,
                        derive_seed(strip_seed, static_cast<std::uint64_t>(pool.samples[i].id)));
                });
                rep.strip_threshold = strip_calibrate(calib, cfg.strip.fp_percentile);

                std::vector<double> val_entropy(val.samples.size());
                parallel_for(val.samples.size(), cfg.threads, [&](std::size_t i) {
                    val_entropy[i] = strip_entropy(
                        m, val.samples[i].pixels, pool, cfg.strip,
                        derive_seed(strip_seed, static_cast<std::uint64_t>(val.samples[i].id)));
                });
                std::int64_t p_total = 0, p_flag = 0, c_total = 0, c_pass = 0;
                for (std::size_t i = 0; i < val.samples.size(); ++i) {
                    const bool flagged = strip_is_poisoned(val_entropy[i], rep.strip_threshold);
                    if (val.samples[i].poisoned) {
                        ++p_total;
                        p_flag += flagged ? 1 : 0;
                    } else {
                        ++c_total;
                        c_pass += flagged ? 0 : 1;
                    }
                }
                rep.strip_poisoned_detection =
                    static_cast<double>(p_flag) / static_cast<double>(p_total);
                rep.strip_clean_detection =
                    static_cast<double>(c_pass) / static_cast<double>(c_total);
                rep.strip_ran = true;
            }
            rep.timings.strip_s = seconds_since(mark);
        } catch (const std::exception& e) {
            rep.error = e.what();
        }
        report.reps.push_back(std::move(rep));
    }

    for (const RepetitionResult& rep : report.reps) {
        if (!rep.error.empty()) continue;
        ++report.completed;
        report.mean_mask.poisoned_detection += rep.mask.poisoned_detection;
        report.mean_mask.poisoned_repair += rep.mask.poisoned_repair;
        report.mean_mask.clean_detection += rep.mask.clean_detection;
        report.mean_mask.clean_repair += rep.mask.clean_repair;
        report.mean_bare_clean_accuracy += rep.bare_clean_accuracy;
        if (rep.guess_ran) {
            ++report.guess_rep_count;
            report.mean_guess.poisoned_detection += rep.guess.poisoned_detection;
            report.mean_guess.poisoned_repair += rep.guess.poisoned_repair;
            report.mean_guess.clean_detection += rep.guess.clean_detection;
            report.mean_guess.clean_repair += rep.guess.clean_repair;
            report.mean_guess_accuracy += rep.guess_accuracy;
        }
        if (rep.strip_ran) {
            ++report.strip_rep_count;
            report.mean_strip_poisoned_detection += rep.strip_poisoned_detection;
            report.mean_strip_clean_detection += rep.strip_clean_detection;
        }
    }
    if (report.completed > 0) {
        const double n = report.completed;
        report.mean_mask.poisoned_detection /= n;
        report.mean_mask.poisoned_repair /= n;
        report.mean_mask.clean_detection /= n;
        report.mean_mask.clean_repair /= n;
        report.mean_bare_clean_accuracy /= n;
    }
    if (report.guess_rep_count > 0) {
        const double n = report.guess_rep_count;
        report.mean_guess.poisoned_detection /= n;
        report.mean_guess.poisoned_repair /= n;
        report.mean_guess.clean_detection /= n;
        report.mean_guess.clean_repair /= n;
        report.mean_guess_accuracy /= n;
    }
    if (report.strip_rep_count > 0) {
        const double n = report.strip_rep_count;
        report.mean_strip_poisoned_detection /= n;
        report.mean_strip_clean_detection /= n;
    }
    return report;
}

std::string serialize_report(const ExperimentReport& report) {
    ordered_json doc;
    doc["class_count"] = report.class_count;
    doc["alpha"] = report.alpha;
    doc["repetitions"] = report.repetitions;
    doc["seed"] = report.seed;
    if (report.threshold_percent > 0.0)
        doc["threshold_policy"] = report.threshold_percent;
    else
        doc["threshold_policy"] = "auto";
    doc["candidates"] = report.candidates;
    doc["method"] = report.method;
    doc["tree"] = {{"min_leaf", report.tree.min_leaf}, {"max_depth", report.tree.max_depth}};
    doc["strip_config"] = ordered_json{{"enabled", report.strip_enabled},
                                       {"overlays", report.strip.overlay_count},
                                       {"blend_weight", report.strip.blend_weight},
                                       {"fp_percentile", report.strip.fp_percentile}};
    doc["repetition_results"] = ordered_json::array();
    for (const RepetitionResult& rep : report.reps) {
        ordered_json jr;
        jr["seed"] = rep.seed;
        if (!rep.error.empty()) {
            jr["error"] = rep.error;
            doc["repetition_results"].push_back(std::move(jr));
            continue;
        }
        jr["error"] = nullptr;
        jr["inferred_target"] = rep.inferred_target;
        jr["threshold_percent"] = rep.threshold_used;
        jr["pattern_count"] = rep.pattern_count;
        jr["bare_clean_accuracy"] = rep.bare_clean_accuracy;
        jr["mask"] = metrics_json(rep.mask);
        if (rep.guess_ran) {
            jr["guess"] = metrics_json(rep.guess);
            jr["guess_accuracy"] = rep.guess_accuracy;
            jr["guess_detected"] = rep.guess_detected;
        } else {
            jr["guess"] = nullptr;
            jr["guess_accuracy"] = nullptr;
            jr["guess_detected"] = nullptr;
        }
        if (rep.strip_ran) {
            // STRIP only detects; repair cells are explicitly non-applicable.
            jr["strip"] = ordered_json{{"threshold", rep.strip_threshold},
                                       {"poisoned_detection", rep.strip_poisoned_detection},
                                       {"clean_detection", rep.strip_clean_detection},
                                       {"poisoned_repair", nullptr},
                                       {"clean_repair", nullptr}};
        } else {
            jr["strip"] = nullptr;
        }
        doc["repetition_results"].push_back(std::move(jr));
    }
    doc["completed"] = report.completed;
    ordered_json mean;
    if (report.completed > 0) {
        mean["mask"] = metrics_json(report.mean_mask);
        mean["bare_clean_accuracy"] = report.mean_bare_clean_accuracy;
    } else {
        mean["mask"] = nullptr;
        mean["bare_clean_accuracy"] = nullptr;
    }
    if (report.guess_rep_count > 0) {
        mean["guess"] = metrics_json(report.mean_guess);
        mean["guess_accuracy"] = report.mean_guess_accuracy;
    } else {
        mean["guess"] = nullptr;
        mean["guess_accuracy"] = nullptr;
    }
    if (report.strip_rep_count > 0) {
        mean["strip_poisoned_detection"] = report.mean_strip_poisoned_detection;
        mean["strip_clean_detection"] = report.mean_strip_clean_detection;
    } else {
        mean["strip_poisoned_detection"] = nullptr;
        mean["strip_clean_detection"] = nullptr;
    }
    doc["mean"] = std::move(mean);
    doc["external_baselines"] = ordered_json::object();  // import slots for other tools
    return doc.dump(2) + "\n";
}

void export_report(const ExperimentReport& report, const std::string& path) {
    atomic_write_file(path, serialize_report(report));
}

void export_timings(const ExperimentReport& report, const std::string& path) {
    ordered_json doc;
    doc["repetition_timings"] = ordered_json::array();
    double total = 0.0;
    for (const RepetitionResult& rep : report.reps) {
        const StageTimings& t = rep.timings;
        doc["repetition_timings"].push_back(ordered_json{{"split_s", t.split_s},
                                                         {"mine_s", t.mine_s},
                                                         {"attribute_s", t.attribute_s},
                                                         {"monitor_s", t.monitor_s},
                                                         {"strip_s", t.strip_s}});
        total += t.split_s + t.mine_s + t.attribute_s + t.monitor_s + t.strip_s;
    }
    doc["total_s"] = total;
    atomic_write_file(path, doc.dump(2) + "\n");
}

void export_heatmap_pgm(int h, int w, const std::vector<float>& values,
                        const std::string& path) {
    atomic_write_file(path, heatmap_to_pgm(h, w, values));
}

void export_figures(const ExperimentReport& report, const FigureBundle& figures,
                    const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create figures directory " + dir + ": " + ec.message());

    if (figures.present) {
        export_heatmap_pgm(figures.hm_c.h, figures.hm_c.w, figures.hm_c.v,
                           (fs::path(dir) / "hm_c.pgm").string());
        for (std::size_t i = 0; i < figures.deltas.size(); ++i)
            export_heatmap_pgm(figures.deltas[i].h, figures.deltas[i].w, figures.deltas[i].v,
                               (fs::path(dir) / ("delta_" + std::to_string(i) + ".pgm")).string());
    }

    std::string csv =
        "rep,seed,error,inferred_target,threshold_percent,mask_poisoned_detection,"
        "mask_poisoned_repair,mask_clean_detection,mask_clean_repair,bare_clean_accuracy,"
        "guess_accuracy,strip_poisoned_detection,strip_clean_detection\n";
    char line[512];
    for (std::size_t i = 0; i < report.reps.size(); ++i) {
        const RepetitionResult& r = report.reps[i];
        if (!r.error.empty()) {
            csv += std::to_string(i) + "," + std::to_string(r.seed) + ",error,,,,,,,,,,\n";
            continue;
        }
        std::snprintf(line, sizeof line,
                      "%zu,%llu,,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s,%s,%s\n", i,
                      static_cast<unsigned long long>(r.seed), r.inferred_target,
                      r.threshold_used, r.mask.poisoned_detection, r.mask.poisoned_repair,
                      r.mask.clean_detection, r.mask.clean_repair, r.bare_clean_accuracy,
                      r.guess_ran ? std::to_string(r.guess_accuracy).c_str() : "",
                      r.strip_ran ? std::to_string(r.strip_poisoned_detection).c_str() : "",
                      r.strip_ran ? std::to_string(r.strip_clean_detection).c_str() : "");
        csv += line;
    }
    if (report.completed > 0) {
        std::snprintf(line, sizeof line, "mean,,,,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%s,%s,%s\n", "",
                      report.mean_mask.poisoned_detection, report.mean_mask.poisoned_repair,
                      report.mean_mask.clean_detection, report.mean_mask.clean_repair,
                      report.mean_bare_clean_accuracy,
                      report.guess_rep_count > 0
                          ? std::to_string(report.mean_guess_accuracy).c_str()
                          : "",
                      report.strip_rep_count > 0
                          ? std::to_string(report.mean_strip_poisoned_detection).c_str()
                          : "",
                      report.strip_rep_count > 0
                          ? std::to_string(report.mean_strip_clean_detection).c_str()
                          : "");
        csv += line;
    }
    atomic_write_file((fs::path(dir) / "metrics.csv").string(), csv);
}

}  // namespace pguard
