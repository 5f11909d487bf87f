#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pguard/attribution.hpp"
#include "pguard/dataset.hpp"
#include "pguard/monitor.hpp"
#include "pguard/nn.hpp"
#include "pguard/patterns.hpp"

namespace pguard {

struct Metrics {
    double poisoned_detection = 0.0;
    double poisoned_repair = 0.0;
    double clean_detection = 0.0;
    double clean_repair = 0.0;
};

struct SampleOutcome {
    bool truly_poisoned = false;
    bool flagged = false;
    int final_label = -1;
    int ideal_label = -1;
};

/// Detection rates count correct verdicts per class of sample; repair rates
/// count final_label == ideal_label, so an undetected poisoned input that
/// the bare model happens to classify ideally still counts as repaired, and
/// a false-positive correction that breaks a clean prediction hurts
/// clean_repair.
Metrics compute_metrics(const std::vector<SampleOutcome>& outcomes);

struct StripConfig {
    int overlay_count = 16;
    float blend_weight = 0.5f;
    double fp_percentile = 1.0;  // calibration: % of clean inputs allowed below threshold
    std::uint64_t seed = 0;
};

/// Mean base-2 prediction entropy over overlay_count seeded blends
/// clamp(w*X + (1-w)*O) with clean pool images O.
double strip_entropy(const Model& m, const Tensor& X, const Dataset& pool,
                     const StripConfig& cfg, std::uint64_t sample_seed);

/// Low entropy marks a poisoned input (strict <).
bool strip_is_poisoned(double entropy, double threshold);

/// Threshold at the fp_percentile of the sorted clean entropies.
double strip_calibrate(std::vector<double> clean_entropies, double fp_percentile);

struct ExperimentConfig {
    double alpha = 0.25;
    int repetitions = 10;
    std::uint64_t seed = 0;
    TreeParams tree;
    AttributionMethod method = AttributionMethod::gradcam;
    double threshold_percent = -1.0;  // < 0 selects per-repetition auto tuning
    std::vector<double> candidates = {2.0, 5.0, 10.0, 25.0};
    std::vector<float> mask_value = {0.0f};
    bool guess_enabled = true;
    bool strip_enabled = true;
    StripConfig strip;
    int threads = 1;
};

struct StageTimings {
    double split_s = 0.0;
    double mine_s = 0.0;
    double attribute_s = 0.0;
    double monitor_s = 0.0;
    double strip_s = 0.0;
};

struct RepetitionResult {
    std::uint64_t seed = 0;
    std::string error;  // non-empty marks an aborted repetition
    int inferred_target = -1;
    double threshold_used = -1.0;
    int pattern_count = 0;
    double bare_clean_accuracy = 0.0;  // VAL clean accuracy without any defense
    Metrics mask;
    bool guess_ran = false;
    Metrics guess;
    double guess_accuracy = 0.0;  // ideal-label hit rate on detected poisoned inputs
    int guess_detected = 0;
    bool strip_ran = false;
    double strip_threshold = 0.0;
    double strip_poisoned_detection = 0.0;
    double strip_clean_detection = 0.0;
    StageTimings timings;
};

struct ExperimentReport {
    int class_count = 0;
    double alpha = 0.0;
    int repetitions = 0;
    std::uint64_t seed = 0;
    double threshold_percent = -1.0;
    std::vector<double> candidates;
    std::string method;
    TreeParams tree;
    bool guess_enabled = true;
    bool strip_enabled = true;
    StripConfig strip;
    std::vector<RepetitionResult> reps;
    // Means are arithmetic means over repetitions that completed.
    Metrics mean_mask;
    double mean_bare_clean_accuracy = 0.0;
    int guess_rep_count = 0;
    Metrics mean_guess;
    double mean_guess_accuracy = 0.0;
    int strip_rep_count = 0;
    double mean_strip_poisoned_detection = 0.0;
    double mean_strip_clean_detection = 0.0;
    int completed = 0;
};

/// Rep-0 artifacts kept for figure export.
struct FigureBundle {
    bool present = false;
    NormalizedHeatmap hm_c;
    std::vector<DeltaHeatmap> deltas;
};

/// Per repetition r with seed derive_seed(cfg.seed, r): split -> mine ->
/// attribute -> monitor over VAL, plus optional label-guess and STRIP runs.
/// A failed repetition records its error and the experiment continues.
ExperimentReport run_experiment(const Model& m, const Dataset& clean_test,
                                const Dataset& poisoned_test, const ExperimentConfig& cfg,
                                FigureBundle* figures = nullptr);

/// Deterministic JSON: everything except wall-clock timings, which go to
/// export_timings so byte-identical reports stay byte-identical.
std::string serialize_report(const ExperimentReport& report);
void export_report(const ExperimentReport& report, const std::string& path);
void export_timings(const ExperimentReport& report, const std::string& path);

void export_heatmap_pgm(int h, int w, const std::vector<float>& values, const std::string& path);

/// Writes hm_c.pgm, delta_<i>.pgm, and metrics.csv into dir.
void export_figures(const ExperimentReport& report, const FigureBundle& figures,
                    const std::string& dir);

}  // namespace pguard
