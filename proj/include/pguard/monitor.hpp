#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pguard/nn.hpp"
#include "pguard/patterns.hpp"
#include "pguard/rng.hpp"

namespace pguard {

enum class CorrectionMode { input_mask, label_guess };

/// Everything the run-time defense needs: mis-classification patterns P
/// sorted by support descending, per-pattern important pixel lists aligned
/// with P (input_mask mode), and correct-label patterns P_c plus the poison
/// target (label_guess mode).
struct MonitorConfig {
    int layer_id = -1;
    int class_count = 0;
    int target_label = -1;
    CorrectionMode mode = CorrectionMode::input_mask;
    PatternSet P;
    std::vector<std::vector<int>> imp_pixels;
    std::vector<float> mask_value = {0.0f};  // one value broadcast, or one per channel
    PatternSet P_c;
    std::uint64_t seed = 0;
};

void validate_monitor_config(const MonitorConfig& cfg, const Model& m);

struct Verdict {
    bool poisoned = false;
    int matched_pattern = -1;  // index into P, -1 when clean
};

struct DefenseResult {
    int original_label = -1;
    int final_label = -1;
    Verdict verdict;
    std::optional<Tensor> corrected;  // input_mask mode only, and only when poisoned
};

/// True iff every conjunct of p holds on the activation vector.
bool match(const Pattern& p, const std::vector<float>& activations);

/// First matching pattern wins; P being support-sorted makes this the
/// highest-support match.
Verdict detect(const std::vector<float>& activations, const PatternSet& P);

/// Copy of X with the listed spatial pixels (row-major y*W+x) set to
/// mask_value on every channel. X itself is never modified.
Tensor correct_input(const Tensor& X, const std::vector<int>& pixels,
                     const std::vector<float>& mask_value);

/// Base label of the first satisfied P_c pattern; otherwise a uniform
/// random label excluding the poison target.
int guess_label(const std::vector<float>& activations, const PatternSet& P_c, int target_label,
                int class_count, SplitMix64& rng);

/// One defended classification: forward, detect against P, and on a match
/// either mask the pattern's pixels and re-run the model or guess via P_c.
/// A clean verdict returns the model's own label. sample_id seeds the
/// label-guess fallback so concurrent calls stay deterministic.
DefenseResult classify_with_defense(const Model& m, const Tensor& X, const MonitorConfig& cfg,
                                    int sample_id);

}  // namespace pguard
