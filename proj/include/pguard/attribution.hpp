#pragma once

#include <string>
#include <vector>

#include "pguard/dataset.hpp"
#include "pguard/nn.hpp"
#include "pguard/patterns.hpp"

namespace pguard {

enum class AttributionMethod { gradcam, gradcam_pp, input_gradient };

AttributionMethod attribution_method_from_string(const std::string& s);
std::string attribution_method_name(AttributionMethod m);

/// Class-evidence map at input resolution; non-negative by construction.
struct Heatmap {
    int h = 0;
    int w = 0;
    std::vector<float> v;  // row-major h*w
    int class_index = -1;
    std::string method;
};

/// Unit-sum heatmap; an all-zero input cannot be scaled, so it passes
/// through unchanged with the degenerate flag set.
struct NormalizedHeatmap {
    int h = 0;
    int w = 0;
    std::vector<float> v;
    bool degenerate = false;
};

/// Difference of two normalized maps; values may be negative and sum to ~0.
struct DeltaHeatmap {
    int h = 0;
    int w = 0;
    std::vector<float> v;
};

/// Per-pattern top-pixel lists, aligned 1:1 with the PatternSet they were
/// built from.
struct ImportantPixels {
    double threshold_percent = 0.0;
    std::vector<std::vector<int>> pixel_lists;
};

/// gradcam: channel weights are spatial means of the class-logit gradient
/// at the last conv layer; map = relu(sum_k w_k A^k), bilinearly upsampled.
/// gradcam_pp: per-location weights from the closed form over gradient
/// powers. input_gradient: per-pixel |d logit / d input| summed over
/// channels, for models without conv layers.
Heatmap attribution_map(const Model& m, const Tensor& image, int class_index,
                        AttributionMethod method);

/// Mean attribution map (class = target) over the GEN samples whose flagged
/// dense activations satisfy the pattern. Errors if none match.
Heatmap summarize_pattern_heatmap(const Model& m, const Dataset& gen, const Pattern& p,
                                  int target, AttributionMethod method, int threads = 1);

/// Mean attribution map over correctly classified GEN samples, each
/// attributed to its own predicted class.
Heatmap summarize_correct_heatmap(const Model& m, const Dataset& gen, AttributionMethod method,
                                  int threads = 1);

NormalizedHeatmap normalize(const Heatmap& hm);

DeltaHeatmap delta(const NormalizedHeatmap& hm_p, const NormalizedHeatmap& hm_c);

/// Indices of the k = round(pct/100 * h*w) largest values, descending,
/// ties by lower row-major index. k must come out >= 1.
std::vector<int> top_pixels(const DeltaHeatmap& d, double threshold_percent);

/// One difference map per pattern in P, all against the shared correct-map
/// baseline. This is the threshold-independent part of pixel selection.
std::vector<DeltaHeatmap> build_delta_maps(const Model& m, const Dataset& gen,
                                           const PatternSet& P, int target,
                                           AttributionMethod method, int threads = 1);

ImportantPixels select_important_pixels(const std::vector<DeltaHeatmap>& deltas,
                                        double threshold_percent);

/// Picks the candidate threshold maximizing the poisoned repair rate on
/// GEN's own poisoned samples under mask-mode defense; ties go to the
/// smaller threshold. GEN without poisoned samples falls back to 10 with a
/// warning.
double tune_threshold(const Model& m, const Dataset& gen, const PatternSet& P,
                      const std::vector<DeltaHeatmap>& deltas,
                      const std::vector<double>& candidates,
                      const std::vector<float>& mask_value, int threads = 1);

/// 8-bit grayscale PGM (P5), min-max scaled; a constant map renders black.
std::string heatmap_to_pgm(int h, int w, const std::vector<float>& values);
/// Raw little-endian float32 dump of the map values.
std::string heatmap_to_raw(const std::vector<float>& values);

}  // namespace pguard
