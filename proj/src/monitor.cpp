#include "pguard/monitor.hpp"

#include <string>

#include "pguard/util.hpp"

namespace pguard {

void validate_monitor_config(const MonitorConfig& cfg, const Model& m) {
    if (cfg.layer_id < 0 || cfg.layer_id >= static_cast<int>(m.layers.size()))
        throw ConfigError("monitor: layer_id " + std::to_string(cfg.layer_id) +
                          " not a model layer");
    if (m.layers[static_cast<std::size_t>(cfg.layer_id)].kind != LayerKind::dense)
        throw ConfigError("monitor: layer_id must name a dense layer");
    if (cfg.class_count != m.class_count)
        throw ConfigError("monitor: class_count does not match the model");
    const int width = m.layers[static_cast<std::size_t>(cfg.layer_id)].units;
    auto check_set = [&](const PatternSet& set, const char* name) {
        for (const Pattern& p : set.patterns)
            for (const Conjunct& c : p.conjuncts)
                if (c.neuron < 0 || c.neuron >= width)
                    throw ConfigError(std::string("monitor: ") + name +
                                      " conjunct neuron out of layer width");
    };
    check_set(cfg.P, "P");
    if (cfg.mode == CorrectionMode::input_mask) {
        if (cfg.imp_pixels.size() != cfg.P.patterns.size())
            throw ConfigError("monitor: imp_pixels must align 1:1 with P");
        const int pixels = m.input_shape[0] * m.input_shape[1];
        for (const auto& list : cfg.imp_pixels)
            for (int pix : list)
                if (pix < 0 || pix >= pixels)
                    throw ConfigError("monitor: imp_pixels index " + std::to_string(pix) +
                                      " outside the " + std::to_string(pixels) +
                                      "-pixel image");
        if (cfg.mask_value.size() != 1 &&
            static_cast<int>(cfg.mask_value.size()) != m.input_shape[2])
            throw ConfigError("monitor: mask_value must have 1 or C entries");
    } else {
        if (cfg.P_c.patterns.empty())
            throw ConfigError("monitor: label_guess mode requires P_c patterns");
        if (cfg.target_label < 0 || cfg.target_label >= cfg.class_count)
            throw ConfigError("monitor: label_guess mode requires a valid target_label");
        check_set(cfg.P_c, "P_c");
    }
}

bool match(const Pattern& p, const std::vector<float>& activations) {
    return matches(p, activations);
}

Verdict detect(const std::vector<float>& activations, const PatternSet& P) {
    for (std::size_t i = 0; i < P.patterns.size(); ++i)
        if (matches(P.patterns[i], activations)) return {true, static_cast<int>(i)};
    return {false, -1};
}

Tensor correct_input(const Tensor& X, const std::vector<int>& pixels,
                     const std::vector<float>& mask_value) {
    if (X.shape.size() != 3) throw ShapeError("correct_input expects an H x W x C image");
    const int h = X.shape[0], w = X.shape[1], c = X.shape[2];
    if (mask_value.size() != 1 && static_cast<int>(mask_value.size()) != c)
        throw ConfigError("mask_value must have 1 or C entries");
    Tensor out = X;
    for (int pix : pixels) {
        if (pix < 0 || pix >= h * w)
            throw DataError("masked pixel index " + std::to_string(pix) +
                            " outside image of " + std::to_string(h * w) + " pixels");
        const int y = pix / w, x = pix % w;
        for (int ch = 0; ch < c; ++ch)
            out.at(y, x, ch) = mask_value.size() == 1
                                   ? mask_value[0]
                                   : mask_value[static_cast<std::size_t>(ch)];
    }
    return out;
}

int guess_label(const std::vector<float>& activations, const PatternSet& P_c, int target_label,
                int class_count, SplitMix64& rng) {
    if (class_count < 2)
        throw ConfigError("guess_label: need at least 2 classes to exclude the target");
    for (const Pattern& p : P_c.patterns)
        if (matches(p, activations)) return p.base_label;
    int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(class_count - 1)));
    if (pick >= target_label) ++pick;
    return pick;
}

DefenseResult classify_with_defense(const Model& m, const Tensor& X, const MonitorConfig& cfg,
                                    int sample_id) {
    auto [logits, trace] = forward(m, X);
    const std::vector<float>& acts =
        trace.outputs[static_cast<std::size_t>(cfg.layer_id)].data;

    DefenseResult result;
    result.original_label = argmax_label(logits);
    result.verdict = detect(acts, cfg.P);
    if (!result.verdict.poisoned) {
        result.final_label = result.original_label;
        return result;
    }
    if (cfg.mode == CorrectionMode::input_mask) {
        Tensor fixed = correct_input(
            X, cfg.imp_pixels[static_cast<std::size_t>(result.verdict.matched_pattern)],
            cfg.mask_value);
        result.final_label = predict(m, fixed);
        result.corrected = std::move(fixed);
        return result;
    }
    SplitMix64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(sample_id)));
    result.final_label = guess_label(acts, cfg.P_c, cfg.target_label, cfg.class_count, rng);
    return result;
}

}  // namespace pguard
