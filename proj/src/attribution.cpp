#include "pguard/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "pguard/monitor.hpp"
#include "pguard/util.hpp"

namespace pguard {
namespace {

int last_conv_layer(const Model& m) {
    int last = -1;
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        if (m.layers[i].kind == LayerKind::conv2d) last = static_cast<int>(i);
    return last;
}

/// Bilinear resize with half-pixel centers, src (hs x ws) -> dst (hd x wd).
std::vector<float> upsample_bilinear(const std::vector<float>& src, int hs, int ws, int hd,
                                     int wd) {
    std::vector<float> dst(static_cast<std::size_t>(hd) * wd);
    for (int y = 0; y < hd; ++y) {
        double sy = (y + 0.5) * static_cast<double>(hs) / hd - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(hs - 1));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, hs - 1);
        const double fy = sy - y0;
        for (int x = 0; x < wd; ++x) {
            double sx = (x + 0.5) * static_cast<double>(ws) / wd - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(ws - 1));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, ws - 1);
            const double fx = sx - x0;
            const double top = (1.0 - fx) * src[static_cast<std::size_t>(y0 * ws + x0)] +
                               fx * src[static_cast<std::size_t>(y0 * ws + x1)];
            const double bot = (1.0 - fx) * src[static_cast<std::size_t>(y1 * ws + x0)] +
                               fx * src[static_cast<std::size_t>(y1 * ws + x1)];
            dst[static_cast<std::size_t>(y * wd + x)] =
                static_cast<float>((1.0 - fy) * top + fy * bot);
        }
    }
    return dst;
}

Heatmap cam_from_conv(const Model& m, const Tensor& image, int class_index, int conv_id,
                      AttributionMethod method) {
    auto [logits, trace] = forward(m, image);
    (void)logits;
    const Tensor& A = trace.outputs[static_cast<std::size_t>(conv_id)];
    const Tensor G = grad_class_wrt_layer(m, image, class_index, conv_id);
    const int h = A.shape[0], w = A.shape[1], k = A.shape[2];

    std::vector<double> weights(static_cast<std::size_t>(k), 0.0);
    if (method == AttributionMethod::gradcam) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < k; ++c) weights[static_cast<std::size_t>(c)] += G.at(y, x, c);
        for (auto& wt : weights) wt /= static_cast<double>(h) * w;
    } else {
        // Closed form under the exponential-output assumption: higher-order
        // terms reduce to powers of the first-order gradient.
        std::vector<double> chan_sum(static_cast<std::size_t>(k), 0.0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < k; ++c) chan_sum[static_cast<std::size_t>(c)] += A.at(y, x, c);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < k; ++c) {
                    const double g = G.at(y, x, c);
                    const double denom =
                        2.0 * g * g + chan_sum[static_cast<std::size_t>(c)] * g * g * g;
                    const double alpha = denom == 0.0 ? 0.0 : (g * g) / denom;
                    weights[static_cast<std::size_t>(c)] += alpha * std::max(g, 0.0);
                }
            }
        }
    }

    std::vector<float> cam(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int c = 0; c < k; ++c) acc += weights[static_cast<std::size_t>(c)] * A.at(y, x, c);
            cam[static_cast<std::size_t>(y * w + x)] =
                static_cast<float>(std::max(acc, 0.0));
        }
    }

    Heatmap hm;
    hm.h = m.input_shape[0];
    hm.w = m.input_shape[1];
    hm.class_index = class_index;
    hm.method = attribution_method_name(method);
    hm.v = (h == hm.h && w == hm.w) ? std::move(cam)
                                    : upsample_bilinear(cam, h, w, hm.h, hm.w);
    return hm;
}

Heatmap mean_heatmap(const Model& m, const Dataset& gen, const std::vector<std::size_t>& members,
                     const std::vector<int>& classes, AttributionMethod method, int threads) {
    std::vector<Heatmap> maps(members.size());
    parallel_for(members.size(), threads, [&](std::size_t i) {
        maps[i] = attribution_map(m, gen.samples[members[i]].pixels, classes[i], method);
    });
    const std::size_t n = static_cast<std::size_t>(maps[0].h) * maps[0].w;
    std::vector<double> acc(n, 0.0);
    for (const Heatmap& hm : maps)
        for (std::size_t j = 0; j < n; ++j) acc[j] += hm.v[j];

    Heatmap out;
    out.h = maps[0].h;
    out.w = maps[0].w;
    out.class_index = -1;
    out.method = maps[0].method;
    out.v.resize(n);
    for (std::size_t j = 0; j < n; ++j)
        out.v[j] = static_cast<float>(acc[j] / static_cast<double>(maps.size()));
    return out;
}

}  // namespace

AttributionMethod attribution_method_from_string(const std::string& s) {
    if (s == "gradcam") return AttributionMethod::gradcam;
    if (s == "gradcam++" || s == "gradcam_pp") return AttributionMethod::gradcam_pp;
    if (s == "input_gradient") return AttributionMethod::input_gradient;
    throw ConfigError("unknown attribution method: " + s);
}

std::string attribution_method_name(AttributionMethod m) {
    switch (m) {
        case AttributionMethod::gradcam: return "gradcam";
        case AttributionMethod::gradcam_pp: return "gradcam++";
        case AttributionMethod::input_gradient: return "input_gradient";
    }
    return "?";
}

Heatmap attribution_map(const Model& m, const Tensor& image, int class_index,
                        AttributionMethod method) {
    if (class_index < 0 || class_index >= m.class_count)
        throw ConfigError("attribution_map: class index out of range");
    if (method == AttributionMethod::input_gradient) {
        const Tensor g = grad_class_wrt_input(m, image, class_index);
        Heatmap hm;
        hm.h = m.input_shape[0];
        hm.w = m.input_shape[1];
        hm.class_index = class_index;
        hm.method = attribution_method_name(method);
        hm.v.assign(static_cast<std::size_t>(hm.h) * hm.w, 0.0f);
        const int c = m.input_shape[2];
        for (int y = 0; y < hm.h; ++y)
            for (int x = 0; x < hm.w; ++x) {
                double acc = 0.0;
                for (int ch = 0; ch < c; ++ch) acc += std::abs(g.at(y, x, ch));
                hm.v[static_cast<std::size_t>(y * hm.w + x)] = static_cast<float>(acc);
            }
        return hm;
    }
    const int conv = last_conv_layer(m);
    if (conv < 0)
        throw ConfigError("attribution_map: model has no conv layer; use the input_gradient "
                          "method for dense-only models");
    return cam_from_conv(m, image, class_index, conv, method);
}

Heatmap summarize_pattern_heatmap(const Model& m, const Dataset& gen, const Pattern& p,
                                  int target, AttributionMethod method, int threads) {
    const int layer = flagged_dense_layer(m);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < gen.samples.size(); ++i) {
        auto [logits, trace] = forward(m, gen.samples[i].pixels);
        (void)logits;
        if (matches(p, trace.outputs[static_cast<std::size_t>(layer)].data))
            members.push_back(i);
    }
    if (members.empty())
        throw PipelineError("pattern has no matching samples in the provided data");
    std::vector<int> classes(members.size(), target);
    return mean_heatmap(m, gen, members, classes, method, threads);
}

Heatmap summarize_correct_heatmap(const Model& m, const Dataset& gen, AttributionMethod method,
                                  int threads) {
    std::vector<std::size_t> members;
    std::vector<int> classes;
    std::vector<int> preds(gen.samples.size());
    parallel_for(gen.samples.size(), threads, [&](std::size_t i) {
        preds[i] = predict(m, gen.samples[i].pixels);
    });
    for (std::size_t i = 0; i < gen.samples.size(); ++i) {
        if (preds[i] == gen.samples[i].ideal_label) {
            members.push_back(i);
            classes.push_back(preds[i]);
        }
    }
    if (members.empty())
        throw PipelineError("no correctly classified samples to summarize");
    return mean_heatmap(m, gen, members, classes, method, threads);
}

NormalizedHeatmap normalize(const Heatmap& hm) {
    NormalizedHeatmap out;
    out.h = hm.h;
    out.w = hm.w;
    out.v.resize(hm.v.size());
    double sum = 0.0;
    for (float x : hm.v) sum += x;
    if (sum == 0.0) {
        out.degenerate = true;
        std::fill(out.v.begin(), out.v.end(), 0.0f);
        return out;
    }
    for (std::size_t i = 0; i < hm.v.size(); ++i)
        out.v[i] = static_cast<float>(hm.v[i] / sum);
    return out;
}

DeltaHeatmap delta(const NormalizedHeatmap& hm_p, const NormalizedHeatmap& hm_c) {
    if (hm_p.h != hm_c.h || hm_p.w != hm_c.w)
        throw ShapeError("delta: heatmap shapes differ");
    DeltaHeatmap out;
    out.h = hm_p.h;
    out.w = hm_p.w;
    out.v.resize(hm_p.v.size());
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = hm_p.v[i] - hm_c.v[i];
    return out;
}

std::vector<int> top_pixels(const DeltaHeatmap& d, double threshold_percent) {
    if (threshold_percent <= 0.0 || threshold_percent > 100.0)
        throw ConfigError("threshold percent must be in (0, 100]");
    const std::int64_t total = static_cast<std::int64_t>(d.v.size());
    const std::int64_t k = std::llround(threshold_percent / 100.0 * static_cast<double>(total));
    if (k == 0)
        throw ConfigError("threshold " + std::to_string(threshold_percent) +
                          "% selects zero pixels at this resolution");

    std::vector<int> idx(d.v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        const float va = d.v[static_cast<std::size_t>(a)];
        const float vb = d.v[static_cast<std::size_t>(b)];
        if (va != vb) return va > vb;
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(std::min(k, total)));
    return idx;
}

std::vector<DeltaHeatmap> build_delta_maps(const Model& m, const Dataset& gen,
                                           const PatternSet& P, int target,
                                           AttributionMethod method, int threads) {
    std::vector<DeltaHeatmap> out;
    if (P.patterns.empty()) return out;
    const NormalizedHeatmap hm_c = normalize(summarize_correct_heatmap(m, gen, method, threads));
    out.reserve(P.patterns.size());
    for (const Pattern& p : P.patterns) {
        const NormalizedHeatmap hm_p =
            normalize(summarize_pattern_heatmap(m, gen, p, target, method, threads));
        out.push_back(delta(hm_p, hm_c));
    }
    return out;
}

ImportantPixels select_important_pixels(const std::vector<DeltaHeatmap>& deltas,
                                        double threshold_percent) {
    ImportantPixels out;
    out.threshold_percent = threshold_percent;
    out.pixel_lists.reserve(deltas.size());
    for (const DeltaHeatmap& d : deltas) out.pixel_lists.push_back(top_pixels(d, threshold_percent));
    return out;
}

double tune_threshold(const Model& m, const Dataset& gen, const PatternSet& P,
                      const std::vector<DeltaHeatmap>& deltas,
                      const std::vector<double>& candidates,
                      const std::vector<float>& mask_value, int threads) {
    if (candidates.empty()) throw ConfigError("tune_threshold: no candidate thresholds");
    std::vector<std::size_t> poisoned;
    for (std::size_t i = 0; i < gen.samples.size(); ++i)
        if (gen.samples[i].poisoned) poisoned.push_back(i);
    if (poisoned.empty()) {
        std::cerr << "warning: no poisoned samples to tune on; using threshold 10%\n";
        return 10.0;
    }

    std::vector<double> sorted(candidates);
    std::sort(sorted.begin(), sorted.end());

    MonitorConfig cfg;
    cfg.layer_id = flagged_dense_layer(m);
    cfg.class_count = m.class_count;
    cfg.mode = CorrectionMode::input_mask;
    cfg.P = P;
    cfg.mask_value = mask_value;

    double best_pct = sorted.front();
    double best_rate = -1.0;
    for (double pct : sorted) {
        cfg.imp_pixels = select_important_pixels(deltas, pct).pixel_lists;
        std::vector<int> repaired(poisoned.size(), 0);
        parallel_for(poisoned.size(), threads, [&](std::size_t i) {
            const ImageSample& s = gen.samples[poisoned[i]];
            DefenseResult r = classify_with_defense(m, s.pixels, cfg, s.id);
            repaired[i] = r.final_label == s.ideal_label ? 1 : 0;
        });
        const double rate =
            std::accumulate(repaired.begin(), repaired.end(), 0.0) /
            static_cast<double>(poisoned.size());
        if (rate > best_rate) {
            best_rate = rate;
            best_pct = pct;
        }
    }
    return best_pct;
}

std::string heatmap_to_pgm(int h, int w, const std::vector<float>& values) {
    if (static_cast<std::size_t>(h) * w != values.size())
        throw ShapeError("heatmap_to_pgm: dimensions do not match value count");
    float lo = values.empty() ? 0.0f : values[0];
    float hi = lo;
    for (float v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + values.size());
    const double span = static_cast<double>(hi) - lo;
    for (float v : values) {
        int byte = span == 0.0
                       ? 0
                       : static_cast<int>(std::lround((v - lo) / span * 255.0));
        out.push_back(static_cast<char>(std::clamp(byte, 0, 255)));
    }
    return out;
}

std::string heatmap_to_raw(const std::vector<float>& values) {
    std::string out;
    out.reserve(values.size() * 4);
    for (float v : values) append_f32_le(out, v);
    return out;
}

}  // namespace pguard
