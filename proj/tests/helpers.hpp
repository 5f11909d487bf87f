#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "pguard/nn.hpp"
#include "pguard/rng.hpp"
#include "pguard/train.hpp"

namespace testutil {

/// Single dense layer, explicit weights. W is row-major [units, in].
inline pguard::Model dense_model(int in, int units, const std::vector<float>& w,
                                 const std::vector<float>& bias, bool add_relu = false) {
    pguard::Model m;
    m.input_shape = {1, 1, in};
    m.class_count = units;
    pguard::LayerSpec flat;
    flat.kind = pguard::LayerKind::flatten;
    m.layers.push_back(flat);
    pguard::LayerSpec d;
    d.kind = pguard::LayerKind::dense;
    d.units = units;
    d.last_dense = true;
    m.layers.push_back(d);
    if (add_relu) {
        pguard::LayerSpec r;
        r.kind = pguard::LayerKind::relu;
        m.layers.push_back(r);
    }
    m.weights = pguard::make_weight_tensors(m.input_shape, m.layers);
    m.weights[1][0].data = w;
    m.weights[1][1].data = bias;
    return m;
}

inline pguard::Model identity_dense_model(int n) {
    std::vector<float> w(static_cast<std::size_t>(n) * n, 0.0f);
    for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i * n + i)] = 1.0f;
    return dense_model(n, n, w, std::vector<float>(static_cast<std::size_t>(n), 0.0f));
}

/// Small seeded CNN: conv -> relu -> maxpool -> flatten -> dense -> relu ->
/// dense; input h x w x c. Weights are He-initialized from the seed.
inline pguard::Model tiny_cnn(int h, int w, int c, int classes, std::uint64_t seed,
                              int conv_channels = 2, int hidden = 6) {
    pguard::Model m;
    m.input_shape = {h, w, c};
    m.class_count = classes;
    pguard::LayerSpec conv;
    conv.kind = pguard::LayerKind::conv2d;
    conv.out_channels = conv_channels;
    conv.kernel_h = conv.kernel_w = 3;
    conv.stride = 1;
    conv.pad = 1;
    m.layers.push_back(conv);
    pguard::LayerSpec relu;
    relu.kind = pguard::LayerKind::relu;
    m.layers.push_back(relu);
    pguard::LayerSpec pool;
    pool.kind = pguard::LayerKind::maxpool2d;
    pool.kernel_h = pool.kernel_w = 2;
    pool.stride = 2;
    m.layers.push_back(pool);
    pguard::LayerSpec flat;
    flat.kind = pguard::LayerKind::flatten;
    m.layers.push_back(flat);
    pguard::LayerSpec d1;
    d1.kind = pguard::LayerKind::dense;
    d1.units = hidden;
    d1.last_dense = true;
    m.layers.push_back(d1);
    m.layers.push_back(relu);
    pguard::LayerSpec d2;
    d2.kind = pguard::LayerKind::dense;
    d2.units = classes;
    m.layers.push_back(d2);

    m.weights = pguard::make_weight_tensors(m.input_shape, m.layers);
    pguard::init_weights(m, seed);
    return m;
}

inline pguard::Tensor random_image(int h, int w, int c, std::uint64_t seed) {
    pguard::SplitMix64 rng(seed);
    pguard::Tensor t({h, w, c});
    for (auto& v : t.data) v = static_cast<float>(rng.uniform());
    return t;
}

inline std::vector<double> widen(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

struct FdStats {
    int checked = 0;
    double worst_rel = 0.0;
    bool ok = true;
    std::string where;
};

/// Central finite differences of logit[class_index] w.r.t. the output of
/// layer_id, evaluated with the float64 tail path, compared coordinatewise
/// against grad_class_wrt_layer.
inline FdStats fd_check_class_grad(const pguard::Model& m, const pguard::Tensor& input,
                                   int class_index, int layer_id, double step = 1e-4,
                                   double tol = 1e-3) {
    auto [logits, trace] = pguard::forward(m, input);
    (void)logits;
    const pguard::Tensor g = pguard::grad_class_wrt_layer(m, input, class_index, layer_id);
    const std::vector<double> base = widen(trace.outputs[static_cast<std::size_t>(layer_id)].data);

    FdStats st;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> hi = base, lo = base;
        hi[i] += step;
        lo[i] -= step;
        const double up = pguard::forward_from_f64(m, layer_id, hi)[static_cast<std::size_t>(
            class_index)];
        const double dn = pguard::forward_from_f64(m, layer_id, lo)[static_cast<std::size_t>(
            class_index)];
        const double fd = (up - dn) / (2.0 * step);
        const double got = g.data[i];
        const double mag = std::max(std::abs(fd), std::abs(got));
        if (mag <= 1e-6) continue;
        const double rel = std::abs(got - fd) / mag;
        ++st.checked;
        if (rel > st.worst_rel) st.worst_rel = rel;
        if (rel > tol) {
            st.ok = false;
            st.where = "layer " + std::to_string(layer_id) + " coord " + std::to_string(i);
        }
    }
    return st;
}

/// ReLU sides and max-pool argmax choices along the trace. If the signature
/// differs between the two perturbed models, the finite-difference interval
/// crosses a kink, where central differences do not estimate the derivative.
inline std::vector<int> kink_signature(const pguard::Model& m, const pguard::Tensor& input,
                                       const pguard::ForwardTrace& trace) {
    std::vector<int> sig;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const pguard::LayerSpec& spec = m.layers[li];
        if (spec.kind == pguard::LayerKind::relu) {
            for (float v : trace.outputs[li].data) sig.push_back(v > 0.0f ? 1 : 0);
        } else if (spec.kind == pguard::LayerKind::maxpool2d) {
            const pguard::Tensor& pin = li == 0 ? input : trace.outputs[li - 1];
            const int h = pin.shape[0], w = pin.shape[1], c = pin.shape[2];
            const int oh = (h - spec.kernel_h) / spec.stride + 1;
            const int ow = (w - spec.kernel_w) / spec.stride + 1;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    for (int ch = 0; ch < c; ++ch) {
                        int best_at = 0;
                        float best = std::numeric_limits<float>::lowest();
                        for (int ky = 0; ky < spec.kernel_h; ++ky)
                            for (int kx = 0; kx < spec.kernel_w; ++kx) {
                                const int iy = oy * spec.stride + ky;
                                const int ix = ox * spec.stride + kx;
                                const float v = pin.data[static_cast<std::size_t>(
                                    (iy * w + ix) * c + ch)];
                                if (v > best) {
                                    best = v;
                                    best_at = ky * spec.kernel_w + kx;
                                }
                            }
                        sig.push_back(best_at);
                    }
        }
    }
    return sig;
}

/// Central finite differences of the cross-entropy loss w.r.t. every weight
/// coordinate, using the actual float-quantized step, compared against
/// backward_loss. Kink-crossing coordinates are skipped.
inline FdStats fd_check_weight_grads(const pguard::Model& m, const pguard::Tensor& input,
                                     int target, double step = 1e-3, double tol = 1e-3) {
    const pguard::LossGrads lg = pguard::backward_loss(m, input, target);
    const std::vector<double> x = widen(input.data);

    FdStats st;
    pguard::Model probe = m;
    for (std::size_t li = 0; li < m.weights.size(); ++li) {
        for (std::size_t wi = 0; wi < m.weights[li].size(); ++wi) {
            for (std::size_t k = 0; k < m.weights[li][wi].data.size(); ++k) {
                const float orig = m.weights[li][wi].data[k];
                const float wp = static_cast<float>(static_cast<double>(orig) + step);
                const float wm = static_cast<float>(static_cast<double>(orig) - step);
                probe.weights[li][wi].data[k] = wp;
                const double up = pguard::loss_f64(probe, x, target);
                auto [logits_p, trace_p] = pguard::forward(probe, input);
                probe.weights[li][wi].data[k] = wm;
                const double dn = pguard::loss_f64(probe, x, target);
                auto [logits_m, trace_m] = pguard::forward(probe, input);
                probe.weights[li][wi].data[k] = orig;
                (void)logits_p;
                (void)logits_m;
                if (kink_signature(probe, input, trace_p) !=
                    kink_signature(probe, input, trace_m))
                    continue;
                const double fd =
                    (up - dn) / (static_cast<double>(wp) - static_cast<double>(wm));
                const double got = lg.weight_grads[li][wi].data[k];
                const double mag = std::max(std::abs(fd), std::abs(got));
                if (mag <= 1e-6) continue;
                const double rel = std::abs(got - fd) / mag;
                ++st.checked;
                if (rel > st.worst_rel) st.worst_rel = rel;
                if (rel > tol) {
                    st.ok = false;
                    st.where = "weights[" + std::to_string(li) + "][" + std::to_string(wi) +
                               "][" + std::to_string(k) + "]";
                }
            }
        }
    }
    return st;
}

}  // namespace testutil
