#include "pguard/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "pguard/util.hpp"

namespace pguard {
namespace {

struct Dims {
    int h = 0, w = 0, c = 0;  // c==0 means 1-D vector of length h
    bool is_vec() const { return c == 0; }
    std::int64_t count() const { return is_vec() ? h : static_cast<std::int64_t>(h) * w * c; }
    std::vector<int> shape() const {
        return is_vec() ? std::vector<int>{h} : std::vector<int>{h, w, c};
    }
};

Dims dims_of(const std::vector<int>& shape) {
    if (shape.size() == 1) return {shape[0], 0, 0};
    if (shape.size() == 3) return {shape[0], shape[1], shape[2]};
    throw ShapeError("expected rank-1 or rank-3 tensor, got " + shape_str(shape));
}

std::string layer_label(int id, LayerKind kind) {
    return "layer " + std::to_string(id) + " (" + layer_kind_name(kind) + ")";
}

Dims out_dims(int id, const LayerSpec& spec, const Dims& in) {
    switch (spec.kind) {
        case LayerKind::conv2d: {
            if (in.is_vec())
                throw ShapeError(layer_label(id, spec.kind) + ": needs an image input");
            if (spec.kernel_h <= 0 || spec.kernel_w <= 0 || spec.stride <= 0 || spec.pad < 0 ||
                spec.out_channels <= 0)
                throw ShapeError(layer_label(id, spec.kind) + ": bad parameters");
            int h = (in.h + 2 * spec.pad - spec.kernel_h) / spec.stride + 1;
            int w = (in.w + 2 * spec.pad - spec.kernel_w) / spec.stride + 1;
            if (in.h + 2 * spec.pad < spec.kernel_h || in.w + 2 * spec.pad < spec.kernel_w)
                throw ShapeError(layer_label(id, spec.kind) + ": kernel larger than input");
            return {h, w, spec.out_channels};
        }
        case LayerKind::maxpool2d: {
            if (in.is_vec())
                throw ShapeError(layer_label(id, spec.kind) + ": needs an image input");
            if (spec.kernel_h <= 0 || spec.kernel_w <= 0 || spec.stride <= 0)
                throw ShapeError(layer_label(id, spec.kind) + ": bad parameters");
            if (in.h < spec.kernel_h || in.w < spec.kernel_w)
                throw ShapeError(layer_label(id, spec.kind) + ": window larger than input");
            int h = (in.h - spec.kernel_h) / spec.stride + 1;
            int w = (in.w - spec.kernel_w) / spec.stride + 1;
            return {h, w, in.c};
        }
        case LayerKind::flatten:
            return {static_cast<int>(in.count()), 0, 0};
        case LayerKind::dense:
            if (!in.is_vec())
                throw ShapeError(layer_label(id, spec.kind) +
                                 ": needs a flattened input, got " + shape_str(in.shape()));
            if (spec.units <= 0) throw ShapeError(layer_label(id, spec.kind) + ": bad units");
            return {spec.units, 0, 0};
        case LayerKind::relu:
        case LayerKind::softmax:
            return in;
    }
    throw ShapeError("unknown layer kind");
}

// --- templated forward kernels (float for production, double for oracles) ---

template <typename T>
void conv2d_fwd(const LayerSpec& s, const Dims& in, const Dims& out, const float* kernel,
                const float* bias, const T* x, T* y) {
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            for (int oc = 0; oc < out.c; ++oc) {
                T acc = static_cast<T>(bias[oc]);
                for (int ky = 0; ky < s.kernel_h; ++ky) {
                    int iy = oy * s.stride + ky - s.pad;
                    if (iy < 0 || iy >= in.h) continue;
                    for (int kx = 0; kx < s.kernel_w; ++kx) {
                        int ix = ox * s.stride + kx - s.pad;
                        if (ix < 0 || ix >= in.w) continue;
                        const T* xp = x + (static_cast<std::int64_t>(iy) * in.w + ix) * in.c;
                        const float* kp =
                            kernel + ((static_cast<std::int64_t>(ky) * s.kernel_w + kx) * in.c) *
                                         out.c;
                        for (int ic = 0; ic < in.c; ++ic)
                            acc += xp[ic] * static_cast<T>(kp[ic * out.c + oc]);
                    }
                }
                y[(static_cast<std::int64_t>(oy) * out.w + ox) * out.c + oc] = acc;
            }
        }
    }
}

template <typename T>
void maxpool_fwd(const LayerSpec& s, const Dims& in, const Dims& out, const T* x, T* y) {
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            for (int c = 0; c < out.c; ++c) {
                T best = std::numeric_limits<T>::lowest();
                for (int ky = 0; ky < s.kernel_h; ++ky) {
                    for (int kx = 0; kx < s.kernel_w; ++kx) {
                        int iy = oy * s.stride + ky;
                        int ix = ox * s.stride + kx;
                        T v = x[(static_cast<std::int64_t>(iy) * in.w + ix) * in.c + c];
                        if (v > best) best = v;  // first scanned element wins ties
                    }
                }
                y[(static_cast<std::int64_t>(oy) * out.w + ox) * out.c + c] = best;
            }
        }
    }
}

template <typename T>
void dense_fwd(const Dims& in, const Dims& out, const float* w, const float* bias, const T* x,
               T* y) {
    for (int o = 0; o < out.h; ++o) {
        T acc = static_cast<T>(bias[o]);
        const float* row = w + static_cast<std::int64_t>(o) * in.h;
        for (int i = 0; i < in.h; ++i) acc += static_cast<T>(row[i]) * x[i];
        y[o] = acc;
    }
}

template <typename T>
void softmax_fwd(std::int64_t n, const T* x, T* y) {
    T mx = x[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    T sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
    }
    for (std::int64_t i = 0; i < n; ++i) y[i] /= sum;
}

template <typename T>
std::vector<T> run_layer(const Model& m, int id, const Dims& in, const Dims& out,
                         const std::vector<T>& x) {
    const LayerSpec& s = m.layers[static_cast<std::size_t>(id)];
    std::vector<T> y(static_cast<std::size_t>(out.count()));
    switch (s.kind) {
        case LayerKind::conv2d:
            conv2d_fwd(s, in, out, m.weights[id][0].data.data(), m.weights[id][1].data.data(),
                       x.data(), y.data());
            break;
        case LayerKind::maxpool2d:
            maxpool_fwd(s, in, out, x.data(), y.data());
            break;
        case LayerKind::flatten:
            y = x;
            break;
        case LayerKind::dense:
            dense_fwd(in, out, m.weights[id][0].data.data(), m.weights[id][1].data.data(),
                      x.data(), y.data());
            break;
        case LayerKind::relu:
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
            break;
        case LayerKind::softmax:
            softmax_fwd(static_cast<std::int64_t>(x.size()), x.data(), y.data());
            break;
    }
    return y;
}

template <typename T>
std::vector<T> run_tail(const Model& m, int first_layer, std::vector<T> act) {
    auto shapes = layer_output_shapes(m.input_shape, m.layers);
    Dims in = first_layer == 0 ? dims_of(m.input_shape) : dims_of(shapes[first_layer - 1]);
    for (int id = first_layer; id < static_cast<int>(m.layers.size()); ++id) {
        Dims out = dims_of(shapes[id]);
        act = run_layer(m, id, in, out, act);
        in = out;
    }
    return act;
}

// --- float backward kernels ---

void conv2d_bwd(const LayerSpec& s, const Dims& in, const Dims& out, const float* kernel,
                const float* x, const float* dy, float* dx, float* dkernel, float* dbias) {
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            for (int oc = 0; oc < out.c; ++oc) {
                float g = dy[(static_cast<std::int64_t>(oy) * out.w + ox) * out.c + oc];
                if (dbias) dbias[oc] += g;
                for (int ky = 0; ky < s.kernel_h; ++ky) {
                    int iy = oy * s.stride + ky - s.pad;
                    if (iy < 0 || iy >= in.h) continue;
                    for (int kx = 0; kx < s.kernel_w; ++kx) {
                        int ix = ox * s.stride + kx - s.pad;
                        if (ix < 0 || ix >= in.w) continue;
                        std::int64_t xoff = (static_cast<std::int64_t>(iy) * in.w + ix) * in.c;
                        std::int64_t koff =
                            ((static_cast<std::int64_t>(ky) * s.kernel_w + kx) * in.c) * out.c;
                        for (int ic = 0; ic < in.c; ++ic) {
                            if (dx) dx[xoff + ic] += g * kernel[koff + ic * out.c + oc];
                            if (dkernel) dkernel[koff + ic * out.c + oc] += g * x[xoff + ic];
                        }
                    }
                }
            }
        }
    }
}

void maxpool_bwd(const LayerSpec& s, const Dims& in, const Dims& out, const float* x,
                 const float* dy, float* dx) {
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            for (int c = 0; c < out.c; ++c) {
                float best = std::numeric_limits<float>::lowest();
                std::int64_t arg = -1;
                for (int ky = 0; ky < s.kernel_h; ++ky) {
                    for (int kx = 0; kx < s.kernel_w; ++kx) {
                        int iy = oy * s.stride + ky;
                        int ix = ox * s.stride + kx;
                        std::int64_t off = (static_cast<std::int64_t>(iy) * in.w + ix) * in.c + c;
                        if (x[off] > best) {  // gradient routes to the first max scanned
                            best = x[off];
                            arg = off;
                        }
                    }
                }
                dx[arg] += dy[(static_cast<std::int64_t>(oy) * out.w + ox) * out.c + c];
            }
        }
    }
}

void dense_bwd(const Dims& in, const Dims& out, const float* w, const float* x, const float* dy,
               float* dx, float* dw, float* dbias) {
    for (int o = 0; o < out.h; ++o) {
        float g = dy[o];
        if (dbias) dbias[o] += g;
        const float* row = w + static_cast<std::int64_t>(o) * in.h;
        float* drow = dw ? dw + static_cast<std::int64_t>(o) * in.h : nullptr;
        for (int i = 0; i < in.h; ++i) {
            if (dx) dx[i] += g * row[i];
            if (drow) drow[i] += g * x[i];
        }
    }
}

// Backpropagates dy (gradient w.r.t. layer `id` output) one layer, producing
// the gradient w.r.t. its input. Optionally accumulates weight grads.
std::vector<float> layer_vjp(const Model& m, int id, const Dims& in, const Dims& out,
                             const std::vector<float>& x_in, const std::vector<float>& y_out,
                             const std::vector<float>& dy, std::vector<Tensor>* wgrads) {
    const LayerSpec& s = m.layers[static_cast<std::size_t>(id)];
    std::vector<float> dx(static_cast<std::size_t>(in.count()), 0.0f);
    switch (s.kind) {
        case LayerKind::conv2d:
            conv2d_bwd(s, in, out, m.weights[id][0].data.data(), x_in.data(), dy.data(),
                       dx.data(), wgrads ? (*wgrads)[0].data.data() : nullptr,
                       wgrads ? (*wgrads)[1].data.data() : nullptr);
            break;
        case LayerKind::maxpool2d:
            maxpool_bwd(s, in, out, x_in.data(), dy.data(), dx.data());
            break;
        case LayerKind::flatten:
            dx = dy;
            break;
        case LayerKind::dense:
            dense_bwd(in, out, m.weights[id][0].data.data(), x_in.data(), dy.data(), dx.data(),
                      wgrads ? (*wgrads)[0].data.data() : nullptr,
                      wgrads ? (*wgrads)[1].data.data() : nullptr);
            break;
        case LayerKind::relu:
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = x_in[i] > 0.0f ? dy[i] : 0.0f;
            break;
        case LayerKind::softmax: {
            float dot = 0.0f;
            for (std::size_t i = 0; i < dy.size(); ++i) dot += dy[i] * y_out[i];
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y_out[i] * (dy[i] - dot);
            break;
        }
    }
    return dx;
}

void check_input_shape(const Model& m, const Tensor& input) {
    if (input.shape != m.input_shape)
        throw ShapeError("input shape " + shape_str(input.shape) +
                         " does not match model input " + shape_str(m.input_shape));
}

// Backward pass over the whole recorded trace. `seed` is the gradient w.r.t.
// the final layer output. Stops after producing the gradient w.r.t. the
// output of `stop_layer` (-1 runs down to the model input). When
// `weight_grads` is non-null, conv/dense weight gradients are accumulated.
std::vector<float> backprop(const Model& m, const Tensor& input, const ForwardTrace& trace,
                            std::vector<float> seed, int stop_layer,
                            std::vector<std::vector<Tensor>>* weight_grads) {
    auto shapes = layer_output_shapes(m.input_shape, m.layers);
    for (int id = static_cast<int>(m.layers.size()) - 1; id > stop_layer; --id) {
        const std::vector<float>& x_in =
            id == 0 ? input.data : trace.outputs[static_cast<std::size_t>(id - 1)].data;
        Dims in = id == 0 ? dims_of(m.input_shape) : dims_of(shapes[id - 1]);
        Dims out = dims_of(shapes[id]);
        seed = layer_vjp(m, id, in, out, x_in, trace.outputs[static_cast<std::size_t>(id)].data,
                         seed, weight_grads ? &(*weight_grads)[static_cast<std::size_t>(id)]
                                            : nullptr);
    }
    return seed;
}

// --- manifest text ---

void manifest_layer_line(std::ostringstream& out, const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::conv2d:
            out << "conv2d out=" << s.out_channels << " kernel=" << s.kernel_h << "x"
                << s.kernel_w << " stride=" << s.stride << " pad=" << s.pad;
            break;
        case LayerKind::maxpool2d:
            out << "maxpool2d kernel=" << s.kernel_h << "x" << s.kernel_w
                << " stride=" << s.stride;
            break;
        case LayerKind::flatten:
            out << "flatten";
            break;
        case LayerKind::dense:
            out << "dense units=" << s.units << " last=" << (s.last_dense ? 1 : 0);
            break;
        case LayerKind::relu:
            out << "relu";
            break;
        case LayerKind::softmax:
            out << "softmax";
            break;
    }
    out << "\n";
}

int parse_int_field(const std::string& line, const std::string& token, const std::string& key) {
    std::size_t eq = token.find('=');
    if (eq == std::string::npos || token.substr(0, eq) != key)
        throw FormatError("expected " + key + "=... in manifest line: " + line);
    try {
        return std::stoi(token.substr(eq + 1));
    } catch (const std::exception&) {
        throw FormatError("bad integer in manifest line: " + line);
    }
}

std::pair<int, int> parse_pair_field(const std::string& line, const std::string& token,
                                     const std::string& key) {
    std::size_t eq = token.find('=');
    if (eq == std::string::npos || token.substr(0, eq) != key)
        throw FormatError("expected " + key + "=AxB in manifest line: " + line);
    std::string v = token.substr(eq + 1);
    std::size_t x = v.find('x');
    if (x == std::string::npos) throw FormatError("expected AxB in manifest line: " + line);
    try {
        return {std::stoi(v.substr(0, x)), std::stoi(v.substr(x + 1))};
    } catch (const std::exception&) {
        throw FormatError("bad pair in manifest line: " + line);
    }
}

LayerSpec parse_layer_line(const std::string& line) {
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    std::vector<std::string> toks;
    for (std::string t; in >> t;) toks.push_back(t);
    LayerSpec s;
    auto want = [&](std::size_t n) {
        if (toks.size() != n) throw FormatError("bad manifest line: " + line);
    };
    if (kind == "conv2d") {
        want(4);
        s.kind = LayerKind::conv2d;
        s.out_channels = parse_int_field(line, toks[0], "out");
        auto [kh, kw] = parse_pair_field(line, toks[1], "kernel");
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.stride = parse_int_field(line, toks[2], "stride");
        s.pad = parse_int_field(line, toks[3], "pad");
    } else if (kind == "maxpool2d") {
        want(2);
        s.kind = LayerKind::maxpool2d;
        auto [kh, kw] = parse_pair_field(line, toks[0], "kernel");
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.stride = parse_int_field(line, toks[1], "stride");
    } else if (kind == "flatten") {
        want(0);
        s.kind = LayerKind::flatten;
    } else if (kind == "dense") {
        want(2);
        s.kind = LayerKind::dense;
        s.units = parse_int_field(line, toks[0], "units");
        s.last_dense = parse_int_field(line, toks[1], "last") != 0;
    } else if (kind == "relu") {
        want(0);
        s.kind = LayerKind::relu;
    } else if (kind == "softmax") {
        want(0);
        s.kind = LayerKind::softmax;
    } else {
        throw FormatError("unknown layer kind in manifest: " + line);
    }
    return s;
}

constexpr char kModelMagic[] = "ANTNET01";

}  // namespace

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::maxpool2d: return "maxpool2d";
        case LayerKind::flatten: return "flatten";
        case LayerKind::dense: return "dense";
        case LayerKind::relu: return "relu";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

std::vector<std::vector<int>> layer_output_shapes(const std::vector<int>& input_shape,
                                                  const std::vector<LayerSpec>& layers) {
    std::vector<std::vector<int>> shapes;
    shapes.reserve(layers.size());
    Dims cur = dims_of(input_shape);
    for (int id = 0; id < static_cast<int>(layers.size()); ++id) {
        cur = out_dims(id, layers[static_cast<std::size_t>(id)], cur);
        shapes.push_back(cur.shape());
    }
    return shapes;
}

void validate_model(const Model& m) {
    if (m.class_count < 1) throw ShapeError("model class_count must be >= 1");
    if (m.layers.empty()) throw ShapeError("model has no layers");
    auto shapes = layer_output_shapes(m.input_shape, m.layers);
    if (shapes.back() != std::vector<int>{m.class_count})
        throw ShapeError("final layer output " + shape_str(shapes.back()) +
                         " does not produce class_count=" + std::to_string(m.class_count) +
                         " logits");
    int flagged = 0;
    for (const auto& l : m.layers)
        if (l.kind == LayerKind::dense && l.last_dense) ++flagged;
    if (flagged != 1)
        throw ShapeError("exactly one dense layer must be flagged as last dense, found " +
                         std::to_string(flagged));

    if (m.weights.size() != m.layers.size()) throw ShapeError("weights/layers length mismatch");
    auto expected = make_weight_tensors(m.input_shape, m.layers);
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (expected[i].size() != m.weights[i].size())
            throw ShapeError(layer_label(static_cast<int>(i), m.layers[i].kind) +
                             ": wrong weight tensor count");
        for (std::size_t j = 0; j < expected[i].size(); ++j)
            if (expected[i][j].shape != m.weights[i][j].shape)
                throw ShapeError(layer_label(static_cast<int>(i), m.layers[i].kind) +
                                 ": weight shape " + shape_str(m.weights[i][j].shape) +
                                 ", expected " + shape_str(expected[i][j].shape));
    }
}

int flagged_dense_layer(const Model& m) {
    for (int i = 0; i < static_cast<int>(m.layers.size()); ++i)
        if (m.layers[static_cast<std::size_t>(i)].kind == LayerKind::dense &&
            m.layers[static_cast<std::size_t>(i)].last_dense)
            return i;
    throw ShapeError("model has no flagged dense layer");
}

std::vector<std::vector<Tensor>> make_weight_tensors(const std::vector<int>& input_shape,
                                                     const std::vector<LayerSpec>& layers) {
    std::vector<std::vector<Tensor>> ws;
    ws.reserve(layers.size());
    Dims cur = dims_of(input_shape);
    for (int id = 0; id < static_cast<int>(layers.size()); ++id) {
        const LayerSpec& s = layers[static_cast<std::size_t>(id)];
        Dims next = out_dims(id, s, cur);
        std::vector<Tensor> w;
        if (s.kind == LayerKind::conv2d) {
            w.emplace_back(std::vector<int>{s.kernel_h, s.kernel_w, cur.c, s.out_channels});
            w.emplace_back(std::vector<int>{s.out_channels});
        } else if (s.kind == LayerKind::dense) {
            w.emplace_back(std::vector<int>{s.units, cur.h});
            w.emplace_back(std::vector<int>{s.units});
        }
        ws.push_back(std::move(w));
        cur = next;
    }
    return ws;
}

std::pair<Tensor, ForwardTrace> forward(const Model& m, const Tensor& input) {
    check_input_shape(m, input);
    auto shapes = layer_output_shapes(m.input_shape, m.layers);
    ForwardTrace trace;
    trace.outputs.reserve(m.layers.size());
    Dims in = dims_of(m.input_shape);
    std::vector<float> cur = input.data;
    for (int id = 0; id < static_cast<int>(m.layers.size()); ++id) {
        Dims out = dims_of(shapes[static_cast<std::size_t>(id)]);
        cur = run_layer<float>(m, id, in, out, cur);
        Tensor t(shapes[static_cast<std::size_t>(id)], cur);
        if (!t.all_finite())
            throw NumericError("non-finite values after " +
                               layer_label(id, m.layers[static_cast<std::size_t>(id)].kind));
        trace.outputs.push_back(std::move(t));
        in = out;
    }
    return {trace.outputs.back(), std::move(trace)};
}

int argmax_label(const Tensor& logits) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.data.size()); ++i)
        if (logits.data[static_cast<std::size_t>(i)] > logits.data[static_cast<std::size_t>(best)])
            best = i;  // ties keep the lowest index
    return best;
}

int predict(const Model& m, const Tensor& input) {
    return argmax_label(forward(m, input).first);
}

Tensor grad_class_wrt_layer(const Model& m, const Tensor& input, int class_index, int layer_id) {
    if (layer_id < 0 || layer_id >= static_cast<int>(m.layers.size()))
        throw ShapeError("invalid layer id " + std::to_string(layer_id));
    LayerKind kind = m.layers[static_cast<std::size_t>(layer_id)].kind;
    if (kind != LayerKind::conv2d && kind != LayerKind::dense)
        throw ShapeError(layer_label(layer_id, kind) + ": gradients target conv2d or dense layers");
    if (class_index < 0 || class_index >= m.class_count)
        throw ShapeError("invalid class index " + std::to_string(class_index));

    auto [logits, trace] = forward(m, input);
    std::vector<float> seed(logits.data.size(), 0.0f);
    seed[static_cast<std::size_t>(class_index)] = 1.0f;
    std::vector<float> g = backprop(m, input, trace, std::move(seed), layer_id, nullptr);
    return Tensor(trace.outputs[static_cast<std::size_t>(layer_id)].shape, std::move(g));
}

Tensor grad_class_wrt_input(const Model& m, const Tensor& input, int class_index) {
    if (class_index < 0 || class_index >= m.class_count)
        throw ShapeError("invalid class index " + std::to_string(class_index));
    auto [logits, trace] = forward(m, input);
    std::vector<float> seed(logits.data.size(), 0.0f);
    seed[static_cast<std::size_t>(class_index)] = 1.0f;
    std::vector<float> g = backprop(m, input, trace, std::move(seed), -1, nullptr);
    return Tensor(m.input_shape, std::move(g));
}

LossGrads backward_loss(const Model& m, const Tensor& input, int target) {
    if (target < 0 || target >= m.class_count)
        throw ShapeError("invalid target " + std::to_string(target));
    auto [logits, trace] = forward(m, input);
    std::vector<double> p = softmax_f64(logits.data);

    LossGrads result;
    result.loss = static_cast<float>(-std::log(std::max(p[static_cast<std::size_t>(target)],
                                                        1e-300)));
    result.weight_grads = make_weight_tensors(m.input_shape, m.layers);

    std::vector<float> seed(logits.data.size());
    for (std::size_t i = 0; i < seed.size(); ++i) {
        seed[i] = static_cast<float>(p[i]) - (static_cast<int>(i) == target ? 1.0f : 0.0f);
    }
    backprop(m, input, trace, std::move(seed), -1, &result.weight_grads);
    return result;
}

Tensor forward_from(const Model& m, int layer_id, const Tensor& activation) {
    auto shapes = layer_output_shapes(m.input_shape, m.layers);
    if (layer_id < 0 || layer_id >= static_cast<int>(m.layers.size()))
        throw ShapeError("invalid layer id " + std::to_string(layer_id));
    if (activation.shape != shapes[static_cast<std::size_t>(layer_id)])
        throw ShapeError("activation shape " + shape_str(activation.shape) +
                         " does not match output of layer " + std::to_string(layer_id));
    std::vector<float> out = run_tail<float>(m, layer_id + 1, activation.data);
    return Tensor(shapes.back(), std::move(out));
}

std::vector<double> forward_f64(const Model& m, const std::vector<double>& input) {
    if (static_cast<std::int64_t>(input.size()) != numel(m.input_shape))
        throw ShapeError("f64 input length mismatch");
    return run_tail<double>(m, 0, input);
}

std::vector<double> forward_from_f64(const Model& m, int layer_id,
                                     const std::vector<double>& activation) {
    auto shapes = layer_output_shapes(m.input_shape, m.layers);
    if (layer_id < 0 || layer_id >= static_cast<int>(m.layers.size()))
        throw ShapeError("invalid layer id " + std::to_string(layer_id));
    if (static_cast<std::int64_t>(activation.size()) !=
        numel(shapes[static_cast<std::size_t>(layer_id)]))
        throw ShapeError("f64 activation length mismatch");
    return run_tail<double>(m, layer_id + 1, activation);
}

double loss_f64(const Model& m, const std::vector<double>& input, int target) {
    std::vector<double> logits = forward_f64(m, input);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0;
    for (double v : logits) sum += std::exp(v - mx);
    return std::log(sum) - (logits[static_cast<std::size_t>(target)] - mx);
}

std::vector<double> softmax_f64(const std::vector<float>& logits) {
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double sum = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

std::string serialize_model(const Model& m) {
    validate_model(m);
    std::ostringstream manifest;
    manifest << "input";
    for (int d : m.input_shape) manifest << " " << d;
    manifest << "\n";
    manifest << "classes " << m.class_count << "\n";
    manifest << "layers " << m.layers.size() << "\n";
    for (const auto& l : m.layers) manifest_layer_line(manifest, l);
    const std::string text = manifest.str();

    std::string out;
    out.append(kModelMagic, 8);
    append_u32_le(out, static_cast<std::uint32_t>(text.size()));
    out.append(text);
    for (const auto& layer_ws : m.weights)
        for (const auto& t : layer_ws)
            for (float v : t.data) append_f32_le(out, v);
    return out;
}

Model deserialize_model(const std::string& bytes) {
    if (bytes.size() < 12) throw FormatError("model file truncated (no header)");
    if (std::memcmp(bytes.data(), kModelMagic, 8) != 0)
        throw FormatError("bad model magic, expected ANTNET01");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint32_t manifest_len = read_u32_le(p + 8);
    if (bytes.size() < 12ull + manifest_len)
        throw FormatError("model file truncated (manifest incomplete)");
    std::string text = bytes.substr(12, manifest_len);

    Model m = parse_architecture(text);
    m.weights = make_weight_tensors(m.input_shape, m.layers);

    std::int64_t weight_count = 0;
    for (const auto& layer_ws : m.weights)
        for (const auto& t : layer_ws) weight_count += t.size();
    std::size_t blob_off = 12ull + manifest_len;
    std::size_t blob_len = bytes.size() - blob_off;
    if (blob_len != static_cast<std::size_t>(weight_count) * 4)
        throw FormatError("weight blob length " + std::to_string(blob_len) +
                          " does not match manifest (expected " +
                          std::to_string(weight_count * 4) + " bytes)");

    const unsigned char* w = p + blob_off;
    for (auto& layer_ws : m.weights)
        for (auto& t : layer_ws)
            for (auto& v : t.data) {
                v = read_f32_le(w);
                if (!std::isfinite(v)) throw FormatError("non-finite weight in model file");
                w += 4;
            }
    validate_model(m);
    return m;
}

void save_model(const Model& m, const std::string& path) {
    atomic_write_file(path, serialize_model(m));
}

Model load_model(const std::string& path) {
    return deserialize_model(read_file(path));
}

Model parse_architecture(const std::string& text) {
    Model m;
    std::istringstream in(text);
    std::string line;
    int declared_layers = -1;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string head;
        ls >> head;
        if (head == "input") {
            int d;
            m.input_shape.clear();
            while (ls >> d) m.input_shape.push_back(d);
            if (m.input_shape.size() != 3)
                throw FormatError("input line must carry H W C: " + line);
        } else if (head == "classes") {
            if (!(ls >> m.class_count)) throw FormatError("bad classes line: " + line);
        } else if (head == "layers") {
            if (!(ls >> declared_layers)) throw FormatError("bad layers line: " + line);
        } else {
            m.layers.push_back(parse_layer_line(line));
        }
    }
    if (m.input_shape.empty()) throw FormatError("architecture missing input line");
    if (m.class_count < 1) throw FormatError("architecture missing classes line");
    if (declared_layers >= 0 && declared_layers != static_cast<int>(m.layers.size()))
        throw FormatError("layers count " + std::to_string(declared_layers) +
                          " does not match " + std::to_string(m.layers.size()) + " layer lines");
    layer_output_shapes(m.input_shape, m.layers);  // shape-check the chain
    return m;
}

}  // namespace pguard
