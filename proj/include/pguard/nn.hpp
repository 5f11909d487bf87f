#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pguard/tensor.hpp"

namespace pguard {

enum class LayerKind { conv2d, maxpool2d, flatten, dense, relu, softmax };

std::string layer_kind_name(LayerKind kind);

/// One layer of the closed layer set. Field use by kind:
///   conv2d:    out_channels, kernel_h, kernel_w, stride, pad
///   maxpool2d: kernel_h, kernel_w, stride
///   dense:     units, last_dense (exactly one dense layer per model is
///              flagged as the last dense before the output; its raw
///              pre-activation outputs feed the pattern miner)
///   flatten / relu / softmax: no parameters
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int out_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    int stride = 1;
    int pad = 0;
    int units = 0;
    bool last_dense = false;
};

/// Ordered layer graph with per-layer weight tensors.
/// Weight layout: conv2d holds {kernel [kh,kw,in_c,out_c], bias [out_c]},
/// dense holds {W [units,in], bias [units]}, other kinds hold nothing.
struct Model {
    std::vector<int> input_shape;  // H, W, C
    int class_count = 0;
    std::vector<LayerSpec> layers;
    std::vector<std::vector<Tensor>> weights;
};

/// Per-layer outputs for one input, indexed by layer id.
struct ForwardTrace {
    std::vector<Tensor> outputs;
};

/// Validates spec chaining and weight shapes; throws ShapeError naming the
/// offending layer. Returns the output shape of every layer.
std::vector<std::vector<int>> layer_output_shapes(const std::vector<int>& input_shape,
                                                  const std::vector<LayerSpec>& layers);
void validate_model(const Model& m);

/// Index of the flagged last-dense layer.
int flagged_dense_layer(const Model& m);

/// Allocates weight tensors (zero-filled) matching the layer specs.
std::vector<std::vector<Tensor>> make_weight_tensors(const std::vector<int>& input_shape,
                                                     const std::vector<LayerSpec>& layers);

std::pair<Tensor, ForwardTrace> forward(const Model& m, const Tensor& input);

int predict(const Model& m, const Tensor& input);
int argmax_label(const Tensor& logits);

/// d(logit[class_index]) / d(output of layer_id); layer_id must name a
/// conv2d or dense layer. Same shape as that layer's output.
Tensor grad_class_wrt_layer(const Model& m, const Tensor& input, int class_index, int layer_id);

/// d(logit[class_index]) / d(input pixels); same shape as the input.
Tensor grad_class_wrt_input(const Model& m, const Tensor& input, int class_index);

struct LossGrads {
    float loss = 0.0f;
    std::vector<std::vector<Tensor>> weight_grads;  // shaped like Model::weights
};

/// Cross-entropy of softmax(logits) against target, with gradients for
/// every weight tensor.
LossGrads backward_loss(const Model& m, const Tensor& input, int target);

/// Runs only the layers after layer_id, starting from that layer's output.
Tensor forward_from(const Model& m, int layer_id, const Tensor& activation);

// Float64 reference paths for numerical test oracles. Weights are widened
// to double on the fly; no trace, no gradients.
std::vector<double> forward_f64(const Model& m, const std::vector<double>& input);
std::vector<double> forward_from_f64(const Model& m, int layer_id,
                                     const std::vector<double>& activation);
double loss_f64(const Model& m, const std::vector<double>& input, int target);

/// Softmax of a logit vector computed in double (used for loss/entropy
/// paths only; patterns and attribution read pre-softmax logits).
std::vector<double> softmax_f64(const std::vector<float>& logits);

// Model container: 8-byte magic "ANTNET01", uint32 LE manifest length,
// UTF-8 text manifest, concatenated little-endian float32 weight blobs in
// manifest order.
std::string serialize_model(const Model& m);
Model deserialize_model(const std::string& bytes);
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

/// Parses the text architecture description (the manifest syntax without
/// the binary envelope): `input H W C`, `classes N`, one layer per line.
Model parse_architecture(const std::string& text);

}  // namespace pguard
