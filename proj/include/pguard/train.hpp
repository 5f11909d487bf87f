#pragma once

#include <cstdint>
#include <vector>

#include "pguard/dataset.hpp"
#include "pguard/nn.hpp"

namespace pguard {

struct TrainConfig {
    int epochs = 12;
    int batch_size = 32;
    float learning_rate = 0.05f;
    float momentum = 0.9f;
    std::uint64_t seed = 0;
    int threads = 1;
};

/// Mean loss per epoch, appended as training progresses.
struct TrainLog {
    std::vector<float> epoch_loss;
};

/// He-normal initialization for conv/dense kernels, zero biases.
void init_weights(Model& m, std::uint64_t seed);

/// Minibatch SGD with momentum on softmax cross-entropy over train_label.
/// Deterministic for a fixed seed and any thread count. Throws NumericError
/// if the loss stops being finite.
TrainLog train(Model& m, const Dataset& data, const TrainConfig& cfg);

/// Fraction of samples whose prediction equals ideal_label.
double clean_accuracy(const Model& m, const Dataset& data, int threads = 1);

/// Fraction of samples with ideal_label != target that the model sends to
/// target; the measure of a planted trigger, evaluated on a fully
/// triggered dataset.
double attack_success_rate(const Model& m, const Dataset& triggered, int target_label,
                           int threads = 1);

}  // namespace pguard
