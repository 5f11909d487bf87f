#include "pguard/train.hpp"

#include <cmath>
#include <numeric>

#include "pguard/rng.hpp"
#include "pguard/util.hpp"

namespace pguard {
namespace {

// Fan-in per output unit for He scaling.
std::int64_t fan_in(const LayerSpec& spec, const Tensor& kernel) {
    if (spec.kind == LayerKind::conv2d)
        return static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w * kernel.shape[2];
    return kernel.shape[1];  // dense W is [units, in]
}

}  // namespace

void init_weights(Model& m, std::uint64_t seed) {
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        if (m.weights[li].empty()) continue;
        Tensor& kernel = m.weights[li][0];
        Tensor& bias = m.weights[li][1];
        SplitMix64 rng(derive_seed(seed, li));
        const double scale = std::sqrt(2.0 / static_cast<double>(fan_in(m.layers[li], kernel)));
        for (auto& v : kernel.data) v = static_cast<float>(scale * rng.gaussian());
        for (auto& v : bias.data) v = 0.0f;
    }
}

TrainLog train(Model& m, const Dataset& data, const TrainConfig& cfg) {
    validate_model(m);
    validate_dataset(data);
    if (data.samples.empty()) throw DataError("train: empty dataset");
    if (data.shape != m.input_shape) throw ShapeError("train: dataset shape != model input shape");
    if (data.class_count != m.class_count)
        throw ShapeError("train: dataset class_count != model class_count");
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("train: bad epochs/batch_size");

    std::vector<std::vector<Tensor>> velocity = make_weight_tensors(m.input_shape, m.layers);

    TrainLog log;
    const std::size_t n = data.samples.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        SplitMix64 shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            const std::size_t bs = end - start;

            // Per-sample gradients land in private slots; the sum below is a
            // fixed-order reduction so thread count cannot change the result.
            std::vector<LossGrads> grads(bs);
            parallel_for(bs, cfg.threads, [&](std::size_t bi) {
                const ImageSample& s = data.samples[order[start + bi]];
                grads[bi] = backward_loss(m, s.pixels, s.train_label);
            });

            double batch_loss = 0.0;
            for (const auto& g : grads) batch_loss += g.loss;
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
            epoch_loss += batch_loss;

            const float inv_bs = 1.0f / static_cast<float>(bs);
            for (std::size_t li = 0; li < m.layers.size(); ++li) {
                for (std::size_t wi = 0; wi < m.weights[li].size(); ++wi) {
                    auto& w = m.weights[li][wi].data;
                    auto& vel = velocity[li][wi].data;
                    for (std::size_t k = 0; k < w.size(); ++k) {
                        float g = 0.0f;
                        for (const auto& sample_g : grads)
                            g += sample_g.weight_grads[li][wi].data[k];
                        g *= inv_bs;
                        vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * g;
                        w[k] += vel[k];
                    }
                }
            }
        }
        log.epoch_loss.push_back(static_cast<float>(epoch_loss / static_cast<double>(n)));
    }
    return log;
}

double clean_accuracy(const Model& m, const Dataset& data, int threads) {
    if (data.samples.empty()) throw DataError("clean_accuracy: empty dataset");
    std::vector<int> hits(data.samples.size(), 0);
    parallel_for(data.samples.size(), threads, [&](std::size_t i) {
        hits[i] = predict(m, data.samples[i].pixels) == data.samples[i].ideal_label ? 1 : 0;
    });
    std::int64_t total = std::accumulate(hits.begin(), hits.end(), std::int64_t{0});
    return static_cast<double>(total) / static_cast<double>(data.samples.size());
}

double attack_success_rate(const Model& m, const Dataset& triggered, int target_label,
                           int threads) {
    std::vector<int> verdicts(triggered.samples.size(), -1);
    parallel_for(triggered.samples.size(), threads, [&](std::size_t i) {
        if (triggered.samples[i].ideal_label == target_label) return;
        verdicts[i] = predict(m, triggered.samples[i].pixels) == target_label ? 1 : 0;
    });
    std::int64_t eligible = 0, hits = 0;
    for (int v : verdicts) {
        if (v < 0) continue;
        ++eligible;
        hits += v;
    }
    if (eligible == 0) throw DataError("attack_success_rate: no samples off the target class");
    return static_cast<double>(hits) / static_cast<double>(eligible);
}

}  // namespace pguard
