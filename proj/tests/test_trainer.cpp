#include <cmath>

#include <gtest/gtest.h>

#include "pguard/dataset.hpp"
#include "pguard/train.hpp"
#include "pguard/util.hpp"

#include "helpers.hpp"

using namespace pguard;

namespace {

// Two linearly separable blobs in a 4x4 single-channel image: class 0 lights
// the top half, class 1 the bottom half.
Dataset blob_dataset(int per_class, std::uint64_t seed) {
    Dataset ds;
    ds.class_count = 2;
    ds.shape = {4, 4, 1};
    ds.seed = seed;
    SplitMix64 rng(seed);
    int id = 0;
    for (int cls = 0; cls < 2; ++cls) {
        for (int i = 0; i < per_class; ++i) {
            ImageSample s;
            s.id = id++;
            s.ideal_label = cls;
            s.train_label = cls;
            s.pixels = Tensor({4, 4, 1});
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) {
                    const bool hot = (cls == 0) ? y < 2 : y >= 2;
                    s.pixels.at(y, x, 0) =
                        hot ? static_cast<float>(rng.uniform(0.7, 1.0))
                            : static_cast<float>(rng.uniform(0.0, 0.3));
                }
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

Model blob_model(std::uint64_t seed) {
    Model m;
    m.input_shape = {4, 4, 1};
    m.class_count = 2;
    LayerSpec flat;
    flat.kind = LayerKind::flatten;
    LayerSpec d1;
    d1.kind = LayerKind::dense;
    d1.units = 4;
    d1.last_dense = true;
    LayerSpec relu;
    relu.kind = LayerKind::relu;
    LayerSpec d2;
    d2.kind = LayerKind::dense;
    d2.units = 2;
    m.layers = {flat, d1, relu, d2};
    m.weights = make_weight_tensors(m.input_shape, m.layers);
    init_weights(m, seed);
    return m;
}

std::vector<float> flat_weights(const Model& m) {
    std::vector<float> out;
    for (const auto& lw : m.weights)
        for (const auto& t : lw) out.insert(out.end(), t.data.begin(), t.data.end());
    return out;
}

}  // namespace

TEST(InitWeights, SeededAndNonTrivial) {
    Model a = blob_model(5);
    Model b = blob_model(5);
    Model c = blob_model(6);
    EXPECT_EQ(flat_weights(a), flat_weights(b));
    EXPECT_NE(flat_weights(a), flat_weights(c));
    // Biases zero, kernels not all zero.
    EXPECT_EQ(a.weights[1][1].data, std::vector<float>(4, 0.0f));
    bool any = false;
    for (float v : a.weights[1][0].data) any = any || v != 0.0f;
    EXPECT_TRUE(any);
}

TEST(Train, ReachesFullAccuracyOnSeparableToy) {
    const Dataset ds = blob_dataset(20, 3);
    Model m = blob_model(1);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.1f;
    cfg.seed = 7;
    const TrainLog log = train(m, ds, cfg);
    EXPECT_EQ(log.epoch_loss.size(), 50u);
    EXPECT_DOUBLE_EQ(clean_accuracy(m, ds), 1.0);
}

TEST(Train, ZeroEpochsLeavesWeightsUntouched) {
    const Dataset ds = blob_dataset(4, 3);
    Model m = blob_model(1);
    const auto before = flat_weights(m);
    TrainConfig cfg;
    cfg.epochs = 0;
    const TrainLog log = train(m, ds, cfg);
    EXPECT_TRUE(log.epoch_loss.empty());
    EXPECT_EQ(flat_weights(m), before);
}

TEST(Train, ReproducibleAcrossRunsAndThreads) {
    const Dataset ds = blob_dataset(10, 9);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.seed = 11;

    Model a = blob_model(2);
    cfg.threads = 1;
    train(a, ds, cfg);

    Model b = blob_model(2);
    cfg.threads = 1;
    train(b, ds, cfg);

    Model c = blob_model(2);
    cfg.threads = 3;
    train(c, ds, cfg);

    EXPECT_EQ(flat_weights(a), flat_weights(b));
    EXPECT_EQ(flat_weights(a), flat_weights(c));
}

TEST(Train, SeedChangesTrajectory) {
    const Dataset ds = blob_dataset(10, 9);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    Model a = blob_model(2);
    cfg.seed = 1;
    train(a, ds, cfg);
    Model b = blob_model(2);
    cfg.seed = 2;
    train(b, ds, cfg);
    EXPECT_NE(flat_weights(a), flat_weights(b));
}

TEST(Train, LossTrendsDownOnToy) {
    const Dataset ds = blob_dataset(20, 3);
    Model m = blob_model(1);
    TrainConfig cfg;
    cfg.epochs = 12;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05f;
    cfg.seed = 7;
    const TrainLog log = train(m, ds, cfg);
    // Compare 3-epoch window means, first vs last.
    auto window = [&](std::size_t start) {
        double acc = 0.0;
        for (std::size_t i = start; i < start + 3; ++i) acc += log.epoch_loss[i];
        return acc / 3.0;
    };
    EXPECT_LT(window(log.epoch_loss.size() - 3), window(0));
}

TEST(Train, EmptyDatasetRejected) {
    Dataset ds;
    ds.class_count = 2;
    ds.shape = {4, 4, 1};
    Model m = blob_model(1);
    TrainConfig cfg;
    EXPECT_THROW(train(m, ds, cfg), DataError);
}

TEST(Train, DivergenceRaisesNumericError) {
    const Dataset ds = blob_dataset(10, 3);
    Model m = blob_model(1);
    for (auto& v : m.weights[1][0].data) v = 1e30f;
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 1e20f;
    EXPECT_THROW(train(m, ds, cfg), NumericError);
}

TEST(CleanAccuracy, ExactOnKnownFixtures) {
    Dataset ds = blob_dataset(5, 3);
    Model ideal = blob_model(1);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 4;
    cfg.learning_rate = 0.1f;
    cfg.seed = 5;
    train(ideal, ds, cfg);
    ASSERT_DOUBLE_EQ(clean_accuracy(ideal, ds), 1.0);

    // Flip every ideal label: accuracy must drop to exactly 0.
    for (auto& s : ds.samples) s.ideal_label = 1 - s.ideal_label;
    EXPECT_DOUBLE_EQ(clean_accuracy(ideal, ds), 0.0);

    EXPECT_DOUBLE_EQ(clean_accuracy(ideal, ds, 4), 0.0);
}

TEST(AttackSuccessRate, ConstantModelEndpoints) {
    Dataset ds = blob_dataset(5, 3);

    // Bias forces class 0 regardless of input.
    std::vector<float> w(2 * 16, 0.0f);
    Model to_zero = testutil::dense_model(16, 2, w, {10.0f, 0.0f});
    to_zero.input_shape = {4, 4, 1};
    // Samples of class 1 (ideal != 0) all land on target 0.
    EXPECT_DOUBLE_EQ(attack_success_rate(to_zero, ds, 0), 1.0);

    Model to_one = testutil::dense_model(16, 2, w, {0.0f, 10.0f});
    to_one.input_shape = {4, 4, 1};
    EXPECT_DOUBLE_EQ(attack_success_rate(to_one, ds, 0), 0.0);
}

TEST(AttackSuccessRate, NoEligibleSamplesRejected) {
    Dataset ds = blob_dataset(5, 3);
    for (auto& s : ds.samples) s.ideal_label = 0;
    ds.class_count = 2;
    Model m = blob_model(1);
    EXPECT_THROW(attack_success_rate(m, ds, 0), DataError);
}

TEST(Glue, TrainedCnnSeparatesGlyphs) {
    // End-to-end sanity: the synthetic generator is learnable by the tiny CNN.
    const Dataset train_set = gen_synthetic(3, 40, 8, 8, 1, 21);
    const Dataset test_set = gen_synthetic(3, 15, 8, 8, 1, 22);
    Model m = testutil::tiny_cnn(8, 8, 1, 3, 33, 4, 16);
    TrainConfig cfg;
    cfg.epochs = 14;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.08f;
    cfg.seed = 9;
    train(m, train_set, cfg);
    EXPECT_GE(clean_accuracy(m, test_set), 0.9);
}
