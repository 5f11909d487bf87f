#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "pguard/attribution.hpp"
#include "pguard/rng.hpp"
#include "pguard/util.hpp"

#include "helpers.hpp"

using namespace pguard;

namespace {

// conv(1x1, identity) -> flatten -> dense(all-ones, last): GradCAM channel
// weight is exactly 1, so the map equals ReLU of the input.
Model identity_conv_model(int h, int w) {
    Model m;
    m.input_shape = {h, w, 1};
    m.class_count = 2;
    LayerSpec conv;
    conv.kind = LayerKind::conv2d;
    conv.out_channels = 1;
    conv.kernel_h = conv.kernel_w = 1;
    conv.stride = 1;
    conv.pad = 0;
    LayerSpec flat;
    flat.kind = LayerKind::flatten;
    LayerSpec d;
    d.kind = LayerKind::dense;
    d.units = 2;
    d.last_dense = true;
    m.layers = {conv, flat, d};
    m.weights = make_weight_tensors(m.input_shape, m.layers);
    m.weights[0][0].data = {1.0f};
    for (auto& v : m.weights[2][0].data) v = 1.0f;
    return m;
}

// flatten -> dense: logit_0 = 10*x0, logit_1 = 5*x1 on a 1x2 image. Pixel 0
// acts as a planted trigger for class 0.
Model two_pixel_model() {
    Model m;
    m.input_shape = {1, 2, 1};
    m.class_count = 2;
    LayerSpec flat;
    flat.kind = LayerKind::flatten;
    LayerSpec d;
    d.kind = LayerKind::dense;
    d.units = 2;
    d.last_dense = true;
    m.layers = {flat, d};
    m.weights = make_weight_tensors(m.input_shape, m.layers);
    m.weights[1][0].data = {10.0f, 0.0f, 0.0f, 5.0f};
    return m;
}

Dataset two_pixel_gen() {
    Dataset ds;
    ds.class_count = 2;
    ds.shape = {1, 2, 1};
    ImageSample poisoned;
    poisoned.id = 0;
    poisoned.ideal_label = 1;
    poisoned.train_label = 0;
    poisoned.poisoned = true;
    poisoned.pixels = Tensor({1, 2, 1}, {1.0f, 0.6f});
    ImageSample clean;
    clean.id = 1;
    clean.ideal_label = 1;
    clean.train_label = 1;
    clean.pixels = Tensor({1, 2, 1}, {0.0f, 0.8f});
    ds.samples = {poisoned, clean};
    return ds;
}

PatternSet match_all_set(int target) {
    Pattern p;
    p.kind = PatternKind::mis;
    p.base_label = target;
    p.support = 5;
    PatternSet ps;
    ps.patterns = {p};
    return ps;
}

DeltaHeatmap make_delta(int h, int w, std::vector<float> v) {
    DeltaHeatmap d;
    d.h = h;
    d.w = w;
    d.v = std::move(v);
    return d;
}

std::vector<int> full_sort_oracle(const std::vector<float>& v, int k) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (v[static_cast<std::size_t>(a)] != v[static_cast<std::size_t>(b)])
            return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

}  // namespace

TEST(AttributionMap, ZeroDownstreamWeightsGiveZeroMap) {
    Model m = identity_conv_model(4, 4);
    for (auto& v : m.weights[2][0].data) v = 0.0f;
    const Tensor x = testutil::random_image(4, 4, 1, 3);
    for (auto method : {AttributionMethod::gradcam, AttributionMethod::gradcam_pp}) {
        const Heatmap hm = attribution_map(m, x, 0, method);
        ASSERT_EQ(hm.v.size(), 16u);
        for (float v : hm.v) EXPECT_FLOAT_EQ(v, 0.0f);
    }
}

TEST(AttributionMap, IdentityConvMapsReluOfInput) {
    Model m = identity_conv_model(3, 3);
    const Tensor x = testutil::random_image(3, 3, 1, 9);
    const Heatmap hm = attribution_map(m, x, 0, AttributionMethod::gradcam);
    ASSERT_EQ(hm.h, 3);
    ASSERT_EQ(hm.w, 3);
    for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(hm.v[i], x.data[i], 1e-6);
}

TEST(AttributionMap, ValuesAreNonNegativeAndFinite) {
    SplitMix64 rng(17);
    Model m = testutil::tiny_cnn(6, 6, 2, 3, 123);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor x = testutil::random_image(6, 6, 2, rng.next());
        for (auto method : {AttributionMethod::gradcam, AttributionMethod::gradcam_pp}) {
            const Heatmap hm = attribution_map(m, x, static_cast<int>(rng.below(3)), method);
            EXPECT_EQ(hm.h * hm.w, 36);
            for (float v : hm.v) {
                EXPECT_GE(v, 0.0f);
                EXPECT_TRUE(std::isfinite(v));
            }
        }
    }
}

TEST(AttributionMap, UpsamplesPooledMapsToInputResolution) {
    Model m = testutil::tiny_cnn(8, 8, 1, 3, 55);
    const Tensor x = testutil::random_image(8, 8, 1, 2);
    const Heatmap hm = attribution_map(m, x, 1, AttributionMethod::gradcam);
    EXPECT_EQ(hm.h, 8);
    EXPECT_EQ(hm.w, 8);
}

TEST(AttributionMap, DenseOnlyModelNeedsInputGradient) {
    Model m = two_pixel_model();
    const Tensor x({1, 2, 1}, {0.5f, 0.5f});
    try {
        attribution_map(m, x, 0, AttributionMethod::gradcam);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("input_gradient"), std::string::npos);
    }
    const Heatmap hm = attribution_map(m, x, 0, AttributionMethod::input_gradient);
    ASSERT_EQ(hm.v.size(), 2u);
    EXPECT_FLOAT_EQ(hm.v[0], 10.0f);
    EXPECT_FLOAT_EQ(hm.v[1], 0.0f);
}

TEST(Summaries, SingletonAndEqualImageMeans) {
    Model m = identity_conv_model(3, 3);
    Dataset ds;
    ds.class_count = 2;
    ds.shape = {3, 3, 1};
    ImageSample s;
    s.id = 0;
    s.ideal_label = 0;
    s.train_label = 0;
    s.pixels = testutil::random_image(3, 3, 1, 5);
    ds.samples.push_back(s);

    Pattern everything;
    const Heatmap single =
        summarize_pattern_heatmap(m, ds, everything, 0, AttributionMethod::gradcam);
    const Heatmap direct = attribution_map(m, ds.samples[0].pixels, 0, AttributionMethod::gradcam);
    EXPECT_EQ(single.v, direct.v);

    s.id = 1;
    ds.samples.push_back(s);  // identical twin
    const Heatmap twin = summarize_pattern_heatmap(m, ds, everything, 0, AttributionMethod::gradcam);
    for (std::size_t i = 0; i < twin.v.size(); ++i) EXPECT_NEAR(twin.v[i], direct.v[i], 1e-7);
}

TEST(Summaries, MeanMatchesTwoPassOracle) {
    Model m = testutil::tiny_cnn(6, 6, 1, 3, 31);
    Dataset ds;
    ds.class_count = 3;
    ds.shape = {6, 6, 1};
    for (int i = 0; i < 12; ++i) {
        ImageSample s;
        s.id = i;
        s.ideal_label = i % 3;
        s.train_label = s.ideal_label;
        s.pixels = testutil::random_image(6, 6, 1, 100 + static_cast<std::uint64_t>(i));
        ds.samples.push_back(std::move(s));
    }
    Pattern everything;
    const Heatmap got = summarize_pattern_heatmap(m, ds, everything, 1,
                                                  AttributionMethod::gradcam, 2);

    // Two-pass oracle: collect every map, then average in double.
    std::vector<Heatmap> maps;
    for (const auto& s : ds.samples)
        maps.push_back(attribution_map(m, s.pixels, 1, AttributionMethod::gradcam));
    for (std::size_t i = 0; i < got.v.size(); ++i) {
        double acc = 0.0;
        for (const auto& hm : maps) acc += hm.v[i];
        EXPECT_NEAR(got.v[i], acc / static_cast<double>(maps.size()), 1e-6);
    }
}

TEST(Summaries, EmptyMatchSetRejected) {
    Model m = identity_conv_model(3, 3);
    Dataset ds;
    ds.class_count = 2;
    ds.shape = {3, 3, 1};
    ImageSample s;
    s.id = 0;
    s.pixels = testutil::random_image(3, 3, 1, 5);
    ds.samples.push_back(s);
    Pattern impossible;
    impossible.conjuncts = {{0, CmpOp::greater, 1e30f}};
    EXPECT_THROW(summarize_pattern_heatmap(m, ds, impossible, 0, AttributionMethod::gradcam),
                 PipelineError);
}

TEST(Summaries, CorrectHeatmapUsesPredictedClassAndRejectsAllWrong) {
    Model m = two_pixel_model();
    Dataset ds;
    ds.class_count = 2;
    ds.shape = {1, 2, 1};
    ImageSample s;
    s.id = 0;
    s.ideal_label = 1;
    s.train_label = 1;
    s.pixels = Tensor({1, 2, 1}, {0.0f, 0.8f});  // predicted 1, correct
    ds.samples.push_back(s);
    const Heatmap hm = summarize_correct_heatmap(m, ds, AttributionMethod::input_gradient);
    EXPECT_FLOAT_EQ(hm.v[0], 0.0f);
    EXPECT_FLOAT_EQ(hm.v[1], 5.0f);

    ds.samples[0].ideal_label = 0;  // now every sample is misclassified
    EXPECT_THROW(summarize_correct_heatmap(m, ds, AttributionMethod::input_gradient),
                 PipelineError);
}

TEST(Normalize, ArithmeticExamples) {
    Heatmap hm;
    hm.h = 1;
    hm.w = 2;
    hm.v = {1.0f, 3.0f};
    const NormalizedHeatmap n = normalize(hm);
    EXPECT_FALSE(n.degenerate);
    EXPECT_FLOAT_EQ(n.v[0], 0.25f);
    EXPECT_FLOAT_EQ(n.v[1], 0.75f);

    Heatmap uniform;
    uniform.h = 2;
    uniform.w = 2;
    uniform.v = std::vector<float>(4, 7.0f);
    const NormalizedHeatmap u = normalize(uniform);
    for (float v : u.v) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Normalize, UnitSumOnRandomMaps) {
    SplitMix64 rng(88);
    for (int trial = 0; trial < 50; ++trial) {
        Heatmap hm;
        hm.h = 4;
        hm.w = 5;
        hm.v.resize(20);
        for (auto& v : hm.v) v = static_cast<float>(rng.uniform(0.0, 10.0));
        const NormalizedHeatmap n = normalize(hm);
        ASSERT_FALSE(n.degenerate);
        double sum = 0.0;
        for (float v : n.v) {
            EXPECT_GE(v, 0.0f);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Normalize, AllZeroIsDegenerate) {
    Heatmap hm;
    hm.h = 2;
    hm.w = 2;
    hm.v = std::vector<float>(4, 0.0f);
    const NormalizedHeatmap n = normalize(hm);
    EXPECT_TRUE(n.degenerate);
    for (float v : n.v) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Delta, ExamplesAndProperties) {
    NormalizedHeatmap a;
    a.h = 1;
    a.w = 2;
    a.v = {1.0f, 0.0f};
    NormalizedHeatmap b;
    b.h = 1;
    b.w = 2;
    b.v = {0.0f, 1.0f};
    const DeltaHeatmap d = delta(a, b);
    EXPECT_FLOAT_EQ(d.v[0], 1.0f);
    EXPECT_FLOAT_EQ(d.v[1], -1.0f);

    const DeltaHeatmap self = delta(a, a);
    for (float v : self.v) EXPECT_FLOAT_EQ(v, 0.0f);

    NormalizedHeatmap c;
    c.h = 1;
    c.w = 3;
    c.v = {0.2f, 0.3f, 0.5f};
    EXPECT_THROW(delta(a, c), ShapeError);
}

TEST(Delta, ZeroSumAndAntiSymmetryOnRandomPairs) {
    SplitMix64 rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        Heatmap pa, pb;
        pa.h = pb.h = 3;
        pa.w = pb.w = 3;
        pa.v.resize(9);
        pb.v.resize(9);
        for (auto& v : pa.v) v = static_cast<float>(rng.uniform(0.0, 5.0));
        for (auto& v : pb.v) v = static_cast<float>(rng.uniform(0.0, 5.0));
        const NormalizedHeatmap na = normalize(pa);
        const NormalizedHeatmap nb = normalize(pb);
        const DeltaHeatmap ab = delta(na, nb);
        const DeltaHeatmap ba = delta(nb, na);
        double sum = 0.0;
        for (std::size_t i = 0; i < ab.v.size(); ++i) {
            sum += ab.v[i];
            EXPECT_EQ(ab.v[i], -ba.v[i]);
        }
        EXPECT_NEAR(sum, 0.0, 1e-5);
    }
}

TEST(TopPixels, SpecExamples) {
    const DeltaHeatmap d = make_delta(2, 2, {0.1f, 0.4f, 0.2f, 0.3f});
    EXPECT_EQ(top_pixels(d, 25.0), (std::vector<int>{1}));
    EXPECT_EQ(top_pixels(d, 100.0), (std::vector<int>{1, 3, 2, 0}));
    EXPECT_EQ(top_pixels(d, 50.0), (std::vector<int>{1, 3}));
}

TEST(TopPixels, TiesPreferLowerIndex) {
    const DeltaHeatmap d = make_delta(1, 4, {0.5f, 0.9f, 0.9f, 0.5f});
    EXPECT_EQ(top_pixels(d, 75.0), (std::vector<int>{1, 2, 0}));
}

TEST(TopPixels, BadThresholdsRejected) {
    const DeltaHeatmap d = make_delta(2, 2, {0.1f, 0.4f, 0.2f, 0.3f});
    EXPECT_THROW(top_pixels(d, 0.0), ConfigError);
    EXPECT_THROW(top_pixels(d, 101.0), ConfigError);
    EXPECT_THROW(top_pixels(d, 5.0), ConfigError);  // k = round(0.05*4) = 0
}

TEST(TopPixels, MatchesFullSortOracle) {
    SplitMix64 rng(321);
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = 2 + static_cast<int>(rng.below(3));
        const int w = 2 + static_cast<int>(rng.below(3));
        DeltaHeatmap d;
        d.h = h;
        d.w = w;
        d.v.resize(static_cast<std::size_t>(h * w));
        for (auto& v : d.v)
            v = static_cast<float>(rng.below(6)) * 0.125f - 0.25f;  // coarse grid forces ties
        const double pct = 1.0 + rng.uniform(0.0, 99.0);
        const int k = static_cast<int>(std::llround(pct / 100.0 * h * w));
        if (k == 0) continue;
        EXPECT_EQ(top_pixels(d, pct), full_sort_oracle(d.v, k)) << "trial " << trial;
    }
}

TEST(TopPixels, ScaleInsensitiveSelection) {
    SplitMix64 rng(55);
    Heatmap raw;
    raw.h = 3;
    raw.w = 3;
    raw.v.resize(9);
    for (auto& v : raw.v) v = static_cast<float>(rng.uniform(0.1, 2.0));
    Heatmap other;
    other.h = 3;
    other.w = 3;
    other.v.resize(9);
    for (auto& v : other.v) v = static_cast<float>(rng.uniform(0.1, 2.0));

    const auto base = top_pixels(delta(normalize(raw), normalize(other)), 33.0);
    for (float scale : {0.25f, 4.0f, 100.0f}) {
        Heatmap scaled = raw;
        for (auto& v : scaled.v) v *= scale;
        EXPECT_EQ(top_pixels(delta(normalize(scaled), normalize(other)), 33.0), base);
    }
}

TEST(DeltaMaps, TriggerPixelDominatesPlantedScenario) {
    Model m = two_pixel_model();
    const Dataset gen = two_pixel_gen();
    const PatternSet P = match_all_set(0);
    const auto deltas = build_delta_maps(m, gen, P, 0, AttributionMethod::input_gradient);
    ASSERT_EQ(deltas.size(), 1u);
    EXPECT_NEAR(deltas[0].v[0], 1.0f, 1e-6);
    EXPECT_NEAR(deltas[0].v[1], -1.0f, 1e-6);
    const ImportantPixels imp = select_important_pixels(deltas, 50.0);
    ASSERT_EQ(imp.pixel_lists.size(), 1u);
    EXPECT_EQ(imp.pixel_lists[0], (std::vector<int>{0}));
}

TEST(Tune, SingleCandidateReturnsIt) {
    Model m = two_pixel_model();
    const Dataset gen = two_pixel_gen();
    const PatternSet P = match_all_set(0);
    const auto deltas = build_delta_maps(m, gen, P, 0, AttributionMethod::input_gradient);
    EXPECT_DOUBLE_EQ(tune_threshold(m, gen, P, deltas, {25.0}, {0.0f}), 25.0);
}

TEST(Tune, StrictlyBetterRepairWins) {
    Model m = two_pixel_model();
    const Dataset gen = two_pixel_gen();
    const PatternSet P = match_all_set(0);
    const auto deltas = build_delta_maps(m, gen, P, 0, AttributionMethod::input_gradient);
    // 50% masks only the trigger pixel (repair 1.0); 100% masks both (repair 0).
    EXPECT_DOUBLE_EQ(tune_threshold(m, gen, P, deltas, {100.0, 50.0}, {0.0f}), 50.0);
}

TEST(Tune, TiesGoToSmallerThreshold) {
    Model m = two_pixel_model();
    const Dataset gen = two_pixel_gen();
    const PatternSet P = match_all_set(0);
    const auto deltas = build_delta_maps(m, gen, P, 0, AttributionMethod::input_gradient);
    // Both keep k = 1 and mask the same pixel: identical repair, pick 55.
    EXPECT_DOUBLE_EQ(tune_threshold(m, gen, P, deltas, {60.0, 55.0}, {0.0f}), 55.0);
}

TEST(Tune, NoPoisonedSamplesFallsBackToTen) {
    Model m = two_pixel_model();
    Dataset gen = two_pixel_gen();
    gen.samples.erase(gen.samples.begin());  // drop the poisoned sample
    const PatternSet P = match_all_set(0);
    const auto deltas = build_delta_maps(m, gen, P, 0, AttributionMethod::input_gradient);
    EXPECT_DOUBLE_EQ(tune_threshold(m, gen, P, deltas, {50.0, 100.0}, {0.0f}), 10.0);
}

TEST(Pgm, HeaderAndPayload) {
    const std::string pgm = heatmap_to_pgm(2, 3, {0.0f, 1.0f, 2.0f, 3.0f, 4.0f, 5.0f});
    EXPECT_EQ(pgm.substr(0, 3), "P5\n");
    EXPECT_NE(pgm.find("\n3 2\n"), std::string::npos);
    EXPECT_NE(pgm.find("255\n"), std::string::npos);
    const std::size_t header_end = pgm.find("255\n") + 4;
    EXPECT_EQ(pgm.size() - header_end, 6u);
    EXPECT_EQ(static_cast<unsigned char>(pgm[header_end]), 0);
    EXPECT_EQ(static_cast<unsigned char>(pgm[pgm.size() - 1]), 255);

    const std::string flat = heatmap_to_pgm(1, 2, {3.0f, 3.0f});
    const std::size_t fe = flat.find("255\n") + 4;
    EXPECT_EQ(static_cast<unsigned char>(flat[fe]), 0);
    EXPECT_EQ(static_cast<unsigned char>(flat[fe + 1]), 0);

    EXPECT_THROW(heatmap_to_pgm(2, 2, {1.0f}), ShapeError);
}

TEST(Pgm, RawDumpIsLittleEndianFloats) {
    const std::string raw = heatmap_to_raw({1.5f, -2.0f});
    ASSERT_EQ(raw.size(), 8u);
    const float a = read_f32_le(reinterpret_cast<const unsigned char*>(raw.data()));
    const float b = read_f32_le(reinterpret_cast<const unsigned char*>(raw.data()) + 4);
    EXPECT_FLOAT_EQ(a, 1.5f);
    EXPECT_FLOAT_EQ(b, -2.0f);
}
