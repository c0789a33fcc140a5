#include <numeric>

#include <gtest/gtest.h>

#include "maskcount/counter.hpp"
#include "test_support.hpp"

using namespace maskcount;
using maskcount::testing::check_gradients;
using maskcount::testing::perturb;
using maskcount::testing::TempDir;
using maskcount::testing::tiny_scene;

namespace {

constexpr int kTinyExemplar = 8;

CounterModel tiny_model(std::uint64_t seed, int r = 4, int d = 2) {
    Rng rng(seed);
    return CounterModel::create(r, d, rng);
}

double sample_loss(const CounterModel& m, const CounterSample& s, const Grid2D* mask) {
    return counter_loss_and_grad(m, s.image, s.exemplars, s.gt, mask, nullptr);
}

Grid2D random_grid(Rng& rng, int h, int w) {
    Grid2D g(h, w);
    for (double& v : g.values()) v = rng.uniform(-3, 3);
    return g;
}

Grid2D random_mask(Rng& rng, int h, int w) {
    Grid2D m(h, w);
    for (double& v : m.values()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    return m;
}

std::vector<Scene> desk_scenes(int n, std::uint64_t seed) {
    Rng rng(seed);
    const auto catalog = default_catalog();
    std::vector<Scene> out;
    for (int k = 0; k < n; ++k) {
        Rng sub = rng.derive(static_cast<std::uint64_t>(k));
        const int cls = k % static_cast<int>(catalog.size());
        out.push_back(generate_single_class_scene(catalog[cls], cls, Canvas{}, sub));
    }
    return out;
}

} // namespace

TEST(ApplyMask, IdentityMaskIsBitExact) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const Grid2D s = random_grid(rng, rng.uniform_int(1, 12), rng.uniform_int(1, 12));
        EXPECT_EQ(apply_mask(s, Grid2D(s.height(), s.width(), 1.0)), s);
    }
}

TEST(ApplyMask, HandExample) {
    const Grid2D out = apply_mask(Grid2D(2, 2, {1, 2, 3, 4}), Grid2D(2, 2, {1, 0, 0, 1}));
    EXPECT_EQ(out, Grid2D(2, 2, {1, 1, 1, 4}));
}

TEST(ApplyMask, ZeroMaskGivesConstantMinimum) {
    const Grid2D s(2, 3, {5, -1, 2, 7, 0, 3});
    EXPECT_EQ(apply_mask(s, Grid2D(2, 3, 0.0)), Grid2D(2, 3, -1.0));
}

TEST(ApplyMask, MinimumIsPreserved) {
    Rng rng(2);
    for (int trial = 0; trial < 500; ++trial) {
        const Grid2D s = random_grid(rng, 6, 5);
        const Grid2D m = random_mask(rng, 6, 5);
        const Grid2D out = apply_mask(s, m);
        EXPECT_EQ(out.min(), s.min());
        for (std::size_t k = 0; k < s.size(); ++k)
            EXPECT_EQ(out.values()[k], m.values()[k] == 1.0 ? s.values()[k] : s.min());
    }
}

TEST(ApplyMask, RejectsNonBinaryAndMismatchedMasks) {
    EXPECT_THROW(apply_mask(Grid2D(1, 2, {1, 2}), Grid2D(1, 2, {0.5, 1})), Error);
    EXPECT_THROW(apply_mask(Grid2D(1, 2, {1, 2}), Grid2D(2, 1, 1.0)), Error);
}

TEST(Count, Examples) {
    EXPECT_DOUBLE_EQ(count(Grid2D(2, 2, {0.5, 0.5, 1, 0})), 2.0);
    EXPECT_EQ(count(Grid2D(3, 3)), 0.0);
    ShapeSpec spec;
    spec.count_range = {5, 5};
    Rng rng(3);
    const Scene s = generate_single_class_scene(spec, 0, Canvas{}, rng);
    EXPECT_NEAR(count(build_gt_density(s, 8, 2.0)), 5.0, 1e-6);
}

TEST(LossCount, Examples) {
    const Grid2D g(2, 2, {1, 2, 3, 4});
    EXPECT_EQ(loss_count(g, g), 0.0);
    EXPECT_EQ(loss_count(Grid2D(1, 1, 1.0), Grid2D(1, 1, 0.0)), 1.0);
    EXPECT_EQ(loss_count(Grid2D(1, 2, {1, 2}), Grid2D(1, 2, 0.0)), 5.0);
}

TEST(Features, ShapeContract) {
    Rng rng(4);
    const CounterModel m = CounterModel::create(8, 16, rng);
    Volume3D img(3, 128, 128);
    for (double& v : img.values()) v = rng.uniform();
    const Volume3D f = extract_features(m, img);
    EXPECT_EQ(f.channels(), 16);
    EXPECT_EQ(f.height(), 16);
    EXPECT_EQ(f.width(), 16);
    EXPECT_EQ(extract_features(m, img), f);
}

TEST(Features, GoldenChecksum) {
    // Recorded once from this implementation; guards against silent numeric drift.
    Rng rng(2023);
    const CounterModel m = CounterModel::create(8, 16, rng);
    const Scene s = desk_scenes(1, 7)[0];
    const Volume3D f = extract_features(m, s.image);
    const double sum = std::accumulate(f.values().begin(), f.values().end(), 0.0);
    double weighted = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) weighted += f.values()[k] * static_cast<double>(k % 97);
    EXPECT_DOUBLE_EQ(sum, 146.55030587311057);
    EXPECT_DOUBLE_EQ(weighted, 7085.4420751447369);
}

TEST(ExemplarVector, ConstantColorUnderLinearLayer) {
    // r = 2 gives a single stride-2 conv without activation.
    const CounterModel m = tiny_model(5, 2, 3);
    const std::array<double, 3> color{0.2, 0.7, 0.4};
    Exemplar ex{Volume3D(3, 8, 8)};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) ex.crop(c, i, j) = color[c];
    const Vec v = exemplar_vectors(m, {ex})[0];
    ASSERT_EQ(v.size(), 3u);
    // Output cells are 4x4; tap row/column 0 reads the zero padding for the
    // first output row/column, so it contributes in 3 of 4 positions.
    const Tensor& w = m.params["extractor.conv1.weight"];
    const Tensor& b = m.params["extractor.conv1.bias"];
    const double frac[3] = {0.75, 1.0, 1.0};
    for (int o = 0; o < 3; ++o) {
        double expect = b.data[o];
        for (int c = 0; c < 3; ++c)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    expect += color[c] * w.data[((o * 3 + c) * 3 + ky) * 3 + kx] * frac[ky] * frac[kx];
        EXPECT_NEAR(v[o], expect, 1e-12);
    }
}

TEST(ExemplarVector, DeterministicAndShaped) {
    const CounterModel m = tiny_model(6);
    const Scene s = tiny_scene(6);
    const auto ex = make_exemplars(s, kTinyExemplar);
    const auto v1 = exemplar_vectors(m, ex);
    EXPECT_EQ(v1.size(), 1u);
    EXPECT_EQ(v1[0].size(), 2u);
    EXPECT_EQ(exemplar_vectors(m, ex), v1);
}

TEST(SimilarityMap, ZeroExemplarVectorGivesZeros) {
    Rng rng(7);
    Volume3D f(4, 3, 3);
    for (double& v : f.values()) v = rng.uniform(-1, 1);
    const Grid2D s = similarity_from_features(f, {Vec(4, 0.0)});
    for (double v : s.values()) EXPECT_EQ(v, 0.0);
}

TEST(SimilarityMap, MatchesPerCellInnerProduct) {
    Rng rng(8);
    Volume3D f(3, 2, 4);
    for (double& v : f.values()) v = rng.uniform(-1, 1);
    const Vec b{0.5, -1.0, 2.0};
    const Grid2D s = similarity_from_features(f, {b});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(s(i, j), 0.5 * f(0, i, j) - f(1, i, j) + 2.0 * f(2, i, j), 1e-12);
}

TEST(SimilarityMap, MultiExemplarAveraging) {
    Rng rng(9);
    const CounterModel m = CounterModel::create(8, 16, rng);
    const Scene s = desk_scenes(1, 9)[0];
    const auto ex = make_exemplars(s);
    const Grid2D one = similarity_map(m, s.image, {ex[0]});
    const Grid2D twice = similarity_map(m, s.image, {ex[0], ex[0]});
    for (std::size_t k = 0; k < one.size(); ++k) EXPECT_NEAR(one.values()[k], twice.values()[k], 1e-12);

    Exemplar other{crop_resize(s.image, ExemplarBox{0, 0, 20, 20, s.target_class}, 32, 32)};
    const Grid2D s2 = similarity_map(m, s.image, {other});
    const Grid2D both = similarity_map(m, s.image, {ex[0], other});
    for (std::size_t k = 0; k < one.size(); ++k)
        EXPECT_NEAR(both.values()[k], 0.5 * (one.values()[k] + s2.values()[k]), 1e-12);
}

TEST(PredictDensity, ShapeNonNegativityAndIdentityMask) {
    Rng rng(10);
    const CounterModel m = CounterModel::create(8, 16, rng);
    for (const Scene& s : desk_scenes(5, 10)) {
        const auto ex = make_exemplars(s);
        const Grid2D plain = predict_density(m, s.image, ex);
        EXPECT_EQ(plain.height(), 16);
        EXPECT_EQ(plain.width(), 16);
        EXPECT_GE(plain.min(), 0.0);
        const Grid2D ones = predict_density(m, s.image, ex, Grid2D(16, 16, 1.0));
        for (std::size_t k = 0; k < plain.size(); ++k) EXPECT_NEAR(ones.values()[k], plain.values()[k], 1e-12);
    }
}

TEST(Gradients, MatchFiniteDifferencesUnmasked) {
    for (std::uint64_t point = 0; point < 3; ++point) {
        CounterModel m = tiny_model(100 + point);
        Rng rng(200 + point);
        perturb(m.params, rng, 0.3);
        const Scene s = tiny_scene(300 + point);
        const CounterSample smp = make_counter_sample(s, m.r, 1.0, kTinyExemplar);
        const ParamSet g = gradients(m, s, 1.0, kTinyExemplar);
        EXPECT_GT(g.norm(), 1e-3);
        const auto bad = check_gradients(m.params, g, [&] { return sample_loss(m, smp, nullptr); });
        for (const auto& b : bad) ADD_FAILURE() << b.name << "[" << b.index << "] analytic " << b.analytic << " numeric " << b.numeric;
    }
}

TEST(Gradients, MatchFiniteDifferencesMasked) {
    for (std::uint64_t point = 0; point < 3; ++point) {
        CounterModel m = tiny_model(400 + point);
        Rng rng(500 + point);
        perturb(m.params, rng, 0.3);
        const CounterSample smp = make_counter_sample(tiny_scene(600 + point), m.r, 1.0, kTinyExemplar);
        const Grid2D mask(4, 4, {1, 1, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1});
        ParamSet g = m.params.zeros_like();
        counter_loss_and_grad(m, smp.image, smp.exemplars, smp.gt, &mask, &g);
        EXPECT_GT(g.norm(), 1e-3);
        const auto bad = check_gradients(m.params, g, [&] { return sample_loss(m, smp, &mask); });
        for (const auto& b : bad) ADD_FAILURE() << b.name << "[" << b.index << "] analytic " << b.analytic << " numeric " << b.numeric;
    }
}

TEST(Gradients, ZeroInfluenceParameterHasZeroGradient) {
    CounterModel m = tiny_model(11);
    Rng rng(12);
    perturb(m.params, rng, 0.3);
    // Cut hidden channel 0 of the last hidden layer from the output.
    m.params["counter.conv3.weight"].data[0] = 0.0;
    const ParamSet g = gradients(m, tiny_scene(13), 1.0, kTinyExemplar);
    const Tensor& gw = g["counter.conv2.weight"];
    const std::size_t per_out = gw.data.size() / CounterModel::kHidden2;
    for (std::size_t k = 0; k < per_out; ++k) EXPECT_EQ(gw.data[k], 0.0);
    EXPECT_EQ(g["counter.conv2.bias"].data[0], 0.0);
}

TEST(Gradients, StationaryAtZeroLoss) {
    const CounterModel m = tiny_model(14);
    const Scene s = tiny_scene(15);
    const auto ex = make_exemplars(s, kTinyExemplar);
    const Grid2D pred = predict_density(m, s.image, ex);
    ParamSet g = m.params.zeros_like();
    EXPECT_EQ(counter_loss_and_grad(m, s.image, ex, pred, nullptr, &g), 0.0);
    EXPECT_EQ(g.norm(), 0.0);
}

TEST(TrainBase, OneEpochOneSceneHistory) {
    TrainCfg cfg;
    cfg.epochs = 1;
    cfg.lr = 1e-3;
    const CounterModel m = train_base(tiny_model(16), std::vector<Scene>{tiny_scene(17)}, cfg, 1.0, kTinyExemplar);
    EXPECT_EQ(m.training.loss_history.size(), 1u);
}

TEST(TrainBase, ZeroLearningRateLeavesParameters) {
    const CounterModel start = tiny_model(18);
    for (Optimizer opt : {Optimizer::sgd, Optimizer::adam}) {
        TrainCfg cfg;
        cfg.epochs = 3;
        cfg.lr = 0.0;
        cfg.optimizer = opt;
        const CounterModel m = train_base(start, std::vector<Scene>{tiny_scene(19), tiny_scene(20)}, cfg, 1.0, kTinyExemplar);
        EXPECT_EQ(m.params, start.params);
    }
}

TEST(TrainBase, DeterministicGivenSeed) {
    TrainCfg cfg;
    cfg.epochs = 4;
    cfg.lr = 1e-2;
    cfg.seed = 99;
    cfg.mask_augment = 0.5;
    const std::vector<Scene> data{tiny_scene(21), tiny_scene(22), tiny_scene(23)};
    const CounterModel a = train_base(tiny_model(24), data, cfg, 1.0, kTinyExemplar);
    const CounterModel b = train_base(tiny_model(24), data, cfg, 1.0, kTinyExemplar);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.params, tiny_model(24).params);
}

TEST(TrainBase, HalvesLossOnDeskScenes) {
    Rng rng(25);
    TrainCfg cfg;
    cfg.epochs = 200;
    cfg.lr = 1e-3;
    cfg.batch = 4;
    cfg.seed = 26;
    const CounterModel m = train_base(CounterModel::create(8, 16, rng), desk_scenes(20, 27), cfg);
    ASSERT_EQ(m.training.loss_history.size(), 200u);
    EXPECT_LT(m.training.loss_history.back(), 0.5 * m.training.loss_history.front());
}

TEST(Augmentation, HalfMaskRestrictsGroundTruth) {
    Rng rng(28);
    Grid2D gt(4, 6);
    for (double& v : gt.values()) v = rng.uniform();
    for (int trial = 0; trial < 50; ++trial) {
        const auto [m, g] = random_half_mask(gt, rng);
        double kept = 0.0;
        for (std::size_t k = 0; k < gt.size(); ++k) {
            EXPECT_EQ(g.values()[k], m.values()[k] * gt.values()[k]);
            kept += m.values()[k];
        }
        EXPECT_GT(kept, 0.0);
        EXPECT_LT(kept, 24.0);
    }
}

TEST(Augmentation, ObjectMaskCoversObjects) {
    Rng rng(29);
    const Grid2D cells(5, 5, {0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0});
    for (int trial = 0; trial < 50; ++trial) {
        const Grid2D m = random_object_mask(cells, rng);
        EXPECT_TRUE(is_binary(m));
        for (std::size_t k = 0; k < cells.size(); ++k)
            if (cells.values()[k] == 1.0) {
                EXPECT_EQ(m.values()[k], 1.0);
            }
    }
}

TEST(Persistence, ExactRoundTrip) {
    TempDir dir("counter");
    TrainCfg cfg;
    cfg.epochs = 2;
    cfg.lr = 1e-2;
    const CounterModel m = train_base(tiny_model(30), std::vector<Scene>{tiny_scene(31)}, cfg, 1.0, kTinyExemplar);
    save_counter(m, dir.path() / "c.json", "00ff");
    std::string fp;
    const CounterModel back = load_counter(dir.path() / "c.json", &fp);
    EXPECT_EQ(back, m);
    EXPECT_EQ(fp, "00ff");
}

TEST(Persistence, WrongKindIsRejected) {
    TempDir dir("counterk");
    write_json_file(dir.path() / "s.json", model_json("segmenter", 4, 2, tiny_model(32).params, {}, ""));
    EXPECT_THROW(load_counter(dir.path() / "s.json"), Error);
}
