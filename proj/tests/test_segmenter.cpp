#include <gtest/gtest.h>

#include "maskcount/segmenter.hpp"
#include "test_support.hpp"

using namespace maskcount;
using maskcount::testing::check_gradients;
using maskcount::testing::perturb;
using maskcount::testing::TempDir;
using maskcount::testing::tiny_scene;

namespace {

constexpr int kTinyExemplar = 8;

SegModel tiny_seg(std::uint64_t seed, int r = 4, int d = 3) {
    Rng rng(seed);
    return SegModel::create(r, d, rng);
}

SegSample tiny_sample(std::uint64_t seed, const Grid2D& target) {
    const Scene s = tiny_scene(seed);
    return {"s" + std::to_string(seed), s.image, make_exemplars(s, kTinyExemplar), target};
}

Grid2D checker(int h, int w) {
    Grid2D g(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) g(i, j) = (i + j) % 2 == 0 ? 1.0 : 0.0;
    return g;
}

} // namespace

TEST(PredictMask, RangeAndShape) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const SegModel m = tiny_seg(seed);
        const Scene s = tiny_scene(seed + 50);
        const Grid2D p = predict_mask(m, s.image, make_exemplars(s, kTinyExemplar));
        EXPECT_EQ(p.height(), 4);
        EXPECT_EQ(p.width(), 4);
        EXPECT_GE(p.min(), -1.0);
        EXPECT_LE(p.max(), 1.0);
    }
}

TEST(PredictMask, DuplicatedExemplarIsIdempotent) {
    const SegModel m = tiny_seg(1);
    const Scene s = tiny_scene(2);
    const auto ex = make_exemplars(s, kTinyExemplar);
    const Grid2D one = predict_mask(m, s.image, ex);
    const Grid2D two = predict_mask(m, s.image, {ex[0], ex[0]});
    for (std::size_t k = 0; k < one.size(); ++k) EXPECT_NEAR(one.values()[k], two.values()[k], 1e-12);
}

TEST(PredictMask, ParallelCellScoresOne) {
    Volume3D f(3, 2, 2);
    const Vec v{1.0, -2.0, 0.5};
    for (int c = 0; c < 3; ++c) {
        f(c, 0, 1) = 3.0 * v[c];
        f(c, 1, 0) = -v[c];
    }
    const Grid2D m = detail::cosine_map(f, v);
    EXPECT_NEAR(m(0, 1), 1.0, 1e-12);
    EXPECT_NEAR(m(1, 0), -1.0, 1e-12);
    EXPECT_EQ(m(0, 0), 0.0); // zero feature vector
}

TEST(LossSeg, Examples) {
    const Grid2D g(2, 2, {0.1, 0.2, 0.3, 0.4});
    EXPECT_EQ(loss_seg(g, g), 0.0);
    EXPECT_EQ(loss_seg(Grid2D(1, 1, 0.0), Grid2D(1, 1, 1.0)), 1.0);
    EXPECT_DOUBLE_EQ(loss_seg(Grid2D(1, 2, 0.5), Grid2D(1, 2, {0, 1})), 0.5);
}

namespace {

std::vector<maskcount::testing::GradMismatch> seg_fd_mismatches(std::uint64_t point, double step) {
    SegModel m = tiny_seg(10 + point);
    Rng rng(20 + point);
    perturb(m.params, rng, 0.3);
    const SegSample smp = tiny_sample(30 + point, checker(4, 4));
    const ParamSet g = seg_gradients(m, smp);
    EXPECT_GT(g.norm(), 1e-3);
    return check_gradients(
        m.params, g, [&] { return seg_loss_and_grad(m, smp.image, smp.exemplars, smp.target, nullptr); }, step);
}

} // namespace

TEST(SegGradients, MatchFiniteDifferences) {
    for (std::uint64_t point : {0, 2, 3}) {
        for (const auto& b : seg_fd_mismatches(point, 1e-4))
            ADD_FAILURE() << "point " << point << ": " << b.name << "[" << b.index << "] analytic " << b.analytic
                          << " numeric " << b.numeric;
    }
}

TEST(SegGradients, KinkWithinStepResolvesAtFinerStep) {
    // At point 1 a ReLU input of the first layer sits within 1e-4 of zero, so
    // the 1e-4 central difference straddles the kink for one weight.
    const auto coarse = seg_fd_mismatches(1, 1e-4);
    ASSERT_EQ(coarse.size(), 1u);
    EXPECT_EQ(coarse[0].name, "extractor.conv1.weight");
    EXPECT_TRUE(seg_fd_mismatches(1, 1e-6).empty());
}

TEST(TrainSeg, ZeroLearningRateLeavesParameters) {
    const SegModel start = tiny_seg(40);
    TrainCfg cfg;
    cfg.epochs = 3;
    cfg.lr = 0.0;
    const SegModel m = train_seg(start, {tiny_sample(41, checker(4, 4))}, cfg);
    EXPECT_EQ(m.params, start.params);
}

TEST(TrainSeg, AllOnesTargetConverges) {
    TrainCfg cfg;
    cfg.epochs = 10;
    cfg.lr = 1e-2;
    cfg.batch = 1;
    const SegSample smp = tiny_sample(42, Grid2D(4, 4, 1.0));
    const SegModel m = train_seg(tiny_seg(43), {smp}, cfg);
    const auto& h = m.training.loss_history;
    ASSERT_EQ(h.size(), 10u);
    for (std::size_t e = 1; e < h.size(); ++e) EXPECT_LE(h[e], h[e - 1] * (1 + 1e-9)) << "epoch " << e;
    EXPECT_LT(h.back(), h.front());
    const Grid2D p = predict_mask(m, smp.image, smp.exemplars);
    EXPECT_LT(loss_seg(p, smp.target), h.front());
}

TEST(TrainSeg, DeterministicGivenSeed) {
    TrainCfg cfg;
    cfg.epochs = 3;
    cfg.lr = 1e-2;
    cfg.seed = 5;
    const std::vector<SegSample> data{tiny_sample(44, checker(4, 4)), tiny_sample(45, Grid2D(4, 4, 1.0))};
    EXPECT_EQ(train_seg(tiny_seg(46), data, cfg), train_seg(tiny_seg(46), data, cfg));
}

TEST(TrainSeg, RejectsMisshapenTargets) {
    TrainCfg cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train_seg(tiny_seg(47), {tiny_sample(48, Grid2D(3, 4, 1.0))}, cfg), Error);
}

TEST(Binarize, Examples) {
    EXPECT_EQ(binarize(Grid2D(2, 2, 0.7), 0.5), Grid2D(2, 2, 0.0));
    EXPECT_EQ(binarize(Grid2D(1, 3, {-0.3, 0.2, 0.9}), 0.0), Grid2D(1, 3, 1.0));
    EXPECT_EQ(binarize(Grid2D(1, 2, {0.1, 0.9}), 0.5), Grid2D(1, 2, {0, 1}));
    EXPECT_THROW(binarize(Grid2D(1, 2, {0.1, 0.9}), -0.1), Error);
}

TEST(Binarize, Idempotent) {
    Rng rng(49);
    for (int trial = 0; trial < 200; ++trial) {
        Grid2D g(5, 4);
        for (double& v : g.values()) v = rng.uniform(-1, 1);
        const double tau = rng.uniform();
        const Grid2D once = binarize(g, tau);
        EXPECT_EQ(binarize(once, tau), once);
    }
}

TEST(MaskedCount, AllOnesMaskMatchesUnmasked) {
    Rng rng(50);
    const CounterModel counter = CounterModel::create(4, 2, rng);
    const SegModel seg = tiny_seg(51, 4, 2);
    const Scene s = tiny_scene(52);
    const double plain = count(predict_density(counter, s.image, make_exemplars(s, kTinyExemplar)));
    // tau = 0 binarizes any non-constant map to all ones.
    EXPECT_NEAR(masked_count(counter, seg, s, 0.0, kTinyExemplar), plain, 1e-12);
}

TEST(MaskedCount, AllZeroMaskIsFinite) {
    Rng rng(53);
    const CounterModel counter = CounterModel::create(4, 2, rng);
    SegModel seg = tiny_seg(54, 4, 2);
    for (auto& [name, t] : seg.params) std::fill(t.data.begin(), t.data.end(), 0.0);
    const Scene s = tiny_scene(55);
    const auto ex = make_exemplars(s, kTinyExemplar);
    EXPECT_EQ(binarize(predict_mask(seg, s.image, ex), 0.5), Grid2D(4, 4, 0.0));
    const double c = masked_count(counter, seg, s, 0.5, kTinyExemplar);
    EXPECT_TRUE(std::isfinite(c));
    EXPECT_GE(c, 0.0);
    EXPECT_NEAR(c, count(predict_density(counter, s.image, ex, Grid2D(4, 4, 0.0))), 1e-12);
}

TEST(MaskedCount, MismatchedRatiosAreRejected) {
    Rng rng(56);
    const CounterModel counter = CounterModel::create(8, 2, rng);
    EXPECT_THROW(masked_count(counter, tiny_seg(57, 4, 2), tiny_scene(58, 32, 32), 0.5, kTinyExemplar), Error);
}

TEST(SegPersistence, ExactRoundTrip) {
    TempDir dir("seg");
    TrainCfg cfg;
    cfg.epochs = 2;
    cfg.lr = 1e-2;
    const SegModel m = train_seg(tiny_seg(59), {tiny_sample(60, checker(4, 4))}, cfg);
    save_segmenter(m, dir.path() / "s.json", "feed");
    std::string fp;
    EXPECT_EQ(load_segmenter(dir.path() / "s.json", &fp), m);
    EXPECT_EQ(fp, "feed");
    EXPECT_THROW(load_counter(dir.path() / "s.json"), Error);
}
