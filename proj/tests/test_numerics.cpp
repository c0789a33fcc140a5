#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "maskcount/numerics.hpp"

using namespace maskcount;

namespace {

Volume3D volume(int c, int h, int w, std::initializer_list<double> vals) {
    Volume3D v(c, h, w);
    std::size_t k = 0;
    for (double x : vals) v.values()[k++] = x;
    return v;
}

Grid2D random_grid(Rng& rng, int h, int w, double lo = -5.0, double hi = 5.0) {
    Grid2D g(h, w);
    for (double& v : g.values()) v = rng.uniform(lo, hi);
    return g;
}

} // namespace

TEST(GlobalAveragePool, SingleChannelMean) {
    EXPECT_EQ(global_average_pool(volume(1, 2, 2, {1, 3, 5, 7})), Vec{4.0});
}

TEST(GlobalAveragePool, ConstantVolume) {
    Volume3D v(4, 3, 5, 2.5);
    EXPECT_EQ(global_average_pool(v), Vec(4, 2.5));
}

TEST(GlobalAveragePool, TwoChannels) {
    EXPECT_EQ(global_average_pool(volume(2, 1, 2, {2, 4, 0, 10})), (Vec{3.0, 5.0}));
}

TEST(Dot, Examples) {
    EXPECT_DOUBLE_EQ(dot(Vec{1, 0}, Vec{0.5, 2}), 0.5);
    EXPECT_DOUBLE_EQ(dot(Vec{0, 0}, Vec{3, -7}), 0.0);
    EXPECT_DOUBLE_EQ(dot(Vec{1, 2, 3}, Vec{4, 5, 6}), 32.0);
}

TEST(Dot, DimensionMismatchThrows) {
    EXPECT_THROW(dot(Vec{1, 2}, Vec{1, 2, 3}), Error);
}

TEST(Cosine, Examples) {
    EXPECT_DOUBLE_EQ(cosine(Vec{1, 0}, Vec{2, 0}), 1.0);
    EXPECT_DOUBLE_EQ(cosine(Vec{1, 0}, Vec{0, 3}), 0.0);
    EXPECT_NEAR(cosine(Vec{1, 1}, Vec{1, 0}), 1.0 / std::sqrt(2.0), 1e-6);
}

TEST(Cosine, ZeroNormOperandGivesZero) {
    EXPECT_EQ(cosine(Vec{0, 0}, Vec{1, 2}), 0.0);
    EXPECT_EQ(cosine(Vec{1, 2}, Vec{0, 0}), 0.0);
}

TEST(Cosine, PositiveScaleInvariance) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Vec a(7), b(7);
        for (double& x : a) x = rng.uniform(-1, 1);
        for (double& x : b) x = rng.uniform(-1, 1);
        const double lambda = rng.uniform(0.01, 100.0);
        Vec la = a;
        for (double& x : la) x *= lambda;
        EXPECT_NEAR(cosine(a, b), cosine(la, b), 1e-12);
        const double c = cosine(a, b);
        EXPECT_LE(c, 1.0);
        EXPECT_GE(c, -1.0);
    }
}

TEST(GaussianSmooth, ZeroGridStaysZero) {
    const Grid2D out = gaussian_smooth(Grid2D(9, 7), 1.5);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(GaussianSmooth, ImpulseKeepsUnitMass) {
    for (double sigma : {0.3, 1.0, 2.0, 4.0}) {
        Grid2D g(16, 16);
        g(5, 9) = 1.0;
        EXPECT_NEAR(gaussian_smooth(g, sigma).sum(), 1.0, 1e-6) << "sigma " << sigma;
    }
}

TEST(GaussianSmooth, CornerImpulsePeaksAtCorner) {
    Grid2D g(8, 8);
    g(0, 0) = 1.0;
    const Grid2D out = gaussian_smooth(g, 1.0);
    // Direct 2-D evaluation: separable truncated kernel, renormalized over the in-bounds taps.
    const int radius = 3;
    std::vector<double> k1;
    for (int t = -radius; t <= radius; ++t) k1.push_back(std::exp(-0.5 * t * t));
    double inside = 0.0;
    for (int t = 0; t <= radius; ++t) inside += k1[t + radius];
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            const double expect = i <= radius && j <= radius ? k1[i + radius] * k1[j + radius] / (inside * inside) : 0.0;
            EXPECT_NEAR(out(i, j), expect, 1e-12);
            if (i != 0 || j != 0) {
                EXPECT_LT(out(i, j), out(0, 0));
            }
        }
}

TEST(GaussianSmooth, NonPositiveSigmaThrows) {
    EXPECT_THROW(gaussian_smooth(Grid2D(3, 3), 0.0), Error);
    EXPECT_THROW(gaussian_smooth(Grid2D(3, 3), -1.0), Error);
}

TEST(GaussianSmooth, MassConservationOnRandomGrids) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Grid2D g = random_grid(rng, rng.uniform_int(1, 20), rng.uniform_int(1, 20), 0.0, 3.0);
        const double sigma = rng.uniform(0.2, 5.0);
        EXPECT_LE(std::abs(gaussian_smooth(g, sigma).sum() - g.sum()), 1e-6 * std::max(1.0, g.sum()));
    }
}

TEST(MinmaxNormalize, Examples) {
    EXPECT_EQ(minmax_normalize(Grid2D(1, 2, {0, 10})), Grid2D(1, 2, {0, 1}));
    EXPECT_EQ(minmax_normalize(Grid2D(2, 2, 3.0)), Grid2D(2, 2, 0.0));
    EXPECT_EQ(minmax_normalize(Grid2D(1, 3, {2, 4, 6})), Grid2D(1, 3, {0, 0.5, 1}));
}

TEST(MinmaxNormalize, RangeIsUnitInterval) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const Grid2D out = minmax_normalize(random_grid(rng, 5, 6));
        EXPECT_EQ(out.min(), 0.0);
        EXPECT_EQ(out.max(), 1.0);
    }
}

TEST(Grid2D, RejectsBadShapes) {
    EXPECT_THROW(Grid2D(0, 3), Error);
    EXPECT_THROW(Grid2D(2, 2, std::vector<double>{1, 2, 3}), Error);
}

TEST(Rng, MatchesStandardMersenneTwister) {
    Rng mine(5489);
    std::mt19937_64 ref(5489);
    for (int k = 0; k < 9999; ++k) ASSERT_EQ(mine.next_u64(), ref());
    // The standard fixes the 10000th output of the default-seeded engine.
    EXPECT_EQ(mine.next_u64(), 9981545732273789042ULL);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int k = 0; k < 1000; ++k) {
        EXPECT_EQ(a.uniform(), b.uniform());
        EXPECT_EQ(a.uniform_int(-3, 9), b.uniform_int(-3, 9));
        EXPECT_EQ(a.normal(), b.normal());
    }
}

TEST(Rng, UniformIntCoversInclusiveRange) {
    Rng rng(1);
    std::array<int, 5> seen{};
    for (int k = 0; k < 5000; ++k) {
        const int x = rng.uniform_int(2, 6);
        ASSERT_GE(x, 2);
        ASSERT_LE(x, 6);
        ++seen[x - 2];
    }
    for (int c : seen) EXPECT_GT(c, 800);
}

TEST(Rng, UniformInUnitInterval) {
    Rng rng(9);
    double sum = 0.0;
    for (int k = 0; k < 20000; ++k) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        sum += u;
    }
    EXPECT_NEAR(sum / 20000, 0.5, 0.01);
}

TEST(Rng, NamedSubstreamsDiffer) {
    const Rng root(2023);
    EXPECT_NE(root.derive("gen").seed(), root.derive("kmeans").seed());
    EXPECT_NE(root.derive(0).seed(), root.derive(1).seed());
    EXPECT_EQ(root.derive("gen").seed(), Rng(2023).derive("gen").seed());
}
