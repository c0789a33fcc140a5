#pragma once

// Dense planes/volumes and the shared numeric kernels. Everything is double
// precision and iterates row-major so results are bit-stable run to run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "maskcount/error.hpp"

namespace maskcount {

using Vec = std::vector<double>;

class Grid2D {
public:
    Grid2D() = default;
    Grid2D(int height, int width, double fill = 0.0)
        : h_(height), w_(width), v_(static_cast<std::size_t>(height) * width, fill) {
        require(height >= 1 && width >= 1, "Grid2D: dimensions must be >= 1");
    }
    Grid2D(int height, int width, std::vector<double> values) : h_(height), w_(width), v_(std::move(values)) {
        require(height >= 1 && width >= 1, "Grid2D: dimensions must be >= 1");
        require(v_.size() == static_cast<std::size_t>(height) * width, "Grid2D: value count does not match shape");
    }

    int height() const noexcept { return h_; }
    int width() const noexcept { return w_; }
    std::size_t size() const noexcept { return v_.size(); }
    bool empty() const noexcept { return v_.empty(); }

    double& operator()(int i, int j) { return v_[static_cast<std::size_t>(i) * w_ + j]; }
    double operator()(int i, int j) const { return v_[static_cast<std::size_t>(i) * w_ + j]; }

    std::span<double> values() noexcept { return v_; }
    std::span<const double> values() const noexcept { return v_; }

    bool same_shape(const Grid2D& o) const noexcept { return h_ == o.h_ && w_ == o.w_; }

    double sum() const noexcept { return std::accumulate(v_.begin(), v_.end(), 0.0); }
    double min() const { return *std::min_element(v_.begin(), v_.end()); }
    double max() const { return *std::max_element(v_.begin(), v_.end()); }

    bool operator==(const Grid2D&) const = default;

private:
    int h_ = 0;
    int w_ = 0;
    std::vector<double> v_;
};

class Volume3D {
public:
    Volume3D() = default;
    Volume3D(int channels, int height, int width, double fill = 0.0)
        : c_(channels), h_(height), w_(width), v_(static_cast<std::size_t>(channels) * height * width, fill) {
        require(channels >= 1 && height >= 1 && width >= 1, "Volume3D: dimensions must be >= 1");
    }

    int channels() const noexcept { return c_; }
    int height() const noexcept { return h_; }
    int width() const noexcept { return w_; }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
    std::size_t size() const noexcept { return v_.size(); }

    double& operator()(int c, int i, int j) { return v_[(static_cast<std::size_t>(c) * h_ + i) * w_ + j]; }
    double operator()(int c, int i, int j) const { return v_[(static_cast<std::size_t>(c) * h_ + i) * w_ + j]; }

    double* channel(int c) noexcept { return v_.data() + c * plane(); }
    const double* channel(int c) const noexcept { return v_.data() + c * plane(); }

    std::span<double> values() noexcept { return v_; }
    std::span<const double> values() const noexcept { return v_; }

    bool operator==(const Volume3D&) const = default;

private:
    int c_ = 0;
    int h_ = 0;
    int w_ = 0;
    std::vector<double> v_;
};

inline bool all_finite(std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Rng: mt19937_64-equivalent stream with hand-rolled distributions. The
// standard <random> distributions are implementation defined, so only the raw
// engine output is used.

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) { reseed(seed); }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() {
        if (index_ >= kN) twist();
        std::uint64_t x = mt_[index_++];
        x ^= (x >> 29) & 0x5555555555555555ULL;
        x ^= (x << 17) & 0x71D67FFFEDA60000ULL;
        x ^= (x << 37) & 0xFFF7EEE000000000ULL;
        x ^= x >> 43;
        return x;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return lo + static_cast<int>(x % span);
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Independent named sub-stream, e.g. root.derive("kmeans").
    Rng derive(std::string_view name) const { return Rng(mix(seed_ ^ fnv1a(name))); }
    Rng derive(std::uint64_t index) const { return Rng(mix(seed_ + 0x9E3779B97F4A7C15ULL * (index + 1))); }

    template <class T>
    void shuffle(std::vector<T>& xs) {
        for (int i = static_cast<int>(xs.size()) - 1; i > 0; --i) std::swap(xs[i], xs[uniform_int(0, i)]);
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    static constexpr int kN = 312;
    static constexpr int kM = 156;

    void reseed(std::uint64_t s) {
        mt_[0] = s;
        for (int i = 1; i < kN; ++i) mt_[i] = 6364136223846793005ULL * (mt_[i - 1] ^ (mt_[i - 1] >> 62)) + i;
        index_ = kN;
    }

    void twist() {
        constexpr std::uint64_t upper = 0xFFFFFFFF80000000ULL;
        constexpr std::uint64_t lower = 0x7FFFFFFFULL;
        for (int i = 0; i < kN; ++i) {
            const std::uint64_t x = (mt_[i] & upper) | (mt_[(i + 1) % kN] & lower);
            std::uint64_t xa = x >> 1;
            if (x & 1ULL) xa ^= 0xB5026F5AA96619E9ULL;
            mt_[i] = mt_[(i + kM) % kN] ^ xa;
        }
        index_ = 0;
    }

    std::uint64_t seed_;
    std::uint64_t mt_[kN]{};
    int index_ = kN;
};

// ---------------------------------------------------------------------------
// Kernels

inline Vec global_average_pool(const Volume3D& vol) {
    Vec out(vol.channels(), 0.0);
    const double n = static_cast<double>(vol.plane());
    for (int c = 0; c < vol.channels(); ++c) {
        const double* p = vol.channel(c);
        double s = 0.0;
        for (std::size_t k = 0; k < vol.plane(); ++k) s += p[k];
        out[c] = s / n;
    }
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                                      std::to_string(b.size()) + ")");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; a zero-norm operand yields 0.
inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double ab = dot(a, b);
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(ab / (na * nb), -1.0, 1.0);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Normalized 1-D Gaussian taps for radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
    require(sigma > 0.0, "gaussian_smooth: sigma must be > 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        k[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
        total += k[t + radius];
    }
    for (double& x : k) x /= total;
    return k;
}

/// Separable Gaussian blur. Taps falling outside the grid are folded back
/// onto the source cell's row/column weight set, so each impulse keeps its
/// full unit mass regardless of distance to the border.
inline Grid2D gaussian_smooth(const Grid2D& g, double sigma) {
    const std::vector<double> k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    const int h = g.height();
    const int w = g.width();

    // Scatter formulation: each source cell distributes its mass over the
    // in-bounds taps, renormalized by the in-bounds tap weight.
    auto scatter_1d = [&](int n, int src, std::vector<std::pair<int, double>>& taps) {
        taps.clear();
        double inside = 0.0;
        for (int t = -radius; t <= radius; ++t) {
            const int dst = src + t;
            if (dst < 0 || dst >= n) continue;
            taps.emplace_back(dst, k[t + radius]);
            inside += k[t + radius];
        }
        for (auto& tap : taps) tap.second /= inside;
    };

    Grid2D tmp(h, w);
    std::vector<std::pair<int, double>> taps;
    for (int j = 0; j < w; ++j) {
        scatter_1d(w, j, taps);
        for (int i = 0; i < h; ++i) {
            const double v = g(i, j);
            if (v == 0.0) continue;
            for (const auto& [dst, wt] : taps) tmp(i, dst) += v * wt;
        }
    }
    Grid2D out(h, w);
    for (int i = 0; i < h; ++i) {
        scatter_1d(h, i, taps);
        for (int j = 0; j < w; ++j) {
            const double v = tmp(i, j);
            if (v == 0.0) continue;
            for (const auto& [dst, wt] : taps) out(dst, j) += v * wt;
        }
    }
    return out;
}

/// Affine map onto [0,1]; a constant grid maps to all zeros.
inline Grid2D minmax_normalize(const Grid2D& g) {
    const double lo = g.min();
    const double hi = g.max();
    Grid2D out(g.height(), g.width());
    if (hi == lo) return out;
    const double span = hi - lo;
    auto src = g.values();
    auto dst = out.values();
    // Division (not a reciprocal multiply) so the maximum lands on exactly 1.
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = std::clamp((src[k] - lo) / span, 0.0, 1.0);
    return out;
}

} // namespace maskcount
