#pragma once

// Counting metrics, interest/non-interest split for concatenated scenes,
// embedding distance statistics, and the masking-path timing harness.

#include <chrono>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "maskcount/counter.hpp"
#include "maskcount/error.hpp"
#include "maskcount/numerics.hpp"
#include "maskcount/pseudo_label.hpp"
#include "maskcount/scene.hpp"
#include "maskcount/segmenter.hpp"

namespace maskcount {

struct CountOutcome {
    std::string scene_id;
    double y = 0.0;        ///< ground-truth count
    double yhat = 0.0;     ///< predicted count in the interest area
    double yhat_bar = 0.0; ///< predicted count outside it (0 for single-class scenes)
    double wall_time_s = 0.0;
};

/// |y - yhat| + yhat_bar for concatenated scenes, |y - yhat| otherwise.
inline double scene_error(const CountOutcome& o, bool multiclass) {
    const double e = std::abs(o.y - o.yhat);
    return multiclass ? e + o.yhat_bar : e;
}

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    double nae = 0.0;
    double sre = 0.0;
    int n = 0;
    /// Scenes left out of NAE/SRE because y = 0.
    int excluded_nae = 0;
    double mean_time_s = 0.0;
    std::string fingerprint;
};

/// SRE follows the printed definition sqrt(mean(eps^2 / y)).
inline MetricsReport aggregate(const std::vector<CountOutcome>& outcomes, bool multiclass) {
    require(!outcomes.empty(), "aggregate: no outcomes");
    MetricsReport m;
    m.n = static_cast<int>(outcomes.size());
    double se = 0.0, se2 = 0.0, snae = 0.0, ssre = 0.0, st = 0.0;
    int rel = 0;
    for (const auto& o : outcomes) {
        const double e = scene_error(o, multiclass);
        se += e;
        se2 += e * e;
        st += o.wall_time_s;
        if (o.y > 0.0) {
            snae += e / o.y;
            ssre += e * e / o.y;
            ++rel;
        } else {
            ++m.excluded_nae;
        }
    }
    m.mae = se / m.n;
    m.rmse = std::sqrt(se2 / m.n);
    m.nae = rel > 0 ? snae / rel : 0.0;
    m.sre = rel > 0 ? std::sqrt(ssre / rel) : 0.0;
    m.mean_time_s = st / m.n;
    return m;
}

/// Density-map column where the right-hand crop starts.
inline int seam_column(const Scene& scene, int r) {
    require(scene.interest_region.has_value() && scene.meta.seam_x.has_value(),
            "split_count_by_region: scene has no interest region");
    return *scene.meta.seam_x / r;
}

/// (mass on the interest side, mass on the other side).
inline std::pair<double, double> split_count_by_region(const Grid2D& density, const Scene& scene, int r) {
    const int seam = seam_column(scene, r);
    const bool interest_left = *scene.interest_region == Region::left;
    double in = 0.0, out = 0.0;
    for (int i = 0; i < density.height(); ++i)
        for (int j = 0; j < density.width(); ++j) {
            const bool left = j < seam;
            (left == interest_left ? in : out) += density(i, j);
        }
    return {in, out};
}

inline CountOutcome outcome_for(const std::string& id, const Scene& scene, const Grid2D& density, int r,
                                double seconds = 0.0) {
    CountOutcome o;
    o.scene_id = id;
    o.y = static_cast<double>(scene.target_count());
    o.wall_time_s = seconds;
    if (scene.is_multiclass()) {
        std::tie(o.yhat, o.yhat_bar) = split_count_by_region(density, scene, r);
    } else {
        o.yhat = count(density);
    }
    return o;
}

struct DistanceStats {
    double intra = 0.0;
    double inter = 0.0;
};

/// intra: mean distance of each embedding to its class center.
/// inter: mean over classes of the distance to the nearest other center.
inline DistanceStats distance_stats(const std::vector<std::pair<Vec, int>>& embeddings) {
    // Running means: a class of repeated points gets exactly that point as center.
    std::map<int, std::pair<Vec, int>> centers;
    for (const auto& [e, cls] : embeddings) {
        auto& [mean, cnt] = centers[cls];
        if (mean.empty()) mean.assign(e.size(), 0.0);
        require(mean.size() == e.size(), "distance_stats: embeddings differ in dimension");
        ++cnt;
        for (std::size_t t = 0; t < e.size(); ++t) mean[t] += (e[t] - mean[t]) / cnt;
    }
    if (centers.size() < 2) throw Error(ErrorKind::invalid_argument, "distance_stats: need at least 2 classes");

    DistanceStats ds;
    for (const auto& [e, cls] : embeddings) ds.intra += std::sqrt(squared_distance(e, centers[cls].first));
    ds.intra /= static_cast<double>(embeddings.size());
    for (const auto& [a, ca] : centers) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [b, cb] : centers)
            if (a != b) best = std::min(best, std::sqrt(squared_distance(ca.first, cb.first)));
        ds.inter += best;
    }
    ds.inter /= static_cast<double>(centers.size());
    return ds;
}

/// Intersection over union of two binary masks; two empty masks give 1.
inline double mask_iou(const Grid2D& a, const Grid2D& b) {
    require(a.same_shape(b), "mask_iou: shape mismatch");
    double inter = 0.0, uni = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < av.size(); ++k) {
        const bool x = av[k] != 0.0;
        const bool y = bv[k] != 0.0;
        inter += (x && y) ? 1.0 : 0.0;
        uni += (x || y) ? 1.0 : 0.0;
    }
    return uni == 0.0 ? 1.0 : inter / uni;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingTable {
    std::vector<std::string> columns; ///< "w/o mask", "kmeans k=..", ..., "segmenter"
    std::vector<double> mean_seconds;
    int scenes = 0;
};

struct TimingCfg {
    int k_min = 2;
    int k_max = 6;
    double tau = 0.5;
    int exemplar_size = 32;
    int warmup = 2;
    /// Each column runs this many times per scene; the fastest run counts.
    int repeats = 3;
    std::uint64_t seed = 0;
};

/// Mean wall-clock seconds per scene for unmasked counting, fixed-k k-means
/// masking for each k, and segmenter masking. Columns are interleaved per
/// scene on the calling thread; per scene, the fastest of cfg.repeats
/// identical runs is kept.
inline TimingTable bench_timing(const CounterModel& counter, const SegModel& seg, const std::vector<Scene>& scenes,
                                const TimingCfg& cfg) {
    require(static_cast<int>(scenes.size()) >= 10, "bench_timing: at least 10 scenes required");
    require(cfg.repeats >= 1 && cfg.warmup >= 0, "bench_timing: repeats must be >= 1 and warmup >= 0");
    using clock = std::chrono::steady_clock;
    TimingTable t;
    t.columns.push_back("w/o mask");
    for (int k = cfg.k_min; k <= cfg.k_max; ++k) t.columns.push_back("kmeans k=" + std::to_string(k));
    t.columns.push_back("segmenter");
    std::vector<double> total(t.columns.size(), 0.0);
    double sink = 0.0;

    for (std::size_t s = 0; s < scenes.size(); ++s) {
        const Scene& sc = scenes[s];
        std::vector<double> secs;
        auto timed = [&](auto&& fn) {
            double best = std::numeric_limits<double>::infinity();
            for (int rep = 0; rep < cfg.repeats; ++rep) {
                const auto t0 = clock::now();
                sink += fn();
                best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count());
            }
            secs.push_back(best);
        };
        timed([&] {
            return count(predict_density(counter, sc.image, make_exemplars(sc, cfg.exemplar_size)));
        });
        for (int k = cfg.k_min; k <= cfg.k_max; ++k)
            timed([&] {
                Rng rng = Rng(cfg.seed).derive("bench-kmeans").derive(s);
                const Grid2D m = kmeans_mask(sc.image, sc.exemplars, counter.r, k, rng);
                return count(predict_density(counter, sc.image, make_exemplars(sc, cfg.exemplar_size), m));
            });
        timed([&] { return masked_count(counter, seg, sc, cfg.tau, cfg.exemplar_size); });
        if (static_cast<int>(s) < cfg.warmup) continue;
        for (std::size_t c = 0; c < secs.size(); ++c) total[c] += secs[c];
    }
    t.scenes = static_cast<int>(scenes.size()) - cfg.warmup;
    for (double x : total) t.mean_seconds.push_back(x / t.scenes);
    if (!std::isfinite(sink)) throw Error(ErrorKind::numeric, "bench_timing: non-finite count");
    return t;
}

} // namespace maskcount
