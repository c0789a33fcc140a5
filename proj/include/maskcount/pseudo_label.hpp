#pragma once

// Pseudo segmentation masks without mask labels: tile the image into one
// patch per similarity-map cell, embed every patch and the exemplars,
// co-cluster with k-means, and keep the cells that share the exemplar's
// cluster. The cluster count is picked per scene by the counting loss it
// induces. Also hosts the two ablation labelers (dot boxes, thresholding).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcount/counter.hpp"
#include "maskcount/error.hpp"
#include "maskcount/numerics.hpp"
#include "maskcount/scene.hpp"

namespace maskcount {

struct PatchGrid {
    int r = 8;
    int h = 0; ///< mask rows
    int w = 0; ///< mask columns
    int patch_w = 0;
    int patch_h = 0;
    std::vector<std::pair<double, double>> centers; ///< (x, y), row-major

    std::size_t size() const { return centers.size(); }
};

struct TiledPatches {
    PatchGrid grid;
    std::vector<Volume3D> patches;
};

/// Mean exemplar width/height in whole pixels (at least 1).
inline std::pair<int, int> mean_exemplar_size(const std::vector<ExemplarBox>& boxes) {
    require(!boxes.empty(), "patch tiling: at least one exemplar box required");
    double mw = 0.0, mh = 0.0;
    for (const auto& b : boxes) {
        mw += b.width();
        mh += b.height();
    }
    mw /= static_cast<double>(boxes.size());
    mh /= static_cast<double>(boxes.size());
    return {std::max(1, static_cast<int>(std::lround(mw))), std::max(1, static_cast<int>(std::lround(mh)))};
}

inline PatchGrid make_patch_grid(int image_h, int image_w, const std::vector<ExemplarBox>& boxes, int r) {
    PatchGrid g;
    g.r = r;
    g.h = image_h / r;
    g.w = image_w / r;
    require(g.h >= 1 && g.w >= 1, "patch tiling: image smaller than r");
    std::tie(g.patch_w, g.patch_h) = mean_exemplar_size(boxes);
    g.centers.reserve(static_cast<std::size_t>(g.h) * g.w);
    for (int i = 0; i < g.h; ++i)
        for (int j = 0; j < g.w; ++j) g.centers.emplace_back(j * r + 0.5 * r, i * r + 0.5 * r);
    return g;
}

/// Patch of the grid's size centered at (cx, cy); out-of-image pixels
/// replicate the nearest edge pixel.
inline Volume3D extract_patch(const Volume3D& image, double cx, double cy, int pw, int ph) {
    Volume3D p(image.channels(), ph, pw);
    const double x0 = cx - 0.5 * pw;
    const double y0 = cy - 0.5 * ph;
    for (int v = 0; v < ph; ++v) {
        const int y = std::clamp(static_cast<int>(std::floor(y0 + v + 0.5)), 0, image.height() - 1);
        for (int u = 0; u < pw; ++u) {
            const int x = std::clamp(static_cast<int>(std::floor(x0 + u + 0.5)), 0, image.width() - 1);
            for (int c = 0; c < image.channels(); ++c) p(c, v, u) = image(c, y, x);
        }
    }
    return p;
}

inline TiledPatches tile_patches(const Volume3D& image, const std::vector<ExemplarBox>& exemplars, int r) {
    TiledPatches t;
    t.grid = make_patch_grid(image.height(), image.width(), exemplars, r);
    t.patches.reserve(t.grid.size());
    for (const auto& [cx, cy] : t.grid.centers)
        t.patches.push_back(extract_patch(image, cx, cy, t.grid.patch_w, t.grid.patch_h));
    return t;
}

inline constexpr int kEmbeddingDim = 14;
inline constexpr int kOrientationBins = 8;

/// Color moments (RGB mean, RGB std) followed by a magnitude-weighted
/// 8-bin luminance gradient-orientation histogram, L2-normalized as a whole.
/// A patch with no gradient energy gets a uniform histogram.
inline Vec embed_patch(const Volume3D& patch) {
    require(patch.channels() == 3, "embed_patch: expected 3 channels");
    const int h = patch.height();
    const int w = patch.width();
    const double n = static_cast<double>(patch.plane());
    Vec e(kEmbeddingDim, 0.0);
    for (int c = 0; c < 3; ++c) {
        // Moments about the first sample: a constant channel gets exactly 0 std.
        const double* p = patch.channel(c);
        const double p0 = p[0];
        double s = 0.0, s2 = 0.0;
        for (std::size_t k = 0; k < patch.plane(); ++k) {
            const double x = p[k] - p0;
            s += x;
            s2 += x * x;
        }
        const double shift = s / n;
        e[c] = p0 + shift;
        e[3 + c] = std::sqrt(std::max(0.0, s2 / n - shift * shift));
    }

    std::vector<double> lum(patch.plane());
    for (std::size_t k = 0; k < lum.size(); ++k)
        lum[k] = 0.299 * patch.channel(0)[k] + 0.587 * patch.channel(1)[k] + 0.114 * patch.channel(2)[k];
    auto L = [&](int i, int j) { return lum[static_cast<std::size_t>(i) * w + j]; };
    double hist[kOrientationBins] = {};
    double total = 0.0;
    constexpr double kTwoPi = 6.283185307179586;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double gx = L(i, std::min(j + 1, w - 1)) - L(i, std::max(j - 1, 0));
            const double gy = L(std::min(i + 1, h - 1), j) - L(std::max(i - 1, 0), j);
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag == 0.0) continue;
            const double theta = std::atan2(gy, gx) + kTwoPi / 2; // [0, 2pi]
            int bin = static_cast<int>(theta / kTwoPi * kOrientationBins);
            bin = std::clamp(bin, 0, kOrientationBins - 1);
            hist[bin] += mag;
            total += mag;
        }
    for (int b = 0; b < kOrientationBins; ++b) e[6 + b] = total > 1e-12 ? hist[b] / total : 1.0 / kOrientationBins;

    const double nn = norm(e);
    if (nn > 0.0)
        for (double& x : e) x /= nn;
    return e;
}

/// Mean embedding of the exemplar crops resized to the patch size.
inline Vec exemplar_embedding(const Volume3D& image, const std::vector<ExemplarBox>& boxes, int pw, int ph) {
    require(!boxes.empty(), "exemplar_embedding: at least one exemplar box required");
    Vec acc(kEmbeddingDim, 0.0);
    for (const auto& b : boxes) {
        const Vec e = embed_patch(crop_resize(image, b, pw, ph));
        for (int k = 0; k < kEmbeddingDim; ++k) acc[k] += e[k];
    }
    for (double& x : acc) x /= static_cast<double>(boxes.size());
    return acc;
}

// ---------------------------------------------------------------------------
// k-means

struct ClusterResult {
    int k = 0;
    std::vector<Vec> centroids;
    std::vector<int> assignments;
    double inertia = 0.0;
    int iterations = 0;
    /// Inertia after each Lloyd iteration; non-increasing.
    std::vector<double> inertia_trace;
};

namespace detail {

inline int nearest_centroid(const Vec& p, const std::vector<Vec>& centroids, double* dist = nullptr) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < static_cast<int>(centroids.size()); ++c) {
        const double d = squared_distance(p, centroids[c]);
        if (d < bd) { // strict: ties keep the lowest index
            bd = d;
            best = c;
        }
    }
    if (dist) *dist = bd;
    return best;
}

inline std::vector<Vec> kmeanspp_seed(const std::vector<Vec>& pts, int k, Rng& rng) {
    const int n = static_cast<int>(pts.size());
    std::vector<Vec> centers;
    centers.push_back(pts[rng.uniform_int(0, n - 1)]);
    std::vector<double> d2(n);
    for (int i = 0; i < n; ++i) d2[i] = squared_distance(pts[i], centers[0]);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (double v : d2) total += v;
        int pick = n - 1;
        if (total <= 0.0) {
            pick = rng.uniform_int(0, n - 1);
        } else {
            const double target = rng.uniform() * total;
            double run = 0.0;
            for (int i = 0; i < n; ++i) {
                run += d2[i];
                if (run > target) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(pts[pick]);
        for (int i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(pts[i], centers.back()));
    }
    return centers;
}

/// Hartigan single-point moves on a Lloyd fixed point: x leaves cluster a for
/// b when n_b/(n_b+1) |x-c_b|^2 < n_a/(n_a-1) |x-c_a|^2, which lowers the SSE
/// by the difference. Escapes Lloyd optima that no restart reaches (two
/// contiguous splits of a 1-D set, say). Centroids are recomputed exactly
/// after each pass and the pass inertia joins the trace.
inline void hartigan_refine(const std::vector<Vec>& points, ClusterResult& cr) {
    const int n = static_cast<int>(points.size());
    const int k = cr.k;
    if (k < 2) return;
    const std::size_t dim = points[0].size();
    std::vector<int> sizes(k, 0);
    for (int a : cr.assignments) ++sizes[a];
    constexpr int kMaxPasses = 100;
    for (int pass = 0; pass < kMaxPasses; ++pass) {
        bool moved = false;
        for (int i = 0; i < n; ++i) {
            const int a = cr.assignments[i];
            if (sizes[a] <= 1) continue;
            const double gain = sizes[a] / (sizes[a] - 1.0) * squared_distance(points[i], cr.centroids[a]);
            int best = -1;
            double best_cost = gain * (1.0 - 1e-12);
            for (int b = 0; b < k; ++b) {
                if (b == a) continue;
                const double cost = sizes[b] / (sizes[b] + 1.0) * squared_distance(points[i], cr.centroids[b]);
                if (cost < best_cost) {
                    best_cost = cost;
                    best = b;
                }
            }
            if (best < 0) continue;
            for (std::size_t t = 0; t < dim; ++t) {
                cr.centroids[a][t] = (cr.centroids[a][t] * sizes[a] - points[i][t]) / (sizes[a] - 1);
                cr.centroids[best][t] = (cr.centroids[best][t] * sizes[best] + points[i][t]) / (sizes[best] + 1);
            }
            --sizes[a];
            ++sizes[best];
            cr.assignments[i] = best;
            moved = true;
        }
        if (!moved) break;
        for (auto& c : cr.centroids) std::fill(c.begin(), c.end(), 0.0);
        for (int i = 0; i < n; ++i)
            for (std::size_t t = 0; t < dim; ++t) cr.centroids[cr.assignments[i]][t] += points[i][t];
        for (int c = 0; c < k; ++c)
            for (double& x : cr.centroids[c]) x /= sizes[c];
        double inertia = 0.0;
        for (int i = 0; i < n; ++i) inertia += squared_distance(points[i], cr.centroids[cr.assignments[i]]);
        if (inertia > cr.inertia_trace.back() * (1.0 + 1e-12) + 1e-15)
            throw Error(ErrorKind::numeric, "kmeans: inertia increased during refinement");
        cr.inertia_trace.push_back(inertia);
        cr.inertia = inertia;
        ++cr.iterations;
    }
}

} // namespace detail

/// k-means++ seeding, then Lloyd iterations until assignments stop changing
/// (at most 100), then Hartigan single-point refinement. Ties go to the
/// lowest centroid index; an empty cluster takes the point farthest from its
/// current centroid.
inline ClusterResult kmeans(const std::vector<Vec>& points, int k, Rng& rng) {
    require(k >= 1, "kmeans: k must be >= 1");
    const int n = static_cast<int>(points.size());
    if (n < k)
        throw Error(ErrorKind::invalid_argument,
                    "kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) + " clusters");
    const std::size_t dim = points[0].size();
    for (const auto& p : points) require(p.size() == dim, "kmeans: points differ in dimension");

    ClusterResult cr;
    cr.k = k;
    cr.centroids = detail::kmeanspp_seed(points, k, rng);
    cr.assignments.assign(n, -1);
    std::vector<double> dist(n);
    constexpr int kMaxIterations = 100;

    for (int iter = 0; iter < kMaxIterations; ++iter) {
        std::vector<int> next(n);
        for (int i = 0; i < n; ++i) next[i] = detail::nearest_centroid(points[i], cr.centroids, &dist[i]);

        std::vector<int> sizes(k, 0);
        for (int a : next) ++sizes[a];
        for (int c = 0; c < k; ++c) {
            if (sizes[c] > 0) continue;
            int far = -1;
            for (int i = 0; i < n; ++i)
                if (sizes[next[i]] > 1 && (far < 0 || dist[i] > dist[far])) far = i;
            --sizes[next[far]];
            next[far] = c;
            dist[far] = 0.0;
            ++sizes[c];
        }

        const bool changed = next != cr.assignments;
        cr.assignments = std::move(next);
        for (auto& c : cr.centroids) std::fill(c.begin(), c.end(), 0.0);
        for (int i = 0; i < n; ++i)
            for (std::size_t t = 0; t < dim; ++t) cr.centroids[cr.assignments[i]][t] += points[i][t];
        for (int c = 0; c < k; ++c)
            for (double& x : cr.centroids[c]) x /= sizes[c];

        double inertia = 0.0;
        for (int i = 0; i < n; ++i) inertia += squared_distance(points[i], cr.centroids[cr.assignments[i]]);
        if (!cr.inertia_trace.empty() && inertia > cr.inertia_trace.back() * (1.0 + 1e-12) + 1e-15)
            throw Error(ErrorKind::numeric, "kmeans: inertia increased at iteration " + std::to_string(iter + 1));
        cr.inertia_trace.push_back(inertia);
        cr.inertia = inertia;
        cr.iterations = iter + 1;
        if (!changed) break;
    }
    detail::hartigan_refine(points, cr);
    return cr;
}

/// Lowest-inertia run over `restarts` independently seeded runs.
inline ClusterResult kmeans_best_of(const std::vector<Vec>& points, int k, Rng& rng, int restarts) {
    require(restarts >= 1, "kmeans_best_of: restarts must be >= 1");
    ClusterResult best = kmeans(points, k, rng);
    for (int t = 1; t < restarts; ++t) {
        ClusterResult cr = kmeans(points, k, rng);
        if (cr.inertia < best.inertia) best = std::move(cr);
    }
    return best;
}

/// Cells whose patch shares the exemplar's cluster. The exemplar embedding
/// is the last clustered point.
inline Grid2D mask_from_clusters(const ClusterResult& cr, const PatchGrid& grid) {
    require(cr.assignments.size() == grid.size() + 1, "mask_from_clusters: expected one assignment per patch plus the exemplar");
    const int ex = cr.assignments.back();
    Grid2D m(grid.h, grid.w);
    auto mv = m.values();
    for (std::size_t k = 0; k < grid.size(); ++k) mv[k] = cr.assignments[k] == ex ? 1.0 : 0.0;
    return m;
}

/// True when no patch joined the exemplar's cluster.
inline bool exemplar_isolated(const ClusterResult& cr) {
    const int ex = cr.assignments.back();
    return std::count(cr.assignments.begin(), cr.assignments.end(), ex) == 1;
}

/// Patch and exemplar embeddings for one scene, in clustering order.
struct ClusterInput {
    PatchGrid grid;
    std::vector<Vec> points; ///< patches (row-major) followed by f_B
};

inline ClusterInput cluster_input(const Volume3D& image, const std::vector<ExemplarBox>& exemplars, int r) {
    ClusterInput in;
    TiledPatches t = tile_patches(image, exemplars, r);
    in.grid = std::move(t.grid);
    in.points.reserve(t.patches.size() + 1);
    for (const auto& p : t.patches) in.points.push_back(embed_patch(p));
    in.points.push_back(exemplar_embedding(image, exemplars, in.grid.patch_w, in.grid.patch_h));
    return in;
}

/// Fixed-k k-means mask (no ground truth involved).
inline Grid2D kmeans_mask(const Volume3D& image, const std::vector<ExemplarBox>& exemplars, int r, int k, Rng& rng) {
    const ClusterInput in = cluster_input(image, exemplars, r);
    return mask_from_clusters(kmeans(in.points, k, rng), in.grid);
}

// ---------------------------------------------------------------------------
// Optimal-k selection

enum class MaskStrategy { kmeans, dotbox, threshold };

inline const char* to_string(MaskStrategy s) {
    switch (s) {
    case MaskStrategy::kmeans: return "kmeans";
    case MaskStrategy::dotbox: return "dotbox";
    case MaskStrategy::threshold: return "threshold";
    }
    return "?";
}

struct PseudoLabelResult {
    Grid2D mask;
    int k_star = 0;
    std::map<int, double> per_k_loss;
    MaskStrategy strategy = MaskStrategy::kmeans;
    std::vector<std::string> warnings;
};

/// argmin over the map; ties resolve to the smaller k (map order).
inline int select_k_star(const std::map<int, double>& per_k_loss) {
    require(!per_k_loss.empty(), "select_k_star: empty loss map");
    int best = per_k_loss.begin()->first;
    double bl = per_k_loss.begin()->second;
    for (const auto& [k, l] : per_k_loss)
        if (l < bl) {
            bl = l;
            best = k;
        }
    return best;
}

struct PseudoLabelCfg {
    int k_min = 2;
    int k_max = 6;
    double sigma = 2.0;
    int exemplar_size = 32;
};

/// For each k, min-fills the counter's similarity map outside the k-means
/// mask, runs the counter head and scores the density against ground truth;
/// returns the mask of the best k.
inline PseudoLabelResult optimal_k_mask(const CounterModel& model, const Scene& scene, const PseudoLabelCfg& cfg,
                                        Rng& rng) {
    require(cfg.k_min >= 1 && cfg.k_max >= cfg.k_min, "optimal_k_mask: invalid k range");
    const Volume3D features = extract_features(model, scene.image);
    const Grid2D sim = similarity_from_features(features, exemplar_vectors(model, make_exemplars(scene, cfg.exemplar_size)));
    const Grid2D gt = build_gt_density(scene, model.r, cfg.sigma);
    const ClusterInput in = cluster_input(scene.image, scene.exemplars, model.r);

    PseudoLabelResult res;
    std::map<int, Grid2D> masks;
    for (int k = cfg.k_min; k <= cfg.k_max; ++k) {
        const ClusterResult cr = kmeans(in.points, k, rng);
        Grid2D m = mask_from_clusters(cr, in.grid);
        if (exemplar_isolated(cr)) res.warnings.push_back("k=" + std::to_string(k) + ": exemplar embedding formed a singleton cluster (empty mask)");
        res.per_k_loss[k] = loss_count(head_density(model, features, apply_mask(sim, m)), gt);
        masks.emplace(k, std::move(m));
    }
    res.k_star = select_k_star(res.per_k_loss);
    res.mask = std::move(masks.at(res.k_star));
    return res;
}

// ---------------------------------------------------------------------------
// Ablation labelers

enum class BoxSize { mean, min, max };

inline const char* to_string(BoxSize b) {
    switch (b) {
    case BoxSize::mean: return "mean";
    case BoxSize::min: return "min";
    case BoxSize::max: return "max";
    }
    return "?";
}

/// Cells whose patch center falls inside a box of the chosen exemplar size
/// centered on any target-class dot.
inline Grid2D dotbox_mask(const Scene& scene, BoxSize mode, int r) {
    require(!scene.exemplars.empty(), "dotbox_mask: scene has no exemplars");
    double bw = 0.0, bh = 0.0;
    if (mode == BoxSize::mean) {
        for (const auto& e : scene.exemplars) {
            bw += e.width();
            bh += e.height();
        }
        bw /= static_cast<double>(scene.exemplars.size());
        bh /= static_cast<double>(scene.exemplars.size());
    } else {
        // Size ranks by area.
        auto area = [](const ExemplarBox& e) { return e.width() * e.height(); };
        const auto it = mode == BoxSize::min
                            ? std::min_element(scene.exemplars.begin(), scene.exemplars.end(),
                                               [&](const auto& a, const auto& b) { return area(a) < area(b); })
                            : std::max_element(scene.exemplars.begin(), scene.exemplars.end(),
                                               [&](const auto& a, const auto& b) { return area(a) < area(b); });
        bw = it->width();
        bh = it->height();
    }
    return dot_box_cells(scene, r, bw, bh);
}

inline Grid2D threshold_similarity(const Grid2D& sim, double tau) {
    require(tau >= 0.0 && tau <= 1.0, "threshold: tau must lie in [0, 1]");
    Grid2D m = minmax_normalize(sim);
    for (double& v : m.values()) v = v >= tau ? 1.0 : 0.0;
    return m;
}

inline Grid2D threshold_mask(const CounterModel& model, const Scene& scene, double tau, int exemplar_size = 32) {
    return threshold_similarity(similarity_map(model, scene.image, make_exemplars(scene, exemplar_size)), tau);
}

// ---------------------------------------------------------------------------
// Mask files

inline std::string mask_bits(const Grid2D& m) {
    std::string bits;
    bits.reserve(m.size());
    for (double v : m.values()) bits.push_back(v != 0.0 ? '1' : '0');
    return bits;
}

inline nlohmann::json pseudo_label_json(const PseudoLabelResult& r, const std::string& fingerprint = {}) {
    nlohmann::json j;
    j["version"] = 1;
    j["strategy"] = to_string(r.strategy);
    j["k_star"] = r.k_star;
    nlohmann::json losses = nlohmann::json::object();
    for (const auto& [k, l] : r.per_k_loss) losses[std::to_string(k)] = l;
    j["per_k_loss"] = losses;
    j["mask"] = {{"h", r.mask.height()}, {"w", r.mask.width()}, {"bits", mask_bits(r.mask)}};
    if (!fingerprint.empty()) j["fingerprint"] = fingerprint;
    return j;
}

inline PseudoLabelResult pseudo_label_from_json(const nlohmann::json& j, const std::string& file) {
    detail::FieldReader rd(file);
    if (rd.integer(j, "version", "") != 1) rd.fail("version", "unsupported version");
    PseudoLabelResult r;
    const auto& strat = rd.at(j, "strategy", "");
    if (strat == "kmeans")
        r.strategy = MaskStrategy::kmeans;
    else if (strat == "dotbox")
        r.strategy = MaskStrategy::dotbox;
    else if (strat == "threshold")
        r.strategy = MaskStrategy::threshold;
    else
        rd.fail("strategy", "unknown strategy");
    r.k_star = static_cast<int>(rd.integer(j, "k_star", ""));
    const auto& losses = rd.at(j, "per_k_loss", "");
    if (!losses.is_object()) rd.fail("per_k_loss", "expected object");
    for (const auto& [key, val] : losses.items()) {
        int k = 0;
        try {
            std::size_t used = 0;
            k = std::stoi(key, &used);
            if (used != key.size()) throw std::invalid_argument(key);
        } catch (const std::exception&) {
            rd.fail("per_k_loss." + key, "key is not an integer");
        }
        if (!val.is_number()) rd.fail("per_k_loss." + key, "expected number");
        r.per_k_loss[k] = val.get<double>();
    }
    const auto& mask = rd.at(j, "mask", "");
    const int h = static_cast<int>(rd.integer(mask, "h", "mask"));
    const int w = static_cast<int>(rd.integer(mask, "w", "mask"));
    const auto& bits = rd.at(mask, "bits", "mask");
    if (!bits.is_string()) rd.fail("mask.bits", "expected string");
    const std::string b = bits.get<std::string>();
    if (h < 1 || w < 1 || b.size() != static_cast<std::size_t>(h) * w) rd.fail("mask.bits", "length does not match h*w");
    std::vector<double> vals(b.size());
    for (std::size_t k = 0; k < b.size(); ++k) {
        if (b[k] != '0' && b[k] != '1') rd.fail("mask.bits", "invalid character at offset " + std::to_string(k));
        vals[k] = b[k] == '1' ? 1.0 : 0.0;
    }
    r.mask = Grid2D(h, w, std::move(vals));
    return r;
}

inline void save_pseudo_label(const PseudoLabelResult& r, const std::filesystem::path& path,
                              const std::string& fingerprint = {}) {
    write_json_file(path, pseudo_label_json(r, fingerprint));
}

inline PseudoLabelResult load_pseudo_label(const std::filesystem::path& path) {
    return pseudo_label_from_json(detail::parse_json_file(path.string()), path.string());
}

} // namespace maskcount
