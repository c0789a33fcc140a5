#pragma once

// Exemplar-conditioned base counter: feature extractor, inner-product
// similarity map, density head, min-fill masking and L2 training.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcount/error.hpp"
#include "maskcount/nn.hpp"
#include "maskcount/numerics.hpp"
#include "maskcount/scene.hpp"
#include "maskcount/train.hpp"

namespace maskcount {

/// An exemplar crop resized to a fixed E x E.
struct Exemplar {
    Volume3D crop;
};

inline std::vector<Exemplar> make_exemplars(const Scene& scene, int size = 32) {
    std::vector<Exemplar> out;
    out.reserve(scene.exemplars.size());
    for (const auto& box : scene.exemplars) out.push_back({crop_resize(scene.image, box, size, size)});
    return out;
}

struct CounterModel {
    int r = 8;
    int d = 16;
    ParamSet params;
    TrainingState training;

    static constexpr int kHidden1 = 16;
    static constexpr int kHidden2 = 8;
    static constexpr double kInitialDensityLogit = -4.0;

    static CounterModel create(int r, int d, Rng& rng) {
        CounterModel m;
        m.r = r;
        m.d = d;
        m.extractor().init_params(m.params, rng);
        m.head().init_params(m.params, rng);
        // Start near an empty-scene density rather than softplus(0) = 0.69 per cell.
        m.params["counter.conv3.bias"].data[0] = kInitialDensityLogit;
        return m;
    }

    ConvStack extractor() const { return make_extractor("extractor", r, d); }

    ConvStack head() const {
        ConvStack st;
        st.layers.push_back({"counter.conv1", d + 1, kHidden1, 3, 1, 1, true});
        st.layers.push_back({"counter.conv2", kHidden1, kHidden2, 3, 1, 1, true});
        st.layers.push_back({"counter.conv3", kHidden2, 1, 1, 1, 0, false});
        return st;
    }

    bool operator==(const CounterModel&) const = default;
};

/// Top-left crop to a multiple of r, so an r-fold downsampling gives exactly
/// floor(H/r) x floor(W/r) cells.
inline Volume3D fit_to_ratio(const Volume3D& image, int r) {
    require(image.height() >= r && image.width() >= r,
            "image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                " is smaller than the downsampling ratio " + std::to_string(r));
    const int H = image.height() / r * r;
    const int W = image.width() / r * r;
    if (H == image.height() && W == image.width()) return image;
    Volume3D out(image.channels(), H, W);
    for (int c = 0; c < image.channels(); ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) out(c, i, j) = image(c, i, j);
    return out;
}

inline Volume3D extract_features(const CounterModel& model, const Volume3D& image) {
    return model.extractor().forward(model.params, fit_to_ratio(image, model.r));
}

/// One pooled d-dim vector per exemplar.
inline std::vector<Vec> exemplar_vectors(const CounterModel& model, const std::vector<Exemplar>& ex) {
    require(!ex.empty(), "exemplar_vectors: at least one exemplar required");
    std::vector<Vec> out;
    out.reserve(ex.size());
    for (const auto& e : ex) out.push_back(global_average_pool(extract_features(model, e.crop)));
    return out;
}

/// Mean over exemplars of the per-cell inner product with each pooled vector.
inline Grid2D similarity_from_features(const Volume3D& features, const std::vector<Vec>& vectors) {
    require(!vectors.empty(), "similarity map: at least one exemplar required");
    const int h = features.height();
    const int w = features.width();
    Grid2D acc(h, w);
    for (const Vec& b : vectors) {
        require(static_cast<int>(b.size()) == features.channels(), "similarity map: exemplar vector dimension mismatch");
        Grid2D s(h, w);
        for (int c = 0; c < features.channels(); ++c) {
            const double* f = features.channel(c);
            auto sv = s.values();
            for (std::size_t k = 0; k < sv.size(); ++k) sv[k] += f[k] * b[c];
        }
        auto av = acc.values();
        auto sv = s.values();
        for (std::size_t k = 0; k < av.size(); ++k) av[k] += sv[k];
    }
    const double inv = 1.0 / static_cast<double>(vectors.size());
    for (double& v : acc.values()) v *= inv;
    return acc;
}

inline Grid2D similarity_map(const CounterModel& model, const Volume3D& image, const std::vector<Exemplar>& ex) {
    const std::vector<Vec> vectors = exemplar_vectors(model, ex);
    return similarity_from_features(extract_features(model, image), vectors);
}

inline bool is_binary(const Grid2D& m) {
    for (double v : m.values())
        if (v != 0.0 && v != 1.0) return false;
    return true;
}

namespace detail {
inline std::size_t argmin_index(const Grid2D& g) {
    auto v = g.values();
    return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}
} // namespace detail

/// Keeps cells where the mask is 1 and fills the rest with min(s).
inline Grid2D apply_mask(const Grid2D& s, const Grid2D& m) {
    require(s.same_shape(m), "apply_mask: shape mismatch (" + std::to_string(s.height()) + "x" +
                                 std::to_string(s.width()) + " vs " + std::to_string(m.height()) + "x" +
                                 std::to_string(m.width()) + ")");
    require(is_binary(m), "apply_mask: mask must be binary");
    const double lo = s.min();
    Grid2D out = s;
    auto ov = out.values();
    auto mv = m.values();
    for (std::size_t k = 0; k < ov.size(); ++k)
        if (mv[k] == 0.0) ov[k] = lo;
    return out;
}

namespace detail {
inline Volume3D concat_similarity(const Volume3D& features, const Grid2D& sim) {
    Volume3D x(features.channels() + 1, features.height(), features.width());
    std::copy(features.values().begin(), features.values().end(), x.values().begin());
    std::copy(sim.values().begin(), sim.values().end(), x.channel(features.channels()));
    return x;
}
} // namespace detail

/// Counter head on precomputed features and an (already masked) similarity map.
inline Grid2D head_density(const CounterModel& model, const Volume3D& features, const Grid2D& sim) {
    require(sim.height() == features.height() && sim.width() == features.width(),
            "head_density: similarity map does not match feature geometry");
    const Volume3D z = model.head().forward(model.params, detail::concat_similarity(features, sim));
    Grid2D d(z.height(), z.width());
    auto zv = z.values();
    auto dv = d.values();
    for (std::size_t k = 0; k < dv.size(); ++k) dv[k] = softplus(zv[k]);
    return d;
}

inline Grid2D predict_density(const CounterModel& model, const Volume3D& image, const std::vector<Exemplar>& ex,
                              const std::optional<Grid2D>& mask = std::nullopt) {
    const Volume3D features = extract_features(model, image);
    Grid2D sim = similarity_from_features(features, exemplar_vectors(model, ex));
    if (mask) sim = apply_mask(sim, *mask);
    return head_density(model, features, sim);
}

inline double count(const Grid2D& density) { return density.sum(); }

/// Sum-of-squares L2 between density maps.
inline double loss_count(const Grid2D& pred, const Grid2D& gt) {
    require(pred.same_shape(gt), "loss_count: shape mismatch");
    double s = 0.0;
    auto p = pred.values();
    auto g = gt.values();
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double e = p[k] - g[k];
        s += e * e;
    }
    return s;
}

/// Loss of one (image, exemplars, gt) sample; accumulates dL/dtheta into
/// `grads` when given. `mask` (optional) is applied to the similarity map.
inline double counter_loss_and_grad(const CounterModel& model, const Volume3D& image, const std::vector<Exemplar>& ex,
                                    const Grid2D& gt, const Grid2D* mask, ParamSet* grads) {
    require(!ex.empty(), "counter loss: at least one exemplar required");
    const ConvStack ext = model.extractor();
    const ConvStack head = model.head();
    const ParamSet& P = model.params;

    ConvStack::Trace img_trace;
    const Volume3D feat = ext.forward(P, fit_to_ratio(image, model.r), grads ? &img_trace : nullptr);
    const int h = feat.height();
    const int w = feat.width();
    const int d = feat.channels();
    require(gt.height() == h && gt.width() == w, "counter loss: ground-truth density does not match feature geometry");

    const std::size_t n = ex.size();
    std::vector<ConvStack::Trace> ex_traces(n);
    std::vector<Volume3D> ex_feats(n);
    std::vector<Vec> vectors(n);
    for (std::size_t k = 0; k < n; ++k) {
        ex_feats[k] = ext.forward(P, fit_to_ratio(ex[k].crop, model.r), grads ? &ex_traces[k] : nullptr);
        vectors[k] = global_average_pool(ex_feats[k]);
    }
    const Grid2D sim = similarity_from_features(feat, vectors);
    const Grid2D sim_in = mask ? apply_mask(sim, *mask) : sim;

    ConvStack::Trace head_trace;
    const Volume3D z = head.forward(P, detail::concat_similarity(feat, sim_in), grads ? &head_trace : nullptr);
    double loss = 0.0;
    Volume3D dz(1, h, w);
    {
        auto zv = z.values();
        auto gv = gt.values();
        auto dzv = dz.values();
        for (std::size_t k = 0; k < zv.size(); ++k) {
            const double e = softplus(zv[k]) - gv[k];
            loss += e * e;
            dzv[k] = 2.0 * e * sigmoid(zv[k]);
        }
    }
    if (!grads) return loss;

    const Volume3D dx = head.backward(P, head_trace, std::move(dz), *grads, true);

    // Route the similarity-channel gradient back through the min-fill.
    Grid2D dsim(h, w);
    {
        const double* ds_in = dx.channel(d);
        auto dsv = dsim.values();
        if (mask) {
            const std::size_t amin = detail::argmin_index(sim);
            auto mv = mask->values();
            for (std::size_t k = 0; k < dsv.size(); ++k) {
                if (mv[k] == 1.0)
                    dsv[k] += ds_in[k];
                else
                    dsv[amin] += ds_in[k];
            }
        } else {
            std::copy(ds_in, ds_in + dsv.size(), dsv.begin());
        }
    }

    Vec bbar(d, 0.0);
    for (const Vec& b : vectors)
        for (int c = 0; c < d; ++c) bbar[c] += b[c] / static_cast<double>(n);

    Volume3D dfeat(d, h, w);
    auto dsv = dsim.values();
    for (int c = 0; c < d; ++c) {
        const double* from_head = dx.channel(c);
        double* out = dfeat.channel(c);
        for (std::size_t k = 0; k < dfeat.plane(); ++k) out[k] = from_head[k] + dsv[k] * bbar[c];
    }
    ext.backward(P, img_trace, std::move(dfeat), *grads);

    for (std::size_t k = 0; k < n; ++k) {
        const Volume3D& ef = ex_feats[k];
        Volume3D dex(d, ef.height(), ef.width());
        const double plane = static_cast<double>(ef.plane());
        for (int c = 0; c < d; ++c) {
            const double* f = feat.channel(c);
            double db = 0.0;
            for (std::size_t t = 0; t < dsv.size(); ++t) db += dsv[t] * f[t];
            db /= static_cast<double>(n);
            double* out = dex.channel(c);
            std::fill(out, out + dex.plane(), db / plane);
        }
        ext.backward(P, ex_traces[k], std::move(dex), *grads);
    }
    return loss;
}

struct CounterSample {
    std::string id;
    Volume3D image;
    std::vector<Exemplar> exemplars;
    Grid2D gt;
    /// Cells covered by a mean-exemplar-sized box around each target dot.
    Grid2D object_cells;
};

inline CounterSample make_counter_sample(const Scene& scene, int r, double sigma, int exemplar_size,
                                         std::string id = {}) {
    double bw = 0.0, bh = 0.0;
    for (const auto& e : scene.exemplars) {
        bw += e.width() / static_cast<double>(scene.exemplars.size());
        bh += e.height() / static_cast<double>(scene.exemplars.size());
    }
    return {std::move(id), scene.image, make_exemplars(scene, exemplar_size), build_gt_density(scene, r, sigma),
            dot_box_cells(scene, r, bw, bh)};
}

/// dL_count/dtheta for one scene.
inline ParamSet gradients(const CounterModel& model, const Scene& scene, double sigma = 2.0, int exemplar_size = 32) {
    const CounterSample s = make_counter_sample(scene, model.r, sigma, exemplar_size);
    ParamSet g = model.params.zeros_like();
    counter_loss_and_grad(model, s.image, s.exemplars, s.gt, nullptr, &g);
    return g;
}

/// Random half-plane keep mask and the ground truth restricted to it.
inline std::pair<Grid2D, Grid2D> random_half_mask(const Grid2D& gt, Rng& rng) {
    const int h = gt.height();
    const int w = gt.width();
    Grid2D m(h, w);
    Grid2D g(h, w);
    const int seam = rng.uniform_int(1, std::max(1, w - 1));
    const bool keep_left = rng.uniform() < 0.5;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const bool keep = keep_left ? j < seam : j >= seam;
            m(i, j) = keep ? 1.0 : 0.0;
            g(i, j) = keep ? gt(i, j) : 0.0;
        }
    return {m, g};
}

/// Object cells, dilated by 0 or 1 cell, plus a random sprinkle of other
/// cells. Every object stays inside, so the ground truth is unchanged.
inline Grid2D random_object_mask(const Grid2D& object_cells, Rng& rng) {
    const int h = object_cells.height();
    const int w = object_cells.width();
    const int grow = rng.uniform_int(0, 1);
    const double sprinkle = rng.uniform(0.0, 0.2);
    Grid2D m(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            bool on = false;
            for (int di = -grow; di <= grow && !on; ++di)
                for (int dj = -grow; dj <= grow && !on; ++dj) {
                    const int y = i + di, x = j + dj;
                    on = y >= 0 && y < h && x >= 0 && x < w && object_cells(y, x) != 0.0;
                }
            const bool extra = rng.uniform() < sprinkle;
            m(i, j) = on || extra ? 1.0 : 0.0;
        }
    return m;
}

inline CounterModel train_base(CounterModel model, const std::vector<CounterSample>& samples, const TrainCfg& cfg) {
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.id);
    const CounterModel* snapshot = &model;
    run_training(
        model.params, model.training, static_cast<int>(samples.size()), cfg,
        [&](int idx, Rng& rng, ParamSet* grads) {
            const CounterSample& s = samples[idx];
            if (cfg.mask_augment > 0.0 && rng.uniform() < cfg.mask_augment) {
                if (rng.uniform() < 0.5) {
                    const Grid2D m = random_object_mask(s.object_cells, rng);
                    return counter_loss_and_grad(*snapshot, s.image, s.exemplars, s.gt, &m, grads);
                }
                const auto [m, g] = random_half_mask(s.gt, rng);
                return counter_loss_and_grad(*snapshot, s.image, s.exemplars, g, &m, grads);
            }
            return counter_loss_and_grad(*snapshot, s.image, s.exemplars, s.gt, nullptr, grads);
        },
        ids);
    return model;
}

inline CounterModel train_base(CounterModel model, const std::vector<Scene>& scenes, const TrainCfg& cfg,
                               double sigma = 2.0, int exemplar_size = 32) {
    std::vector<CounterSample> samples;
    for (std::size_t k = 0; k < scenes.size(); ++k)
        samples.push_back(make_counter_sample(scenes[k], model.r, sigma, exemplar_size, "#" + std::to_string(k)));
    return train_base(std::move(model), samples, cfg);
}

// ---------------------------------------------------------------------------
// Persistence (shared by the segmenter)

inline nlohmann::json model_json(const std::string& kind, int r, int d, const ParamSet& params,
                                 const TrainingState& st, const std::string& fingerprint) {
    nlohmann::json j;
    j["version"] = 1;
    j["kind"] = kind;
    j["r"] = r;
    j["d"] = d;
    j["params"] = params_to_json(params);
    j["history"] = st.loss_history;
    j["training"] = {{"epoch", st.epoch}, {"learning_rate", st.learning_rate}};
    if (!fingerprint.empty()) j["fingerprint"] = fingerprint;
    return j;
}

struct LoadedModel {
    int r = 0;
    int d = 0;
    ParamSet params;
    TrainingState training;
    std::string fingerprint;
};

inline LoadedModel load_model_json(const std::filesystem::path& path, const std::string& expect_kind) {
    const std::string file = path.string();
    const nlohmann::json j = detail::parse_json_file(file);
    detail::FieldReader rd(file);
    if (rd.integer(j, "version", "") != 1) rd.fail("version", "unsupported version");
    const auto& kind = rd.at(j, "kind", "");
    if (!kind.is_string() || kind.get<std::string>() != expect_kind) rd.fail("kind", "expected \"" + expect_kind + "\"");
    LoadedModel m;
    m.r = static_cast<int>(rd.integer(j, "r", ""));
    m.d = static_cast<int>(rd.integer(j, "d", ""));
    m.params = params_from_json(rd.at(j, "params", ""), file);
    const auto& hist = rd.at(j, "history", "");
    if (!hist.is_array()) rd.fail("history", "expected array");
    m.training.loss_history = hist.get<std::vector<double>>();
    if (j.contains("training")) {
        m.training.epoch = static_cast<int>(rd.integer(j["training"], "epoch", "training"));
        m.training.learning_rate = rd.number(j["training"], "learning_rate", "training");
    }
    if (j.contains("fingerprint") && j["fingerprint"].is_string()) m.fingerprint = j["fingerprint"].get<std::string>();
    return m;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    out << j.dump() << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

inline void save_counter(const CounterModel& m, const std::filesystem::path& path, const std::string& fingerprint = {}) {
    write_json_file(path, model_json("counter", m.r, m.d, m.params, m.training, fingerprint));
}

inline CounterModel load_counter(const std::filesystem::path& path, std::string* fingerprint = nullptr) {
    LoadedModel lm = load_model_json(path, "counter");
    CounterModel m;
    m.r = lm.r;
    m.d = lm.d;
    // Shapes must match the architecture implied by (r, d).
    Rng dummy(0);
    const CounterModel ref = CounterModel::create(lm.r, lm.d, dummy);
    for (const auto& [name, t] : ref.params) {
        if (!lm.params.contains(name))
            throw Error(ErrorKind::parse, path.string() + ": field 'params." + name + "': missing");
        if (lm.params[name].shape != t.shape)
            throw Error(ErrorKind::parse, path.string() + ": field 'params." + name + "': shape does not match architecture");
    }
    if (lm.params.size() != ref.params.size())
        throw Error(ErrorKind::parse, path.string() + ": field 'params': unexpected extra parameters");
    m.params = std::move(lm.params);
    m.training = std::move(lm.training);
    if (fingerprint) *fingerprint = lm.fingerprint;
    return m;
}

} // namespace maskcount
