#pragma once

// Exemplar-based segmentation model: per-cell cosine similarity between the
// image features and the pooled exemplar vector, regressed onto pseudo masks.

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "maskcount/counter.hpp"
#include "maskcount/error.hpp"
#include "maskcount/nn.hpp"
#include "maskcount/numerics.hpp"
#include "maskcount/scene.hpp"
#include "maskcount/train.hpp"

namespace maskcount {

struct SegModel {
    int r = 8;
    int d = 16;
    ParamSet params;
    TrainingState training;

    static SegModel create(int r, int d, Rng& rng) {
        SegModel m;
        m.r = r;
        m.d = d;
        m.extractor().init_params(m.params, rng);
        return m;
    }

    /// Same architecture as the counter's extractor.
    ConvStack extractor() const { return make_extractor("extractor", r, d); }

    bool operator==(const SegModel&) const = default;
};

namespace detail {

inline Vec mean_exemplar_vector(const SegModel& model, const std::vector<Exemplar>& ex) {
    require(!ex.empty(), "predict_mask: at least one exemplar required");
    const ConvStack st = model.extractor();
    Vec v(model.d, 0.0);
    for (const auto& e : ex) {
        const Vec p = global_average_pool(st.forward(model.params, fit_to_ratio(e.crop, model.r)));
        for (int c = 0; c < model.d; ++c) v[c] += p[c];
    }
    for (double& x : v) x /= static_cast<double>(ex.size());
    return v;
}

inline Grid2D cosine_map(const Volume3D& feat, const Vec& v) {
    Grid2D m(feat.height(), feat.width());
    Vec cell(feat.channels());
    for (int i = 0; i < feat.height(); ++i)
        for (int j = 0; j < feat.width(); ++j) {
            for (int c = 0; c < feat.channels(); ++c) cell[c] = feat(c, i, j);
            m(i, j) = cosine(cell, v);
        }
    return m;
}

} // namespace detail

/// Values in [-1, 1]; shape matches the counter's similarity map.
inline Grid2D predict_mask(const SegModel& model, const Volume3D& image, const std::vector<Exemplar>& ex) {
    const Vec v = detail::mean_exemplar_vector(model, ex);
    return detail::cosine_map(model.extractor().forward(model.params, fit_to_ratio(image, model.r)), v);
}

inline double loss_seg(const Grid2D& pred, const Grid2D& target) {
    require(pred.same_shape(target), "loss_seg: shape mismatch");
    double s = 0.0;
    auto p = pred.values();
    auto t = target.values();
    for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - t[k]) * (p[k] - t[k]);
    return s;
}

inline double seg_loss_and_grad(const SegModel& model, const Volume3D& image, const std::vector<Exemplar>& ex,
                                const Grid2D& target, ParamSet* grads) {
    require(!ex.empty(), "segmenter loss: at least one exemplar required");
    const ConvStack st = model.extractor();
    const ParamSet& P = model.params;
    ConvStack::Trace img_trace;
    const Volume3D feat = st.forward(P, fit_to_ratio(image, model.r), grads ? &img_trace : nullptr);
    const int h = feat.height();
    const int w = feat.width();
    const int d = feat.channels();
    require(target.height() == h && target.width() == w,
            "segmenter loss: target mask " + std::to_string(target.height()) + "x" + std::to_string(target.width()) +
                " does not match output geometry " + std::to_string(h) + "x" + std::to_string(w));

    const std::size_t n = ex.size();
    std::vector<ConvStack::Trace> traces(n);
    std::vector<Volume3D> ex_feats(n);
    Vec v(d, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        ex_feats[k] = st.forward(P, fit_to_ratio(ex[k].crop, model.r), grads ? &traces[k] : nullptr);
        const Vec p = global_average_pool(ex_feats[k]);
        for (int c = 0; c < d; ++c) v[c] += p[c] / static_cast<double>(n);
    }
    const double vn = norm(v);

    double loss = 0.0;
    Volume3D dfeat(d, h, w);
    Vec dv(d, 0.0);
    Vec cell(d);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            for (int c = 0; c < d; ++c) cell[c] = feat(c, i, j);
            const double cn = norm(cell);
            const double cs = cosine(cell, v);
            const double e = cs - target(i, j);
            loss += e * e;
            if (!grads || cn == 0.0 || vn == 0.0) continue;
            // d cos / d cell = v/(|c||v|) - cos c/|c|^2 ; symmetric for v.
            const double g = 2.0 * e;
            for (int c = 0; c < d; ++c) {
                dfeat(c, i, j) = g * (v[c] / (cn * vn) - cs * cell[c] / (cn * cn));
                dv[c] += g * (cell[c] / (cn * vn) - cs * v[c] / (vn * vn));
            }
        }
    if (!grads) return loss;

    st.backward(P, img_trace, std::move(dfeat), *grads);
    for (std::size_t k = 0; k < n; ++k) {
        Volume3D dex(d, ex_feats[k].height(), ex_feats[k].width());
        const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(dex.plane()));
        for (int c = 0; c < d; ++c) {
            double* out = dex.channel(c);
            std::fill(out, out + dex.plane(), dv[c] * scale);
        }
        st.backward(P, traces[k], std::move(dex), *grads);
    }
    return loss;
}

struct SegSample {
    std::string id;
    Volume3D image;
    std::vector<Exemplar> exemplars;
    Grid2D target;
};

inline SegModel train_seg(SegModel model, const std::vector<SegSample>& samples, const TrainCfg& cfg) {
    std::vector<std::string> ids;
    for (const auto& s : samples) {
        ids.push_back(s.id);
        require(s.target.height() == s.image.height() / model.r && s.target.width() == s.image.width() / model.r,
                "train_seg: pseudo mask of " + (s.id.empty() ? std::string("a sample") : s.id) +
                    " does not match the model output geometry");
    }
    const SegModel* snapshot = &model;
    run_training(
        model.params, model.training, static_cast<int>(samples.size()), cfg,
        [&](int idx, Rng&, ParamSet* grads) {
            const SegSample& s = samples[idx];
            return seg_loss_and_grad(*snapshot, s.image, s.exemplars, s.target, grads);
        },
        ids);
    return model;
}

inline ParamSet seg_gradients(const SegModel& model, const SegSample& s) {
    ParamSet g = model.params.zeros_like();
    seg_loss_and_grad(model, s.image, s.exemplars, s.target, &g);
    return g;
}

/// 1 where the min-max normalized mask reaches tau. A constant mask maps to
/// all zeros regardless of tau.
inline Grid2D binarize(const Grid2D& mask, double tau) {
    require(tau >= 0.0 && tau <= 1.0, "binarize: tau must lie in [0, 1]");
    Grid2D out(mask.height(), mask.width());
    if (mask.min() == mask.max()) return out;
    const Grid2D n = minmax_normalize(mask);
    auto nv = n.values();
    auto ov = out.values();
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = nv[k] >= tau ? 1.0 : 0.0;
    return out;
}

inline Grid2D masked_density(const CounterModel& counter, const SegModel& seg, const Scene& scene, double tau,
                             int exemplar_size = 32) {
    require(counter.r == seg.r, "masked count: counter and segmenter use different downsampling ratios");
    const std::vector<Exemplar> ex = make_exemplars(scene, exemplar_size);
    return predict_density(counter, scene.image, ex, binarize(predict_mask(seg, scene.image, ex), tau));
}

inline double masked_count(const CounterModel& counter, const SegModel& seg, const Scene& scene, double tau,
                           int exemplar_size = 32) {
    return count(masked_density(counter, seg, scene, tau, exemplar_size));
}

inline void save_segmenter(const SegModel& m, const std::filesystem::path& path, const std::string& fingerprint = {}) {
    write_json_file(path, model_json("segmenter", m.r, m.d, m.params, m.training, fingerprint));
}

inline SegModel load_segmenter(const std::filesystem::path& path, std::string* fingerprint = nullptr) {
    LoadedModel lm = load_model_json(path, "segmenter");
    Rng dummy(0);
    const SegModel ref = SegModel::create(lm.r, lm.d, dummy);
    for (const auto& [name, t] : ref.params)
        if (!lm.params.contains(name) || lm.params[name].shape != t.shape)
            throw Error(ErrorKind::parse, path.string() + ": field 'params." + name + "': missing or wrong shape");
    if (lm.params.size() != ref.params.size())
        throw Error(ErrorKind::parse, path.string() + ": field 'params': unexpected extra parameters");
    SegModel m;
    m.r = lm.r;
    m.d = lm.d;
    m.params = std::move(lm.params);
    m.training = std::move(lm.training);
    if (fingerprint) *fingerprint = lm.fingerprint;
    return m;
}

} // namespace maskcount
