#pragma once

// Minimal convolution stacks with hand-written backprop, plus the named
// parameter collections shared by the counter and the segmenter.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcount/error.hpp"
#include "maskcount/numerics.hpp"

namespace maskcount {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    bool operator==(const Tensor&) const = default;
};

/// Named parameters (or gradients). Ordered by name, which fixes the
/// iteration order of every reduction over parameters.
class ParamSet {
public:
    Tensor& operator[](const std::string& name) {
        auto it = items_.find(name);
        if (it == items_.end()) fail("ParamSet: unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor& operator[](const std::string& name) const {
        auto it = items_.find(name);
        if (it == items_.end()) fail("ParamSet: unknown parameter '" + name + "'");
        return it->second;
    }

    void add(const std::string& name, Tensor t) { items_[name] = std::move(t); }
    bool contains(const std::string& name) const { return items_.count(name) != 0; }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    std::size_t size() const { return items_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.data.size();
        return n;
    }

    ParamSet zeros_like() const {
        ParamSet z;
        for (const auto& [name, t] : items_) z.add(name, Tensor{t.shape, std::vector<double>(t.data.size(), 0.0)});
        return z;
    }

    /// this += alpha * other
    void axpy(double alpha, const ParamSet& other) {
        for (auto& [name, t] : items_) {
            const Tensor& o = other[name];
            for (std::size_t k = 0; k < t.data.size(); ++k) t.data[k] += alpha * o.data[k];
        }
    }

    void scale(double alpha) {
        for (auto& [_, t] : items_)
            for (double& x : t.data) x *= alpha;
    }

    double norm() const {
        double s = 0.0;
        for (const auto& [_, t] : items_)
            for (double x : t.data) s += x * x;
        return std::sqrt(s);
    }

    bool finite() const {
        for (const auto& [_, t] : items_)
            if (!all_finite(t.data)) return false;
        return true;
    }

    bool operator==(const ParamSet&) const = default;

private:
    std::map<std::string, Tensor> items_;
};

inline nlohmann::json params_to_json(const ParamSet& ps) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, t] : ps) j[name] = {{"shape", t.shape}, {"data", t.data}};
    return j;
}

inline ParamSet params_from_json(const nlohmann::json& j, const std::string& file) {
    if (!j.is_object()) throw Error(ErrorKind::parse, file + ": field 'params': expected object");
    ParamSet ps;
    for (const auto& [name, entry] : j.items()) {
        const std::string field = "params." + name;
        if (!entry.is_object() || !entry.contains("shape") || !entry.contains("data"))
            throw Error(ErrorKind::parse, file + ": field '" + field + "': expected {shape, data}");
        Tensor t;
        try {
            t.shape = entry["shape"].get<std::vector<int>>();
            t.data = entry["data"].get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, file + ": field '" + field + "': " + e.what());
        }
        std::size_t n = 1;
        for (int s : t.shape) n *= static_cast<std::size_t>(s);
        if (n != t.data.size())
            throw Error(ErrorKind::parse, file + ": field '" + field + "': data length does not match shape");
        ps.add(name, std::move(t));
    }
    return ps;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
    std::string name;
    int in = 0;
    int out = 0;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
    bool relu = true;

    std::string weight() const { return name + ".weight"; }
    std::string bias() const { return name + ".bias"; }
};

inline int conv_out_size(int n, const ConvSpec& s) { return (n + 2 * s.pad - s.kernel) / s.stride + 1; }

namespace detail {

/// Unfolds `in` into rows of oh*ow samples, one row per (ic, ky, kx) in
/// weight order; taps that fall in the padding read as zero. `col` is
/// overwritten; callers pass a reused buffer to skip fresh page faults.
inline void im2col(const ConvSpec& s, const Volume3D& in, int oh, int ow, std::vector<double>& col) {
    const int H = in.height();
    const int W = in.width();
    const int k = s.kernel;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    col.assign(static_cast<std::size_t>(s.in) * k * k * plane, 0.0);
    for (int ic = 0; ic < s.in; ++ic) {
        const double* x = in.channel(ic);
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* row = col.data() + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * s.stride + ky - s.pad;
                    if (iy < 0 || iy >= H) continue;
                    const double* xr = x + static_cast<std::size_t>(iy) * W;
                    double* cr = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * s.stride + kx - s.pad;
                        if (ix >= 0 && ix < W) cr[ox] = xr[ix];
                    }
                }
            }
    }
}

/// Adds the rows of `dcol` back onto the input positions they were read from.
inline void col2im(const ConvSpec& s, const std::vector<double>& dcol, Volume3D& din, int oh, int ow) {
    const int H = din.height();
    const int W = din.width();
    const int k = s.kernel;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int ic = 0; ic < s.in; ++ic) {
        double* dx = din.channel(ic);
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* row = dcol.data() + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * s.stride + ky - s.pad;
                    if (iy < 0 || iy >= H) continue;
                    double* dxr = dx + static_cast<std::size_t>(iy) * W;
                    const double* cr = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * s.stride + kx - s.pad;
                        if (ix >= 0 && ix < W) dxr[ix] += cr[ox];
                    }
                }
            }
    }
}

inline void axpy(double* __restrict y, const double* __restrict x, double a, std::size_t n) {
    for (std::size_t t = 0; t < n; ++t) y[t] += a * x[t];
}

/// o[t] += a[0]*c0[t], then a[1]*c1[t], ... in that order. Lanes are
/// independent and contraction is off, so the AVX2 clone gives the same bits
/// as the baseline one.
__attribute__((target_clones("avx2", "default")))
inline void axpy4(double* __restrict o, const double* __restrict c0, const double* __restrict c1,
                  const double* __restrict c2, const double* __restrict c3, const double* a, std::size_t n) {
    const double a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3];
    for (std::size_t t = 0; t < n; ++t) {
        double v = o[t];
        v += a0 * c0[t];
        v += a1 * c1[t];
        v += a2 * c2[t];
        v += a3 * c3[t];
        o[t] = v;
    }
}

/// Sum of a[t]*b[t] in four interleaved partial sums, combined in a fixed order.
inline double dot4(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t t = 0;
    for (; t + 4 <= n; t += 4) {
        s0 += a[t] * b[t];
        s1 += a[t + 1] * b[t + 1];
        s2 += a[t + 2] * b[t + 2];
        s3 += a[t + 3] * b[t + 3];
    }
    for (; t < n; ++t) s0 += a[t] * b[t];
    return (s0 + s1) + (s2 + s3);
}

} // namespace detail

inline Volume3D conv_forward(const ConvSpec& s, const Tensor& weight, const Tensor& bias, const Volume3D& in) {
    require(in.channels() == s.in, s.name + ": expected " + std::to_string(s.in) + " input channels");
    const int oh = conv_out_size(in.height(), s);
    const int ow = conv_out_size(in.width(), s);
    require(oh >= 1 && ow >= 1, s.name + ": input too small");
    Volume3D out(s.out, oh, ow);
    thread_local std::vector<double> col;
    detail::im2col(s, in, oh, ow, col);
    const std::size_t rows = static_cast<std::size_t>(s.in) * s.kernel * s.kernel;
    const std::size_t plane = out.plane();
    for (int oc = 0; oc < s.out; ++oc) {
        double* o = out.channel(oc);
        std::fill(o, o + plane, bias.data[oc]);
        const double* w = weight.data.data() + oc * rows;
        std::size_t r = 0;
        // Four rows per pass keep o[t] in a register; the per-element order of
        // additions is unchanged.
        for (; r + 4 <= rows; r += 4) {
            const double* c0 = col.data() + r * plane;
            detail::axpy4(o, c0, c0 + plane, c0 + 2 * plane, c0 + 3 * plane, w + r, plane);
        }
        for (; r < rows; ++r) detail::axpy(o, col.data() + r * plane, w[r], plane);
    }
    return out;
}

/// Accumulates dL/dweight and dL/dbias into `grads`; returns dL/din when
/// `want_input_grad`, else an empty volume.
inline Volume3D conv_backward(const ConvSpec& s, const Tensor& weight, const Volume3D& in, const Volume3D& dout,
                              ParamSet& grads, bool want_input_grad) {
    const int oh = dout.height();
    const int ow = dout.width();
    Tensor& gw = grads[s.weight()];
    Tensor& gb = grads[s.bias()];
    thread_local std::vector<double> col;
    detail::im2col(s, in, oh, ow, col);
    const std::size_t rows = static_cast<std::size_t>(s.in) * s.kernel * s.kernel;
    const std::size_t plane = dout.plane();
    thread_local std::vector<double> dcol;
    if (want_input_grad) dcol.assign(rows * plane, 0.0);
    for (int oc = 0; oc < s.out; ++oc) {
        const double* g = dout.channel(oc);
        double bsum = 0.0;
        for (std::size_t t = 0; t < plane; ++t) bsum += g[t];
        gb.data[oc] += bsum;
        const double* w = weight.data.data() + oc * rows;
        double* gwr = gw.data.data() + oc * rows;
        for (std::size_t r = 0; r < rows; ++r) {
            gwr[r] += detail::dot4(g, col.data() + r * plane, plane);
            if (want_input_grad) detail::axpy(dcol.data() + r * plane, g, w[r], plane);
        }
    }
    Volume3D din;
    if (want_input_grad) {
        din = Volume3D(s.in, in.height(), in.width());
        detail::col2im(s, dcol, din, oh, ow);
    }
    return din;
}

/// A feed-forward chain of convolutions, ReLU after each layer flagged relu.
struct ConvStack {
    std::vector<ConvSpec> layers;

    struct Trace {
        std::vector<Volume3D> inputs;  // input to each layer
        std::vector<Volume3D> outputs; // post-activation output of each layer
    };

    void init_params(ParamSet& ps, Rng& rng) const {
        for (const auto& s : layers) {
            const int fan_in = s.in * s.kernel * s.kernel;
            const int fan_out = s.out * s.kernel * s.kernel;
            const double a = std::sqrt(6.0 / (fan_in + fan_out));
            Tensor w{{s.out, s.in, s.kernel, s.kernel}, std::vector<double>(static_cast<std::size_t>(s.out) * fan_in)};
            for (double& x : w.data) x = rng.uniform(-a, a);
            ps.add(s.weight(), std::move(w));
            ps.add(s.bias(), Tensor{{s.out}, std::vector<double>(s.out, 0.0)});
        }
    }

    Volume3D forward(const ParamSet& ps, const Volume3D& in, Trace* trace = nullptr) const {
        Volume3D x = in;
        for (const auto& s : layers) {
            Volume3D y = conv_forward(s, ps[s.weight()], ps[s.bias()], x);
            if (s.relu)
                for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
            if (trace) {
                trace->inputs.push_back(std::move(x));
                trace->outputs.push_back(y);
            }
            x = std::move(y);
        }
        return x;
    }

    /// Back-propagates dL/d(output) through the recorded trace.
    Volume3D backward(const ParamSet& ps, const Trace& trace, Volume3D grad, ParamSet& grads,
                      bool want_input_grad = false) const {
        for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
            const ConvSpec& s = layers[l];
            if (s.relu) {
                auto out = trace.outputs[l].values();
                auto g = grad.values();
                for (std::size_t k = 0; k < g.size(); ++k)
                    if (out[k] <= 0.0) g[k] = 0.0;
            }
            grad = conv_backward(s, ps[s.weight()], trace.inputs[l], grad, grads, want_input_grad || l > 0);
        }
        return grad;
    }
};

/// Extractor chain for downsampling ratio r (a power of two): log2(r)
/// stride-2 3x3 convolutions, ReLU between layers but not after the last.
inline ConvStack make_extractor(const std::string& prefix, int r, int d) {
    require(r >= 2 && (r & (r - 1)) == 0, "extractor: r must be a power of two >= 2");
    require(d >= 1, "extractor: d must be >= 1");
    ConvStack st;
    int in = 3;
    int idx = 1;
    for (int f = r; f > 1; f /= 2, ++idx) {
        st.layers.push_back({prefix + ".conv" + std::to_string(idx), in, d, 3, 2, 1, true});
        in = d;
    }
    st.layers.back().relu = false;
    return st;
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace maskcount
