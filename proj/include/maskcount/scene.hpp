#pragma once

// Synthetic counting scenes: single-class shape images, left/right
// concatenated multi-class scenes, ground-truth density maps, and the
// on-disk bundle format (image.ppm + annotations.json).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcount/error.hpp"
#include "maskcount/image_io.hpp"
#include "maskcount/numerics.hpp"

namespace maskcount {

struct DotAnnotation {
    double x = 0.0;
    double y = 0.0;
    int class_id = 0;
    bool operator==(const DotAnnotation&) const = default;
};

struct ExemplarBox {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
    int class_id = 0;

    double width() const noexcept { return x1 - x0; }
    double height() const noexcept { return y1 - y0; }
    bool operator==(const ExemplarBox&) const = default;
};

enum class Region { left, right };

inline const char* to_string(Region r) { return r == Region::left ? "left" : "right"; }

struct SceneMeta {
    std::uint64_t seed = 0;
    /// Pixel column where the right-hand crop starts (multi-class scenes only).
    std::optional<int> seam_x;
    std::vector<int> source_classes;
    bool operator==(const SceneMeta&) const = default;
};

struct Scene {
    Volume3D image;
    std::vector<DotAnnotation> dots;
    std::vector<ExemplarBox> exemplars;
    int target_class = 0;
    std::optional<Region> interest_region;
    SceneMeta meta;

    int height() const noexcept { return image.height(); }
    int width() const noexcept { return image.width(); }
    bool is_multiclass() const noexcept { return interest_region.has_value(); }

    std::size_t target_count() const {
        return static_cast<std::size_t>(
            std::count_if(dots.begin(), dots.end(), [&](const DotAnnotation& d) { return d.class_id == target_class; }));
    }

    bool operator==(const Scene&) const = default;
};

/// Throws on any violated scene invariant.
inline void validate(const Scene& s) {
    require(s.image.channels() == 3, "scene: image must have 3 channels");
    require(all_finite(s.image.values()), "scene: image contains non-finite values");
    const double W = s.width();
    const double H = s.height();
    for (const auto& d : s.dots)
        require(d.x >= 0 && d.x < W && d.y >= 0 && d.y < H, "scene: dot outside image bounds");
    require(!s.exemplars.empty(), "scene: at least one exemplar required");
    for (const auto& e : s.exemplars) {
        require(e.class_id == s.target_class, "scene: exemplar class differs from target class");
        require(e.x0 < e.x1 && e.y0 < e.y1, "scene: degenerate exemplar box");
        require(e.x0 >= 0 && e.y0 >= 0 && e.x1 <= W && e.y1 <= H, "scene: exemplar box outside image");
    }
    require(s.interest_region.has_value() == s.meta.seam_x.has_value(),
            "scene: interest region and seam must be set together");
}

// ---------------------------------------------------------------------------
// Generation

enum class Shape { disc, square, triangle };

struct ShapeSpec {
    Shape shape = Shape::disc;
    std::array<double, 3> base_color{0.8, 0.2, 0.2};
    double radius_px = 6.0;
    double color_jitter = 0.05;
    std::array<int, 2> count_range{3, 10};
    /// Per-instance radius is radius_px * U(1 - size_jitter, 1 + size_jitter).
    double size_jitter = 0.0;
};

/// Class catalog used by the dataset generator; class id = index.
inline std::vector<ShapeSpec> default_catalog() {
    return {
        {Shape::disc, {0.85, 0.20, 0.20}, 6.0, 0.05, {3, 10}, 0.2},
        {Shape::square, {0.20, 0.75, 0.25}, 6.0, 0.05, {3, 10}, 0.2},
        {Shape::triangle, {0.20, 0.30, 0.90}, 7.0, 0.05, {3, 10}, 0.2},
        {Shape::disc, {0.92, 0.85, 0.20}, 5.0, 0.05, {3, 10}, 0.2},
        {Shape::square, {0.80, 0.25, 0.80}, 5.0, 0.05, {3, 10}, 0.2},
        {Shape::triangle, {0.20, 0.80, 0.85}, 6.0, 0.05, {3, 10}, 0.2},
    };
}

struct Canvas {
    int height = 128;
    int width = 128;
};

namespace detail {

inline bool inside_shape(Shape shape, double dx, double dy, double r) {
    switch (shape) {
    case Shape::disc:
        return dx * dx + dy * dy <= r * r;
    case Shape::square:
        return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::triangle: {
        // Apex at (0,-r), base from (-r,r) to (r,r).
        if (dy < -r || dy > r) return false;
        const double half = r * (dy + r) / (2.0 * r);
        return std::abs(dx) <= half;
    }
    }
    return false;
}

inline double box_iou(const ExemplarBox& a, const ExemplarBox& b) {
    const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = ix * iy;
    const double uni = a.width() * a.height() + b.width() * b.height() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

} // namespace detail

/// Renders one single-class scene. Instance boxes keep pairwise IoU < 0.3 and
/// centers stay at least radius_px * (1 + size_jitter) from the border; 1-3 instances become
/// exemplars. Pixel values are quantized to multiples of 1/255 so the PPM
/// round-trip is exact.
inline Scene generate_single_class_scene(const ShapeSpec& spec, int class_id, Canvas canvas, Rng& rng) {
    require(canvas.height >= 64 && canvas.width >= 64, "generate_single_class_scene: canvas must be >= 64x64");
    require(spec.radius_px >= 2.0, "generate_single_class_scene: radius_px must be >= 2");
    require(spec.count_range[0] >= 1 && spec.count_range[1] >= spec.count_range[0],
            "generate_single_class_scene: invalid count_range");
    require(spec.size_jitter >= 0.0 && spec.size_jitter < 1.0 && spec.radius_px * (1.0 - spec.size_jitter) >= 2.0,
            "generate_single_class_scene: size_jitter must keep every radius >= 2");

    Scene s;
    s.meta.seed = rng.seed();
    s.target_class = class_id;
    const int H = canvas.height;
    const int W = canvas.width;
    const double margin = spec.radius_px * (1.0 + spec.size_jitter);

    Volume3D img(3, H, W);
    const double tone = rng.uniform(0.35, 0.55);
    const std::array<double, 3> tint{rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)};
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const double n = rng.uniform(-0.04, 0.04);
            for (int c = 0; c < 3; ++c) img(c, i, j) = tone + tint[c] + n;
        }

    const int count = rng.uniform_int(spec.count_range[0], spec.count_range[1]);
    std::vector<ExemplarBox> boxes;
    constexpr int kMaxAttempts = 1000;
    for (int k = 0; k < count; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
            const double r = spec.radius_px * rng.uniform(1.0 - spec.size_jitter, 1.0 + spec.size_jitter);
            const double cx = rng.uniform(margin, W - margin);
            const double cy = rng.uniform(margin, H - margin);
            const ExemplarBox box{cx - r, cy - r, cx + r, cy + r, class_id};
            const bool clear = std::all_of(boxes.begin(), boxes.end(),
                                           [&](const ExemplarBox& b) { return detail::box_iou(b, box) < 0.3; });
            if (!clear) continue;
            boxes.push_back(box);
            placed = true;
        }
        if (!placed) {
            std::ostringstream msg;
            msg << "generate_single_class_scene: placed " << boxes.size() << " of " << count << " instances (radius "
                << spec.radius_px << ", canvas " << H << "x" << W << ") before exhausting " << kMaxAttempts << " attempts";
            throw Error(ErrorKind::invalid_argument, msg.str());
        }
    }

    for (const auto& box : boxes) {
        const double cx = 0.5 * (box.x0 + box.x1);
        const double cy = 0.5 * (box.y0 + box.y1);
        const double r = 0.5 * box.width();
        std::array<double, 3> color{};
        for (int c = 0; c < 3; ++c) color[c] = spec.base_color[c] + rng.uniform(-spec.color_jitter, spec.color_jitter);
        const int i0 = std::max(0, static_cast<int>(std::floor(box.y0)));
        const int i1 = std::min(H - 1, static_cast<int>(std::ceil(box.y1)));
        const int j0 = std::max(0, static_cast<int>(std::floor(box.x0)));
        const int j1 = std::min(W - 1, static_cast<int>(std::ceil(box.x1)));
        for (int i = i0; i <= i1; ++i)
            for (int j = j0; j <= j1; ++j) {
                // 2x2 supersampled coverage
                int hits = 0;
                for (double sy : {0.25, 0.75})
                    for (double sx : {0.25, 0.75})
                        hits += detail::inside_shape(spec.shape, j + sx - cx, i + sy - cy, r) ? 1 : 0;
                if (hits == 0) continue;
                const double a = hits / 4.0;
                for (int c = 0; c < 3; ++c) img(c, i, j) = (1.0 - a) * img(c, i, j) + a * color[c];
            }
        s.dots.push_back({cx, cy, class_id});
    }
    for (double& v : img.values()) v = detail::quantize8(v);
    s.image = std::move(img);

    const int n_ex = std::min<int>(rng.uniform_int(1, 3), static_cast<int>(boxes.size()));
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::sort(order.begin(), order.begin() + n_ex);
    for (int k = 0; k < n_ex; ++k) s.exemplars.push_back(boxes[order[k]]);

    validate(s);
    return s;
}

struct SynthOptions {
    double min_fraction = 0.5;
    double max_fraction = 0.7;
    /// Crop widths are rounded down to a multiple of this (the downsampling ratio).
    int quantum = 8;
};

/// Concatenates a crop of `a` (left) with a crop of `b` (right). The target
/// class and exemplars come from one seeded side; the other side's dots stay
/// in the annotations as distractors.
inline Scene synthesize_multiclass(const Scene& a, const Scene& b, Rng& rng, SynthOptions opt = {}) {
    require(a.target_class != b.target_class, "synthesize_multiclass: source scenes share a target class");
    require(a.height() == b.height(), "synthesize_multiclass: source heights differ");
    const int H = a.height();
    const Region side = rng.uniform() < 0.5 ? Region::left : Region::right;
    const Scene& tgt = side == Region::left ? a : b;

    auto crop_width = [&](int W) {
        const double f = rng.uniform(opt.min_fraction, opt.max_fraction);
        const int cw = static_cast<int>(f * W) / opt.quantum * opt.quantum;
        return std::clamp(cw, opt.quantum, W / opt.quantum * opt.quantum);
    };
    auto box_inside = [](const ExemplarBox& e, int x0, int cw) { return e.x0 >= x0 && e.x1 <= x0 + cw; };

    constexpr int kMaxResample = 100;
    for (int attempt = 0; attempt < kMaxResample; ++attempt) {
        const int cwa = crop_width(a.width());
        const int cwb = crop_width(b.width());
        const int xa = rng.uniform_int(0, a.width() - cwa);
        const int xb = rng.uniform_int(0, b.width() - cwb);
        const int tx = side == Region::left ? xa : xb;
        const int tw = side == Region::left ? cwa : cwb;
        const bool any = std::any_of(tgt.exemplars.begin(), tgt.exemplars.end(),
                                     [&](const ExemplarBox& e) { return box_inside(e, tx, tw); });
        if (!any) continue;

        Scene s;
        s.image = Volume3D(3, H, cwa + cwb);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < H; ++i) {
                for (int j = 0; j < cwa; ++j) s.image(c, i, j) = a.image(c, i, xa + j);
                for (int j = 0; j < cwb; ++j) s.image(c, i, cwa + j) = b.image(c, i, xb + j);
            }
        auto keep = [&](const Scene& src, int x0, int cw, double shift) {
            for (const auto& d : src.dots)
                if (d.x >= x0 && d.x < x0 + cw) s.dots.push_back({d.x - x0 + shift, d.y, d.class_id});
        };
        keep(a, xa, cwa, 0.0);
        keep(b, xb, cwb, cwa);
        const double shift = side == Region::left ? 0.0 : cwa;
        for (const auto& e : tgt.exemplars)
            if (box_inside(e, tx, tw)) s.exemplars.push_back({e.x0 - tx + shift, e.y0, e.x1 - tx + shift, e.y1, e.class_id});
        s.target_class = tgt.target_class;
        s.interest_region = side;
        s.meta.seed = rng.seed();
        s.meta.seam_x = cwa;
        s.meta.source_classes = {a.target_class, b.target_class};
        validate(s);
        return s;
    }
    throw Error(ErrorKind::invalid_argument, "synthesize_multiclass: no crop kept a target exemplar after " +
                                                 std::to_string(kMaxResample) + " resamples");
}

/// Unit mass per target-class dot at cell (floor(y/r), floor(x/r)), then
/// Gaussian smoothing. Grid is floor(H/r) x floor(W/r).
inline Grid2D build_gt_density(const Scene& scene, int r, double sigma) {
    require(r >= 1, "build_gt_density: r must be >= 1");
    const int h = scene.height() / r;
    const int w = scene.width() / r;
    Grid2D g(h, w);
    for (const auto& d : scene.dots) {
        if (d.class_id != scene.target_class) continue;
        const int i = std::min(h - 1, static_cast<int>(std::floor(d.y / r)));
        const int j = std::min(w - 1, static_cast<int>(std::floor(d.x / r)));
        g(i, j) += 1.0;
    }
    return gaussian_smooth(g, sigma);
}

/// Cells of the floor(H/r) x floor(W/r) grid whose center (j*r + r/2,
/// i*r + r/2) lies inside a box_w x box_h box centered on a target-class dot.
inline Grid2D dot_box_cells(const Scene& scene, int r, double box_w, double box_h) {
    require(r >= 1, "dot_box_cells: r must be >= 1");
    const int h = scene.height() / r;
    const int w = scene.width() / r;
    Grid2D m(h, w);
    for (const auto& d : scene.dots) {
        if (d.class_id != scene.target_class) continue;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double cx = j * r + 0.5 * r;
                const double cy = i * r + 0.5 * r;
                if (std::abs(cx - d.x) <= 0.5 * box_w && std::abs(cy - d.y) <= 0.5 * box_h) m(i, j) = 1.0;
            }
    }
    return m;
}

/// Bilinear resample of a box region to a size x size crop (edge-clamped).
inline Volume3D crop_resize(const Volume3D& img, const ExemplarBox& box, int out_w, int out_h) {
    Volume3D out(img.channels(), out_h, out_w);
    const double sx = box.width() / out_w;
    const double sy = box.height() / out_h;
    for (int v = 0; v < out_h; ++v) {
        const double y = std::clamp(box.y0 + (v + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
        const int y0 = static_cast<int>(y);
        const int y1 = std::min(y0 + 1, img.height() - 1);
        const double fy = y - y0;
        for (int u = 0; u < out_w; ++u) {
            const double x = std::clamp(box.x0 + (u + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
            const int x0 = static_cast<int>(x);
            const int x1 = std::min(x0 + 1, img.width() - 1);
            const double fx = x - x0;
            for (int c = 0; c < img.channels(); ++c) {
                const double top = (1 - fx) * img(c, y0, x0) + fx * img(c, y0, x1);
                const double bot = (1 - fx) * img(c, y1, x0) + fx * img(c, y1, x1);
                out(c, v, u) = (1 - fy) * top + fy * bot;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json annotations_to_json(const Scene& s) {
    nlohmann::json j;
    j["version"] = 1;
    j["target_class"] = s.target_class;
    j["interest_region"] = s.interest_region ? nlohmann::json(to_string(*s.interest_region)) : nlohmann::json(nullptr);
    j["dots"] = nlohmann::json::array();
    for (const auto& d : s.dots) j["dots"].push_back({{"x", d.x}, {"y", d.y}, {"class_id", d.class_id}});
    j["exemplars"] = nlohmann::json::array();
    for (const auto& e : s.exemplars)
        j["exemplars"].push_back({{"x0", e.x0}, {"y0", e.y0}, {"x1", e.x1}, {"y1", e.y1}, {"class_id", e.class_id}});
    nlohmann::json meta;
    meta["seed"] = s.meta.seed;
    if (s.meta.seam_x) meta["seam_x"] = *s.meta.seam_x;
    if (!s.meta.source_classes.empty()) meta["source_classes"] = s.meta.source_classes;
    j["meta"] = meta;
    return j;
}

namespace detail {

class FieldReader {
public:
    explicit FieldReader(std::string file) : file_(std::move(file)) {}

    [[noreturn]] void fail(const std::string& field, const std::string& what) const {
        throw Error(ErrorKind::parse, file_ + ": field '" + field + "': " + what);
    }

    const nlohmann::json& at(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        if (!obj.is_object()) fail(path, "expected object");
        auto it = obj.find(key);
        if (it == obj.end()) fail(path.empty() ? key : path + "." + key, "missing");
        return *it;
    }

    double number(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        const auto& v = at(obj, key, path);
        if (!v.is_number()) fail(path.empty() ? key : path + "." + key, "expected number");
        return v.get<double>();
    }

    long long integer(const nlohmann::json& obj, const std::string& key, const std::string& path) const {
        const auto& v = at(obj, key, path);
        if (!v.is_number_integer()) fail(path.empty() ? key : path + "." + key, "expected integer");
        return v.get<long long>();
    }

private:
    std::string file_;
};

inline nlohmann::json parse_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::parse, path + ": malformed JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
    }
}

} // namespace detail

inline Scene annotations_from_json(const nlohmann::json& j, const std::string& file) {
    detail::FieldReader rd(file);
    Scene s;
    if (rd.integer(j, "version", "") != 1) rd.fail("version", "unsupported version");
    s.target_class = static_cast<int>(rd.integer(j, "target_class", ""));
    const auto& region = rd.at(j, "interest_region", "");
    if (region.is_null()) {
        s.interest_region.reset();
    } else if (region == "left") {
        s.interest_region = Region::left;
    } else if (region == "right") {
        s.interest_region = Region::right;
    } else {
        rd.fail("interest_region", "expected \"left\", \"right\" or null");
    }
    const auto& dots = rd.at(j, "dots", "");
    if (!dots.is_array()) rd.fail("dots", "expected array");
    for (std::size_t k = 0; k < dots.size(); ++k) {
        const std::string p = "dots[" + std::to_string(k) + "]";
        s.dots.push_back({rd.number(dots[k], "x", p), rd.number(dots[k], "y", p),
                          static_cast<int>(rd.integer(dots[k], "class_id", p))});
    }
    const auto& exs = rd.at(j, "exemplars", "");
    if (!exs.is_array()) rd.fail("exemplars", "expected array");
    for (std::size_t k = 0; k < exs.size(); ++k) {
        const std::string p = "exemplars[" + std::to_string(k) + "]";
        s.exemplars.push_back({rd.number(exs[k], "x0", p), rd.number(exs[k], "y0", p), rd.number(exs[k], "x1", p),
                               rd.number(exs[k], "y1", p), static_cast<int>(rd.integer(exs[k], "class_id", p))});
    }
    const auto& meta = rd.at(j, "meta", "");
    const auto& seed = rd.at(meta, "seed", "meta");
    if (!seed.is_number_unsigned() && !seed.is_number_integer()) rd.fail("meta.seed", "expected unsigned integer");
    s.meta.seed = seed.get<std::uint64_t>();
    if (meta.contains("seam_x")) s.meta.seam_x = static_cast<int>(rd.integer(meta, "seam_x", "meta"));
    if (meta.contains("source_classes")) {
        const auto& sc = meta["source_classes"];
        if (!sc.is_array()) rd.fail("meta.source_classes", "expected array");
        for (const auto& c : sc) {
            if (!c.is_number_integer()) rd.fail("meta.source_classes", "expected integers");
            s.meta.source_classes.push_back(c.get<int>());
        }
    }
    return s;
}

inline void save_scene(const Scene& scene, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_ppm((dir / "image.ppm").string(), scene.image);
    const auto path = (dir / "annotations.json").string();
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path);
    out << annotations_to_json(scene).dump(1) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

inline Scene load_scene(const std::filesystem::path& dir) {
    const auto ann_path = (dir / "annotations.json").string();
    Scene s = annotations_from_json(detail::parse_json_file(ann_path), ann_path);
    s.image = read_ppm((dir / "image.ppm").string());
    try {
        validate(s);
    } catch (const Error& e) {
        throw Error(ErrorKind::parse, ann_path + ": " + e.what());
    }
    return s;
}

} // namespace maskcount
