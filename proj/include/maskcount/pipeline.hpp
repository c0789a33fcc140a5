#pragma once

// The end-to-end commands behind the maskcount CLI. Every command reads the
// config, checks its prerequisites on disk, writes its artifacts and a run
// log, and returns a small summary for callers that drive it in-process.
//
// On-disk layout (paths relative to the config file's directory):
//   <data>/manifest.json, <data>/scenes/<id>/, <data>/pseudo_masks/<id>.json
//   <models>/counter.json, <models>/segmenter.json
//   <reports>/report.{json,csv}, ablation.{json,csv}, timing.{json,csv},
//   counts.csv, logs/<command>.log, images/*.pgm

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcount/config.hpp"
#include "maskcount/counter.hpp"
#include "maskcount/error.hpp"
#include "maskcount/eval.hpp"
#include "maskcount/image_io.hpp"
#include "maskcount/parallel.hpp"
#include "maskcount/pseudo_label.hpp"
#include "maskcount/scene.hpp"
#include "maskcount/segmenter.hpp"

namespace maskcount {

namespace fs = std::filesystem;

struct RunOptions {
    fs::path base_dir = ".";         ///< relative config paths resolve against this
    bool dump_images = false;
    bool force = false;              ///< accept fingerprint mismatches
    std::optional<std::string> scene; ///< `count` only
    std::ostream* log = &std::cerr;   ///< progress messages
};

struct Layout {
    fs::path data, models, reports;

    Layout(const Config& c, const RunOptions& o) {
        auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : o.base_dir / p; };
        data = resolve(c.data_dir);
        models = resolve(c.models_dir);
        reports = resolve(c.reports_dir);
    }

    fs::path manifest() const { return data / "manifest.json"; }
    fs::path scene_dir(const std::string& id) const { return data / "scenes" / id; }
    fs::path pseudo_mask(const std::string& id) const { return data / "pseudo_masks" / (id + ".json"); }
    fs::path counter() const { return models / "counter.json"; }
    fs::path segmenter() const { return models / "segmenter.json"; }
    fs::path images() const { return reports / "images"; }
};

struct ManifestEntry {
    std::string id;
    std::string split; ///< train | val | test
    bool multiclass = false;
    std::vector<std::string> sources; ///< source scene ids for concatenations
};

struct Dataset {
    std::string fingerprint;
    std::vector<ManifestEntry> entries;
    std::map<std::string, Scene> scenes;

    std::vector<const ManifestEntry*> select(const std::string& split, bool multiclass) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries)
            if (e.split == split && e.multiclass == multiclass) out.push_back(&e);
        return out;
    }
};

namespace detail {

inline Error missing(const fs::path& artifact, const std::string& producer) {
    return Error(ErrorKind::missing_prerequisite,
                 "missing " + artifact.string() + "; run `maskcount " + producer + " --config <path>` first");
}

inline std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

inline void check_fingerprint(const std::string& artifact_fp, const std::string& config_fp, const fs::path& artifact,
                              bool force, std::ostream& log) {
    if (artifact_fp == config_fp) return;
    const std::string msg = artifact.string() + " was produced under config fingerprint '" + artifact_fp +
                            "', current config is '" + config_fp + "'";
    if (!force) throw Error(ErrorKind::config, msg + " (pass --force to proceed anyway)");
    log << "warning: " << msg << '\n';
}

/// Run log: one key=value line per fact, written when the command finishes.
class RunLog {
public:
    RunLog(std::string command, const Config& cfg, const Layout& lay)
        : command_(std::move(command)), path_(lay.reports / "logs" / (command_ + ".log")),
          start_(std::chrono::steady_clock::now()) {
        add("command", command_);
        add("fingerprint", cfg.fingerprint());
        add("seed", std::to_string(cfg.seed));
        add("threads", std::to_string(worker_count()));
    }

    void add(const std::string& key, const std::string& value) { lines_ << key << '=' << value << '\n'; }

    void finish() {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        add("elapsed_s", fmt_real(secs));
        write_text(path_, lines_.str());
    }

private:
    std::string command_;
    fs::path path_;
    std::chrono::steady_clock::time_point start_;
    std::ostringstream lines_;
};

inline Dataset load_dataset(const Layout& lay) {
    if (!fs::exists(lay.manifest())) throw missing(lay.manifest(), "gen");
    const std::string file = lay.manifest().string();
    const nlohmann::json j = parse_json_file(file);
    FieldReader rd(file);
    if (rd.integer(j, "version", "") != 1) rd.fail("version", "unsupported version");
    Dataset ds;
    const auto& fp = rd.at(j, "fingerprint", "");
    if (!fp.is_string()) rd.fail("fingerprint", "expected string");
    ds.fingerprint = fp.get<std::string>();
    const auto& scenes = rd.at(j, "scenes", "");
    if (!scenes.is_array()) rd.fail("scenes", "expected array");
    for (const auto& s : scenes) {
        ManifestEntry e;
        const auto& id = rd.at(s, "id", "scenes[]");
        const auto& split = rd.at(s, "split", "scenes[]");
        const auto& multi = rd.at(s, "multiclass", "scenes[]");
        if (!id.is_string() || !split.is_string() || !multi.is_boolean()) rd.fail("scenes[]", "malformed entry");
        e.id = id.get<std::string>();
        e.split = split.get<std::string>();
        if (e.split != "train" && e.split != "val" && e.split != "test") rd.fail("scenes[].split", "unknown split " + e.split);
        e.multiclass = multi.get<bool>();
        if (s.contains("sources")) e.sources = s["sources"].get<std::vector<std::string>>();
        const fs::path dir = lay.scene_dir(e.id);
        if (!fs::exists(dir / "annotations.json")) throw missing(dir / "annotations.json", "gen");
        ds.scenes.emplace(e.id, load_scene(dir));
        ds.entries.push_back(std::move(e));
    }
    return ds;
}

inline CounterModel require_counter(const Layout& lay, const Config& cfg, const RunOptions& opt) {
    if (!fs::exists(lay.counter())) throw missing(lay.counter(), "train-base");
    std::string fp;
    CounterModel m = load_counter(lay.counter(), &fp);
    check_fingerprint(fp, cfg.fingerprint(), lay.counter(), opt.force, *opt.log);
    if (m.r != cfg.r || m.d != cfg.d)
        throw Error(ErrorKind::config, lay.counter().string() + ": model geometry does not match config (r, d)");
    return m;
}

inline SegModel require_segmenter(const Layout& lay, const Config& cfg, const RunOptions& opt) {
    if (!fs::exists(lay.segmenter())) throw missing(lay.segmenter(), "train-seg");
    std::string fp;
    SegModel m = load_segmenter(lay.segmenter(), &fp);
    check_fingerprint(fp, cfg.fingerprint(), lay.segmenter(), opt.force, *opt.log);
    if (m.r != cfg.r || m.d != cfg.d)
        throw Error(ErrorKind::config, lay.segmenter().string() + ": model geometry does not match config (r, d)");
    return m;
}

inline Dataset require_dataset(const Layout& lay, const Config& cfg, const RunOptions& opt) {
    Dataset ds = load_dataset(lay);
    check_fingerprint(ds.fingerprint, cfg.fingerprint(), lay.manifest(), opt.force, *opt.log);
    return ds;
}

inline PseudoLabelCfg pseudo_cfg(const Config& cfg) {
    return {cfg.k_min, cfg.k_max, cfg.sigma, cfg.exemplar_size};
}

inline void dump_density(const fs::path& path, const Grid2D& d) {
    write_pgm(path.string(), d, 0.0, std::max(1e-12, d.max()));
}

inline std::string metrics_csv_row(const std::string& method, const MetricsReport& m) {
    return method + "," + std::to_string(m.n) + "," + fmt_real(m.mae) + "," + fmt_real(m.rmse) + "," +
           fmt_real(m.nae) + "," + fmt_real(m.sre) + "," + fmt_real(m.mean_time_s) + "," +
           std::to_string(m.excluded_nae) + "\n";
}

inline nlohmann::json metrics_json(const std::string& method, const MetricsReport& m) {
    return {{"method", method},     {"n", m.n},         {"mae", m.mae},
            {"rmse", m.rmse},       {"nae", m.nae},     {"sre", m.sre},
            {"mean_time_s", m.mean_time_s}, {"excluded_nae", m.excluded_nae}};
}

inline const char* kCsvHeader = "method,n,mae,rmse,nae,sre,mean_time_s,excluded_nae\n";

/// Writes <stem>.json and <stem>.csv with one row per method.
inline void write_metrics_table(const fs::path& stem, const std::vector<std::pair<std::string, MetricsReport>>& rows,
                                const std::string& fingerprint, nlohmann::json extra = nlohmann::json::object()) {
    nlohmann::json j = std::move(extra);
    j["version"] = 1;
    j["fingerprint"] = fingerprint;
    j["methods"] = nlohmann::json::array();
    std::string csv = kCsvHeader;
    for (const auto& [name, m] : rows) {
        j["methods"].push_back(metrics_json(name, m));
        csv += metrics_csv_row(name, m);
    }
    write_text(fs::path(stem).concat(".json"), j.dump(1) + "\n");
    write_text(fs::path(stem).concat(".csv"), csv);
}

/// Per-scene outcomes for one masking strategy, evaluated in parallel with
/// results kept in scene order.
inline std::vector<CountOutcome> outcomes_for(const Dataset& ds, const std::vector<const ManifestEntry*>& entries,
                                              int r, const std::function<Grid2D(int, const Scene&)>& density) {
    std::vector<CountOutcome> out(entries.size());
    parallel_for(static_cast<int>(entries.size()), [&](int i) {
        const Scene& sc = ds.scenes.at(entries[i]->id);
        out[i] = outcome_for(entries[i]->id, sc, density(i, sc), r);
    });
    return out;
}

inline std::vector<SegSample> seg_samples(const Dataset& ds, const std::vector<const ManifestEntry*>& entries,
                                          const std::function<Grid2D(const ManifestEntry&, const Scene&)>& target,
                                          int exemplar_size) {
    std::vector<SegSample> out;
    for (const auto* e : entries) {
        const Scene& sc = ds.scenes.at(e->id);
        out.push_back({e->id, sc.image, make_exemplars(sc, exemplar_size), target(*e, sc)});
    }
    return out;
}

inline SegModel fit_segmenter(const Config& cfg, const std::vector<SegSample>& samples) {
    Rng init = Rng(cfg.seed).derive("train-seg").derive("init");
    return train_seg(SegModel::create(cfg.r, cfg.d, init), samples, cfg.seg_train_cfg());
}

} // namespace detail

// ---------------------------------------------------------------------------
// gen

struct GenSummary {
    int singles = 0;
    int multis = 0;
};

inline GenSummary cmd_gen(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("gen", cfg, lay);
    const auto catalog = default_catalog();
    const Rng root = Rng(cfg.seed).derive("gen");
    const int n_classes = static_cast<int>(catalog.size());

    struct Planned {
        ManifestEntry entry;
        Scene scene;
    };
    std::vector<Planned> all;
    GenSummary sum;

    auto gen_split = [&](const std::string& split, int n_single, int n_multi) {
        const Rng split_rng = root.derive(split);
        std::vector<Planned> singles(n_single);
        parallel_for(n_single, [&](int i) {
            Rng rng = split_rng.derive("single").derive(static_cast<std::uint64_t>(i));
            const int cls = rng.uniform_int(0, n_classes - 1);
            char id[32];
            std::snprintf(id, sizeof id, "%s-%04d", split.c_str(), i);
            singles[i].entry = {id, split, false, {}};
            singles[i].scene = generate_single_class_scene(catalog[cls], cls, cfg.canvas, rng);
        });
        std::vector<Planned> multis(n_multi);
        if (n_multi > 0) {
            std::vector<int> classes;
            for (const auto& s : singles) classes.push_back(s.scene.target_class);
            if (std::count(classes.begin(), classes.end(), classes.empty() ? -1 : classes.front()) ==
                static_cast<long>(classes.size()))
                throw Error(ErrorKind::config, "gen: split '" + split +
                                                   "' has fewer than two classes; raise its single-scene count");
        }
        parallel_for(n_multi, [&](int i) {
            Rng rng = split_rng.derive("multi").derive(static_cast<std::uint64_t>(i));
            int a = 0, b = 0;
            do {
                a = rng.uniform_int(0, n_single - 1);
                b = rng.uniform_int(0, n_single - 1);
            } while (singles[a].scene.target_class == singles[b].scene.target_class);
            SynthOptions so;
            so.quantum = cfg.r;
            char id[32];
            std::snprintf(id, sizeof id, "m%s-%04d", split.c_str(), i);
            multis[i].entry = {id, split, true, {singles[a].entry.id, singles[b].entry.id}};
            multis[i].scene = synthesize_multiclass(singles[a].scene, singles[b].scene, rng, so);
        });
        for (auto& p : singles) all.push_back(std::move(p));
        for (auto& p : multis) all.push_back(std::move(p));
        sum.singles += n_single;
        sum.multis += n_multi;
    };
    gen_split("train", cfg.n_train, cfg.n_multi_train);
    gen_split("val", cfg.n_val, cfg.n_multi_val);
    gen_split("test", cfg.n_test, cfg.n_multi_test);

    if (fs::exists(lay.data / "scenes")) fs::remove_all(lay.data / "scenes");
    nlohmann::json man;
    man["version"] = 1;
    man["fingerprint"] = cfg.fingerprint();
    man["scenes"] = nlohmann::json::array();
    for (const auto& p : all) {
        save_scene(p.scene, lay.scene_dir(p.entry.id));
        nlohmann::json e = {{"id", p.entry.id},
                            {"dir", "scenes/" + p.entry.id},
                            {"split", p.entry.split},
                            {"multiclass", p.entry.multiclass}};
        if (!p.entry.sources.empty()) e["sources"] = p.entry.sources;
        man["scenes"].push_back(e);
    }
    detail::write_text(lay.manifest(), man.dump(1) + "\n");
    log.add("singles", std::to_string(sum.singles));
    log.add("multiclass", std::to_string(sum.multis));
    log.finish();
    *opt.log << "gen: " << sum.singles << " single-class and " << sum.multis << " multi-class scenes in "
             << lay.data.string() << '\n';
    return sum;
}

// ---------------------------------------------------------------------------
// train-base

struct TrainSummary {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int epochs = 0;
};

inline TrainSummary cmd_train_base(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("train-base", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    std::vector<CounterSample> samples;
    for (const auto* e : ds.select("train", false))
        samples.push_back(make_counter_sample(ds.scenes.at(e->id), cfg.r, cfg.sigma, cfg.exemplar_size, e->id));
    if (samples.empty()) throw Error(ErrorKind::config, "train-base: no single-class training scenes in the manifest");

    Rng init = Rng(cfg.seed).derive("train-base").derive("init");
    CounterModel model = train_base(CounterModel::create(cfg.r, cfg.d, init), samples, cfg.base_train_cfg());
    save_counter(model, lay.counter(), cfg.fingerprint());

    TrainSummary s{model.training.loss_history.front(), model.training.loss_history.back(), model.training.epoch};
    log.add("samples", std::to_string(samples.size()));
    log.add("initial_loss", detail::fmt_real(s.initial_loss));
    log.add("final_loss", detail::fmt_real(s.final_loss));
    log.finish();
    *opt.log << "train-base: loss " << s.initial_loss << " -> " << s.final_loss << " over " << s.epochs
             << " epochs; wrote " << lay.counter().string() << '\n';
    return s;
}

// ---------------------------------------------------------------------------
// pseudo-label

struct PseudoLabelSummary {
    int scenes = 0;
    std::map<int, int> k_star_histogram;
    int warnings = 0;
};

/// Labels the multi-class train and val scenes. Every written file is read
/// back and its k_star re-derived from its own per-k losses.
inline PseudoLabelSummary cmd_pseudo_label(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("pseudo-label", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    const CounterModel counter = detail::require_counter(lay, cfg, opt);

    std::vector<const ManifestEntry*> entries = ds.select("train", true);
    for (const auto* e : ds.select("val", true)) entries.push_back(e);
    const Rng root = Rng(cfg.seed).derive("kmeans");
    const PseudoLabelCfg pcfg = detail::pseudo_cfg(cfg);

    std::vector<PseudoLabelResult> results(entries.size());
    parallel_for(static_cast<int>(entries.size()), [&](int i) {
        Rng rng = root.derive(entries[i]->id);
        results[i] = optimal_k_mask(counter, ds.scenes.at(entries[i]->id), pcfg, rng);
    });

    if (fs::exists(lay.data / "pseudo_masks")) fs::remove_all(lay.data / "pseudo_masks");
    PseudoLabelSummary sum;
    std::string csv = "scene,k_star";
    for (int k = cfg.k_min; k <= cfg.k_max; ++k) csv += ",loss_k" + std::to_string(k);
    csv += "\n";
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string& id = entries[i]->id;
        const fs::path path = lay.pseudo_mask(id);
        save_pseudo_label(results[i], path, cfg.fingerprint());
        const PseudoLabelResult back = load_pseudo_label(path);
        if (back.k_star != select_k_star(back.per_k_loss) || back.per_k_loss != results[i].per_k_loss ||
            back.mask != results[i].mask)
            throw Error(ErrorKind::numeric, path.string() + ": k_star is not the argmin of the stored per-k losses");
        if (opt.dump_images) write_pgm((lay.data / "pseudo_masks" / (id + ".pgm")).string(), results[i].mask);
        for (const auto& w : results[i].warnings) *opt.log << "warning: " << id << ": " << w << '\n';
        sum.warnings += static_cast<int>(results[i].warnings.size());
        ++sum.k_star_histogram[results[i].k_star];
        csv += id + "," + std::to_string(results[i].k_star);
        for (const auto& [k, l] : results[i].per_k_loss) csv += "," + detail::fmt_real(l);
        csv += "\n";
    }
    sum.scenes = static_cast<int>(entries.size());
    detail::write_text(lay.reports / "pseudo_labels.csv", csv);

    std::string hist;
    for (const auto& [k, n] : sum.k_star_histogram) hist += (hist.empty() ? "" : " ") + std::to_string(k) + ":" + std::to_string(n);
    log.add("scenes", std::to_string(sum.scenes));
    log.add("k_star_histogram", hist);
    log.add("warnings", std::to_string(sum.warnings));
    log.finish();
    *opt.log << "pseudo-label: " << sum.scenes << " masks (k* histogram " << hist << ", " << sum.warnings
             << " warnings)\n";
    return sum;
}

// ---------------------------------------------------------------------------
// train-seg

inline TrainSummary cmd_train_seg(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("train-seg", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    const auto entries = ds.select("train", true);
    if (entries.empty()) throw Error(ErrorKind::config, "train-seg: no multi-class training scenes in the manifest");
    const auto samples = detail::seg_samples(
        ds, entries,
        [&](const ManifestEntry& e, const Scene&) {
            const fs::path p = lay.pseudo_mask(e.id);
            if (!fs::exists(p)) throw detail::missing(p, "pseudo-label");
            const auto j = detail::parse_json_file(p.string());
            const std::string fp = j.contains("fingerprint") && j["fingerprint"].is_string() ? j["fingerprint"].get<std::string>() : "";
            detail::check_fingerprint(fp, cfg.fingerprint(), p, opt.force, *opt.log);
            return pseudo_label_from_json(j, p.string()).mask;
        },
        cfg.exemplar_size);

    const SegModel model = detail::fit_segmenter(cfg, samples);
    save_segmenter(model, lay.segmenter(), cfg.fingerprint());
    TrainSummary s{model.training.loss_history.front(), model.training.loss_history.back(), model.training.epoch};
    log.add("samples", std::to_string(samples.size()));
    log.add("initial_loss", detail::fmt_real(s.initial_loss));
    log.add("final_loss", detail::fmt_real(s.final_loss));
    log.finish();
    *opt.log << "train-seg: loss " << s.initial_loss << " -> " << s.final_loss << " over " << s.epochs
             << " epochs; wrote " << lay.segmenter().string() << '\n';
    return s;
}

// ---------------------------------------------------------------------------
// count

struct SceneCount {
    std::string id;
    double y = 0.0;
    double unmasked = 0.0;
    std::optional<double> segmenter;
};

/// Counts one scene (--scene) or every multi-class test scene. The segmenter
/// column is filled when a segmenter has been trained.
inline std::vector<SceneCount> cmd_count(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("count", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    const CounterModel counter = detail::require_counter(lay, cfg, opt);
    std::optional<SegModel> seg;
    if (fs::exists(lay.segmenter())) seg = detail::require_segmenter(lay, cfg, opt);

    std::vector<std::string> ids;
    if (opt.scene) {
        if (!ds.scenes.count(*opt.scene))
            throw Error(ErrorKind::missing_prerequisite, "count: scene '" + *opt.scene + "' is not in " + lay.manifest().string());
        ids.push_back(*opt.scene);
    } else {
        for (const auto* e : ds.select("test", true)) ids.push_back(e->id);
    }

    std::vector<SceneCount> out(ids.size());
    parallel_for(static_cast<int>(ids.size()), [&](int i) {
        const Scene& sc = ds.scenes.at(ids[i]);
        const auto ex = make_exemplars(sc, cfg.exemplar_size);
        const Grid2D d0 = predict_density(counter, sc.image, ex);
        out[i] = {ids[i], static_cast<double>(sc.target_count()), count(d0), std::nullopt};
        if (opt.dump_images) detail::dump_density(lay.images() / (ids[i] + "_density_none.pgm"), d0);
        if (seg) {
            const Grid2D pm = predict_mask(*seg, sc.image, ex);
            const Grid2D d1 = predict_density(counter, sc.image, ex, binarize(pm, cfg.tau));
            out[i].segmenter = count(d1);
            if (opt.dump_images) {
                write_pgm((lay.images() / (ids[i] + "_segmask.pgm")).string(), pm, -1.0, 1.0);
                detail::dump_density(lay.images() / (ids[i] + "_density_seg.pgm"), d1);
            }
        }
    });

    std::string csv = "scene,y,unmasked,segmenter\n";
    for (const auto& c : out) {
        csv += c.id + "," + detail::fmt_real(c.y) + "," + detail::fmt_real(c.unmasked) + "," +
               (c.segmenter ? detail::fmt_real(*c.segmenter) : "") + "\n";
        *opt.log << c.id << ": y=" << c.y << " unmasked=" << c.unmasked;
        if (c.segmenter) *opt.log << " segmenter=" << *c.segmenter;
        *opt.log << '\n';
    }
    detail::write_text(lay.reports / "counts.csv", csv);
    log.add("scenes", std::to_string(out.size()));
    log.finish();
    return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalSummary {
    MetricsReport single_unmasked;
    MetricsReport unmasked;
    MetricsReport kmeans;
    MetricsReport segmenter;
    double seg_val_iou = 0.0;
    DistanceStats exemplar_distances;
};

/// Mean IoU of binarized segmenter masks against the validation pseudo masks.
inline double seg_val_iou(const Config& cfg, const Layout& lay, const Dataset& ds, const SegModel& seg,
                          const RunOptions& opt) {
    const auto entries = ds.select("val", true);
    if (entries.empty()) return 0.0;
    std::vector<double> iou(entries.size());
    for (const auto* e : entries)
        if (!fs::exists(lay.pseudo_mask(e->id))) throw detail::missing(lay.pseudo_mask(e->id), "pseudo-label");
    parallel_for(static_cast<int>(entries.size()), [&](int i) {
        const Scene& sc = ds.scenes.at(entries[i]->id);
        const Grid2D target = load_pseudo_label(lay.pseudo_mask(entries[i]->id)).mask;
        const Grid2D pred = binarize(predict_mask(seg, sc.image, make_exemplars(sc, cfg.exemplar_size)), cfg.tau);
        iou[i] = mask_iou(pred, target);
        if (opt.dump_images) write_pgm((lay.images() / (entries[i]->id + "_segmask_bin.pgm")).string(), pred);
    });
    double s = 0.0;
    for (double v : iou) s += v;
    return s / static_cast<double>(iou.size());
}

inline EvalSummary cmd_eval(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("eval", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    const CounterModel counter = detail::require_counter(lay, cfg, opt);
    const SegModel seg = detail::require_segmenter(lay, cfg, opt);
    const auto singles = ds.select("test", false);
    const auto multis = ds.select("test", true);
    if (multis.empty()) throw Error(ErrorKind::config, "eval: no multi-class test scenes in the manifest");

    EvalSummary s;
    const int r = cfg.r;
    const int E = cfg.exemplar_size;
    if (!singles.empty())
        s.single_unmasked = aggregate(detail::outcomes_for(ds, singles, r, [&](int, const Scene& sc) {
                                          return predict_density(counter, sc.image, make_exemplars(sc, E));
                                      }),
                                      false);
    s.unmasked = aggregate(detail::outcomes_for(ds, multis, r, [&](int, const Scene& sc) {
                               return predict_density(counter, sc.image, make_exemplars(sc, E));
                           }),
                           true);
    const Rng km = Rng(cfg.seed).derive("kmeans");
    s.kmeans = aggregate(detail::outcomes_for(ds, multis, r, [&](int i, const Scene& sc) {
                             Rng rng = km.derive(multis[i]->id);
                             const Grid2D m = optimal_k_mask(counter, sc, detail::pseudo_cfg(cfg), rng).mask;
                             if (opt.dump_images) write_pgm((lay.images() / (multis[i]->id + "_kmeans.pgm")).string(), m);
                             return predict_density(counter, sc.image, make_exemplars(sc, E), m);
                         }),
                         true);
    s.segmenter = aggregate(detail::outcomes_for(ds, multis, r, [&](int i, const Scene& sc) {
                                const Grid2D d = masked_density(counter, seg, sc, cfg.tau, E);
                                if (opt.dump_images) detail::dump_density(lay.images() / (multis[i]->id + "_density_seg.pgm"), d);
                                return d;
                            }),
                            true);
    s.seg_val_iou = seg_val_iou(cfg, lay, ds, seg, opt);

    std::vector<std::pair<Vec, int>> emb;
    for (const auto* e : singles) {
        const Scene& sc = ds.scenes.at(e->id);
        for (const auto& v : exemplar_vectors(counter, make_exemplars(sc, E))) emb.emplace_back(v, sc.target_class);
    }
    nlohmann::json extra = nlohmann::json::object();
    extra["seg_val_iou"] = s.seg_val_iou;
    if (!emb.empty()) {
        s.exemplar_distances = distance_stats(emb);
        extra["exemplar_distance"] = {{"intra", s.exemplar_distances.intra}, {"inter", s.exemplar_distances.inter}};
    }

    std::vector<std::pair<std::string, MetricsReport>> rows;
    if (!singles.empty()) rows.emplace_back("single:none", s.single_unmasked);
    rows.emplace_back("none", s.unmasked);
    rows.emplace_back("kmeans", s.kmeans);
    rows.emplace_back("segmenter", s.segmenter);
    detail::write_metrics_table(lay.reports / "report", rows, cfg.fingerprint(), extra);

    log.add("mae_none", detail::fmt_real(s.unmasked.mae));
    log.add("mae_kmeans", detail::fmt_real(s.kmeans.mae));
    log.add("mae_segmenter", detail::fmt_real(s.segmenter.mae));
    log.add("seg_val_iou", detail::fmt_real(s.seg_val_iou));
    log.finish();
    *opt.log << "eval (" << multis.size() << " multi-class test scenes): MAE none " << s.unmasked.mae << ", kmeans "
             << s.kmeans.mae << ", segmenter " << s.segmenter.mae << "; segmenter val IoU " << s.seg_val_iou << '\n';
    return s;
}

// ---------------------------------------------------------------------------
// ablate

/// Rows: none, dotbox:{mean,min,max}, threshold:{0.2,0.4,0.6,0.8}, kmeans,
/// segmenter. Dot-box rows count with a segmenter trained on dot-box masks of
/// the multi-class training scenes; threshold rows mask with the thresholded
/// similarity map directly.
inline std::vector<std::pair<std::string, MetricsReport>> cmd_ablate(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("ablate", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    const CounterModel counter = detail::require_counter(lay, cfg, opt);
    const SegModel seg = detail::require_segmenter(lay, cfg, opt);
    const auto multis = ds.select("test", true);
    if (multis.empty()) throw Error(ErrorKind::config, "ablate: no multi-class test scenes in the manifest");
    const int r = cfg.r;
    const int E = cfg.exemplar_size;

    std::vector<std::pair<std::string, MetricsReport>> rows;
    auto run = [&](const std::string& name, const std::function<Grid2D(int, const Scene&)>& density) {
        rows.emplace_back(name, aggregate(detail::outcomes_for(ds, multis, r, density), true));
        *opt.log << "ablate: " << name << " MAE " << rows.back().second.mae << '\n';
    };

    run("none", [&](int, const Scene& sc) { return predict_density(counter, sc.image, make_exemplars(sc, E)); });
    for (BoxSize mode : {BoxSize::mean, BoxSize::min, BoxSize::max}) {
        const auto samples = detail::seg_samples(
            ds, ds.select("train", true), [&](const ManifestEntry&, const Scene& sc) { return dotbox_mask(sc, mode, r); }, E);
        const SegModel box_seg = detail::fit_segmenter(cfg, samples);
        save_segmenter(box_seg, lay.models / ("segmenter_dotbox_" + std::string(to_string(mode)) + ".json"),
                       cfg.fingerprint());
        run(std::string("dotbox:") + to_string(mode),
            [&](int, const Scene& sc) { return masked_density(counter, box_seg, sc, cfg.tau, E); });
    }
    for (const char* tau : {"0.2", "0.4", "0.6", "0.8"}) {
        const double t = std::stod(tau);
        run(std::string("threshold:") + tau, [&](int, const Scene& sc) {
            const auto ex = make_exemplars(sc, E);
            return predict_density(counter, sc.image, ex, threshold_similarity(similarity_map(counter, sc.image, ex), t));
        });
    }
    const Rng km = Rng(cfg.seed).derive("kmeans");
    run("kmeans", [&](int i, const Scene& sc) {
        Rng rng = km.derive(multis[i]->id);
        return predict_density(counter, sc.image, make_exemplars(sc, E),
                               optimal_k_mask(counter, sc, detail::pseudo_cfg(cfg), rng).mask);
    });
    run("segmenter", [&](int, const Scene& sc) { return masked_density(counter, seg, sc, cfg.tau, E); });

    detail::write_metrics_table(lay.reports / "ablation", rows, cfg.fingerprint());
    for (const auto& [name, m] : rows) log.add("mae_" + name, detail::fmt_real(m.mae));
    log.finish();
    return rows;
}

// ---------------------------------------------------------------------------
// bench-time

inline TimingTable cmd_bench_time(const Config& cfg, const RunOptions& opt = {}) {
    const Layout lay(cfg, opt);
    detail::RunLog log("bench-time", cfg, lay);
    const Dataset ds = detail::require_dataset(lay, cfg, opt);
    const CounterModel counter = detail::require_counter(lay, cfg, opt);
    const SegModel seg = detail::require_segmenter(lay, cfg, opt);
    std::vector<Scene> scenes;
    for (const auto* e : ds.select("test", true)) scenes.push_back(ds.scenes.at(e->id));
    if (scenes.size() < 10)
        throw Error(ErrorKind::config, "bench-time: needs at least 10 multi-class test scenes, manifest has " +
                                           std::to_string(scenes.size()));

    TimingCfg tc;
    tc.k_min = cfg.k_min;
    tc.k_max = cfg.k_max;
    tc.tau = cfg.tau;
    tc.exemplar_size = cfg.exemplar_size;
    tc.seed = Rng(cfg.seed).derive("kmeans").seed();
    const TimingTable t = bench_timing(counter, seg, scenes, tc);

    nlohmann::json j;
    j["version"] = 1;
    j["fingerprint"] = cfg.fingerprint();
    j["scenes"] = t.scenes;
    j["columns"] = nlohmann::json::array();
    std::string csv = "column,mean_time_s\n";
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        j["columns"].push_back({{"name", t.columns[c]}, {"mean_time_s", t.mean_seconds[c]}});
        csv += t.columns[c] + "," + detail::fmt_real(t.mean_seconds[c]) + "\n";
        log.add("time_" + t.columns[c], detail::fmt_real(t.mean_seconds[c]));
        *opt.log << "bench-time: " << t.columns[c] << " " << t.mean_seconds[c] << " s/scene\n";
    }
    detail::write_text(lay.reports / "timing.json", j.dump(1) + "\n");
    detail::write_text(lay.reports / "timing.csv", csv);
    log.finish();
    return t;
}

} // namespace maskcount
