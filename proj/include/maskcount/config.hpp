#pragma once

// Run configuration: sectioned key=value text, parsed strictly. Unknown
// sections or keys are errors.
//
//   [canvas]    height width
//   [model]     r d exemplar_size
//   [density]   sigma
//   [pseudo]    k_min k_max
//   [segment]   tau
//   [train]     epochs lr batch seed mask_augment optimizer
//   [train_seg] epochs lr batch
//   [data]      train val test multi_train multi_val multi_test
//   [paths]     data_dir models_dir reports_dir

#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>

#include "maskcount/error.hpp"
#include "maskcount/numerics.hpp"
#include "maskcount/scene.hpp"
#include "maskcount/train.hpp"

namespace maskcount {

struct Config {
    Canvas canvas;
    int r = 8;
    int d = 16;
    int exemplar_size = 32;
    double sigma = 2.0;
    int k_min = 2;
    int k_max = 6;
    double tau = 0.5;

    int train_epochs = 80;
    double train_lr = 1e-3;
    int train_batch = 4;
    std::uint64_t seed = 2023;
    double mask_augment = 0.8;
    Optimizer optimizer = Optimizer::adam;

    int seg_epochs = 40;
    double seg_lr = 1e-3;
    int seg_batch = 4;

    int n_train = 48;
    int n_val = 24;
    int n_test = 60;
    int n_multi_train = 60;
    int n_multi_val = 24;
    int n_multi_test = 60;

    std::string data_dir = "data";
    std::string models_dir = "models";
    std::string reports_dir = "reports";

    /// Canonical text of every setting; the fingerprint hashes this.
    std::string canonical() const {
        std::ostringstream o;
        o << std::setprecision(17);
        o << "canvas.height=" << canvas.height << "\ncanvas.width=" << canvas.width << "\nmodel.r=" << r
          << "\nmodel.d=" << d << "\nmodel.exemplar_size=" << exemplar_size << "\ndensity.sigma=" << sigma
          << "\npseudo.k_min=" << k_min << "\npseudo.k_max=" << k_max << "\nsegment.tau=" << tau
          << "\ntrain.epochs=" << train_epochs << "\ntrain.lr=" << train_lr << "\ntrain.batch=" << train_batch
          << "\ntrain.seed=" << seed << "\ntrain.mask_augment=" << mask_augment
          << "\ntrain.optimizer=" << (optimizer == Optimizer::adam ? "adam" : "sgd") << "\ntrain_seg.epochs=" << seg_epochs
          << "\ntrain_seg.lr=" << seg_lr << "\ntrain_seg.batch=" << seg_batch << "\ndata.train=" << n_train
          << "\ndata.val=" << n_val << "\ndata.test=" << n_test << "\ndata.multi_train=" << n_multi_train
          << "\ndata.multi_val=" << n_multi_val << "\ndata.multi_test=" << n_multi_test << '\n';
        return o.str();
    }

    std::string fingerprint() const {
        std::ostringstream o;
        o << std::hex << std::setw(16) << std::setfill('0') << Rng::fnv1a(canonical());
        return o.str();
    }

    TrainCfg base_train_cfg() const {
        TrainCfg c;
        c.epochs = train_epochs;
        c.lr = train_lr;
        c.batch = train_batch;
        c.seed = Rng(seed).derive("train-base").seed();
        c.mask_augment = mask_augment;
        c.optimizer = optimizer;
        return c;
    }

    TrainCfg seg_train_cfg() const {
        TrainCfg c;
        c.epochs = seg_epochs;
        c.lr = seg_lr;
        c.batch = seg_batch;
        c.seed = Rng(seed).derive("train-seg").seed();
        c.optimizer = optimizer;
        return c;
    }

    void validate() const {
        auto check = [](bool ok, const std::string& what) {
            if (!ok) throw Error(ErrorKind::config, "config: " + what);
        };
        check(canvas.height >= 64 && canvas.width >= 64, "canvas must be at least 64x64");
        check(r >= 2 && (r & (r - 1)) == 0, "model.r must be a power of two >= 2");
        check(d >= 1, "model.d must be >= 1");
        check(exemplar_size >= r, "model.exemplar_size must be >= model.r");
        check(sigma > 0, "density.sigma must be > 0");
        check(k_min >= 1 && k_max >= k_min, "pseudo.k_min/k_max must satisfy 1 <= k_min <= k_max");
        check(tau >= 0 && tau <= 1, "segment.tau must lie in [0, 1]");
        check(train_epochs >= 1 && seg_epochs >= 1, "epochs must be >= 1");
        check(train_lr >= 0 && seg_lr >= 0, "learning rates must be >= 0");
        check(train_batch >= 1 && seg_batch >= 1, "batch sizes must be >= 1");
        check(mask_augment >= 0 && mask_augment <= 1, "train.mask_augment must lie in [0, 1]");
        check(n_train >= 1 && n_val >= 0 && n_test >= 0, "data split sizes must be non-negative (train >= 1)");
        check(n_multi_train >= 1 && n_multi_val >= 0 && n_multi_test >= 0, "multi-class split sizes are invalid");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline Config parse_config(const std::string& text, const std::string& source = "<config>") {
    Config c;
    using Setter = std::function<void(const std::string&)>;
    auto as_int = [](int& dst) -> Setter {
        return [&dst](const std::string& v) {
            std::size_t used = 0;
            const int x = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            dst = x;
        };
    };
    auto as_double = [](double& dst) -> Setter {
        return [&dst](const std::string& v) {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            dst = x;
        };
    };
    auto as_string = [](std::string& dst) -> Setter { return [&dst](const std::string& v) { dst = v; }; };

    std::map<std::string, Setter> keys = {
        {"canvas.height", as_int(c.canvas.height)},
        {"canvas.width", as_int(c.canvas.width)},
        {"model.r", as_int(c.r)},
        {"model.d", as_int(c.d)},
        {"model.exemplar_size", as_int(c.exemplar_size)},
        {"density.sigma", as_double(c.sigma)},
        {"pseudo.k_min", as_int(c.k_min)},
        {"pseudo.k_max", as_int(c.k_max)},
        {"segment.tau", as_double(c.tau)},
        {"train.epochs", as_int(c.train_epochs)},
        {"train.lr", as_double(c.train_lr)},
        {"train.batch", as_int(c.train_batch)},
        {"train.seed",
         [&c](const std::string& v) {
             std::size_t used = 0;
             const unsigned long long x = std::stoull(v, &used);
             if (used != v.size() || v.front() == '-') throw std::invalid_argument(v);
             c.seed = x;
         }},
        {"train.mask_augment", as_double(c.mask_augment)},
        {"train.optimizer",
         [&c](const std::string& v) {
             if (v == "adam")
                 c.optimizer = Optimizer::adam;
             else if (v == "sgd")
                 c.optimizer = Optimizer::sgd;
             else
                 throw std::invalid_argument(v);
         }},
        {"train_seg.epochs", as_int(c.seg_epochs)},
        {"train_seg.lr", as_double(c.seg_lr)},
        {"train_seg.batch", as_int(c.seg_batch)},
        {"data.train", as_int(c.n_train)},
        {"data.val", as_int(c.n_val)},
        {"data.test", as_int(c.n_test)},
        {"data.multi_train", as_int(c.n_multi_train)},
        {"data.multi_val", as_int(c.n_multi_val)},
        {"data.multi_test", as_int(c.n_multi_test)},
        {"paths.data_dir", as_string(c.data_dir)},
        {"paths.models_dir", as_string(c.models_dir)},
        {"paths.reports_dir", as_string(c.reports_dir)},
    };

    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    auto error = [&](const std::string& what) {
        return Error(ErrorKind::config, source + ":" + std::to_string(lineno) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw error("malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw error("expected key = value");
        if (section.empty()) throw error("key outside of a section");
        const std::string key = section + "." + detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        auto it = keys.find(key);
        if (it == keys.end()) throw error("unknown key '" + key + "'");
        if (value.empty()) throw error("empty value for '" + key + "'");
        try {
            it->second(value);
        } catch (const std::exception&) {
            throw error("invalid value '" + value + "' for '" + key + "'");
        }
    }
    c.validate();
    return c;
}

inline Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::config, "config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path);
}

} // namespace maskcount
