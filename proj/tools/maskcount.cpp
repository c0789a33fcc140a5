// maskcount: command-line driver for the segment-then-count pipeline.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "maskcount/config.hpp"
#include "maskcount/pipeline.hpp"

namespace {

int exit_code(maskcount::ErrorKind k) {
    switch (k) {
    case maskcount::ErrorKind::config: return 2;
    case maskcount::ErrorKind::missing_prerequisite: return 3;
    case maskcount::ErrorKind::numeric: return 4;
    default: return 1;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Exemplar-conditioned multi-class object counting with pseudo-mask segmentation"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool dump_images = false;
    bool force = false;
    std::optional<std::string> scene;

    const char* names[][2] = {
        {"gen", "generate single- and multi-class scenes and the manifest"},
        {"train-base", "train the base counter on single-class scenes"},
        {"pseudo-label", "build k-means pseudo masks with per-scene optimal k"},
        {"train-seg", "train the segmenter on the pseudo masks"},
        {"count", "count test scenes (or one scene) with and without masking"},
        {"eval", "evaluate unmasked, k-means and segmenter counting"},
        {"ablate", "compare masking strategies"},
        {"bench-time", "time each masking path"},
    };
    for (const auto& [name, help] : names) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "config file")->required();
        sub->add_option("--seed", seed, "override train.seed");
        sub->add_flag("--dump-images", dump_images, "write masks and densities as PGM");
        sub->add_flag("--force", force, "accept artifacts with a different config fingerprint");
        if (std::string(name) == "count") sub->add_option("--scene", scene, "scene id from the manifest");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        maskcount::Config cfg = maskcount::load_config(config_path);
        if (seed) cfg.seed = *seed;
        maskcount::RunOptions opt;
        opt.base_dir = std::filesystem::absolute(config_path).parent_path();
        opt.dump_images = dump_images;
        opt.force = force;
        opt.scene = scene;

        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "gen") maskcount::cmd_gen(cfg, opt);
        else if (cmd == "train-base") maskcount::cmd_train_base(cfg, opt);
        else if (cmd == "pseudo-label") maskcount::cmd_pseudo_label(cfg, opt);
        else if (cmd == "train-seg") maskcount::cmd_train_seg(cfg, opt);
        else if (cmd == "count") maskcount::cmd_count(cfg, opt);
        else if (cmd == "eval") maskcount::cmd_eval(cfg, opt);
        else if (cmd == "ablate") maskcount::cmd_ablate(cfg, opt);
        else if (cmd == "bench-time") maskcount::cmd_bench_time(cfg, opt);
    } catch (const maskcount::Error& e) {
        std::cerr << "maskcount: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "maskcount: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
