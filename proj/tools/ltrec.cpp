// Staged pipeline driver: gen -> align -> quantize -> train -> eval, plus the
// ablation sweep. Every stage writes its artifacts and a manifest under
// <out>/<stage>/ and validates the manifests of the stages it depends on.
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ltrec/config.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/pipeline.hpp"
#include "ltrec/version.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDependency = 3;

struct StageArgs {
    std::string config_path;
    std::string out_dir = "out";
    int64_t seed = -1;  // -1: use the config value
    bool force = false;
    int threads = 1;
};

void add_common(CLI::App* cmd, StageArgs& args, bool with_threads) {
    cmd->add_option("--config", args.config_path, "configuration file (flat [section] key=value)")
        ->required();
    cmd->add_option("--out", args.out_dir, "pipeline root directory")->capture_default_str();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_flag("--force", args.force, "overwrite a non-empty stage directory");
    if (with_threads)
        cmd->add_option("--threads", args.threads, "scoring threads")->capture_default_str();
}

int dispatch(const std::string& stage, const StageArgs& args) {
    ltrec::Config cfg = ltrec::Config::parse_file(args.config_path);
    uint64_t seed = ltrec::effective_seed(cfg, args.seed);
    std::filesystem::path root(args.out_dir);

    if (stage == "gen") ltrec::run_gen(cfg, seed, root, args.force);
    else if (stage == "align") ltrec::run_align(cfg, seed, root, args.force);
    else if (stage == "quantize") ltrec::run_quantize(cfg, seed, root, args.force);
    else if (stage == "train") ltrec::run_train(cfg, seed, root, args.force);
    else if (stage == "eval") ltrec::run_eval(cfg, seed, root, args.force, args.threads);
    else ltrec::run_ablate(cfg, seed, root, args.force);
    std::cout << stage << ": ok (seed " << seed << ", out " << (root / stage).string() << ")\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"long-tail CTR pipeline (synthetic data, staged artifacts)"};
    app.set_version_flag("--version", ltrec::kVersion);
    app.require_subcommand(1);

    StageArgs args;
    std::string chosen;
    for (const char* name : {"gen", "align", "quantize", "train", "eval", "ablate"}) {
        CLI::App* cmd = app.add_subcommand(
            name, std::string("run the ") + name + " stage into <out>/" + name);
        add_common(cmd, args, std::string(name) == "eval");
        cmd->callback([&chosen, name]() { chosen = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        // CLI11 returns 0 for --help/--version; anything else is a usage error.
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        return dispatch(chosen, args);
    } catch (const ltrec::OutputRefused& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ltrec::DependencyError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDependency;
    } catch (const ltrec::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
