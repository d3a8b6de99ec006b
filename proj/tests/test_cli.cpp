// End-to-end checks of the command-line driver: exit codes, stage ordering,
// overwrite protection, manifest staleness, and byte-level reproducibility.
// Each check shells out to the real binary (path in the LTREC_CLI variable).
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "ltrec/dataset_io.hpp"
#include "ltrec/manifest.hpp"
#include "ltrec/version.hpp"

using namespace ltrec;
using Catch::Matchers::ContainsSubstring;

namespace fsys = std::filesystem;

namespace {

std::string cli_path() {
    const char* p = std::getenv("LTREC_CLI");
    if (p == nullptr || *p == '\0')
        FAIL("LTREC_CLI must point at the built binary (set by the build when run under ctest)");
    return p;
}

// Runs the binary with the given arguments; returns the exit code and leaves
// combined stdout+stderr in `captured`.
int run_cli(const std::string& args, std::string* captured = nullptr) {
    static int counter = 0;
    fsys::path cap = fsys::temp_directory_path() / ("ltrec_cli_out_" + std::to_string(counter++));
    std::string cmd = cli_path() + " " + args + " > " + cap.string() + " 2>&1";
    int status = std::system(cmd.c_str());
    if (captured) *captured = read_text_file(cap);
    fsys::remove(cap);
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    return -1;
}

const std::string kTinyConfig =
    "[dataset]\n"
    "seed = 11\n"
    "num_users = 120\n"
    "num_items = 80\n"
    "num_events = 4000\n"
    "num_days = 6\n"
    "test_days = 2\n"
    "num_categories = 4\n"
    "latent_dim = 8\n"
    "\n"
    "[align]\n"
    "epochs = 2\n"
    "rep_dim = 8\n"
    "hidden_dim = 16\n"
    "batch_size = 64\n"
    "\n"
    "[quantize]\n"
    "levels = 2\n"
    "codebook_size = 6\n"
    "code_dim = 4\n"
    "epochs = 4\n"
    "\n"
    "[train]\n"
    "epochs = 1\n"
    "batch_size = 128\n"
    "embed_dim = 6\n"
    "fusion_dim = 8\n"
    "gate_hidden = 4\n"
    "ranker_hidden = 8\n"
    "\n"
    "[ablate]\n"
    "train_epochs = 1\n"
    "seeds = 1\n";

struct PipelineRun {
    fsys::path dir;       // scratch root for this fixture
    fsys::path cfg;       // tiny config file
    fsys::path out;       // first pipeline root
    bool ok = false;      // all six stages exited 0
};

// Runs the whole pipeline once into a scratch directory; reused by the
// later test cases so the expensive part happens a single time.
const PipelineRun& pipeline() {
    static PipelineRun r = [] {
        PipelineRun p;
        p.dir = fsys::temp_directory_path() / "ltrec_cli_fixture";
        fsys::remove_all(p.dir);
        fsys::create_directories(p.dir);
        p.cfg = p.dir / "tiny.cfg";
        write_text_file(p.cfg, kTinyConfig);
        p.out = p.dir / "out";
        p.ok = true;
        for (const char* stage : {"gen", "align", "quantize", "train", "eval", "ablate"}) {
            std::string log;
            int rc = run_cli(std::string(stage) + " --config " + p.cfg.string() + " --out " +
                                 p.out.string(),
                             &log);
            if (rc != 0) {
                UNSCOPED_INFO("stage " << stage << " exited " << rc << "\n" << log);
                p.ok = false;
                break;
            }
        }
        return p;
    }();
    return r;
}

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
    std::string out;
    CHECK(run_cli("--version", &out) == 0);
    CHECK_THAT(out, ContainsSubstring(kVersion));
    CHECK(run_cli("--help", &out) == 0);
    CHECK_THAT(out, ContainsSubstring("gen"));
    CHECK(run_cli("", &out) == 2);              // a subcommand is required
    CHECK(run_cli("frobnicate", &out) == 2);    // unknown subcommand
    CHECK(run_cli("gen", &out) == 2);           // --config is required
    CHECK(run_cli("gen --config /nonexistent/x.cfg", &out) == 2);
    CHECK_THAT(out, ContainsSubstring("cannot open"));

    fsys::path bad = fsys::temp_directory_path() / "ltrec_cli_bad.cfg";
    write_text_file(bad, "[dataset]\nnot_a_key = 1\n");
    CHECK(run_cli("gen --config " + bad.string(), &out) == 2);
    CHECK_THAT(out, ContainsSubstring("not_a_key"));
    fsys::remove(bad);
}

TEST_CASE("stages refuse to run before their dependencies", "[cli]") {
    fsys::path dir = fsys::temp_directory_path() / "ltrec_cli_deps";
    fsys::remove_all(dir);
    fsys::create_directories(dir);
    fsys::path cfg = dir / "tiny.cfg";
    write_text_file(cfg, kTinyConfig);
    std::string base = " --config " + cfg.string() + " --out " + (dir / "out").string();

    std::string out;
    CHECK(run_cli("align" + base, &out) == 3);
    CHECK_THAT(out, ContainsSubstring("gen"));
    CHECK(run_cli("quantize" + base, &out) == 3);
    CHECK(run_cli("train" + base, &out) == 3);
    CHECK(run_cli("eval" + base, &out) == 3);
    CHECK(run_cli("ablate" + base, &out) == 3);
    fsys::remove_all(dir);
}

TEST_CASE("the full pipeline runs end to end", "[cli]") {
    const PipelineRun& p = pipeline();
    REQUIRE(p.ok);

    for (const char* f : {"gen/items.jsonl", "gen/users.jsonl", "gen/events.tsv",
                          "gen/labels.json", "align/item_reps.jsonl", "align/user_reps.jsonl",
                          "quantize/semantic_ids.tsv", "quantize/codebooks.json",
                          "train/checkpoint.bin", "train/metrics.jsonl", "train/train_info.json",
                          "eval/scores.tsv", "eval/report.json", "eval/report.txt",
                          "ablate/ablation_runs.json", "ablate/ablation_report.txt"}) {
        INFO(f);
        CHECK(fsys::exists(p.out / f));
    }

    // Every stage directory carries a manifest whose outputs still verify.
    for (const char* stage : {"gen", "align", "quantize", "train", "eval", "ablate"}) {
        RunManifest m = read_manifest(p.out / stage, stage);
        std::vector<std::string> files;
        for (const auto& [f, h] : m.outputs) files.push_back(f);
        REQUIRE_NOTHROW(verify_artifacts(p.out / stage, m, files));
        CHECK(m.seed == 11);  // config seed, no override given
    }

    // The evaluation report parses and contains defined headline metrics.
    json rep = json::parse(read_text_file(p.out / "eval/report.json"));
    CHECK(rep.at("metrics").at("total").at("auc").is_number());
    CHECK(rep.at("metrics").at("total").at("count").get<int64_t>() > 0);
    json abl = json::parse(read_text_file(p.out / "ablate/ablation_runs.json"));
    CHECK(abl.at("runs").size() == 1);
    CHECK(abl.at("runs")[0].at("deltas").at("variants").size() == 6);  // six ablation variants
}

TEST_CASE("a second identical run reproduces every artifact byte for byte", "[cli]") {
    const PipelineRun& p = pipeline();
    REQUIRE(p.ok);
    fsys::path out2 = p.dir / "out2";
    for (const char* stage : {"gen", "align", "quantize", "train", "eval", "ablate"}) {
        std::string log;
        int rc = run_cli(std::string(stage) + " --config " + p.cfg.string() + " --out " +
                             out2.string(),
                         &log);
        INFO(log);
        REQUIRE(rc == 0);
    }
    for (const char* f :
         {"gen/items.jsonl", "gen/users.jsonl", "gen/events.tsv", "gen/labels.json",
          "align/item_reps.jsonl", "align/user_reps.jsonl", "quantize/semantic_ids.tsv",
          "quantize/codebooks.json", "train/checkpoint.bin", "train/metrics.jsonl",
          "eval/scores.tsv", "eval/report.json", "ablate/ablation_runs.json",
          "gen/manifest.json", "align/manifest.json", "quantize/manifest.json",
          "train/manifest.json", "eval/manifest.json", "ablate/manifest.json"}) {
        INFO(f);
        CHECK(hash_file(p.out / f) == hash_file(out2 / f));
    }
}

TEST_CASE("non-empty stage directories need --force", "[cli]") {
    const PipelineRun& p = pipeline();
    REQUIRE(p.ok);
    std::string base = " --config " + p.cfg.string() + " --out " + p.out.string();

    std::string out;
    CHECK(run_cli("gen" + base, &out) == 2);  // refuses to clobber silently
    CHECK_THAT(out, ContainsSubstring("--force"));
    std::string before = hash_file(p.out / "gen/events.tsv");
    CHECK(run_cli("gen" + base + " --force", &out) == 0);
    CHECK(hash_file(p.out / "gen/events.tsv") == before);  // same seed, same bytes
}

TEST_CASE("seed overrides are recorded in the manifest", "[cli]") {
    const PipelineRun& p = pipeline();
    REQUIRE(p.ok);
    fsys::path out3 = p.dir / "out3";
    std::string log;
    REQUIRE(run_cli("gen --config " + p.cfg.string() + " --out " + out3.string() + " --seed 99",
                    &log) == 0);
    RunManifest m = read_manifest(out3 / "gen", "gen");
    CHECK(m.seed == 99);
    CHECK(hash_file(out3 / "gen/events.tsv") != hash_file(p.out / "gen/events.tsv"));
    fsys::remove_all(out3);
}

TEST_CASE("hand-edited upstream artifacts are detected as stale", "[cli]") {
    const PipelineRun& p = pipeline();
    REQUIRE(p.ok);
    // Corrupt one byte of the generated events table, then ask a downstream
    // stage to re-run: it must refuse with a dependency error.
    fsys::path ev = p.out / "gen/events.tsv";
    std::string content = read_text_file(ev);
    write_text_file(ev, content + "# tampered\n");
    std::string out;
    CHECK(run_cli("align --config " + p.cfg.string() + " --out " + p.out.string() + " --force",
                  &out) == 3);
    CHECK_THAT(out, ContainsSubstring("gen"));
    write_text_file(ev, content);  // restore for any later cases
}

TEST_CASE("threaded evaluation reproduces the single-thread report", "[cli]") {
    const PipelineRun& p = pipeline();
    REQUIRE(p.ok);
    std::string before_report = hash_file(p.out / "eval/report.json");
    std::string before_scores = hash_file(p.out / "eval/scores.tsv");
    std::string log;
    REQUIRE(run_cli("eval --config " + p.cfg.string() + " --out " + p.out.string() +
                        " --force --threads 3",
                    &log) == 0);
    CHECK(hash_file(p.out / "eval/report.json") == before_report);
    CHECK(hash_file(p.out / "eval/scores.tsv") == before_scores);
}
