#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ltrec/align.hpp"
#include "ltrec/config.hpp"
#include "ltrec/dataset_io.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/manifest.hpp"
#include "ltrec/metrics.hpp"
#include "ltrec/rqvae.hpp"
#include "ltrec/synth.hpp"
#include "ltrec/trainer.hpp"
#include "ltrec/version.hpp"

namespace ltrec {

// Refusing to write into a non-empty stage directory is a usage-level error
// (mapped to its own exit code), distinct from runtime failures.
class OutputRefused : public ConfigError {
    using ConfigError::ConfigError;
};

namespace fsys = std::filesystem;

inline fsys::path stage_dir(const fsys::path& root, const std::string& stage) {
    return root / stage;
}

inline void prepare_out_dir(const fsys::path& dir, bool force) {
    if (fsys::exists(dir) && !fsys::is_empty(dir)) {
        if (!force)
            throw OutputRefused("output directory " + dir.string() +
                                " is not empty (use --force to overwrite)");
        fsys::remove_all(dir);
    }
    fsys::create_directories(dir);
}

// ---- config extraction ----------------------------------------------------

inline DatasetConfig dataset_config_from(const Config& c) {
    DatasetConfig d;
    d.num_users = static_cast<int>(c.get_int("dataset", "num_users", d.num_users));
    d.num_items = static_cast<int>(c.get_int("dataset", "num_items", d.num_items));
    d.num_categories = static_cast<int>(c.get_int("dataset", "num_categories", d.num_categories));
    d.d_lat = static_cast<int>(c.get_int("dataset", "latent_dim", d.d_lat));
    d.num_events = static_cast<int>(c.get_int("dataset", "num_events", d.num_events));
    d.num_days = static_cast<int>(c.get_int("dataset", "num_days", d.num_days));
    d.test_days = static_cast<int>(c.get_int("dataset", "test_days", d.test_days));
    d.zipf_item = c.get_double("dataset", "zipf_item", d.zipf_item);
    d.zipf_user = c.get_double("dataset", "zipf_user", d.zipf_user);
    d.noise_sigma = c.get_double("dataset", "content_noise", d.noise_sigma);
    d.click.candidates =
        static_cast<int>(c.get_int("dataset", "candidate_size", d.click.candidates));
    d.click.choice_gamma = c.get_double("dataset", "choice_sharpness", d.click.choice_gamma);
    d.click.affinity_coef = c.get_double("dataset", "click_affinity", d.click.affinity_coef);
    d.click.popularity_coef = c.get_double("dataset", "click_popularity", d.click.popularity_coef);
    d.click.intercept = c.get_double("dataset", "click_bias", d.click.intercept);
    d.user_threshold =
        static_cast<int>(c.get_int("dataset", "tail_threshold_user", d.user_threshold));
    d.item_threshold =
        static_cast<int>(c.get_int("dataset", "tail_threshold_item", d.item_threshold));
    d.cooc_window = static_cast<int>(c.get_int("dataset", "cooc_window", d.cooc_window));
    d.cooc_min_count = static_cast<int>(c.get_int("dataset", "cooc_min_count", d.cooc_min_count));
    return d;
}

inline AlignConfig align_config_from(const Config& c) {
    AlignConfig a;
    a.epochs = static_cast<int>(c.get_int("align", "epochs", a.epochs));
    a.batch_pairs = static_cast<int>(c.get_int("align", "batch_size", a.batch_pairs));
    a.lr = c.get_double("align", "lr", a.lr);
    a.tau = c.get_double("align", "temperature", a.tau);
    a.hidden = static_cast<int>(c.get_int("align", "hidden_dim", a.hidden));
    a.d_rep = static_cast<int>(c.get_int("align", "rep_dim", a.d_rep));
    a.user_pool_decay = c.get_double("align", "history_decay", a.user_pool_decay);
    return a;
}

inline RqConfig rq_config_from(const Config& c) {
    RqConfig r;
    r.levels = static_cast<int>(c.get_int("quantize", "levels", r.levels));
    r.codebook_size = static_cast<int>(c.get_int("quantize", "codebook_size", r.codebook_size));
    r.d_q = static_cast<int>(c.get_int("quantize", "code_dim", r.d_q));
    r.epochs = static_cast<int>(c.get_int("quantize", "epochs", r.epochs));
    r.batch = static_cast<int>(c.get_int("quantize", "batch_size", r.batch));
    r.lr = c.get_double("quantize", "lr", r.lr);
    r.beta_commit = c.get_double("quantize", "beta", r.beta_commit);
    r.ema_decay = c.get_double("quantize", "ema_decay", r.ema_decay);
    r.reserve_zero = c.get_bool("quantize", "reserve_zero", r.reserve_zero);
    return r;
}

inline TrainConfig train_config_from(const Config& c, uint64_t seed) {
    TrainConfig t;
    t.seed = seed;
    t.epochs = static_cast<int>(c.get_int("train", "epochs", t.epochs));
    t.batch_size = static_cast<int>(c.get_int("train", "batch_size", t.batch_size));
    t.lr = c.get_double("train", "lr", t.lr);
    t.embed_dim = static_cast<int>(c.get_int("train", "embed_dim", t.embed_dim));
    t.init_std = c.get_double("train", "init_std", t.init_std);
    t.fusion_dim = static_cast<int>(c.get_int("train", "fusion_dim", t.fusion_dim));
    t.gate_hidden = static_cast<int>(c.get_int("train", "gate_hidden", t.gate_hidden));
    t.ranker_hidden = static_cast<int>(c.get_int("train", "ranker_hidden", t.ranker_hidden));
    t.history_cap = static_cast<int>(c.get_int("train", "history_cap", t.history_cap));
    t.cluster_history_cap =
        static_cast<int>(c.get_int("train", "cluster_history_cap", t.cluster_history_cap));
    t.scale_attention = c.get_bool("train", "scale_attention", t.scale_attention);
    t.lambda_head = c.get_double("train", "lambda_head", t.lambda_head);
    t.lambda_tail = c.get_double("train", "lambda_tail", t.lambda_tail);
    t.tau_transfer = c.get_double("train", "tau_transfer", t.tau_transfer);
    t.lambda_ortho = c.get_double("train", "lambda_ortho", t.lambda_ortho);
    t.flags.no_individual = c.get_bool("train", "no_individual", false);
    t.flags.no_cluster = c.get_bool("train", "no_cluster", false);
    t.flags.no_cgae_gate = c.get_bool("train", "no_cgae_gate", false);
    t.flags.no_instance_view = c.get_bool("train", "no_instance_view", false);
    t.flags.no_cluster_view = c.get_bool("train", "no_cluster_view", false);
    t.flags.no_hfa_gate = c.get_bool("train", "no_hfa_gate", false);
    return t;
}

inline uint64_t effective_seed(const Config& c, int64_t cli_seed) {
    if (cli_seed >= 0) return static_cast<uint64_t>(cli_seed);
    return static_cast<uint64_t>(c.get_int("dataset", "seed", 42));
}

// ---- time boundaries ------------------------------------------------------

inline int64_t train_end_ts(const DatasetConfig& d) {
    return static_cast<int64_t>(d.num_days - d.test_days) * kSecondsPerDay;
}

inline int64_t val_boundary_ts(const DatasetConfig& d) {
    return static_cast<int64_t>(d.num_days - d.test_days - 1) * kSecondsPerDay;
}

// ---- stages ---------------------------------------------------------------

inline RunManifest run_gen(const Config& cfg, uint64_t seed, const fsys::path& root,
                           bool force) {
    fsys::path dir = stage_dir(root, "gen");
    prepare_out_dir(dir, force);
    DatasetConfig dc = dataset_config_from(cfg);
    std::vector<ItemRecord> items = generate_catalog(dc, seed);
    std::vector<UserRecord> users = generate_users(dc, seed);
    std::vector<InteractionEvent> events = generate_interactions(items, users, dc, seed);
    auto [train, test] = time_split(events, dc.num_days, dc.test_days);
    (void)test;
    ActivityLabels labels = label_head_tail(train, dc.user_threshold, dc.item_threshold);

    write_items_jsonl(dir / "items.jsonl", items, kVersion, seed);
    write_users_jsonl(dir / "users.jsonl", users, kVersion, seed);
    write_events_tsv(dir / "events.tsv", events, kVersion, seed);
    write_labels_json(dir / "labels.json", labels, kVersion, seed);

    RunManifest m;
    m.stage = "gen";
    m.seed = seed;
    m.config_hash = cfg.hash();
    m.record_output(dir, "items.jsonl");
    m.record_output(dir, "users.jsonl");
    m.record_output(dir, "events.tsv");
    m.record_output(dir, "labels.json");
    write_manifest(dir, m);
    return m;
}

inline RunManifest run_align(const Config& cfg, uint64_t seed, const fsys::path& root,
                             bool force) {
    fsys::path gen_dir = stage_dir(root, "gen");
    RunManifest gen_m = read_manifest(gen_dir, "gen");
    verify_artifacts(gen_dir, gen_m, {"items.jsonl", "users.jsonl", "events.tsv"});

    fsys::path dir = stage_dir(root, "align");
    prepare_out_dir(dir, force);

    DatasetConfig dc = dataset_config_from(cfg);
    AlignConfig ac = align_config_from(cfg);
    std::vector<ItemRecord> items = read_items_jsonl(gen_dir / "items.jsonl");
    std::vector<UserRecord> users = read_users_jsonl(gen_dir / "users.jsonl");
    std::vector<InteractionEvent> events = read_events_tsv(gen_dir / "events.tsv");
    auto [train, test] = time_split(events, dc.num_days, dc.test_days);
    (void)test;
    std::vector<CoocPair> pairs = extract_cooccurrence(train, dc.cooc_window, dc.cooc_min_count);

    SemanticRepStore item_store;
    std::vector<double> epoch_losses;
    bool skipped = false;
    try {
        AlignResult res = train_item_encoder(items, pairs, ac, seed);
        item_store = std::move(res.items);
        epoch_losses = std::move(res.epoch_losses);
    } catch (const AlignmentSkipped&) {
        item_store = passthrough_item_reps(items);
        skipped = true;
    }
    SemanticRepStore user_store =
        derive_user_reps(users, item_store, ac.user_pool_decay, train_end_ts(dc));

    std::string encoder_tag = skipped ? "passthrough" : ("infonce-" + cfg.hash());
    write_reps_jsonl(dir / "item_reps.jsonl", item_store, encoder_tag, kVersion, seed);
    write_reps_jsonl(dir / "user_reps.jsonl", user_store, encoder_tag, kVersion, seed);

    json info;
    info["skipped"] = skipped;
    info["cooccurrence_pairs"] = pairs.size();
    info["epoch_losses"] = epoch_losses;
    write_text_file(dir / "align_info.json", info.dump(2) + "\n");

    RunManifest m;
    m.stage = "align";
    m.seed = seed;
    m.config_hash = cfg.hash();
    m.record_input(gen_m, "items.jsonl");
    m.record_input(gen_m, "users.jsonl");
    m.record_input(gen_m, "events.tsv");
    m.record_output(dir, "item_reps.jsonl");
    m.record_output(dir, "user_reps.jsonl");
    m.record_output(dir, "align_info.json");
    write_manifest(dir, m);
    return m;
}

namespace detail {

inline json cluster_stats_json(const ClusterStats& st) {
    json j;
    j["collision_rate"] = st.collision_rate;
    j["mean_cluster_size"] = st.mean_cluster_size;
    if (st.category_purity >= 0.0) j["category_purity"] = st.category_purity;
    json hist = json::object();
    for (const auto& [size, count] : st.size_histogram)
        hist[std::to_string(size)] = count;
    j["size_histogram"] = std::move(hist);
    return j;
}

}  // namespace detail

inline RunManifest run_quantize(const Config& cfg, uint64_t seed, const fsys::path& root,
                                bool force) {
    fsys::path gen_dir = stage_dir(root, "gen");
    RunManifest gen_m = read_manifest(gen_dir, "gen");
    verify_artifacts(gen_dir, gen_m, {"items.jsonl"});
    fsys::path align_dir = stage_dir(root, "align");
    RunManifest align_m = read_manifest(align_dir, "align");
    verify_artifacts(align_dir, align_m, {"item_reps.jsonl", "user_reps.jsonl"});

    fsys::path dir = stage_dir(root, "quantize");
    prepare_out_dir(dir, force);

    RqConfig rc = rq_config_from(cfg);
    SemanticRepStore item_reps = read_reps_jsonl(align_dir / "item_reps.jsonl", "item");
    SemanticRepStore user_reps = read_reps_jsonl(align_dir / "user_reps.jsonl", "user");

    QuantizerModel item_model = train_rqvae(item_reps, rc, seed);
    QuantizerModel user_model = train_rqvae(user_reps, rc, seed);
    std::map<int, SemanticID> item_sids = assign_semantic_ids(item_reps, item_model);
    std::map<int, SemanticID> user_sids = assign_semantic_ids(user_reps, user_model);

    write_codebooks_json(dir / "codebooks.json", item_model, user_model, kVersion, seed);
    write_semantic_ids_tsv(dir / "semantic_ids.tsv", item_sids, user_sids, kVersion, seed);

    std::vector<ItemRecord> items = read_items_jsonl(gen_dir / "items.jsonl");
    std::map<int, int> categories;
    for (const auto& it : items) categories[it.id] = it.category;

    json info;
    info["item"] = {
        {"full", detail::cluster_stats_json(
                     cluster_stats(build_cluster_index(item_sids, rc.levels), &categories))},
        {"level1", detail::cluster_stats_json(
                       cluster_stats(build_cluster_index(item_sids, 1), &categories))},
        {"epoch_losses", item_model.epoch_losses},
    };
    info["user"] = {
        {"full",
         detail::cluster_stats_json(cluster_stats(build_cluster_index(user_sids, rc.levels)))},
        {"level1",
         detail::cluster_stats_json(cluster_stats(build_cluster_index(user_sids, 1)))},
        {"epoch_losses", user_model.epoch_losses},
    };
    write_text_file(dir / "quantize_info.json", info.dump(2) + "\n");

    RunManifest m;
    m.stage = "quantize";
    m.seed = seed;
    m.config_hash = cfg.hash();
    m.record_input(gen_m, "items.jsonl");
    m.record_input(align_m, "item_reps.jsonl");
    m.record_input(align_m, "user_reps.jsonl");
    m.record_output(dir, "codebooks.json");
    m.record_output(dir, "semantic_ids.tsv");
    m.record_output(dir, "quantize_info.json");
    write_manifest(dir, m);
    return m;
}

// Reads every upstream artifact the trainer needs, verifying the manifest
// chain along the way.
struct LoadedStages {
    DataBundle bundle;
    RunManifest gen_m, align_m, quant_m;
};

inline LoadedStages load_stages(const Config& cfg, const fsys::path& root) {
    LoadedStages ls;
    fsys::path gen_dir = stage_dir(root, "gen");
    ls.gen_m = read_manifest(gen_dir, "gen");
    verify_artifacts(gen_dir, ls.gen_m,
                     {"items.jsonl", "users.jsonl", "events.tsv", "labels.json"});
    fsys::path align_dir = stage_dir(root, "align");
    ls.align_m = read_manifest(align_dir, "align");
    verify_artifacts(align_dir, ls.align_m, {"item_reps.jsonl", "user_reps.jsonl"});
    fsys::path quant_dir = stage_dir(root, "quantize");
    ls.quant_m = read_manifest(quant_dir, "quantize");
    verify_artifacts(quant_dir, ls.quant_m, {"semantic_ids.tsv"});

    DatasetConfig dc = dataset_config_from(cfg);
    DataBundle& b = ls.bundle;
    b.items = read_items_jsonl(gen_dir / "items.jsonl");
    b.users = read_users_jsonl(gen_dir / "users.jsonl");
    std::vector<InteractionEvent> events = read_events_tsv(gen_dir / "events.tsv");
    auto [train, test] = time_split(events, dc.num_days, dc.test_days);
    b.train_events = std::move(train);
    b.test_events = std::move(test);
    b.val_boundary_ts = val_boundary_ts(dc);
    b.labels = read_labels_json(gen_dir / "labels.json");
    b.item_reps = read_reps_jsonl(align_dir / "item_reps.jsonl", "item");
    b.user_reps = read_reps_jsonl(align_dir / "user_reps.jsonl", "user");
    auto sids = read_semantic_ids_tsv(quant_dir / "semantic_ids.tsv");
    b.item_sids = std::move(sids.first);
    b.user_sids = std::move(sids.second);
    return ls;
}

inline RunManifest run_train(const Config& cfg, uint64_t seed, const fsys::path& root,
                             bool force) {
    LoadedStages ls = load_stages(cfg, root);
    fsys::path dir = stage_dir(root, "train");
    prepare_out_dir(dir, force);

    TrainConfig tc = train_config_from(cfg, seed);
    Trainer trainer(tc, ls.bundle, cfg.hash());
    std::ostringstream metrics;
    if (tc.epochs == 0) {
        trainer.train();
        metrics << epoch_record_json(trainer.history().back()).dump() << "\n";
        trainer.save_checkpoint(dir / "checkpoint.bin");
    } else {
        while (trainer.completed_epochs() < tc.epochs) {
            EpochRecord rec = trainer.run_epoch();
            metrics << epoch_record_json(rec).dump() << "\n";
            trainer.save_checkpoint(dir / "checkpoint.bin");
        }
    }
    write_text_file(dir / "metrics.jsonl", metrics.str());

    json info;
    info["param_count"] = trainer.model().param_count();
    info["epochs"] = trainer.completed_epochs();
    info["gradient_events"] = trainer.grad_events().size();
    info["validation_events"] = trainer.val_events().size();
    if (!trainer.history().empty()) {
        const EpochRecord& last = trainer.history().back();
        info["final_loss"] = {{"main", last.mean_main}, {"total", last.mean_total}};
    }
    write_text_file(dir / "train_info.json", info.dump(2) + "\n");

    RunManifest m;
    m.stage = "train";
    m.seed = seed;
    m.config_hash = cfg.hash();
    m.record_input(ls.gen_m, "events.tsv");
    m.record_input(ls.gen_m, "labels.json");
    m.record_input(ls.align_m, "item_reps.jsonl");
    m.record_input(ls.align_m, "user_reps.jsonl");
    m.record_input(ls.quant_m, "semantic_ids.tsv");
    m.record_output(dir, "checkpoint.bin");
    m.record_output(dir, "metrics.jsonl");
    m.record_output(dir, "train_info.json");
    write_manifest(dir, m);
    return m;
}

// Scores a fixed event list with a frozen model, optionally fanning out over
// threads; output order is the input order regardless of thread count.
inline std::vector<ScoredSample> score_parallel(const Trainer& trainer,
                                                const std::vector<InteractionEvent>& events,
                                                int threads) {
    if (threads <= 1) return trainer.score_events(events);
    std::vector<ScoredSample> out(events.size());
    std::vector<std::thread> pool;
    size_t chunk = (events.size() + threads - 1) / static_cast<size_t>(threads);
    for (int t = 0; t < threads; ++t) {
        size_t lo = static_cast<size_t>(t) * chunk;
        size_t hi = std::min(events.size(), lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi]() {
            for (size_t k = lo; k < hi; ++k) {
                const InteractionEvent& ev = events[k];
                ScoredSample s;
                s.user_id = ev.user_id;
                s.item_id = ev.item_id;
                s.label = ev.label;
                s.score = trainer.score_event_plain(ev);
                s.user_tail = false;  // filled below from labels
                out[k] = s;
            }
        });
    }
    for (auto& th : pool) th.join();
    return out;
}

inline RunManifest run_eval(const Config& cfg, uint64_t seed, const fsys::path& root,
                            bool force, int threads = 1) {
    LoadedStages ls = load_stages(cfg, root);
    fsys::path train_dir = stage_dir(root, "train");
    RunManifest train_m = read_manifest(train_dir, "train");
    verify_artifacts(train_dir, train_m, {"checkpoint.bin"});

    fsys::path dir = stage_dir(root, "eval");
    prepare_out_dir(dir, force);

    TrainConfig tc = train_config_from(cfg, seed);
    Trainer trainer(tc, ls.bundle, cfg.hash());
    trainer.load_checkpoint(train_dir / "checkpoint.bin");
    trainer.refresh_cluster_means();

    if (ls.bundle.test_events.empty()) throw DataError("eval: empty test split");
    std::vector<ScoredSample> samples = score_parallel(trainer, ls.bundle.test_events, threads);
    for (auto& s : samples) {
        s.user_tail = ls.bundle.labels.user_tail(s.user_id);
        s.item_tail = ls.bundle.labels.item_tail(s.item_id);
        s.longtail = s.user_tail || s.item_tail;
    }
    MetricReport rep = slice_report(samples);

    write_scores_tsv(dir / "scores.tsv", samples, kVersion, seed);
    json report;
    report["meta"] = {{"kind", "report"}, {"version", kVersion}, {"seed", seed},
                      {"config_hash", cfg.hash()}};
    report["metrics"] = metric_report_json(rep);
    write_text_file(dir / "report.json", report.dump(2) + "\n");
    if (cfg.get_bool("eval", "write_text_report", true))
        write_text_file(dir / "report.txt", metric_report_text(rep));

    RunManifest m;
    m.stage = "eval";
    m.seed = seed;
    m.config_hash = cfg.hash();
    m.record_input(ls.gen_m, "events.tsv");
    m.record_input(ls.gen_m, "labels.json");
    m.record_input(train_m, "checkpoint.bin");
    m.record_output(dir, "scores.tsv");
    m.record_output(dir, "report.json");
    if (cfg.get_bool("eval", "write_text_report", true)) m.record_output(dir, "report.txt");
    write_manifest(dir, m);
    return m;
}

inline const std::vector<std::pair<std::string, AblationFlags>>& ablation_variants() {
    static const std::vector<std::pair<std::string, AblationFlags>> v = [] {
        std::vector<std::pair<std::string, AblationFlags>> out;
        AblationFlags f;
        f = {}; f.no_individual = true;    out.emplace_back("no_individual_emb", f);
        f = {}; f.no_cluster = true;       out.emplace_back("no_cluster_emb", f);
        f = {}; f.no_cgae_gate = true;     out.emplace_back("no_cgae_gate", f);
        f = {}; f.no_instance_view = true; out.emplace_back("no_instance_view", f);
        f = {}; f.no_cluster_view = true;  out.emplace_back("no_cluster_view", f);
        f = {}; f.no_hfa_gate = true;      out.emplace_back("no_hfa_gate", f);
        return out;
    }();
    return v;
}

// Trains one configuration in memory and reports test-set metrics.
inline MetricReport ablation_run(const TrainConfig& tc, const DataBundle& bundle,
                                 const std::string& config_hash) {
    Trainer trainer(tc, bundle, config_hash);
    trainer.train();
    trainer.refresh_cluster_means();
    std::vector<ScoredSample> samples = trainer.score_events(bundle.test_events);
    return slice_report(samples);
}

inline RunManifest run_ablate(const Config& cfg, uint64_t seed, const fsys::path& root,
                              bool force) {
    LoadedStages ls = load_stages(cfg, root);
    fsys::path dir = stage_dir(root, "ablate");
    prepare_out_dir(dir, force);
    if (ls.bundle.test_events.empty()) throw DataError("ablate: empty test split");

    TrainConfig base = train_config_from(cfg, seed);
    base.epochs = static_cast<int>(cfg.get_int("ablate", "train_epochs", base.epochs));
    int num_seeds = static_cast<int>(cfg.get_int("ablate", "seeds", 1));
    if (num_seeds < 1) throw ConfigError("ablate: seeds must be >= 1");

    json runs = json::array();
    std::ostringstream text;
    std::map<std::string, int> tail_auc_wins;  // variant -> seeds where full >= variant

    for (int s = 0; s < num_seeds; ++s) {
        uint64_t run_seed = derive_seed(seed, "ablate-seed:" + std::to_string(s));
        TrainConfig tc = base;
        tc.seed = run_seed;
        tc.flags = AblationFlags{};
        MetricReport full = ablation_run(tc, ls.bundle, cfg.hash());

        std::vector<std::pair<std::string, MetricReport>> variants;
        for (const auto& [name, flags] : ablation_variants()) {
            TrainConfig vc = base;
            vc.seed = run_seed;
            vc.flags = flags;
            MetricReport rep = ablation_run(vc, ls.bundle, cfg.hash());
            if (full.tail.auc_defined && rep.tail.auc_defined &&
                full.tail.auc >= rep.tail.auc)
                tail_auc_wins[name] += 1;
            variants.emplace_back(name, rep);
        }

        json entry;
        entry["seed_index"] = s;
        entry["train_seed"] = run_seed;
        entry["deltas"] = ablation_report_json(full, variants);
        runs.push_back(std::move(entry));
        text << "seed " << s << " (train seed " << run_seed << ")\n"
             << ablation_report_text(full, variants) << "\n";
    }

    json out;
    out["meta"] = {{"kind", "ablation"}, {"version", kVersion}, {"seed", seed},
                   {"config_hash", cfg.hash()}, {"seeds", num_seeds}};
    json wins = json::object();
    for (const auto& [name, flags] : ablation_variants()) {
        (void)flags;
        wins[name] = tail_auc_wins.count(name) ? tail_auc_wins[name] : 0;
    }
    out["tail_auc_full_wins"] = std::move(wins);
    out["runs"] = std::move(runs);
    write_text_file(dir / "ablation_runs.json", out.dump(2) + "\n");
    write_text_file(dir / "ablation_report.txt", text.str());

    RunManifest m;
    m.stage = "ablate";
    m.seed = seed;
    m.config_hash = cfg.hash();
    m.record_input(ls.gen_m, "events.tsv");
    m.record_input(ls.align_m, "item_reps.jsonl");
    m.record_input(ls.quant_m, "semantic_ids.tsv");
    m.record_output(dir, "ablation_runs.json");
    m.record_output(dir, "ablation_report.txt");
    write_manifest(dir, m);
    return m;
}

}  // namespace ltrec
