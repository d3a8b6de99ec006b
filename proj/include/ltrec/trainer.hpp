#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ltrec/align.hpp"
#include "ltrec/autodiff.hpp"
#include "ltrec/cgae.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/hfa.hpp"
#include "ltrec/metrics.hpp"
#include "ltrec/nn.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/rqvae.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

struct AblationFlags {
    bool no_individual = false;
    bool no_cluster = false;
    bool no_cgae_gate = false;
    bool no_instance_view = false;
    bool no_cluster_view = false;
    bool no_hfa_gate = false;

    void validate() const {
        if (no_individual && no_cluster)
            throw ConfigError("ablation: cannot drop both embedding tables");
        if (no_instance_view && no_cluster_view)
            throw ConfigError("ablation: cannot drop both feature views");
    }
};

struct TrainConfig {
    uint64_t seed = 42;
    int epochs = 5;
    int batch_size = 256;
    double lr = 1e-3;
    int embed_dim = 16;  // m
    double init_std = 0.01;
    int fusion_dim = 32;
    int gate_hidden = 8;
    int ranker_hidden = 64;
    int history_cap = 50;          // L
    int cluster_history_cap = 100; // L_c
    bool scale_attention = false;
    double lambda_head = 0.1;   // head-anchored transfer weight
    double lambda_tail = 1.0;   // tail-anchored transfer weight
    double tau_transfer = 0.1;
    double lambda_ortho = 0.1;
    AblationFlags flags;

    void validate() const {
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (lr <= 0) throw ConfigError("train: lr must be positive");
        if (embed_dim < 1 || fusion_dim < 1 || gate_hidden < 1 || ranker_hidden < 1)
            throw ConfigError("train: layer dims must be positive");
        if (history_cap < 1 || cluster_history_cap < 1)
            throw ConfigError("train: history caps must be >= 1");
        if (lambda_head < 0 || lambda_tail < 0 || lambda_ortho < 0)
            throw ConfigError("train: loss weights must be nonnegative");
        if (tau_transfer <= 0) throw ConfigError("train: tau_transfer must be positive");
        flags.validate();
    }
};

// Everything the trainer reads. All fields immutable during training; slice
// flags and activity features come from the train split only.
struct DataBundle {
    std::vector<ItemRecord> items;
    std::vector<UserRecord> users;
    std::vector<InteractionEvent> train_events;  // includes the validation day
    std::vector<InteractionEvent> test_events;
    int64_t val_boundary_ts = 0;  // train events at/after this are validation-only
    ActivityLabels labels;
    SemanticRepStore item_reps;  // content-aligned item representations
    SemanticRepStore user_reps;  // history-derived user representations
    std::map<int, SemanticID> item_sids, user_sids;
};

inline void validate_bundle(const DataBundle& d) {
    if (d.items.empty() || d.users.empty()) throw DataError("bundle: empty catalog or user set");
    if (d.train_events.empty()) throw DataError("bundle: no training events");
    for (const auto& it : d.items) {
        if (d.item_reps.reps.count(it.id) == 0)
            throw DataError("bundle: item " + std::to_string(it.id) + " has no representation");
        if (d.item_sids.count(it.id) == 0)
            throw DataError("bundle: item " + std::to_string(it.id) + " has no semantic id");
    }
    for (const auto& u : d.users) {
        if (d.user_reps.reps.count(u.id) == 0)
            throw DataError("bundle: user " + std::to_string(u.id) + " has no representation");
        if (d.user_sids.count(u.id) == 0)
            throw DataError("bundle: user " + std::to_string(u.id) + " has no semantic id");
    }
}

// Parameter holder: dual embedding tables per entity kind, the two activity
// gates, and the aggregation network. Pieces excluded by ablation flags are
// never constructed, so parameter counts shift exactly with the flags.
class Model {
public:
    Model() = default;

    Model(const TrainConfig& tc, const DataBundle& data, Rng& rng) : tc_(tc) {
        tc.validate();
        std::vector<int> user_ids, item_ids;
        for (const auto& u : data.users) user_ids.push_back(u.id);
        for (const auto& it : data.items) item_ids.push_back(it.id);
        std::sort(user_ids.begin(), user_ids.end());
        std::sort(item_ids.begin(), item_ids.end());

        const bool with_cluster = !tc.flags.no_cluster;
        const bool with_indiv = !tc.flags.no_individual;
        users_ = DualEmbedding(user_ids, data.user_sids, tc.embed_dim, tc.init_std,
                               with_cluster, with_indiv, rng);
        items_ = DualEmbedding(item_ids, data.item_sids, tc.embed_dim, tc.init_std,
                               with_cluster, with_indiv, rng);

        with_g1_ = with_cluster && with_indiv && !tc.flags.no_cgae_gate;
        if (with_g1_) {
            g1_user_ = Mlp("cgae.gate_user", {3, tc.gate_hidden, 1}, rng, /*zero_final=*/true);
            g1_item_ = Mlp("cgae.gate_item", {3, tc.gate_hidden, 1}, rng, /*zero_final=*/true);
        }

        user_rep_dim_ = data.user_reps.dim;
        item_rep_dim_ = data.item_reps.dim;
        FeatureLayout inst_layout("instance",
                                  {{"user_rep", user_rep_dim_},
                                   {"user_stats", 3},
                                   {"user_fused_emb", tc.embed_dim},
                                   {"item_rep", item_rep_dim_},
                                   {"item_stats", 3},
                                   {"item_fused_emb", tc.embed_dim},
                                   {"context", tc.embed_dim}});
        FeatureLayout clust_layout("cluster",
                                   {{"user_cluster_mean", user_width()},
                                    {"item_cluster_mean", item_width()},
                                    {"cluster_context", tc.embed_dim}});
        HfaConfig hcfg;
        hcfg.fusion_dim = tc.fusion_dim;
        hcfg.ranker_hidden = tc.ranker_hidden;
        hcfg.gate_hidden = tc.gate_hidden;
        hcfg.instance_cap = tc.history_cap;
        hcfg.cluster_cap = tc.cluster_history_cap;
        hcfg.scale_attention = tc.scale_attention;
        hfa_ = HfaNet(hcfg, std::move(inst_layout), std::move(clust_layout), 9, tc.embed_dim,
                      !tc.flags.no_instance_view, !tc.flags.no_cluster_view,
                      !tc.flags.no_hfa_gate, rng);
    }

    const TrainConfig& tc() const { return tc_; }
    DualEmbedding& users() { return users_; }
    DualEmbedding& items() { return items_; }
    const DualEmbedding& users() const { return users_; }
    const DualEmbedding& items() const { return items_; }
    bool with_g1() const { return with_g1_; }
    Mlp& g1_user() { return g1_user_; }
    Mlp& g1_item() { return g1_item_; }
    const Mlp& g1_user() const { return g1_user_; }
    const Mlp& g1_item() const { return g1_item_; }
    HfaNet& hfa() { return hfa_; }
    const HfaNet& hfa() const { return hfa_; }

    int user_width() const { return user_rep_dim_ + 3 + tc_.embed_dim; }
    int item_width() const { return item_rep_dim_ + 3 + tc_.embed_dim; }

    CgaeConfig cgae_cfg() const {
        CgaeConfig c;
        c.m = tc_.embed_dim;
        c.init_std = tc_.init_std;
        c.lambda1 = tc_.lambda_head;
        c.lambda2 = tc_.lambda_tail;
        c.tau_t = tc_.tau_transfer;
        return c;
    }

    // All non-table parameters, in a fixed order used by checkpoints.
    std::vector<ParamBlock*> param_blocks() {
        std::vector<ParamBlock*> out;
        auto push_mlp = [&](Mlp& m) {
            for (ParamBlock* b : m.blocks()) out.push_back(b);
        };
        if (with_g1_) {
            push_mlp(g1_user_);
            push_mlp(g1_item_);
        }
        if (hfa_.with_instance()) {
            push_mlp(hfa_.proj_inst());
            out.push_back(&hfa_.no_ctx_inst());
        }
        if (hfa_.with_cluster()) {
            push_mlp(hfa_.proj_clust());
            out.push_back(&hfa_.no_ctx_clust());
        }
        if (hfa_.with_gate()) push_mlp(hfa_.gate());
        push_mlp(hfa_.ranker());
        return out;
    }

    int64_t param_count() const {
        int64_t n = users_.param_count() + items_.param_count() + hfa_.param_count();
        if (with_g1_) n += g1_user_.param_count() + g1_item_.param_count();
        return n;
    }

private:
    TrainConfig tc_;
    DualEmbedding users_, items_;
    bool with_g1_ = false;
    Mlp g1_user_, g1_item_;
    HfaNet hfa_;
    int user_rep_dim_ = 0;
    int item_rep_dim_ = 0;
};

struct StepLog {
    int epoch = 0;
    int step = 0;
    double l_main = 0.0;
    double l_trans_user = 0.0;
    double l_trans_item = 0.0;
    double l_ortho = 0.0;  // already weighted by lambda_ortho
    double total = 0.0;
    int pairs_user = 0;
    int pairs_item = 0;
    int skipped_grads = 0;
};

struct EpochRecord {
    int epoch = 0;  // 1-based count of completed epochs; 0 for the eval-only record
    int batches = 0;
    double mean_main = 0.0;
    double mean_trans_user = 0.0;
    double mean_trans_item = 0.0;
    double mean_ortho = 0.0;
    double mean_total = 0.0;
    int pairs_user = 0;
    int pairs_item = 0;
    int skipped_grads = 0;
    MetricReport val;
};

inline json epoch_record_json(const EpochRecord& r) {
    json j;
    j["epoch"] = r.epoch;
    j["batches"] = r.batches;
    j["loss"] = {
        {"main", r.mean_main},
        {"transfer_user", r.mean_trans_user},
        {"transfer_item", r.mean_trans_item},
        {"ortho", r.mean_ortho},
        {"total", r.mean_total},
    };
    j["transfer_pairs"] = {{"user", r.pairs_user}, {"item", r.pairs_item}};
    j["skipped_grads"] = r.skipped_grads;
    j["val"] = metric_report_json(r.val);
    return j;
}

inline EpochRecord epoch_record_from_json(const json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.batches = j.at("batches").get<int>();
    r.mean_main = j.at("loss").at("main").get<double>();
    r.mean_trans_user = j.at("loss").at("transfer_user").get<double>();
    r.mean_trans_item = j.at("loss").at("transfer_item").get<double>();
    r.mean_ortho = j.at("loss").at("ortho").get<double>();
    r.mean_total = j.at("loss").at("total").get<double>();
    r.pairs_user = j.at("transfer_pairs").at("user").get<int>();
    r.pairs_item = j.at("transfer_pairs").at("item").get<int>();
    r.skipped_grads = j.at("skipped_grads").get<int>();
    r.val = metric_report_from_json(j.at("val"));
    return r;
}

namespace detail {

inline void ck_write_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void ck_write_u64(std::ostream& out, uint64_t v) { ck_write_bytes(out, &v, 8); }

inline void ck_write_string(std::ostream& out, const std::string& s) {
    ck_write_u64(out, s.size());
    ck_write_bytes(out, s.data(), s.size());
}

inline void ck_write_doubles(std::ostream& out, const std::vector<double>& v) {
    ck_write_u64(out, v.size());
    ck_write_bytes(out, v.data(), v.size() * sizeof(double));
}

inline void ck_write_i64s(std::ostream& out, const std::vector<int64_t>& v) {
    ck_write_u64(out, v.size());
    ck_write_bytes(out, v.data(), v.size() * sizeof(int64_t));
}

inline void ck_read_bytes(std::istream& in, void* p, size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in) throw DataError("checkpoint: truncated file");
}

inline uint64_t ck_read_u64(std::istream& in) {
    uint64_t v = 0;
    ck_read_bytes(in, &v, 8);
    return v;
}

inline std::string ck_read_string(std::istream& in) {
    uint64_t n = ck_read_u64(in);
    if (n > (1ull << 32)) throw DataError("checkpoint: implausible string length");
    std::string s(n, '\0');
    if (n) ck_read_bytes(in, s.data(), n);
    return s;
}

inline std::vector<double> ck_read_doubles(std::istream& in) {
    uint64_t n = ck_read_u64(in);
    if (n > (1ull << 32)) throw DataError("checkpoint: implausible array length");
    std::vector<double> v(n);
    if (n) ck_read_bytes(in, v.data(), n * sizeof(double));
    return v;
}

inline std::vector<int64_t> ck_read_i64s(std::istream& in) {
    uint64_t n = ck_read_u64(in);
    if (n > (1ull << 32)) throw DataError("checkpoint: implausible array length");
    std::vector<int64_t> v(n);
    if (n) ck_read_bytes(in, v.data(), n * sizeof(int64_t));
    return v;
}

inline void ck_write_tensor(std::ostream& out, const Tensor& t) {
    ck_write_u64(out, static_cast<uint64_t>(t.rows));
    ck_write_u64(out, static_cast<uint64_t>(t.cols));
    ck_write_doubles(out, t.v);
}

inline Tensor ck_read_tensor(std::istream& in) {
    int rows = static_cast<int>(ck_read_u64(in));
    int cols = static_cast<int>(ck_read_u64(in));
    std::vector<double> v = ck_read_doubles(in);
    if (static_cast<int64_t>(v.size()) != static_cast<int64_t>(rows) * cols)
        throw DataError("checkpoint: tensor payload does not match its shape");
    Tensor t(rows, cols);
    t.v = std::move(v);
    return t;
}

}  // namespace detail

// Drives training: per-epoch cluster-mean refresh, permutation batching over
// the gradient split, the composed objective, validation metrics, and
// checkpoints that resume bitwise at epoch granularity.
class Trainer {
public:
    Trainer(const TrainConfig& tc, const DataBundle& data, std::string config_hash = "")
        : tc_(tc), data_(&data), config_hash_(std::move(config_hash)) {
        tc_.validate();
        validate_bundle(data);
        Rng init_rng(derive_seed(tc_.seed, "train-init"));
        model_ = Model(tc_, data, init_rng);

        for (const auto& e : data.train_events)
            (e.ts < data.val_boundary_ts ? grad_events_ : val_events_).push_back(e);
        if (grad_events_.empty())
            throw DataError("trainer: no events before the validation boundary");

        user_hist_ = UserBehaviorIndex(data.train_events);
        if (model_.hfa().with_cluster())
            cluster_hist_ = ClusterBehaviorIndex(data.train_events, data.user_sids, data.item_sids);

        int depth = static_cast<int>(data.user_sids.begin()->second.ids.size());
        user_clusters_ = build_cluster_index(data.user_sids, depth);
        depth = static_cast<int>(data.item_sids.begin()->second.ids.size());
        item_clusters_ = build_cluster_index(data.item_sids, depth);

        build_injection_lists();
    }

    Model& model() { return model_; }
    const Model& model() const { return model_; }
    const TrainConfig& tc() const { return tc_; }
    int completed_epochs() const { return epoch_; }
    const std::vector<EpochRecord>& history() const { return history_; }
    const std::vector<StepLog>& step_logs() const { return step_logs_; }
    const std::vector<InteractionEvent>& grad_events() const { return grad_events_; }
    const std::vector<InteractionEvent>& val_events() const { return val_events_; }

    // Cluster-view feature means under the current parameters; entered into
    // batch graphs as constants until the next refresh.
    void refresh_cluster_means() {
        if (!model_.hfa().with_cluster()) return;
        user_means_ = compute_cluster_means(
            user_clusters_, [&](int id) { return user_feat_plain(id); });
        item_means_ = compute_cluster_means(
            item_clusters_, [&](int id) { return item_feat_plain(id); });
    }

    EpochRecord run_epoch() {
        int e = epoch_;
        refresh_cluster_means();
        Rng rng(derive_seed(tc_.seed, "epoch:" + std::to_string(e)));
        std::vector<size_t> perm = rng.permutation(grad_events_.size());

        EpochRecord rec;
        int nb = static_cast<int>((perm.size() + tc_.batch_size - 1) / tc_.batch_size);
        for (int b = 0; b < nb; ++b) {
            size_t lo = static_cast<size_t>(b) * tc_.batch_size;
            size_t hi = std::min(perm.size(), lo + tc_.batch_size);
            std::vector<InteractionEvent> batch;
            batch.reserve(hi - lo);
            for (size_t k = lo; k < hi; ++k) batch.push_back(grad_events_[perm[k]]);
            StepLog log = train_batch(batch, e, b, rng);
            step_logs_.push_back(log);
            rec.mean_main += log.l_main;
            rec.mean_trans_user += log.l_trans_user;
            rec.mean_trans_item += log.l_trans_item;
            rec.mean_ortho += log.l_ortho;
            rec.mean_total += log.total;
            rec.pairs_user += log.pairs_user;
            rec.pairs_item += log.pairs_item;
            rec.skipped_grads += log.skipped_grads;
        }
        rec.batches = nb;
        if (nb > 0) {
            rec.mean_main /= nb;
            rec.mean_trans_user /= nb;
            rec.mean_trans_item /= nb;
            rec.mean_ortho /= nb;
            rec.mean_total /= nb;
        }
        rec.val = slice_report(score_events(val_events_));
        epoch_ += 1;
        rec.epoch = epoch_;
        history_.push_back(rec);
        return rec;
    }

    // Runs the remaining epochs; with epochs = 0 produces the single
    // initialization-state record.
    std::vector<EpochRecord> train() {
        if (tc_.epochs == 0 && history_.empty()) {
            refresh_cluster_means();
            EpochRecord rec;
            rec.val = slice_report(score_events(val_events_));
            history_.push_back(rec);
        }
        while (epoch_ < tc_.epochs) run_epoch();
        return history_;
    }

    // ---- scoring ----------------------------------------------------------

    double score_event_plain(const InteractionEvent& ev) const {
        Tensor e_u = fused_plain(/*user=*/true, ev.user_id);
        Tensor e_i = fused_plain(/*user=*/false, ev.item_id);
        const HfaNet& net = model_.hfa();
        require_means_fresh();

        Tensor p_inst, p_clust;
        if (net.with_instance()) {
            std::vector<Tensor> seq = behavior_vectors_plain(
                user_hist_.history_before(ev.user_id, ev.ts, tc_.history_cap));
            Tensor s = attention_plain(e_i, seq, net.no_ctx_inst().value);
            Tensor h = concat_plain({user_feat_with(e_u, ev.user_id),
                                     item_feat_with(e_i, ev.item_id), s});
            p_inst = net.proj_inst().forward_plain(h);
        }
        if (net.with_cluster()) {
            std::vector<Tensor> seq = behavior_vectors_plain(retrieve_cluster(ev));
            Tensor s = attention_plain(e_i, seq, net.no_ctx_clust().value);
            Tensor h = concat_plain({user_means_.at(data_->user_sids.at(ev.user_id).ids),
                                     item_means_.at(data_->item_sids.at(ev.item_id).ids), s});
            p_clust = net.proj_clust().forward_plain(h);
        }

        Tensor f;
        if (net.with_instance() && net.with_cluster()) {
            double alpha = 0.5;
            if (net.with_gate()) {
                Tensor gf = Tensor::vec(gate2_features(ev.user_id, ev.item_id));
                alpha = stable_sigmoid_plain(net.gate().forward_plain(gf).v[0]);
            }
            f = Tensor(p_inst.rows, 1);
            for (int k = 0; k < f.rows; ++k)
                f.v[k] = alpha * p_clust.v[k] + (-1.0 * alpha + 1.0) * p_inst.v[k];
        } else {
            f = net.with_instance() ? p_inst : p_clust;
        }
        double logit = net.ranker().forward_plain(f).v[0];
        return stable_sigmoid_plain(logit);
    }

    // Same computation through the graph; used to cross-check the two paths.
    double score_event_graph(const InteractionEvent& ev) {
        Graph g;
        ParamContext ctx(g);
        EmbeddingBatchCache ecache(g, /*trainable=*/false);
        BatchBuild bb{&g, &ctx, &ecache, {}, {}};
        Value logit = event_logit(bb, ev);
        return sigmoid(logit).scalar();
    }

    std::vector<ScoredSample> score_events(const std::vector<InteractionEvent>& events) const {
        std::vector<ScoredSample> out;
        out.reserve(events.size());
        for (const auto& ev : events) {
            ScoredSample s;
            s.user_id = ev.user_id;
            s.item_id = ev.item_id;
            s.label = ev.label;
            s.score = score_event_plain(ev);
            s.user_tail = data_->labels.user_tail(ev.user_id);
            s.item_tail = data_->labels.item_tail(ev.item_id);
            s.longtail = s.user_tail || s.item_tail;
            out.push_back(s);
        }
        return out;
    }

    // ---- checkpointing ----------------------------------------------------

    void save_checkpoint(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot open for writing: " + path.string());
        out.write(kCkptMagic, 8);
        detail::ck_write_string(out, config_hash_);
        detail::ck_write_u64(out, static_cast<uint64_t>(epoch_));
        detail::ck_write_u64(out, tc_.seed);

        json hist = json::array();
        for (const auto& r : history_) hist.push_back(epoch_record_json(r));
        detail::ck_write_string(out, hist.dump());

        std::vector<std::pair<std::string, const EmbeddingTable*>> tables = table_list();
        detail::ck_write_u64(out, tables.size());
        for (const auto& [name, t] : tables) {
            detail::ck_write_string(out, name);
            detail::ck_write_u64(out, static_cast<uint64_t>(t->rows()));
            detail::ck_write_u64(out, static_cast<uint64_t>(t->dim()));
            detail::ck_write_doubles(out, t->values());
            detail::ck_write_doubles(out, t->adam_m());
            detail::ck_write_doubles(out, t->adam_v());
            detail::ck_write_i64s(out, t->adam_steps());
        }

        std::vector<ParamBlock*> blocks = const_cast<Model&>(model_).param_blocks();
        detail::ck_write_u64(out, blocks.size());
        for (const ParamBlock* b : blocks) {
            detail::ck_write_string(out, b->name);
            detail::ck_write_tensor(out, b->value);
            detail::ck_write_tensor(out, b->state.m);
            detail::ck_write_tensor(out, b->state.v);
            detail::ck_write_u64(out, static_cast<uint64_t>(b->state.step));
        }
        if (!out) throw DataError("checkpoint: write failed: " + path.string());
    }

    void load_checkpoint(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("checkpoint: cannot open: " + path.string());
        char magic[8];
        detail::ck_read_bytes(in, magic, 8);
        if (std::string(magic, 8) != kCkptMagic)
            throw DataError("checkpoint: bad magic in " + path.string());
        std::string stored_hash = detail::ck_read_string(in);
        if (!config_hash_.empty() && !stored_hash.empty() && stored_hash != config_hash_)
            throw ConfigError("checkpoint: config hash " + stored_hash +
                              " does not match current config " + config_hash_);
        epoch_ = static_cast<int>(detail::ck_read_u64(in));
        uint64_t seed = detail::ck_read_u64(in);
        if (seed != tc_.seed)
            throw ConfigError("checkpoint: seed mismatch (" + std::to_string(seed) + " vs " +
                              std::to_string(tc_.seed) + ")");

        history_.clear();
        json hist = json::parse(detail::ck_read_string(in));
        for (const auto& r : hist) history_.push_back(epoch_record_from_json(r));

        auto tables = table_list_mut();
        uint64_t ntables = detail::ck_read_u64(in);
        if (ntables != tables.size())
            throw ConfigError("checkpoint: table count mismatch (flags differ?)");
        for (auto& [name, t] : tables) {
            std::string got = detail::ck_read_string(in);
            if (got != name)
                throw ConfigError("checkpoint: expected table `" + name + "`, found `" + got + "`");
            int rows = static_cast<int>(detail::ck_read_u64(in));
            int dim = static_cast<int>(detail::ck_read_u64(in));
            if (rows != t->rows() || dim != t->dim())
                throw ConfigError("checkpoint: table `" + name + "` shape mismatch");
            t->values() = detail::ck_read_doubles(in);
            t->adam_m() = detail::ck_read_doubles(in);
            t->adam_v() = detail::ck_read_doubles(in);
            t->adam_steps() = detail::ck_read_i64s(in);
            if (static_cast<int64_t>(t->values().size()) != static_cast<int64_t>(rows) * dim ||
                t->adam_m().size() != t->values().size() ||
                t->adam_v().size() != t->values().size() ||
                static_cast<int>(t->adam_steps().size()) != rows)
                throw DataError("checkpoint: table `" + name + "` payload sizes inconsistent");
        }

        std::vector<ParamBlock*> blocks = model_.param_blocks();
        uint64_t nblocks = detail::ck_read_u64(in);
        if (nblocks != blocks.size())
            throw ConfigError("checkpoint: parameter block count mismatch (flags differ?)");
        for (ParamBlock* b : blocks) {
            std::string got = detail::ck_read_string(in);
            if (got != b->name)
                throw ConfigError("checkpoint: expected block `" + b->name + "`, found `" + got +
                                  "`");
            Tensor value = detail::ck_read_tensor(in);
            if (!value.same_shape(b->value))
                throw ConfigError("checkpoint: block `" + b->name + "` shape mismatch");
            b->value = std::move(value);
            b->state.m = detail::ck_read_tensor(in);
            b->state.v = detail::ck_read_tensor(in);
            b->state.step = static_cast<int64_t>(detail::ck_read_u64(in));
        }
    }

    // ---- internals shared with tests --------------------------------------

    struct BatchBuild {
        Graph* g;
        ParamContext* ctx;
        EmbeddingBatchCache* ecache;
        std::map<int, GateFuseResult> user_e, item_e;
    };

    Value fused_value(BatchBuild& b, bool user_kind, int id) {
        auto& cache = user_kind ? b.user_e : b.item_e;
        auto it = cache.find(id);
        if (it != cache.end()) return it->second.e;
        DualEmbedding& de = user_kind ? model_.users() : model_.items();
        GateFuseResult r;
        if (de.has_cluster() && de.has_individual()) {
            Value c = b.ecache->use(de.cluster_table(), de.cluster_row(id));
            Value d = b.ecache->use(de.indiv_table(), de.entity_row(id));
            if (model_.with_g1()) {
                const auto& act =
                    user_kind ? data_->labels.user(id).f_act : data_->labels.item(id).f_act;
                r = gate_fuse(*b.ctx, user_kind ? model_.g1_user() : model_.g1_item(), c, d, act);
            } else {
                r = gate_fuse_fixed(c, d, 0.5);
            }
        } else if (de.has_cluster()) {
            Value c = b.ecache->use(de.cluster_table(), de.cluster_row(id));
            r = {c, b.g->constant(Tensor::scalar(1.0))};
        } else {
            Value d = b.ecache->use(de.indiv_table(), de.entity_row(id));
            r = {d, b.g->constant(Tensor::scalar(0.0))};
        }
        cache.emplace(id, r);
        return r.e;
    }

    Value event_logit(BatchBuild& b, const InteractionEvent& ev) {
        Graph& g = *b.g;
        require_means_fresh();
        Value e_u = fused_value(b, true, ev.user_id);
        Value e_i = fused_value(b, false, ev.item_id);
        HfaNet& net = model_.hfa();

        Value p_inst, p_clust;
        if (net.with_instance()) {
            std::vector<Value> seq;
            for (const auto& bh :
                 user_hist_.history_before(ev.user_id, ev.ts, tc_.history_cap))
                seq.push_back(fused_value(b, false, bh.item_id));
            Value s = net.attend_instance(*b.ctx, e_i, seq);
            Value h_u = concat({g.constant(rep_slot(true, ev.user_id)),
                                g.constant(Tensor::vec(data_->labels.user(ev.user_id).stats)),
                                e_u});
            Value h_i = concat({g.constant(rep_slot(false, ev.item_id)),
                                g.constant(Tensor::vec(data_->labels.item(ev.item_id).stats)),
                                e_i});
            p_inst = net.project_instance(*b.ctx, concat({h_u, h_i, s}));
        }
        if (net.with_cluster()) {
            std::vector<Value> seq;
            for (const auto& bh : retrieve_cluster(ev))
                seq.push_back(fused_value(b, false, bh.item_id));
            Value s = net.attend_cluster(*b.ctx, e_i, seq);
            Value h_gu = g.constant(user_means_.at(data_->user_sids.at(ev.user_id).ids));
            Value h_gi = g.constant(item_means_.at(data_->item_sids.at(ev.item_id).ids));
            p_clust = net.project_cluster(*b.ctx, concat({h_gu, h_gi, s}));
        }

        Value f;
        if (net.with_instance() && net.with_cluster()) {
            f = net.fuse(*b.ctx, p_inst, p_clust, gate2_features(ev.user_id, ev.item_id),
                         /*gate_fixed_half=*/false)
                    .f;
        } else {
            f = net.with_instance() ? p_inst : p_clust;
        }
        return net.rank_logit(*b.ctx, f);
    }

    std::vector<double> gate2_features(int user_id, int item_id) const {
        const auto& fu = data_->labels.user(user_id).f_act;
        const auto& fi = data_->labels.item(item_id).f_act;
        std::vector<double> out;
        out.reserve(9);
        for (double x : fu) out.push_back(x);
        for (double x : fi) out.push_back(x);
        for (size_t k = 0; k < fu.size(); ++k) out.push_back(fu[k] * fi[k]);
        return out;
    }

    Tensor fused_plain(bool user_kind, int id) const {
        const DualEmbedding& de = user_kind ? model_.users() : model_.items();
        if (de.has_cluster() && de.has_individual()) {
            Tensor c = de.cluster_table().row(de.cluster_row(id));
            Tensor d = de.indiv_table().row(de.entity_row(id));
            double r = 0.5;
            if (model_.with_g1()) {
                const auto& act =
                    user_kind ? data_->labels.user(id).f_act : data_->labels.item(id).f_act;
                const Mlp& g1 = user_kind ? model_.g1_user() : model_.g1_item();
                r = stable_sigmoid_plain(g1.forward_plain(Tensor::vec(act)).v[0]);
            }
            Tensor e(c.rows, 1);
            for (int k = 0; k < e.rows; ++k)
                e.v[k] = r * c.v[k] + (-1.0 * r + 1.0) * d.v[k];
            return e;
        }
        if (de.has_cluster()) return de.cluster_table().row(de.cluster_row(id));
        return de.indiv_table().row(de.entity_row(id));
    }

    const std::map<std::vector<int>, Tensor>& user_means() const { return user_means_; }
    const std::map<std::vector<int>, Tensor>& item_means() const { return item_means_; }

private:
    static constexpr const char* kCkptMagic = "LTRECK01";

    TrainConfig tc_;
    const DataBundle* data_ = nullptr;
    std::string config_hash_;
    Model model_;
    std::vector<InteractionEvent> grad_events_, val_events_;
    UserBehaviorIndex user_hist_;
    ClusterBehaviorIndex cluster_hist_;
    ClusterIndex user_clusters_, item_clusters_;
    std::map<std::vector<int>, Tensor> user_means_, item_means_;
    int epoch_ = 0;
    std::vector<EpochRecord> history_;
    std::vector<StepLog> step_logs_;

    struct InjectCluster {
        std::vector<int> tails, heads;
    };
    std::vector<InjectCluster> user_inject_, item_inject_;

    static double stable_sigmoid_plain(double z) {
        if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
        double e = std::exp(z);
        return e / (1.0 + e);
    }

    void require_means_fresh() const {
        if (model_.hfa().with_cluster() && user_means_.empty())
            throw DataError("cluster-view means not computed; call refresh_cluster_means()");
    }

    void build_injection_lists() {
        auto build = [&](const ClusterIndex& index, bool user_kind,
                         std::vector<InjectCluster>& out) {
            for (const auto& [key, members] : index.members) {
                InjectCluster c;
                for (int id : members) {
                    bool tail = user_kind ? data_->labels.user_tail(id)
                                          : data_->labels.item_tail(id);
                    (tail ? c.tails : c.heads).push_back(id);
                }
                if (!c.tails.empty() && !c.heads.empty()) out.push_back(std::move(c));
            }
        };
        build(user_clusters_, true, user_inject_);
        build(item_clusters_, false, item_inject_);
    }

    std::vector<Behavior> retrieve_cluster(const InteractionEvent& ev) const {
        return cluster_hist_.retrieve(data_->user_sids.at(ev.user_id).ids,
                                      data_->item_sids.at(ev.item_id).ids[0], ev.ts,
                                      ev.user_id, tc_.cluster_history_cap);
    }

    std::vector<Tensor> behavior_vectors_plain(const std::vector<Behavior>& hist) const {
        std::vector<Tensor> out;
        out.reserve(hist.size());
        for (const auto& bh : hist) out.push_back(fused_plain(false, bh.item_id));
        return out;
    }

    // Mirrors target_attention: dot-product logits, optional scaling,
    // max-shifted softmax, then weighted sum in the same accumulation order.
    Tensor attention_plain(const Tensor& q, const std::vector<Tensor>& seq,
                           const Tensor& fallback) const {
        if (seq.empty()) return fallback;
        std::vector<double> logits(seq.size());
        for (size_t j = 0; j < seq.size(); ++j) {
            double s = 0.0;
            for (int i = 0; i < q.size(); ++i) s += q.v[i] * seq[j].v[i];
            logits[j] = s;
        }
        if (model_.hfa().cfg().scale_attention) {
            double k0 = 1.0 / std::sqrt(static_cast<double>(q.size()));
            for (auto& v : logits) v = k0 * v + 0.0;
        }
        double m = *std::max_element(logits.begin(), logits.end());
        std::vector<double> w(logits.size());
        double denom = 0.0;
        for (size_t j = 0; j < logits.size(); ++j) {
            w[j] = std::exp(logits[j] - m);
            denom += w[j];
        }
        for (auto& v : w) v /= denom;
        Tensor out = Tensor::zeros(seq[0].rows, 1);
        for (size_t j = 0; j < seq.size(); ++j)
            for (int i = 0; i < out.size(); ++i) out.v[i] += w[j] * seq[j].v[i];
        return out;
    }

    static Tensor concat_plain(const std::vector<Tensor>& parts) {
        int rows = 0;
        for (const auto& p : parts) rows += p.rows;
        Tensor out(rows, 1);
        int at = 0;
        for (const auto& p : parts)
            for (int i = 0; i < p.rows; ++i) out.v[at++] = p.v[i];
        return out;
    }

    Tensor user_feat_plain(int id) const {
        return user_feat_with(fused_plain(true, id), id);
    }
    Tensor item_feat_plain(int id) const {
        return item_feat_with(fused_plain(false, id), id);
    }
    Tensor user_feat_with(const Tensor& e, int id) const {
        return concat_plain({rep_slot(true, id), Tensor::vec(data_->labels.user(id).stats), e});
    }
    Tensor item_feat_with(const Tensor& e, int id) const {
        return concat_plain({rep_slot(false, id), Tensor::vec(data_->labels.item(id).stats), e});
    }

    // Representation lookups feed fixed layout slots, so a missing one is
    // reported as a layout error naming that slot.
    Tensor rep_slot(bool user_kind, int id) const {
        const SemanticRepStore& st = user_kind ? data_->user_reps : data_->item_reps;
        auto it = st.reps.find(id);
        if (it == st.reps.end())
            throw LayoutError(std::string("feature slot '") +
                              (user_kind ? "user_rep" : "item_rep") + "' missing for id " +
                              std::to_string(id));
        return Tensor::vec(it->second);
    }

    // One transfer term (user or item side): distinct batch entities plus, if
    // the batch lacks a same-cluster head/tail pair, one injected pair.
    TransferResult kind_transfer(BatchBuild& b, bool user_kind, const std::set<int>& target_ids,
                                 Rng& rng, Graph& g) {
        DualEmbedding& de = user_kind ? model_.users() : model_.items();
        TransferResult off;
        if (!de.has_cluster() || (tc_.lambda_head == 0.0 && tc_.lambda_tail == 0.0)) {
            off.no_pairs = true;
            off.loss = g.constant(Tensor::scalar(0.0));
            return off;
        }
        std::set<int> ids = target_ids;

        bool have_pair = false;
        std::map<std::vector<int>, std::pair<bool, bool>> seen;  // key -> (has_tail, has_head)
        for (int id : ids) {
            bool tail = user_kind ? data_->labels.user_tail(id) : data_->labels.item_tail(id);
            auto& flags = seen[de.key_of(id)];
            (tail ? flags.first : flags.second) = true;
            if (flags.first && flags.second) have_pair = true;
        }
        const auto& inject = user_kind ? user_inject_ : item_inject_;
        if (!have_pair && !inject.empty()) {
            const InjectCluster& c = inject[rng.uniform_int(inject.size())];
            ids.insert(c.tails[rng.uniform_int(c.tails.size())]);
            ids.insert(c.heads[rng.uniform_int(c.heads.size())]);
        }

        std::vector<TransferEntry> entries;
        for (int id : ids) {
            TransferEntry e;
            e.c = b.ecache->use(de.cluster_table(), de.cluster_row(id));
            e.tail = user_kind ? data_->labels.user_tail(id) : data_->labels.item_tail(id);
            e.cluster_row = de.cluster_row(id);
            e.key = de.key_of(id);
            entries.push_back(std::move(e));
        }
        return transfer_loss(g, entries, model_.cgae_cfg(), rng);
    }

    StepLog train_batch(const std::vector<InteractionEvent>& batch, int epoch, int step,
                        Rng& rng) {
        Graph g;
        ParamContext ctx(g);
        EmbeddingBatchCache ecache(g, /*trainable=*/true);
        BatchBuild bb{&g, &ctx, &ecache, {}, {}};

        std::set<int> batch_users, batch_items;
        std::vector<Value> event_losses;
        event_losses.reserve(batch.size());
        for (const auto& ev : batch) {
            batch_users.insert(ev.user_id);
            batch_items.insert(ev.item_id);
            event_losses.push_back(bce_with_logit(event_logit(bb, ev), ev.label));
        }
        Value l_main = mean(concat(event_losses));

        TransferResult tr_user = kind_transfer(bb, true, batch_users, rng, g);
        TransferResult tr_item = kind_transfer(bb, false, batch_items, rng, g);

        Value l_ortho_raw = g.constant(Tensor::scalar(0.0));
        {
            std::vector<Value> terms;
            auto collect = [&](DualEmbedding& de, const std::set<int>& ids) {
                if (!de.has_cluster() || !de.has_individual()) return;
                for (int id : ids) {
                    Value c = ecache.use(de.cluster_table(), de.cluster_row(id));
                    Value d = ecache.use(de.indiv_table(), de.entity_row(id));
                    terms.push_back(ortho_loss(c, d));
                }
            };
            collect(model_.users(), batch_users);
            collect(model_.items(), batch_items);
            if (!terms.empty()) l_ortho_raw = mean(concat(terms));
        }
        Value l_ortho = scale(l_ortho_raw, tc_.lambda_ortho);

        Value total = add(add(add(l_main, tr_user.loss), tr_item.loss), l_ortho);
        if (!std::isfinite(total.scalar()))
            throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                  " step " + std::to_string(step) + " (non-finite loss)");
        g.backward(total);

        AdamConfig acfg;
        acfg.lr = tc_.lr;
        int skipped = ctx.apply(acfg) + ecache.apply(acfg);

        StepLog log;
        log.epoch = epoch;
        log.step = step;
        log.l_main = l_main.scalar();
        log.l_trans_user = tr_user.loss.scalar();
        log.l_trans_item = tr_item.loss.scalar();
        log.l_ortho = l_ortho.scalar();
        log.total = total.scalar();
        log.pairs_user = tr_user.pairs;
        log.pairs_item = tr_item.pairs;
        log.skipped_grads = skipped;
        return log;
    }

    std::vector<std::pair<std::string, const EmbeddingTable*>> table_list() const {
        std::vector<std::pair<std::string, const EmbeddingTable*>> out;
        auto add_tables = [&](const char* kind, const DualEmbedding& de) {
            if (de.has_cluster())
                out.emplace_back(std::string(kind) + ".cluster", &de.cluster_table());
            if (de.has_individual())
                out.emplace_back(std::string(kind) + ".indiv", &de.indiv_table());
        };
        add_tables("users", model_.users());
        add_tables("items", model_.items());
        return out;
    }

    std::vector<std::pair<std::string, EmbeddingTable*>> table_list_mut() {
        std::vector<std::pair<std::string, EmbeddingTable*>> out;
        auto add_tables = [&](const char* kind, DualEmbedding& de) {
            if (de.has_cluster())
                out.emplace_back(std::string(kind) + ".cluster", &de.cluster_table());
            if (de.has_individual())
                out.emplace_back(std::string(kind) + ".indiv", &de.indiv_table());
        };
        add_tables("users", model_.users());
        add_tables("items", model_.items());
        return out;
    }
};

}  // namespace ltrec
