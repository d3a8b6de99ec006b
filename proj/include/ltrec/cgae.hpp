#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ltrec/align.hpp"
#include "ltrec/autodiff.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/nn.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

struct CgaeConfig {
    int m = 16;              // embedding dim
    double init_std = 0.01;
    double lambda1 = 0.1;    // weight on the head-anchored transfer term
    double lambda2 = 1.0;    // weight on the tail-anchored transfer term
    double tau_t = 0.1;
    double ortho_eps = 1e-8;
};

// Cluster rows are shared by every entity with the same full semantic ID;
// individual rows are one per entity. Either side can be absent for the
// structural ablations.
class DualEmbedding {
public:
    DualEmbedding() = default;

    DualEmbedding(const std::vector<int>& entity_ids, const std::map<int, SemanticID>& id_map,
                  int m, double init_std, bool with_cluster, bool with_individual, Rng& rng)
        : with_cluster_(with_cluster), with_individual_(with_individual) {
        if (!with_cluster && !with_individual)
            throw ConfigError("DualEmbedding: cannot drop both embedding tables");
        for (size_t i = 0; i < entity_ids.size(); ++i) {
            int id = entity_ids[i];
            entity_row_[id] = static_cast<int>(i);
            auto it = id_map.find(id);
            if (it == id_map.end())
                throw LookupError("DualEmbedding: entity " + std::to_string(id) +
                                  " has no semantic id");
            keys_[id] = it->second.ids;
            cluster_row_.emplace(it->second.ids, static_cast<int>(cluster_row_.size()));
        }
        if (with_cluster_)
            cluster_table_ = EmbeddingTable(static_cast<int>(cluster_row_.size()), m,
                                            init_std, rng);
        if (with_individual_)
            indiv_table_ = EmbeddingTable(static_cast<int>(entity_row_.size()), m,
                                          init_std, rng);
    }

    bool has_cluster() const { return with_cluster_; }
    bool has_individual() const { return with_individual_; }

    int cluster_row(int entity_id) const {
        return cluster_row_.at(key_of(entity_id));
    }
    int entity_row(int entity_id) const {
        auto it = entity_row_.find(entity_id);
        if (it == entity_row_.end())
            throw LookupError("DualEmbedding: unknown entity id " + std::to_string(entity_id));
        return it->second;
    }
    const std::vector<int>& key_of(int entity_id) const {
        auto it = keys_.find(entity_id);
        if (it == keys_.end())
            throw LookupError("DualEmbedding: unknown entity id " + std::to_string(entity_id));
        return it->second;
    }

    EmbeddingTable& cluster_table() { return require(with_cluster_, cluster_table_, "cluster"); }
    EmbeddingTable& indiv_table() { return require(with_individual_, indiv_table_, "individual"); }
    const EmbeddingTable& cluster_table() const {
        return require(with_cluster_, const_cast<EmbeddingTable&>(cluster_table_), "cluster");
    }
    const EmbeddingTable& indiv_table() const {
        return require(with_individual_, const_cast<EmbeddingTable&>(indiv_table_), "individual");
    }

    int num_clusters() const { return static_cast<int>(cluster_row_.size()); }
    int num_entities() const { return static_cast<int>(entity_row_.size()); }
    const std::map<std::vector<int>, int>& cluster_rows() const { return cluster_row_; }

    int64_t param_count() const {
        int64_t n = 0;
        if (with_cluster_) n += static_cast<int64_t>(cluster_table_.rows()) * cluster_table_.dim();
        if (with_individual_) n += static_cast<int64_t>(indiv_table_.rows()) * indiv_table_.dim();
        return n;
    }

private:
    bool with_cluster_ = false;
    bool with_individual_ = false;
    EmbeddingTable cluster_table_;
    EmbeddingTable indiv_table_;
    std::map<int, int> entity_row_;
    std::map<int, std::vector<int>> keys_;
    std::map<std::vector<int>, int> cluster_row_;

    static EmbeddingTable& require(bool present, EmbeddingTable& t, const char* side) {
        if (!present)
            throw ConfigError(std::string("DualEmbedding: ") + side +
                              " table is disabled in this assembly");
        return t;
    }
};

// Per-graph dedupe of embedding-row leaves: one trainable leaf per touched
// row, so gradient accumulates across all uses in the batch and apply() steps
// each row exactly once. In frozen mode rows enter as constants and apply()
// is a no-op.
class EmbeddingBatchCache {
public:
    EmbeddingBatchCache(Graph& g, bool trainable) : g_(&g), trainable_(trainable) {}

    Value use(EmbeddingTable& table, int row) {
        PerTable& pt = slot(table);
        auto it = pt.rows.find(row);
        if (it != pt.rows.end()) return it->second;
        Tensor t = table.row(row);
        Value v = trainable_ ? g_->input(std::move(t)) : g_->constant(std::move(t));
        pt.rows.emplace(row, v);
        return v;
    }

    int apply(const AdamConfig& cfg) {
        if (!trainable_) return 0;
        int skipped = 0;
        for (auto& pt : tables_)
            for (auto& [row, val] : pt.rows)
                if (!pt.table->apply_row_grad(row, val.grad(), cfg)) ++skipped;
        return skipped;
    }

private:
    struct PerTable {
        EmbeddingTable* table;
        std::map<int, Value> rows;
    };
    Graph* g_;
    bool trainable_;
    std::vector<PerTable> tables_;  // first-use order

    PerTable& slot(EmbeddingTable& table) {
        for (auto& pt : tables_)
            if (pt.table == &table) return pt;
        tables_.push_back({&table, {}});
        return tables_.back();
    }
};

// Squared cosine between the two embedding halves; zero (with a flag) when
// both are degenerate, epsilon-floored norms otherwise so zero-initialized
// rows cannot produce non-finite values.
inline Value ortho_loss(Value c, Value d, double eps = 1e-8, bool* degenerate = nullptr) {
    require_same_shape(c.data(), d.data(), "ortho_loss");
    double nc = std::sqrt(c.data().squared_norm());
    double nd = std::sqrt(d.data().squared_norm());
    if (degenerate) *degenerate = false;
    if (nc < eps && nd < eps) {
        if (degenerate) *degenerate = true;
        return c.graph()->constant(Tensor::scalar(0.0));
    }
    Value cosine = div(dot(c, d), mul(norm_l2(c, eps), norm_l2(d, eps)));
    return mul(cosine, cosine);
}

struct GateFuseResult {
    Value e;  // fused embedding
    Value r;  // gate in (0,1)
};

// r = sigmoid(G1(f_act)), e = r*c + (1-r)*d.
inline GateFuseResult gate_fuse(ParamContext& ctx, const Mlp& g1, Value c, Value d,
                                const std::vector<double>& f_act) {
    for (double x : f_act)
        if (!std::isfinite(x))
            throw DataError("gate_fuse: non-finite activity feature");
    Graph* g = c.graph();
    Value r = sigmoid(g1.forward(ctx, g->constant(f_act)));
    Value e = add(scalar_mul_vec(r, c), scalar_mul_vec(scale(r, -1.0, 1.0), d));
    return {e, r};
}

// Convex combination with a fixed mixing weight (gate ablation, and the
// single-table ablations at r = 1 or 0).
inline GateFuseResult gate_fuse_fixed(Value c, Value d, double r_fixed) {
    Graph* g = c.graph();
    Value r = g->constant(Tensor::scalar(r_fixed));
    Value e = add(scalar_mul_vec(r, c), scalar_mul_vec(scale(r, -1.0, 1.0), d));
    return {e, r};
}

// One distinct entity participating in the transfer objective.
struct TransferEntry {
    Value c;                   // cluster embedding leaf
    bool tail = false;
    int cluster_row = -1;      // identity of the cluster row
    std::vector<int> key;      // full semantic id (for prefix fallback pairing)
};

struct TransferResult {
    Value loss;
    int pairs = 0;
    int fallback_pairs = 0;  // paired at the shorter prefix
    bool no_pairs = false;
};

// Asymmetric cross-activity alignment: each tail entity is paired with a head
// entity of the same cluster (falling back to the parent prefix), and two
// InfoNCE terms are formed with stop-gradient on the non-anchored side.
// Negatives are other clusters' embeddings, also stop-gradiented, so the
// lambda1 = 0 configuration touches head rows not at all.
inline TransferResult transfer_loss(Graph& g, const std::vector<TransferEntry>& entries,
                                    const CgaeConfig& cfg, Rng& rng) {
    if (cfg.tau_t <= 0.0)
        throw ConfigError("transfer_loss: tau_t must be positive");
    TransferResult res;

    std::map<int, Value> row_value;       // cluster row -> live leaf
    std::map<int, bool> row_has_head, row_has_tail;
    for (const auto& e : entries) {
        row_value.emplace(e.cluster_row, e.c);
        if (e.tail) row_has_tail[e.cluster_row] = true;
        else row_has_head[e.cluster_row] = true;
    }

    // Candidate heads grouped by full key and by parent prefix.
    std::map<std::vector<int>, std::vector<const TransferEntry*>> heads_full, heads_prefix;
    for (const auto& e : entries) {
        if (e.tail) continue;
        heads_full[e.key].push_back(&e);
        if (e.key.size() > 1)
            heads_prefix[std::vector<int>(e.key.begin(), e.key.end() - 1)].push_back(&e);
    }

    struct Pair { const TransferEntry* tail; const TransferEntry* head; };
    std::vector<Pair> pairs;
    for (const auto& e : entries) {
        if (!e.tail) continue;
        const std::vector<const TransferEntry*>* cands = nullptr;
        bool fallback = false;
        if (auto it = heads_full.find(e.key); it != heads_full.end()) {
            cands = &it->second;
        } else if (e.key.size() > 1) {
            auto pit = heads_prefix.find(std::vector<int>(e.key.begin(), e.key.end() - 1));
            if (pit != heads_prefix.end()) { cands = &pit->second; fallback = true; }
        }
        if (!cands || cands->empty()) continue;
        const TransferEntry* head = (*cands)[rng.uniform_int(cands->size())];
        pairs.push_back({&e, head});
        if (fallback) ++res.fallback_pairs;
    }
    res.pairs = static_cast<int>(pairs.size());
    if (pairs.empty()) {
        res.no_pairs = true;
        res.loss = g.constant(Tensor::scalar(0.0));
        return res;
    }

    // Stop-gradiented view of each cluster row, shared across pairs.
    std::map<int, Value> row_sg;
    for (const auto& [row, val] : row_value)
        row_sg.emplace(row, stop_gradient(val));

    auto negatives_for = [&](int anchor_row, int positive_row) {
        std::vector<Value> negs;
        for (const auto& [row, sg] : row_sg)
            if (row != anchor_row && row != positive_row) negs.push_back(sg);
        return negs;
    };

    AlignmentBatch tail_anchored, head_anchored;
    tail_anchored.tau = head_anchored.tau = cfg.tau_t;
    for (const auto& p : pairs) {
        if (cfg.lambda2 != 0.0) {
            tail_anchored.anchors.push_back(p.tail->c);
            tail_anchored.positives.push_back(row_sg.at(p.head->cluster_row));
            tail_anchored.negatives.push_back(
                negatives_for(p.tail->cluster_row, p.head->cluster_row));
        }
        if (cfg.lambda1 != 0.0) {
            head_anchored.anchors.push_back(p.head->c);
            head_anchored.positives.push_back(row_sg.at(p.tail->cluster_row));
            head_anchored.negatives.push_back(
                negatives_for(p.head->cluster_row, p.tail->cluster_row));
        }
    }

    Value loss = g.constant(Tensor::scalar(0.0));
    if (cfg.lambda2 != 0.0 && !tail_anchored.anchors.empty())
        loss = add(loss, scale(info_nce(g, tail_anchored), cfg.lambda2));
    if (cfg.lambda1 != 0.0 && !head_anchored.anchors.empty())
        loss = add(loss, scale(info_nce(g, head_anchored), cfg.lambda1));
    res.loss = loss;
    return res;
}

}  // namespace ltrec
