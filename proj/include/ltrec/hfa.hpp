#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ltrec/autodiff.hpp"
#include "ltrec/dataset_io.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/nn.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rqvae.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

struct FeatureSlot {
    std::string name;
    int width = 0;
};

// Named, ordered slots of a concatenated feature vector. The slot order is
// part of the model contract: the describe() string (and thus the hash)
// changes whenever a slot is added, removed, reordered, or resized.
class FeatureLayout {
public:
    FeatureLayout() = default;

    FeatureLayout(std::string view, std::vector<FeatureSlot> slots)
        : view_(std::move(view)), slots_(std::move(slots)) {
        for (const auto& s : slots_) {
            if (s.width <= 0)
                throw LayoutError("layout " + view_ + ": slot '" + s.name +
                                  "' has non-positive width " + std::to_string(s.width));
            width_ += s.width;
        }
    }

    const std::string& view() const { return view_; }
    const std::vector<FeatureSlot>& slots() const { return slots_; }
    int total_width() const { return width_; }

    std::string describe() const {
        std::string d = "layout-v1 " + view_;
        for (const auto& s : slots_) d += " " + s.name + "[" + std::to_string(s.width) + "]";
        return d;
    }

    std::string hash() const { return hash_string(describe()); }

    void check_total(int got) const {
        if (got != width_)
            throw LayoutError("layout " + view_ + ": assembled width " + std::to_string(got) +
                              " != expected " + std::to_string(width_) + " (" + describe() + ")");
    }

    // Validates one slot's part before concatenation; names the slot on failure.
    void check_slot(size_t idx, int got) const {
        if (idx >= slots_.size())
            throw LayoutError("layout " + view_ + ": slot index " + std::to_string(idx) +
                              " out of range (" + describe() + ")");
        if (got != slots_[idx].width)
            throw LayoutError("layout " + view_ + ": slot '" + slots_[idx].name + "' has width " +
                              std::to_string(got) + ", expected " +
                              std::to_string(slots_[idx].width));
    }

private:
    std::string view_;
    std::vector<FeatureSlot> slots_;
    int width_ = 0;
};

struct HfaConfig {
    int fusion_dim = 32;
    int ranker_hidden = 64;
    int gate_hidden = 8;
    int instance_cap = 50;    // behavior sequence length L
    int cluster_cap = 100;    // hard-retrieval cap
    bool scale_attention = false;  // optional 1/sqrt(m) on attention logits
};

struct TargetAttentionResult {
    Value pooled;
    Value weights;
};

// Softmax attention over a behavior sequence with the candidate as query;
// raw dot-product logits by default. Output is a convex combination of the
// sequence vectors.
inline TargetAttentionResult target_attention(Value target, std::span<const Value> seq,
                                              bool scale_by_sqrt_dim = false) {
    if (seq.empty())
        throw DomainError("target_attention: empty sequence (substitute the no-context vector)");
    Value logits = dot_rows(target, seq);
    if (scale_by_sqrt_dim)
        logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(target.data().size())));
    Value w = softmax_vector(logits);
    return {weighted_sum(w, seq), w};
}

struct FuseResult {
    Value f;
    Value alpha;
};

inline void require_fusable(const Value& h_inst, const Value& h_clust) {
    const Tensor& a = h_inst.data();
    const Tensor& b = h_clust.data();
    if (a.rows != b.rows || a.cols != b.cols)
        throw LayoutError("fuse_views: projected view dims differ (instance " +
                          std::to_string(a.size()) + ", cluster " + std::to_string(b.size()) +
                          ")");
}

// alpha = sigmoid(G2(gate features)); f = alpha * H_clust + (1 - alpha) * H_inst.
inline FuseResult fuse_views(ParamContext& ctx, const Mlp& g2, Value h_inst, Value h_clust,
                             const std::vector<double>& gate_features) {
    require_fusable(h_inst, h_clust);
    for (double x : gate_features)
        if (!std::isfinite(x)) throw DataError("fuse_views: non-finite gate feature");
    Graph* g = h_inst.graph();
    Value alpha = sigmoid(g2.forward(ctx, g->constant(gate_features)));
    Value f = add(scalar_mul_vec(alpha, h_clust),
                  scalar_mul_vec(scale(alpha, -1.0, 1.0), h_inst));
    return {f, alpha};
}

inline FuseResult fuse_views_fixed(Value h_inst, Value h_clust, double alpha_fixed) {
    require_fusable(h_inst, h_clust);
    Graph* g = h_inst.graph();
    Value alpha = g->constant(Tensor::scalar(alpha_fixed));
    Value f = add(scalar_mul_vec(alpha, h_clust),
                  scalar_mul_vec(scale(alpha, -1.0, 1.0), h_inst));
    return {f, alpha};
}

// ---- behavior indices -----------------------------------------------------

struct Behavior {
    int64_t ts = 0;
    int user_id = 0;
    int item_id = 0;
};

// Per-user click history (training events only), chronological storage,
// most-recent-first retrieval strictly before a given time.
class UserBehaviorIndex {
public:
    UserBehaviorIndex() = default;
    explicit UserBehaviorIndex(const std::vector<InteractionEvent>& events) {
        for (const auto& e : events)
            if (e.label) by_user_[e.user_id].push_back({e.ts, e.user_id, e.item_id});
    }

    std::vector<Behavior> history_before(int user, int64_t t, int cap) const {
        std::vector<Behavior> out;
        auto it = by_user_.find(user);
        if (it == by_user_.end()) return out;
        const auto& seq = it->second;
        auto hi = std::lower_bound(seq.begin(), seq.end(), t,
                                   [](const Behavior& b, int64_t ts) { return b.ts < ts; });
        for (auto rit = std::make_reverse_iterator(hi);
             rit != seq.rend() && static_cast<int>(out.size()) < cap; ++rit)
            out.push_back(*rit);
        return out;
    }

private:
    std::map<int, std::vector<Behavior>> by_user_;
};

// Click lists keyed by (user cluster, item top-level id), supporting the hard
// retrieval rule: cluster-mates' clicks on items whose level-1 id matches the
// candidate's, strictly before the prediction time, never the user's own.
class ClusterBehaviorIndex {
public:
    ClusterBehaviorIndex() = default;

    ClusterBehaviorIndex(const std::vector<InteractionEvent>& events,
                         const std::map<int, SemanticID>& user_ids,
                         const std::map<int, SemanticID>& item_ids) {
        for (const auto& e : events) {
            if (!e.label) continue;
            auto uit = user_ids.find(e.user_id);
            auto iit = item_ids.find(e.item_id);
            if (uit == user_ids.end())
                throw LookupError("ClusterBehaviorIndex: user " + std::to_string(e.user_id) +
                                  " has no semantic id");
            if (iit == item_ids.end())
                throw LookupError("ClusterBehaviorIndex: item " + std::to_string(e.item_id) +
                                  " has no semantic id");
            lists_[{uit->second.ids, iit->second.ids[0]}].push_back(
                {e.ts, e.user_id, e.item_id});
        }
    }

    std::vector<Behavior> retrieve(const std::vector<int>& user_cluster_key, int item_level1,
                                   int64_t t, int exclude_user, int cap) const {
        std::vector<Behavior> out;
        auto it = lists_.find({user_cluster_key, item_level1});
        if (it == lists_.end()) return out;
        const auto& seq = it->second;
        auto hi = std::lower_bound(seq.begin(), seq.end(), t,
                                   [](const Behavior& b, int64_t ts) { return b.ts < ts; });
        for (auto rit = std::make_reverse_iterator(hi);
             rit != seq.rend() && static_cast<int>(out.size()) < cap; ++rit)
            if (rit->user_id != exclude_user) out.push_back(*rit);
        return out;
    }

private:
    std::map<std::pair<std::vector<int>, int>, std::vector<Behavior>> lists_;
};

// ---- cluster means --------------------------------------------------------

// Mean of per-member feature vectors for every cluster in the index. The
// feature source sees entity ids; results are cached by the caller per epoch.
inline std::map<std::vector<int>, Tensor>
compute_cluster_means(const ClusterIndex& index, const std::function<Tensor(int)>& feature_of) {
    std::map<std::vector<int>, Tensor> means;
    for (const auto& [key, members] : index.members) {
        if (members.empty())
            throw DataError("compute_cluster_means: empty cluster");
        Tensor acc = feature_of(members[0]);
        for (size_t i = 1; i < members.size(); ++i) {
            Tensor f = feature_of(members[i]);
            require_same_shape(acc, f, "compute_cluster_means");
            for (int k = 0; k < acc.size(); ++k) acc.v[k] += f.v[k];
        }
        for (auto& x : acc.v) x /= static_cast<double>(members.size());
        means.emplace(key, std::move(acc));
    }
    return means;
}

// ---- the aggregation network ----------------------------------------------

// Projections to the shared fusion space, the view gate, the ranking head,
// and the trainable fallback vectors for empty behavior sequences. Pieces not
// needed under the structural ablations are simply not constructed.
class HfaNet {
public:
    HfaNet() = default;

    HfaNet(const HfaConfig& cfg, FeatureLayout inst_layout, FeatureLayout clust_layout,
           int gate_in, int m, bool with_instance, bool with_cluster, bool with_gate, Rng& rng)
        : cfg_(cfg), inst_layout_(std::move(inst_layout)), clust_layout_(std::move(clust_layout)),
          with_instance_(with_instance), with_cluster_(with_cluster),
          with_gate_(with_gate && with_instance && with_cluster) {
        if (!with_instance && !with_cluster)
            throw ConfigError("HfaNet: cannot drop both feature views");
        if (with_instance_) {
            proj_inst_ = Mlp("hfa.proj_inst", {inst_layout_.total_width(), cfg.fusion_dim}, rng);
            no_ctx_inst_ = ParamBlock("hfa.no_ctx_inst", Tensor::zeros(m, 1));
            for (auto& x : no_ctx_inst_.value.v) x = rng.gaussian(0.0, 0.01);
        }
        if (with_cluster_) {
            proj_clust_ = Mlp("hfa.proj_clust", {clust_layout_.total_width(), cfg.fusion_dim}, rng);
            no_ctx_clust_ = ParamBlock("hfa.no_ctx_clust", Tensor::zeros(m, 1));
            for (auto& x : no_ctx_clust_.value.v) x = rng.gaussian(0.0, 0.01);
        }
        if (with_gate_)
            gate_ = Mlp("hfa.gate", {gate_in, cfg.gate_hidden, 1}, rng, /*zero_final=*/true);
        ranker_ = Mlp("hfa.rank", {cfg.fusion_dim, cfg.ranker_hidden, 1}, rng,
                      /*zero_final=*/true);
    }

    const HfaConfig& cfg() const { return cfg_; }
    const FeatureLayout& instance_layout() const { return inst_layout_; }
    const FeatureLayout& cluster_layout() const { return clust_layout_; }

    // Covers the active views only, so it also tracks the structural ablations.
    std::string layout_hash() const {
        std::string d;
        if (with_instance_) d += inst_layout_.describe() + "\n";
        if (with_cluster_) d += clust_layout_.describe() + "\n";
        return hash_string(d);
    }

    bool with_instance() const { return with_instance_; }
    bool with_cluster() const { return with_cluster_; }
    bool with_gate() const { return with_gate_; }

    // Attention pooling with the empty-sequence fallback.
    Value attend_instance(ParamContext& ctx, Value target, std::span<const Value> seq,
                          bool* used_fallback = nullptr) {
        return attend(ctx, target, seq, no_ctx_inst_, used_fallback);
    }
    Value attend_cluster(ParamContext& ctx, Value target, std::span<const Value> seq,
                         bool* used_fallback = nullptr) {
        return attend(ctx, target, seq, no_ctx_clust_, used_fallback);
    }

    Value project_instance(ParamContext& ctx, Value h_inst) const {
        inst_layout_.check_total(h_inst.data().size());
        return proj_inst_.forward(ctx, h_inst);
    }
    Value project_cluster(ParamContext& ctx, Value h_clust) const {
        clust_layout_.check_total(h_clust.data().size());
        return proj_clust_.forward(ctx, h_clust);
    }

    FuseResult fuse(ParamContext& ctx, Value h_inst_proj, Value h_clust_proj,
                    const std::vector<double>& gate_features, bool gate_fixed_half) const {
        if (gate_fixed_half || !with_gate_)
            return fuse_views_fixed(h_inst_proj, h_clust_proj, 0.5);
        return fuse_views(ctx, gate_, h_inst_proj, h_clust_proj, gate_features);
    }

    Value rank_logit(ParamContext& ctx, Value f) const {
        return ranker_.forward(ctx, f);
    }

    Mlp& proj_inst() { return proj_inst_; }
    Mlp& proj_clust() { return proj_clust_; }
    Mlp& gate() { return gate_; }
    Mlp& ranker() { return ranker_; }
    ParamBlock& no_ctx_inst() { return no_ctx_inst_; }
    ParamBlock& no_ctx_clust() { return no_ctx_clust_; }
    const Mlp& proj_inst() const { return proj_inst_; }
    const Mlp& proj_clust() const { return proj_clust_; }
    const Mlp& gate() const { return gate_; }
    const Mlp& ranker() const { return ranker_; }
    const ParamBlock& no_ctx_inst() const { return no_ctx_inst_; }
    const ParamBlock& no_ctx_clust() const { return no_ctx_clust_; }

    int64_t param_count() const {
        int64_t n = ranker_.param_count();
        if (with_instance_) n += proj_inst_.param_count() + no_ctx_inst_.value.size();
        if (with_cluster_) n += proj_clust_.param_count() + no_ctx_clust_.value.size();
        if (with_gate_) n += gate_.param_count();
        return n;
    }

private:
    HfaConfig cfg_;
    FeatureLayout inst_layout_, clust_layout_;
    bool with_instance_ = true;
    bool with_cluster_ = true;
    bool with_gate_ = true;
    Mlp proj_inst_, proj_clust_, gate_, ranker_;
    ParamBlock no_ctx_inst_, no_ctx_clust_;

    Value attend(ParamContext& ctx, Value target, std::span<const Value> seq,
                 ParamBlock& fallback, bool* used_fallback) {
        if (seq.empty()) {
            if (used_fallback) *used_fallback = true;
            return ctx.use(fallback);
        }
        if (used_fallback) *used_fallback = false;
        return target_attention(target, seq, cfg_.scale_attention).pooled;
    }
};

}  // namespace ltrec
