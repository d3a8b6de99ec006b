#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ltrec/autodiff.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/nn.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/synth.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

// Raised when contrastive training has no pairs to learn from; callers fall
// back to normalized raw content representations.
class AlignmentSkipped : public DataError {
public:
    using DataError::DataError;
};

struct AlignmentBatch {
    std::vector<Value> anchors;
    std::vector<Value> positives;
    std::vector<std::vector<Value>> negatives;  // per anchor
    double tau = 0.1;
};

// Contrastive loss: mean over anchors of −log( exp(s⁺/τ) / (exp(s⁺/τ) +
// Σ exp(s⁻/τ)) ). Negatives are reduced in descending-similarity order so the
// result is bitwise invariant to how the caller happened to order them.
inline Value info_nce(Graph& g, const AlignmentBatch& batch) {
    if (batch.tau <= 0.0)
        throw ConfigError("info_nce: temperature must be positive, got " +
                          std::to_string(batch.tau));
    if (batch.anchors.size() != batch.positives.size() ||
        batch.anchors.size() != batch.negatives.size())
        throw ShapeError("info_nce: anchors/positives/negatives size mismatch");
    if (batch.anchors.empty())
        throw DomainError("info_nce: empty batch");
    double inv_tau = 1.0 / batch.tau;
    std::vector<Value> terms;
    for (size_t i = 0; i < batch.anchors.size(); ++i) {
        if (batch.negatives[i].empty()) continue;  // contributes exactly zero
        Value s_pos = scale(dot(batch.anchors[i], batch.positives[i]), inv_tau);
        Value s_neg = scale(dot_rows(batch.anchors[i],
                                     std::span<const Value>(batch.negatives[i])), inv_tau);
        Value logits = concat({s_pos, sort_desc(s_neg)});
        terms.push_back(sub(log_sum_exp(logits), s_pos));
    }
    if (terms.empty()) return g.constant(Tensor::scalar(0.0));
    Value total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scale(total, 1.0 / static_cast<double>(batch.anchors.size()));
}

struct AlignConfig {
    int d_rep = 16;
    int hidden = 32;
    double tau = 0.1;
    int epochs = 10;
    int batch_pairs = 64;
    double lr = 1e-3;
    double user_pool_decay = 0.5;
};

struct AlignResult {
    SemanticRepStore items;
    std::vector<double> epoch_losses;
};

// Item-kind store from raw content representations, unit-normalized. The
// fallback when alignment is skipped, and the starting point of assertions
// about what training must beat.
inline SemanticRepStore passthrough_item_reps(const std::vector<ItemRecord>& catalog) {
    SemanticRepStore store;
    store.kind = "item";
    store.dim = catalog.empty() ? 0 : static_cast<int>(catalog.front().content_rep.size());
    for (const auto& it : catalog) {
        std::vector<double> v = it.content_rep;
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-12) { v.assign(v.size(), 0.0); v[0] = 1.0; }
        else for (double& x : v) x /= n;
        store.reps[it.id] = std::move(v);
    }
    return store;
}

class AlignEncoder {
public:
    AlignEncoder() = default;
    AlignEncoder(int d_in, const AlignConfig& cfg, Rng& rng)
        : net_("align", {d_in, cfg.hidden, cfg.d_rep}, rng) {}

    Value encode(ParamContext& ctx, Value x) const {
        return normalize_l2(net_.forward(ctx, x));
    }

    std::vector<double> encode_plain(const std::vector<double>& x) const {
        Tensor out = net_.forward_plain(Tensor::vec(x));
        double n = std::sqrt(out.squared_norm());
        std::vector<double> v = out.v;
        if (n < 1e-12) { v.assign(v.size(), 0.0); v[0] = 1.0; }
        else for (double& y : v) y /= n;
        return v;
    }

    Mlp& net() { return net_; }
    const Mlp& net() const { return net_; }

private:
    Mlp net_;
};

// Contrastive training over co-occurrence pairs with in-batch negatives:
// every other entity in the batch that is not part of the anchor's own pair
// serves as a negative. Both directions of each pair act as anchors.
inline AlignResult train_item_encoder(const std::vector<ItemRecord>& catalog,
                                      const std::vector<CoocPair>& pairs,
                                      const AlignConfig& cfg, uint64_t seed) {
    if (pairs.empty())
        throw AlignmentSkipped("train_item_encoder: no co-occurrence pairs; "
                               "pass normalized content reps through instead");
    if (catalog.empty())
        throw DataError("train_item_encoder: empty catalog");
    std::map<int, const ItemRecord*> by_id;
    for (const auto& it : catalog) by_id[it.id] = &it;
    for (const auto& p : pairs)
        if (!by_id.count(p.a) || !by_id.count(p.b))
            throw DataError("train_item_encoder: pair references unknown item " +
                            std::to_string(by_id.count(p.a) ? p.b : p.a));

    int d_in = static_cast<int>(catalog.front().content_rep.size());
    Rng rng(derive_seed(seed, "align"));
    AlignEncoder enc(d_in, cfg, rng);
    AdamConfig adam;
    adam.lr = cfg.lr;

    AlignResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = rng.permutation(pairs.size());
        double loss_sum = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_pairs)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_pairs));
            Graph g;
            ParamContext ctx(g);
            std::map<int, Value> encoded;
            auto enc_of = [&](int id) {
                auto it = encoded.find(id);
                if (it != encoded.end()) return it->second;
                Value z = enc.encode(ctx, g.constant(by_id.at(id)->content_rep));
                encoded.emplace(id, z);
                return z;
            };
            AlignmentBatch batch;
            batch.tau = cfg.tau;
            for (size_t k = start; k < end; ++k) {
                const CoocPair& p = pairs[order[k]];
                enc_of(p.a);
                enc_of(p.b);
            }
            for (size_t k = start; k < end; ++k) {
                const CoocPair& p = pairs[order[k]];
                for (auto [anchor_id, pos_id] : {std::pair{p.a, p.b}, std::pair{p.b, p.a}}) {
                    std::vector<Value> negs;
                    for (const auto& [id, val] : encoded)
                        if (id != anchor_id && id != pos_id) negs.push_back(val);
                    batch.anchors.push_back(encoded.at(anchor_id));
                    batch.positives.push_back(encoded.at(pos_id));
                    batch.negatives.push_back(std::move(negs));
                }
            }
            Value loss = info_nce(g, batch);
            double lv = loss.scalar();
            if (std::isfinite(lv)) {
                g.backward(loss);
                ctx.apply(adam);
                loss_sum += lv;
                ++batches;
            }
        }
        result.epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    }

    result.items.kind = "item";
    result.items.dim = cfg.d_rep;
    for (const auto& it : catalog)
        result.items.reps[it.id] = enc.encode_plain(it.content_rep);
    return result;
}

// User representations by recency-weighted pooling of clicked items'
// representations: weight decay^age with the most recent click at weight 1.
// Only history entries with ts < boundary_ts participate, so callers can keep
// evaluation-period clicks out. Users with no usable history fall back to
// their normalized profile vector.
inline SemanticRepStore derive_user_reps(const std::vector<UserRecord>& users,
                                         const SemanticRepStore& item_reps,
                                         double decay = 0.5,
                                         int64_t boundary_ts = std::numeric_limits<int64_t>::max()) {
    if (decay <= 0.0 || decay > 1.0)
        throw ConfigError("derive_user_reps: decay must be in (0, 1]");
    SemanticRepStore store;
    store.kind = "user";
    store.dim = item_reps.dim;
    for (const auto& u : users) {
        std::vector<std::pair<int, int64_t>> hist;
        for (const auto& h : u.history)
            if (h.second < boundary_ts) hist.push_back(h);
        std::vector<double> pooled(static_cast<size_t>(item_reps.dim), 0.0);
        if (!hist.empty()) {
            double wsum = 0.0;
            for (size_t t = 0; t < hist.size(); ++t) {
                double w = std::pow(decay, static_cast<double>(hist.size() - 1 - t));
                const auto& rep = item_reps.rep(hist[t].first);
                for (size_t d = 0; d < pooled.size(); ++d) pooled[d] += w * rep[d];
                wsum += w;
            }
            for (double& x : pooled) x /= wsum;
        } else {
            for (size_t d = 0; d < pooled.size(); ++d)
                pooled[d] = d < u.profile.size() ? u.profile[d] : 0.0;
        }
        double n = 0.0;
        for (double x : pooled) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-12) { pooled.assign(pooled.size(), 0.0); pooled[0] = 1.0; }
        else for (double& x : pooled) x /= n;
        store.reps[u.id] = std::move(pooled);
    }
    return store;
}

}  // namespace ltrec
