#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltrec/autodiff.hpp"
#include "ltrec/dataset_io.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/optim.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/tensor.hpp"

namespace ltrec {

struct RqConfig {
    int levels = 3;          // codebook layers
    int codebook_size = 16;  // words per layer (uniform unless level_sizes set)
    std::vector<int> level_sizes;  // optional per-level override
    int d_q = 8;
    // Keeps the last word of every layer frozen at zero, which makes residual
    // norms provably non-increasing across levels.
    bool reserve_zero = true;
    double beta_commit = 0.25;
    double ema_decay = 0.99;
    double lr = 1e-3;
    int epochs = 20;
    int batch = 64;

    int size_at(int level) const {
        if (!level_sizes.empty()) {
            if (static_cast<int>(level_sizes.size()) != levels)
                throw ConfigError("RqConfig: level_sizes length must equal levels");
            return level_sizes[static_cast<size_t>(level)];
        }
        return codebook_size;
    }
};

struct Codebook {
    std::vector<Tensor> words;
    std::vector<double> ema_count;
    std::vector<Tensor> ema_sum;
    std::vector<int64_t> usage;  // per-epoch pick counts
    bool reserve_zero = false;   // last word frozen at zero

    int size() const { return static_cast<int>(words.size()); }
    int learnable() const { return size() - (reserve_zero ? 1 : 0); }
};

struct QuantizeResult {
    SemanticID id;                  // 1-based word indices
    std::vector<Tensor> residuals;  // r_0..r_N
    Tensor quantized_sum;
};

// Greedy per-level nearest-word assignment; ties resolve to the lowest index.
// Pure: no mutation of the codebooks.
inline QuantizeResult quantize(const Tensor& latent, const std::vector<Codebook>& books) {
    if (books.empty()) throw DomainError("quantize: no codebooks");
    QuantizeResult res;
    res.residuals.reserve(books.size() + 1);
    res.residuals.push_back(latent);
    res.quantized_sum = Tensor::zeros(latent.rows, latent.cols);
    Tensor r = latent;
    for (const auto& book : books) {
        if (book.words.empty()) throw DomainError("quantize: empty codebook level");
        if (book.words[0].size() != latent.size())
            throw ShapeError("quantize: input " + latent.shape_str() + " vs codeword " +
                             book.words[0].shape_str());
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int i = 0; i < book.size(); ++i) {
            double d = 0.0;
            const Tensor& w = book.words[static_cast<size_t>(i)];
            for (int k = 0; k < r.size(); ++k) {
                double diff = r.v[k] - w.v[k];
                d += diff * diff;
            }
            if (d < best_d) { best_d = d; best = i; }
        }
        const Tensor& w = book.words[static_cast<size_t>(best)];
        for (int k = 0; k < r.size(); ++k) {
            r.v[k] -= w.v[k];
            res.quantized_sum.v[k] += w.v[k];
        }
        res.id.ids.push_back(best + 1);
        res.residuals.push_back(r);
    }
    return res;
}

class QuantizerModel {
public:
    RqConfig cfg;
    int d_in = 0;
    ParamBlock enc_W, enc_b, dec_W, dec_b;
    std::vector<Codebook> books;
    std::vector<double> epoch_losses;

    Tensor encode_plain(const Tensor& x) const {
        return affine_plain(enc_W.value, enc_b.value, x);
    }
    Tensor decode_plain(const Tensor& z) const {
        return affine_plain(dec_W.value, dec_b.value, z);
    }

    Value encode_graph(ParamContext& ctx, Value x) const {
        return dense_affine(x, ctx.use(const_cast<ParamBlock&>(enc_W)),
                            ctx.use(const_cast<ParamBlock&>(enc_b)));
    }
    Value decode_graph(ParamContext& ctx, Value z) const {
        return dense_affine(z, ctx.use(const_cast<ParamBlock&>(dec_W)),
                            ctx.use(const_cast<ParamBlock&>(dec_b)));
    }

    // Decoder applied to the sum of the first `k` chosen words.
    Tensor reconstruct_partial(const Tensor& rep, int k) const {
        QuantizeResult q = quantize(encode_plain(rep), books);
        Tensor part = Tensor::zeros(cfg.d_q, 1);
        for (int lvl = 0; lvl < k; ++lvl) {
            const Tensor& w = books[static_cast<size_t>(lvl)]
                                  .words[static_cast<size_t>(q.id.ids[static_cast<size_t>(lvl)] - 1)];
            for (int i = 0; i < part.size(); ++i) part.v[i] += w.v[i];
        }
        return decode_plain(part);
    }

private:
    static Tensor affine_plain(const Tensor& W, const Tensor& b, const Tensor& x) {
        if (W.cols != x.rows)
            throw ShapeError("QuantizerModel: input " + x.shape_str() + " vs weight " +
                             W.shape_str());
        Tensor out(W.rows, 1);
        for (int i = 0; i < W.rows; ++i) {
            double s = b.v[i];
            const double* row = &W.v[static_cast<size_t>(i) * W.cols];
            for (int j = 0; j < W.cols; ++j) s += row[j] * x.v[j];
            out.v[i] = s;
        }
        return out;
    }
};

namespace detail {

inline Codebook init_codebook(int M, bool reserve_zero, int d_q,
                              const std::vector<Tensor>& encoded, Rng& rng) {
    Codebook book;
    book.reserve_zero = reserve_zero;
    int learnable = M - (reserve_zero ? 1 : 0);
    std::vector<size_t> perm = rng.permutation(encoded.size());
    for (int i = 0; i < learnable; ++i)
        book.words.push_back(encoded[perm[static_cast<size_t>(i) % perm.size()]]);
    if (reserve_zero) book.words.push_back(Tensor::zeros(d_q, 1));
    book.ema_count.assign(static_cast<size_t>(M), 1.0);
    book.ema_sum = book.words;
    book.usage.assign(static_cast<size_t>(M), 0);
    return book;
}

}  // namespace detail

// Trains encoder/decoder by gradient descent on reconstruction + commitment,
// with codewords learned by exponential moving averages of the residuals they
// absorb. Words unused for a whole epoch are reseeded from a random encoding.
inline QuantizerModel train_rqvae(const SemanticRepStore& reps, const RqConfig& cfg,
                                  uint64_t seed) {
    if (cfg.levels < 1) throw ConfigError("train_rqvae: levels must be >= 1");
    int max_m = 0;
    for (int lvl = 0; lvl < cfg.levels; ++lvl) {
        if (cfg.size_at(lvl) < 2)
            throw ConfigError("train_rqvae: codebook size must be >= 2 per level");
        max_m = std::max(max_m, cfg.size_at(lvl));
    }
    if (static_cast<int>(reps.reps.size()) < max_m)
        throw DataError("train_rqvae: " + std::to_string(reps.reps.size()) +
                        " representations cannot populate a codebook of size " +
                        std::to_string(max_m));

    QuantizerModel model;
    model.cfg = cfg;
    model.d_in = reps.dim;
    Rng rng(derive_seed(seed, "rqvae-" + reps.kind));
    {
        Tensor eW = Tensor::zeros(cfg.d_q, reps.dim);
        double std_e = std::sqrt(1.0 / reps.dim);
        for (auto& w : eW.v) w = rng.gaussian(0.0, std_e);
        Tensor dW = Tensor::zeros(reps.dim, cfg.d_q);
        double std_d = std::sqrt(1.0 / cfg.d_q);
        for (auto& w : dW.v) w = rng.gaussian(0.0, std_d);
        model.enc_W = ParamBlock("rq.enc_W", std::move(eW));
        model.enc_b = ParamBlock("rq.enc_b", Tensor::zeros(cfg.d_q, 1));
        model.dec_W = ParamBlock("rq.dec_W", std::move(dW));
        model.dec_b = ParamBlock("rq.dec_b", Tensor::zeros(reps.dim, 1));
    }

    std::vector<int> entity_ids;
    std::vector<Tensor> inputs;
    for (const auto& [id, rep] : reps.reps) {
        entity_ids.push_back(id);
        inputs.push_back(Tensor::vec(rep));
    }
    std::vector<Tensor> encoded0;
    encoded0.reserve(inputs.size());
    for (const auto& x : inputs) encoded0.push_back(model.encode_plain(x));
    for (int lvl = 0; lvl < cfg.levels; ++lvl)
        model.books.push_back(detail::init_codebook(cfg.size_at(lvl), cfg.reserve_zero,
                                                    cfg.d_q, encoded0, rng));

    AdamConfig adam;
    adam.lr = cfg.lr;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (auto& book : model.books) book.usage.assign(book.usage.size(), 0);
        std::vector<size_t> order = rng.permutation(inputs.size());
        double loss_sum = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            Graph g;
            ParamContext ctx(g);
            std::vector<Value> sample_losses;
            // Residuals absorbed per word this batch, for the EMA update.
            std::vector<std::vector<int>> batch_n(model.books.size());
            std::vector<std::vector<Tensor>> batch_s(model.books.size());
            for (size_t lvl = 0; lvl < model.books.size(); ++lvl) {
                batch_n[lvl].assign(static_cast<size_t>(model.books[lvl].size()), 0);
                batch_s[lvl].assign(static_cast<size_t>(model.books[lvl].size()),
                                    Tensor::zeros(cfg.d_q, 1));
            }
            for (size_t k = start; k < end; ++k) {
                const Tensor& x = inputs[order[k]];
                Value xin = g.constant(x);
                Value z = model.encode_graph(ctx, xin);
                QuantizeResult q = quantize(z.data(), model.books);
                for (size_t lvl = 0; lvl < model.books.size(); ++lvl) {
                    int w = q.id.ids[lvl] - 1;
                    model.books[lvl].usage[static_cast<size_t>(w)] += 1;
                    batch_n[lvl][static_cast<size_t>(w)] += 1;
                    Tensor& s = batch_s[lvl][static_cast<size_t>(w)];
                    for (int i = 0; i < s.size(); ++i) s.v[i] += q.residuals[lvl].v[i];
                }
                Value zq = add(z, stop_gradient(sub(g.constant(q.quantized_sum), z)));
                Value recon = model.decode_graph(ctx, zq);
                Value err = sub(recon, xin);
                Value l_rec = scale(dot(err, err), 1.0 / model.d_in);
                Value cerr = sub(z, g.constant(q.quantized_sum));
                Value l_com = scale(dot(cerr, cerr), cfg.beta_commit / cfg.d_q);
                sample_losses.push_back(add(l_rec, l_com));
            }
            Value total = sample_losses[0];
            for (size_t i = 1; i < sample_losses.size(); ++i)
                total = add(total, sample_losses[i]);
            Value loss = scale(total, 1.0 / static_cast<double>(sample_losses.size()));
            double lv = loss.scalar();
            if (std::isfinite(lv)) {
                g.backward(loss);
                ctx.apply(adam);
                loss_sum += lv;
                ++batches;
            }
            for (size_t lvl = 0; lvl < model.books.size(); ++lvl) {
                Codebook& book = model.books[lvl];
                for (int w = 0; w < book.learnable(); ++w) {
                    double n = static_cast<double>(batch_n[lvl][static_cast<size_t>(w)]);
                    book.ema_count[static_cast<size_t>(w)] =
                        cfg.ema_decay * book.ema_count[static_cast<size_t>(w)] +
                        (1.0 - cfg.ema_decay) * n;
                    Tensor& m = book.ema_sum[static_cast<size_t>(w)];
                    const Tensor& s = batch_s[lvl][static_cast<size_t>(w)];
                    for (int i = 0; i < m.size(); ++i)
                        m.v[i] = cfg.ema_decay * m.v[i] + (1.0 - cfg.ema_decay) * s.v[i];
                    double denom = std::max(book.ema_count[static_cast<size_t>(w)], 1e-8);
                    Tensor& word = book.words[static_cast<size_t>(w)];
                    for (int i = 0; i < word.size(); ++i) word.v[i] = m.v[i] / denom;
                }
            }
        }
        model.epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
        // Reseed words that went a whole epoch without being picked.
        for (auto& book : model.books) {
            for (int w = 0; w < book.learnable(); ++w) {
                if (book.usage[static_cast<size_t>(w)] != 0) continue;
                const Tensor& x = inputs[rng.uniform_int(inputs.size())];
                Tensor z = model.encode_plain(x);
                book.words[static_cast<size_t>(w)] = z;
                book.ema_sum[static_cast<size_t>(w)] = z;
                book.ema_count[static_cast<size_t>(w)] = 1.0;
            }
        }
    }
    return model;
}

inline std::map<int, SemanticID> assign_semantic_ids(const SemanticRepStore& reps,
                                                     const QuantizerModel& model) {
    if (reps.dim != model.d_in)
        throw ConfigError("assign_semantic_ids: rep dim " + std::to_string(reps.dim) +
                          " does not match model input dim " + std::to_string(model.d_in));
    std::map<int, SemanticID> out;
    for (const auto& [id, rep] : reps.reps)
        out[id] = quantize(model.encode_plain(Tensor::vec(rep)), model.books).id;
    return out;
}

struct ClusterIndex {
    int level = 0;  // prefix length
    std::map<std::vector<int>, std::vector<int>> members;

    const std::vector<int>* find(const std::vector<int>& prefix) const {
        auto it = members.find(prefix);
        return it == members.end() ? nullptr : &it->second;
    }
};

inline ClusterIndex build_cluster_index(const std::map<int, SemanticID>& id_map, int level) {
    if (id_map.empty()) throw DataError("build_cluster_index: empty id map");
    int depth = static_cast<int>(id_map.begin()->second.ids.size());
    if (level < 1 || level > depth)
        throw DomainError("build_cluster_index: level " + std::to_string(level) +
                          " out of range [1," + std::to_string(depth) + "]");
    ClusterIndex index;
    index.level = level;
    for (const auto& [id, sid] : id_map)
        index.members[sid.prefix(level)].push_back(id);
    return index;
}

// Majority-category fraction, size-weighted across clusters.
inline double category_purity(const ClusterIndex& index, const std::map<int, int>& categories) {
    int64_t total = 0, agree = 0;
    for (const auto& [prefix, members] : index.members) {
        (void)prefix;
        std::map<int, int> counts;
        for (int id : members) counts[categories.at(id)] += 1;
        int best = 0;
        for (const auto& [cat, n] : counts) best = std::max(best, n);
        agree += best;
        total += static_cast<int64_t>(members.size());
    }
    return total ? static_cast<double>(agree) / static_cast<double>(total) : 0.0;
}

struct ClusterStats {
    double collision_rate = 0.0;
    double mean_cluster_size = 0.0;
    std::map<int, int> size_histogram;
    double category_purity = -1.0;  // -1 when no category reference given
};

inline ClusterStats cluster_stats(const ClusterIndex& index,
                                  const std::map<int, int>* categories = nullptr) {
    if (index.members.empty()) throw DataError("cluster_stats: empty index");
    ClusterStats st;
    int64_t entities = 0;
    for (const auto& [prefix, members] : index.members) {
        (void)prefix;
        entities += static_cast<int64_t>(members.size());
        st.size_histogram[static_cast<int>(members.size())] += 1;
    }
    double distinct = static_cast<double>(index.members.size());
    st.collision_rate = 1.0 - distinct / static_cast<double>(entities);
    st.mean_cluster_size = static_cast<double>(entities) / distinct;
    if (categories) st.category_purity = category_purity(index, *categories);
    return st;
}

// ---- codebooks.json -------------------------------------------------------

namespace detail {

inline json model_to_json(const QuantizerModel& m) {
    json j;
    j["config"] = {{"levels", m.cfg.levels},
                   {"codebook_size", m.cfg.codebook_size},
                   {"level_sizes", m.cfg.level_sizes},
                   {"d_q", m.cfg.d_q},
                   {"reserve_zero", m.cfg.reserve_zero},
                   {"beta_commit", m.cfg.beta_commit},
                   {"ema_decay", m.cfg.ema_decay},
                   {"lr", m.cfg.lr},
                   {"epochs", m.cfg.epochs},
                   {"batch", m.cfg.batch}};
    j["d_in"] = m.d_in;
    j["enc_W"] = m.enc_W.value.v;
    j["enc_b"] = m.enc_b.value.v;
    j["dec_W"] = m.dec_W.value.v;
    j["dec_b"] = m.dec_b.value.v;
    json levels = json::array();
    for (const auto& book : m.books) {
        json words = json::array();
        for (const auto& w : book.words) words.push_back(w.v);
        levels.push_back({{"words", words}, {"reserve_zero", book.reserve_zero}});
    }
    j["codebooks"] = std::move(levels);
    j["epoch_losses"] = m.epoch_losses;
    return j;
}

inline QuantizerModel model_from_json(const json& j) {
    QuantizerModel m;
    const json& c = j.at("config");
    m.cfg.levels = c.at("levels").get<int>();
    m.cfg.codebook_size = c.at("codebook_size").get<int>();
    m.cfg.level_sizes = c.at("level_sizes").get<std::vector<int>>();
    m.cfg.d_q = c.at("d_q").get<int>();
    m.cfg.reserve_zero = c.at("reserve_zero").get<bool>();
    m.cfg.beta_commit = c.at("beta_commit").get<double>();
    m.cfg.ema_decay = c.at("ema_decay").get<double>();
    m.cfg.lr = c.at("lr").get<double>();
    m.cfg.epochs = c.at("epochs").get<int>();
    m.cfg.batch = c.at("batch").get<int>();
    m.d_in = j.at("d_in").get<int>();
    auto load = [](ParamBlock& blk, const std::string& name, const json& arr, int rows, int cols) {
        Tensor t(rows, cols);
        t.v = arr.get<std::vector<double>>();
        if (static_cast<int>(t.v.size()) != rows * cols)
            throw DataError("codebooks.json: bad size for " + name);
        blk = ParamBlock(name, std::move(t));
    };
    load(m.enc_W, "rq.enc_W", j.at("enc_W"), m.cfg.d_q, m.d_in);
    load(m.enc_b, "rq.enc_b", j.at("enc_b"), m.cfg.d_q, 1);
    load(m.dec_W, "rq.dec_W", j.at("dec_W"), m.d_in, m.cfg.d_q);
    load(m.dec_b, "rq.dec_b", j.at("dec_b"), m.d_in, 1);
    for (const auto& lvl : j.at("codebooks")) {
        Codebook book;
        book.reserve_zero = lvl.at("reserve_zero").get<bool>();
        for (const auto& w : lvl.at("words")) {
            Tensor t(m.cfg.d_q, 1);
            t.v = w.get<std::vector<double>>();
            book.words.push_back(std::move(t));
        }
        book.ema_count.assign(book.words.size(), 1.0);
        book.ema_sum = book.words;
        book.usage.assign(book.words.size(), 0);
        m.books.push_back(std::move(book));
    }
    if (j.contains("epoch_losses"))
        m.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    return m;
}

}  // namespace detail

inline void write_codebooks_json(const std::filesystem::path& path,
                                 const QuantizerModel& item_model,
                                 const QuantizerModel& user_model,
                                 const std::string& version, uint64_t seed) {
    json j = detail::meta_line("codebooks", version, seed);
    j["item"] = detail::model_to_json(item_model);
    j["user"] = detail::model_to_json(user_model);
    write_text_file(path, j.dump(1) + "\n");
}

inline std::pair<QuantizerModel, QuantizerModel>
read_codebooks_json(const std::filesystem::path& path) {
    json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw DataError(path.string() + ": malformed JSON");
    return {detail::model_from_json(j.at("item")), detail::model_from_json(j.at("user"))};
}

}  // namespace ltrec
