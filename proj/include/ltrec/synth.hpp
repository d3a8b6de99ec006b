#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ltrec/errors.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rng.hpp"

namespace ltrec {

constexpr int64_t kSecondsPerDay = 86400;

struct ClickModelParams {
    double affinity_coef = 2.5;    // a · <u_lat, i_lat>
    double popularity_coef = 0.8;  // b · standardized log-popularity
    double intercept = -1.5;       // c
    double choice_gamma = 3.0;     // softmax sharpness over the candidate set
    int candidates = 8;            // exposure candidates per event
};

struct DatasetConfig {
    int num_users = 5000;
    int num_items = 2000;
    int num_categories = 12;
    int d_lat = 16;
    int num_events = 200000;
    int num_days = 10;
    int test_days = 5;
    double zipf_item = 1.5;
    double zipf_user = 1.2;
    double noise_sigma = 0.1;
    double mixture_sigma = 0.2;
    ClickModelParams click;
    int user_threshold = 5;
    int item_threshold = 10;
    int cooc_window = 5;
    int cooc_min_count = 1;
};

namespace detail {

// Unit-norm component centers shared by items and users. Re-derived from the
// dataset seed via a fixed label so both generators land in the same space.
inline std::vector<std::vector<double>> mixture_means(int num_components, int dim,
                                                      uint64_t dataset_seed) {
    Rng rng(derive_seed(dataset_seed, "mixture"));
    std::vector<std::vector<double>> means(static_cast<size_t>(num_components));
    for (auto& m : means) {
        m = rng.gaussian_vec(dim);
        double n = 0.0;
        for (double x : m) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-12) { m.assign(static_cast<size_t>(dim), 0.0); m[0] = 1.0; n = 1.0; }
        for (double& x : m) x /= n;
    }
    return means;
}

inline std::vector<double> mixture_draw(const std::vector<double>& mean, double sigma,
                                        Rng& rng) {
    std::vector<double> v(mean.size());
    double n = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        v[i] = mean[i] + rng.gaussian(0.0, sigma);
        n += v[i] * v[i];
    }
    n = std::sqrt(n);
    if (n < 1e-12) return mean;
    for (double& x : v) x /= n;
    return v;
}

inline double dot_vec(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

inline std::vector<ItemRecord> generate_catalog(const DatasetConfig& cfg, uint64_t seed) {
    if (cfg.num_items < 1 || cfg.num_categories < 1 || cfg.num_items < cfg.num_categories)
        throw ConfigError("generate_catalog: need num_items >= num_categories >= 1, got " +
                          std::to_string(cfg.num_items) + " / " +
                          std::to_string(cfg.num_categories));
    if (cfg.zipf_item <= 0.0)
        throw ConfigError("generate_catalog: zipf exponent must be positive");
    auto means = detail::mixture_means(cfg.num_categories, cfg.d_lat, seed);
    Rng rng(derive_seed(seed, "catalog"));
    std::vector<double> pop = zipf_weights(static_cast<size_t>(cfg.num_items), cfg.zipf_item);
    std::vector<ItemRecord> items(static_cast<size_t>(cfg.num_items));
    for (int i = 0; i < cfg.num_items; ++i) {
        ItemRecord& it = items[static_cast<size_t>(i)];
        it.id = i;
        it.category = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.num_categories)));
        it.latent = detail::mixture_draw(means[static_cast<size_t>(it.category)],
                                         cfg.mixture_sigma, rng);
        it.content_rep = it.latent;
        for (double& x : it.content_rep) x += rng.gaussian(0.0, cfg.noise_sigma);
        it.popularity = pop[static_cast<size_t>(i)];
    }
    return items;
}

inline std::vector<UserRecord> generate_users(const DatasetConfig& cfg, uint64_t seed) {
    if (cfg.num_users < 1)
        throw ConfigError("generate_users: num_users must be >= 1");
    auto means = detail::mixture_means(cfg.num_categories, cfg.d_lat, seed);
    Rng rng(derive_seed(seed, "users"));
    std::vector<double> act = zipf_weights(static_cast<size_t>(cfg.num_users), cfg.zipf_user);
    std::vector<UserRecord> users(static_cast<size_t>(cfg.num_users));
    for (int u = 0; u < cfg.num_users; ++u) {
        UserRecord& ur = users[static_cast<size_t>(u)];
        ur.id = u;
        int cat = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.num_categories)));
        ur.latent = detail::mixture_draw(means[static_cast<size_t>(cat)], cfg.mixture_sigma, rng);
        ur.activity = act[static_cast<size_t>(u)];
        ur.profile = rng.gaussian_vec(cfg.d_lat);
    }
    return users;
}

// Simulates exposure + click. Each event: a user drawn by activity mass, a
// candidate set drawn by popularity mass, one candidate chosen by softmaxed
// latent affinity, and a click label from a logistic model over affinity and
// popularity. Clicked items are appended to the user's history.
inline std::vector<InteractionEvent> generate_interactions(const std::vector<ItemRecord>& catalog,
                                                           std::vector<UserRecord>& users,
                                                           const DatasetConfig& cfg,
                                                           uint64_t seed) {
    if (catalog.empty() || users.empty())
        throw ConfigError("generate_interactions: catalog and users must be non-empty");
    if (cfg.num_events <= 0)
        throw ConfigError("generate_interactions: num_events must be positive");
    int64_t span = static_cast<int64_t>(cfg.num_days) * kSecondsPerDay;
    if (span < cfg.num_events)
        throw ConfigError("generate_interactions: more events than seconds in the range; "
                          "timestamps could not stay strictly increasing");
    Rng rng(derive_seed(seed, "events"));

    std::vector<double> act(users.size()), pop(catalog.size());
    for (size_t u = 0; u < users.size(); ++u) act[u] = users[u].activity;
    for (size_t i = 0; i < catalog.size(); ++i) pop[i] = catalog[i].popularity;
    CumulativeSampler user_sampler(act);
    CumulativeSampler item_sampler(pop);

    // Standardized log-popularity drives the popularity bias term.
    std::vector<double> pop_z(catalog.size(), 0.0);
    {
        double mean = 0.0;
        for (size_t i = 0; i < catalog.size(); ++i) {
            pop_z[i] = std::log(catalog[i].popularity);
            mean += pop_z[i];
        }
        mean /= static_cast<double>(catalog.size());
        double var = 0.0;
        for (double z : pop_z) var += (z - mean) * (z - mean);
        var /= static_cast<double>(catalog.size());
        double sd = std::sqrt(var);
        for (double& z : pop_z) z = sd > 1e-12 ? (z - mean) / sd : 0.0;
    }

    const ClickModelParams& cm = cfg.click;
    int num_cand = std::max(1, cm.candidates);
    std::vector<InteractionEvent> events;
    events.reserve(static_cast<size_t>(cfg.num_events));
    std::vector<size_t> cand(static_cast<size_t>(num_cand));
    std::vector<double> cw(static_cast<size_t>(num_cand));
    for (int e = 0; e < cfg.num_events; ++e) {
        int64_t ts = static_cast<int64_t>(e) * span / cfg.num_events;
        size_t u = user_sampler.sample(rng);
        const UserRecord& ur = users[u];
        for (int k = 0; k < num_cand; ++k)
            cand[static_cast<size_t>(k)] = item_sampler.sample(rng);
        double mx = -1e300;
        for (int k = 0; k < num_cand; ++k) {
            cw[static_cast<size_t>(k)] = cm.choice_gamma *
                detail::dot_vec(ur.latent, catalog[cand[static_cast<size_t>(k)]].latent);
            mx = std::max(mx, cw[static_cast<size_t>(k)]);
        }
        double denom = 0.0;
        for (auto& w : cw) { w = std::exp(w - mx); denom += w; }
        double r = rng.uniform() * denom;
        size_t chosen = cand.back();
        double acc = 0.0;
        for (int k = 0; k < num_cand; ++k) {
            acc += cw[static_cast<size_t>(k)];
            if (r < acc) { chosen = cand[static_cast<size_t>(k)]; break; }
        }
        const ItemRecord& it = catalog[chosen];
        double logit = cm.affinity_coef * detail::dot_vec(ur.latent, it.latent) +
                       cm.popularity_coef * pop_z[chosen] + cm.intercept;
        double p = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit))
                              : std::exp(logit) / (1.0 + std::exp(logit));
        int label = rng.bernoulli(p) ? 1 : 0;
        events.push_back({static_cast<int>(u), static_cast<int>(chosen), ts, label});
        if (label)
            users[u].history.emplace_back(static_cast<int>(chosen), ts);
    }
    return events;
}

// Splits at the day boundary: timestamps in the last `test_days` days go to
// test (closed-open rule, boundary timestamp included in test).
inline std::pair<std::vector<InteractionEvent>, std::vector<InteractionEvent>>
time_split(const std::vector<InteractionEvent>& events, int num_days, int test_days) {
    if (test_days < 0 || test_days > num_days)
        throw ConfigError("time_split: test_days out of range");
    int64_t boundary = static_cast<int64_t>(num_days - test_days) * kSecondsPerDay;
    std::vector<InteractionEvent> train, test;
    for (const auto& e : events)
        (e.ts < boundary ? train : test).push_back(e);
    if (train.empty() || test.empty())
        throw DataError("time_split: produced an empty " +
                        std::string(train.empty() ? "train" : "test") + " side");
    return {std::move(train), std::move(test)};
}

// Train-split activity census: head/tail flags plus the activity and stats
// feature vectors used downstream. Pass training events only.
inline ActivityLabels label_head_tail(const std::vector<InteractionEvent>& train_events,
                                      int user_threshold = 5, int item_threshold = 10) {
    if (train_events.empty())
        throw DataError("label_head_tail: empty event set");
    ActivityLabels lab;
    lab.user_threshold = user_threshold;
    lab.item_threshold = item_threshold;
    int64_t ts_min = train_events.front().ts, ts_max = train_events.front().ts;
    for (const auto& e : train_events) {
        ts_min = std::min(ts_min, e.ts);
        ts_max = std::max(ts_max, e.ts);
    }
    double ts_range = static_cast<double>(ts_max - ts_min);
    std::map<int, int64_t> user_last, item_last;
    for (const auto& e : train_events) {
        EntityActivity& u = lab.users[e.user_id];
        EntityActivity& i = lab.items[e.item_id];
        u.exposures += 1;
        i.exposures += 1;
        if (e.label) { u.interactions += 1; i.interactions += 1; }
        user_last[e.user_id] = std::max(user_last[e.user_id], e.ts);
        item_last[e.item_id] = std::max(item_last[e.item_id], e.ts);
    }
    auto finish = [&](std::map<int, EntityActivity>& m, const std::map<int, int64_t>& last,
                      int64_t threshold, bool by_interactions) {
        for (auto& [id, ea] : m) {
            int64_t count = by_interactions ? ea.interactions : ea.exposures;
            ea.tail = count < threshold;
            double recency = ts_range > 0.0
                ? static_cast<double>(last.at(id) - ts_min) / ts_range : 0.0;
            ea.f_act = {std::log1p(static_cast<double>(ea.interactions)),
                        std::log1p(static_cast<double>(ea.exposures)), recency};
            double ctr = ea.exposures > 0
                ? static_cast<double>(ea.interactions) / static_cast<double>(ea.exposures)
                : 0.0;
            ea.stats = {std::log1p(static_cast<double>(ea.exposures)),
                        std::log1p(static_cast<double>(ea.interactions)), ctr};
        }
    };
    finish(lab.users, user_last, user_threshold, /*by_interactions=*/true);
    finish(lab.items, item_last, item_threshold, /*by_interactions=*/false);
    return lab;
}

// Pairs of items clicked by the same user within `window` consecutive clicks,
// order-normalized (a < b), counted, then filtered by min_count.
inline std::vector<CoocPair> extract_cooccurrence(const std::vector<InteractionEvent>& events,
                                                  int window, int min_count) {
    if (window < 1)
        throw ConfigError("extract_cooccurrence: window must be >= 1");
    std::map<int, std::vector<int>> clicks_by_user;  // chronological per user
    for (const auto& e : events)
        if (e.label) clicks_by_user[e.user_id].push_back(e.item_id);
    std::map<std::pair<int, int>, int> counts;
    for (const auto& [uid, seq] : clicks_by_user) {
        (void)uid;
        for (size_t i = 0; i < seq.size(); ++i) {
            size_t jmax = std::min(seq.size(), i + static_cast<size_t>(window) + 1);
            for (size_t j = i + 1; j < jmax; ++j) {
                if (seq[i] == seq[j]) continue;
                int a = std::min(seq[i], seq[j]);
                int b = std::max(seq[i], seq[j]);
                counts[{a, b}] += 1;
            }
        }
    }
    std::vector<CoocPair> out;
    for (const auto& [key, c] : counts)
        if (c >= min_count) out.push_back({key.first, key.second, c});
    return out;
}

}  // namespace ltrec
