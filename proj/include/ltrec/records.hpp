#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ltrec/errors.hpp"

namespace ltrec {

struct ItemRecord {
    int id = 0;
    std::vector<double> latent;       // generator-only ground truth
    std::vector<double> content_rep;  // latent + noise; what models may see
    double popularity = 0.0;          // normalized Zipf mass
    int category = 0;                 // mixture component index
};

struct UserRecord {
    int id = 0;
    std::vector<double> latent;       // generator-only ground truth
    double activity = 0.0;            // normalized Zipf mass
    std::vector<double> profile;      // model-visible attribute vector
    // Clicked (item, timestamp) pairs in chronological order, as produced by
    // the generator (covers the whole simulated range; consumers restrict to
    // their split).
    std::vector<std::pair<int, int64_t>> history;
};

struct InteractionEvent {
    int user_id = 0;
    int item_id = 0;
    int64_t ts = 0;
    int label = 0;  // 0/1 click
};

struct CoocPair {
    int a = 0;  // a < b by construction
    int b = 0;
    int count = 0;
};

// Per-entity training-split activity summary. `f_act` feeds the gates,
// `stats` feeds the feature views.
struct EntityActivity {
    bool tail = true;
    int64_t interactions = 0;  // clicks
    int64_t exposures = 0;     // events
    // [log1p(interactions), log1p(exposures), recency in [0,1]]
    std::vector<double> f_act{0.0, 0.0, 0.0};
    // [log1p(exposures), log1p(clicks), ctr]
    std::vector<double> stats{0.0, 0.0, 0.0};
};

struct ActivityLabels {
    int user_threshold = 5;
    int item_threshold = 10;
    std::map<int, EntityActivity> users;
    std::map<int, EntityActivity> items;

    // Entities never seen in the training split count as tail with zero
    // activity.
    const EntityActivity& user(int id) const { return find(users, id); }
    const EntityActivity& item(int id) const { return find(items, id); }

    bool user_tail(int id) const { return user(id).tail; }
    bool item_tail(int id) const { return item(id).tail; }
    bool sample_longtail(int user_id, int item_id) const {
        return user_tail(user_id) || item_tail(item_id);
    }

private:
    static const EntityActivity& find(const std::map<int, EntityActivity>& m, int id) {
        static const EntityActivity kUnseen{};
        auto it = m.find(id);
        return it == m.end() ? kUnseen : it->second;
    }
};

// Hierarchical codeword-index tuple; entries are 1-based (1..M).
struct SemanticID {
    std::vector<int> ids;

    bool operator==(const SemanticID& o) const { return ids == o.ids; }
    bool operator<(const SemanticID& o) const { return ids < o.ids; }

    std::vector<int> prefix(int len) const {
        if (len < 0 || len > static_cast<int>(ids.size()))
            throw DomainError("SemanticID::prefix: length " + std::to_string(len) +
                              " out of range for depth " + std::to_string(ids.size()));
        return std::vector<int>(ids.begin(), ids.begin() + len);
    }

    std::string str() const {
        std::string s = "(";
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(ids[i]);
        }
        return s + ")";
    }
};

// Unit-norm representation vectors for one entity kind.
struct SemanticRepStore {
    std::string kind;  // "item" or "user"
    int dim = 0;
    std::map<int, std::vector<double>> reps;

    const std::vector<double>& rep(int id) const {
        auto it = reps.find(id);
        if (it == reps.end())
            throw LookupError("SemanticRepStore(" + kind + "): no representation for id " +
                              std::to_string(id));
        return it->second;
    }
};

}  // namespace ltrec
