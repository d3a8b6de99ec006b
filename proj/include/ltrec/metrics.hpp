#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltrec/dataset_io.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/records.hpp"
#include "ltrec/rng.hpp"
#include "ltrec/rqvae.hpp"

namespace ltrec {

struct ScoredSample {
    int user_id = 0;
    int item_id = 0;
    double score = 0.0;
    int label = 0;
    bool user_tail = false;
    bool item_tail = false;
    bool longtail = false;
};

// Mann-Whitney AUC with average ranks, so tied pairs contribute exactly 0.5.
inline double auc_from_arrays(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("auc: scores and labels differ in length");
    size_t n = scores.size();
    int64_t pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw DomainError("auc: labels must be 0/1");
        pos += y;
    }
    int64_t neg = static_cast<int64_t>(n) - pos;
    if (pos == 0 || neg == 0)
        throw MetricUndefinedError("auc: needs both classes, got " + std::to_string(pos) +
                                   " positives / " + std::to_string(neg) + " negatives");
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_pos_sum = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        // 1-based ranks i+1..j averaged over the tie block
        double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t k = i; k < j; ++k)
            if (labels[idx[k]]) rank_pos_sum += avg_rank;
        i = j;
    }
    double p = static_cast<double>(pos);
    return (rank_pos_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

inline double auc(const std::vector<ScoredSample>& samples) {
    std::vector<double> s;
    std::vector<int> y;
    s.reserve(samples.size());
    y.reserve(samples.size());
    for (const auto& smp : samples) {
        s.push_back(smp.score);
        y.push_back(smp.label);
    }
    return auc_from_arrays(s, y);
}

struct GaucResult {
    double value = 0.0;
    int groups_used = 0;
    int groups_skipped = 0;  // single-class groups
    int64_t weight = 0;      // total impressions over used groups
};

// Impression-weighted mean of per-user AUC over users with both classes.
inline GaucResult gauc_detail(const std::vector<ScoredSample>& samples) {
    std::map<int, std::vector<const ScoredSample*>> groups;
    for (const auto& s : samples) groups[s.user_id].push_back(&s);
    GaucResult res;
    double weighted = 0.0;
    for (const auto& [uid, members] : groups) {
        (void)uid;
        std::vector<double> sc;
        std::vector<int> lb;
        for (const auto* m : members) {
            sc.push_back(m->score);
            lb.push_back(m->label);
        }
        try {
            double a = auc_from_arrays(sc, lb);
            double w = static_cast<double>(members.size());
            weighted += w * a;
            res.weight += static_cast<int64_t>(members.size());
            res.groups_used += 1;
        } catch (const MetricUndefinedError&) {
            res.groups_skipped += 1;
        }
    }
    if (res.groups_used == 0)
        throw MetricUndefinedError("gauc: no group has both classes");
    res.value = weighted / static_cast<double>(res.weight);
    return res;
}

inline double gauc(const std::vector<ScoredSample>& samples) {
    return gauc_detail(samples).value;
}

struct SliceMetrics {
    int64_t count = 0;
    bool auc_defined = false;
    double auc = 0.0;
    bool gauc_defined = false;
    double gauc = 0.0;
    int groups_used = 0;
    int groups_skipped = 0;
};

// Head = head user AND head item; Tail = user or item is tail. The two are
// disjoint and cover everything.
struct MetricReport {
    SliceMetrics total, head, tail;
};

namespace detail {

inline SliceMetrics slice_metrics(const std::vector<ScoredSample>& samples) {
    SliceMetrics m;
    m.count = static_cast<int64_t>(samples.size());
    try {
        m.auc = auc(samples);
        m.auc_defined = true;
    } catch (const MetricUndefinedError&) {}
    try {
        GaucResult g = gauc_detail(samples);
        m.gauc = g.value;
        m.gauc_defined = true;
        m.groups_used = g.groups_used;
        m.groups_skipped = g.groups_skipped;
    } catch (const MetricUndefinedError&) {}
    return m;
}

}  // namespace detail

inline MetricReport slice_report(const std::vector<ScoredSample>& samples) {
    std::vector<ScoredSample> head, tail;
    for (const auto& s : samples) {
        if (s.longtail) tail.push_back(s);
        else head.push_back(s);
    }
    MetricReport rep;
    rep.total = detail::slice_metrics(samples);
    rep.head = detail::slice_metrics(head);
    rep.tail = detail::slice_metrics(tail);
    return rep;
}

// ---- cluster quality diagnostics ------------------------------------------

struct ClusterQuality {
    double purity = 0.0;
    double shuffled_purity = 0.0;  // same clusters, category labels shuffled
    // (mean latent distance, mean shared-prefix length) per distance quartile
    std::vector<std::pair<double, double>> prefix_curve;
};

inline ClusterQuality cluster_quality(const ClusterIndex& level1_index,
                                      const std::map<int, SemanticID>& ids,
                                      const std::map<int, int>& categories,
                                      const std::map<int, std::vector<double>>& latents,
                                      uint64_t seed, int num_pairs = 2000) {
    ClusterQuality q;
    q.purity = category_purity(level1_index, categories);

    Rng rng(derive_seed(seed, "cluster-quality"));
    std::vector<int> ent_ids;
    std::vector<int> cats;
    for (const auto& [id, c] : categories) {
        ent_ids.push_back(id);
        cats.push_back(c);
    }
    std::vector<size_t> perm = rng.permutation(cats.size());
    std::map<int, int> shuffled;
    for (size_t i = 0; i < ent_ids.size(); ++i) shuffled[ent_ids[i]] = cats[perm[i]];
    q.shuffled_purity = category_purity(level1_index, shuffled);

    if (ent_ids.size() >= 2 && !latents.empty()) {
        struct PairObs { double dist; double shared; };
        std::vector<PairObs> obs;
        for (int k = 0; k < num_pairs; ++k) {
            int a = ent_ids[rng.uniform_int(ent_ids.size())];
            int b = ent_ids[rng.uniform_int(ent_ids.size())];
            if (a == b) continue;
            const auto& la = latents.at(a);
            const auto& lb = latents.at(b);
            double d = 0.0;
            for (size_t i = 0; i < la.size(); ++i) d += (la[i] - lb[i]) * (la[i] - lb[i]);
            d = std::sqrt(d);
            const auto& ia = ids.at(a).ids;
            const auto& ib = ids.at(b).ids;
            double shared = 0;
            for (size_t i = 0; i < ia.size() && i < ib.size() && ia[i] == ib[i]; ++i)
                shared += 1;
            obs.push_back({d, shared});
        }
        std::sort(obs.begin(), obs.end(),
                  [](const PairObs& x, const PairObs& y) { return x.dist < y.dist; });
        size_t qn = obs.size() / 4;
        for (int b = 0; b < 4 && qn > 0; ++b) {
            double dsum = 0, ssum = 0;
            for (size_t i = static_cast<size_t>(b) * qn; i < static_cast<size_t>(b + 1) * qn; ++i) {
                dsum += obs[i].dist;
                ssum += obs[i].shared;
            }
            q.prefix_curve.emplace_back(dsum / static_cast<double>(qn),
                                        ssum / static_cast<double>(qn));
        }
    }
    return q;
}

// ---- reports and files ----------------------------------------------------

namespace detail {

inline json slice_json(const SliceMetrics& m) {
    json j;
    j["count"] = m.count;
    if (m.auc_defined) j["auc"] = m.auc; else j["auc"] = nullptr;
    if (m.gauc_defined) {
        j["gauc"] = m.gauc;
        j["gauc_groups_used"] = m.groups_used;
        j["gauc_groups_skipped"] = m.groups_skipped;
    } else {
        j["gauc"] = nullptr;
    }
    return j;
}

inline std::string fmt_metric(bool defined, double v) {
    if (!defined) return "   undef";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%8.5f", v);
    return buf;
}

}  // namespace detail

inline json metric_report_json(const MetricReport& rep) {
    json j;
    j["slice_definitions"] = {
        {"head", "head user and head item"},
        {"tail", "tail user or tail item"},
    };
    j["total"] = detail::slice_json(rep.total);
    j["head"] = detail::slice_json(rep.head);
    j["tail"] = detail::slice_json(rep.tail);
    return j;
}

namespace detail {

inline SliceMetrics slice_from_json(const json& j) {
    SliceMetrics m;
    m.count = j.at("count").get<int64_t>();
    if (!j.at("auc").is_null()) {
        m.auc_defined = true;
        m.auc = j.at("auc").get<double>();
    }
    if (!j.at("gauc").is_null()) {
        m.gauc_defined = true;
        m.gauc = j.at("gauc").get<double>();
        m.groups_used = j.at("gauc_groups_used").get<int>();
        m.groups_skipped = j.at("gauc_groups_skipped").get<int>();
    }
    return m;
}

}  // namespace detail

inline MetricReport metric_report_from_json(const json& j) {
    MetricReport rep;
    rep.total = detail::slice_from_json(j.at("total"));
    rep.head = detail::slice_from_json(j.at("head"));
    rep.tail = detail::slice_from_json(j.at("tail"));
    return rep;
}

inline std::string metric_report_text(const MetricReport& rep) {
    std::ostringstream out;
    out << "slice     count      auc     gauc\n";
    auto row = [&](const char* name, const SliceMetrics& m) {
        char head[32];
        std::snprintf(head, sizeof(head), "%-6s %8lld", name,
                      static_cast<long long>(m.count));
        out << head << " " << detail::fmt_metric(m.auc_defined, m.auc) << " "
            << detail::fmt_metric(m.gauc_defined, m.gauc) << "\n";
    };
    row("Total", rep.total);
    row("Head", rep.head);
    row("Tail", rep.tail);
    return out.str();
}

// Percent deltas of each ablation run against the full model, laid out slice
// by slice. delta = (ablated - full) / full * 100.
inline json ablation_report_json(const MetricReport& full,
                                 const std::vector<std::pair<std::string, MetricReport>>& runs) {
    auto delta = [](bool fd, double fv, bool ad, double av) -> json {
        if (!fd || !ad || fv == 0.0) return nullptr;
        return (av - fv) / fv * 100.0;
    };
    json j;
    j["full"] = metric_report_json(full);
    json vars = json::object();
    for (const auto& [name, rep] : runs) {
        json v;
        v["report"] = metric_report_json(rep);
        v["delta_pct"] = {
            {"total_auc", delta(full.total.auc_defined, full.total.auc,
                                rep.total.auc_defined, rep.total.auc)},
            {"total_gauc", delta(full.total.gauc_defined, full.total.gauc,
                                 rep.total.gauc_defined, rep.total.gauc)},
            {"head_auc", delta(full.head.auc_defined, full.head.auc,
                               rep.head.auc_defined, rep.head.auc)},
            {"head_gauc", delta(full.head.gauc_defined, full.head.gauc,
                                rep.head.gauc_defined, rep.head.gauc)},
            {"tail_auc", delta(full.tail.auc_defined, full.tail.auc,
                               rep.tail.auc_defined, rep.tail.auc)},
            {"tail_gauc", delta(full.tail.gauc_defined, full.tail.gauc,
                                rep.tail.gauc_defined, rep.tail.gauc)},
        };
        vars[name] = std::move(v);
    }
    j["variants"] = std::move(vars);
    return j;
}

inline std::string ablation_report_text(const MetricReport& full,
                                        const std::vector<std::pair<std::string, MetricReport>>& runs) {
    std::ostringstream out;
    out << "variant                 total_auc  head_auc   tail_auc   total_gauc head_gauc  tail_gauc\n";
    auto fmt_delta = [](bool fd, double fv, bool ad, double av) -> std::string {
        if (!fd || !ad || fv == 0.0) return "    undef ";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%+9.2f%% ", (av - fv) / fv * 100.0);
        return buf;
    };
    auto fmt_abs = [](bool defined, double v) -> std::string {
        if (!defined) return "    undef ";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%9.5f  ", v);
        return buf;
    };
    char name_buf[64];
    std::snprintf(name_buf, sizeof(name_buf), "%-22s ", "full");
    out << name_buf << fmt_abs(full.total.auc_defined, full.total.auc)
        << fmt_abs(full.head.auc_defined, full.head.auc)
        << fmt_abs(full.tail.auc_defined, full.tail.auc)
        << fmt_abs(full.total.gauc_defined, full.total.gauc)
        << fmt_abs(full.head.gauc_defined, full.head.gauc)
        << fmt_abs(full.tail.gauc_defined, full.tail.gauc) << "\n";
    for (const auto& [name, rep] : runs) {
        std::snprintf(name_buf, sizeof(name_buf), "%-22s ", name.c_str());
        out << name_buf
            << fmt_delta(full.total.auc_defined, full.total.auc, rep.total.auc_defined, rep.total.auc)
            << fmt_delta(full.head.auc_defined, full.head.auc, rep.head.auc_defined, rep.head.auc)
            << fmt_delta(full.tail.auc_defined, full.tail.auc, rep.tail.auc_defined, rep.tail.auc)
            << fmt_delta(full.total.gauc_defined, full.total.gauc, rep.total.gauc_defined, rep.total.gauc)
            << fmt_delta(full.head.gauc_defined, full.head.gauc, rep.head.gauc_defined, rep.head.gauc)
            << fmt_delta(full.tail.gauc_defined, full.tail.gauc, rep.tail.gauc_defined, rep.tail.gauc)
            << "\n";
    }
    return out.str();
}

// ---- scores.tsv -----------------------------------------------------------

inline std::string sample_flags(const ScoredSample& s) {
    std::string f;
    f += s.user_tail ? "ut" : "uh";
    f += ',';
    f += s.item_tail ? "it" : "ih";
    f += ',';
    f += s.longtail ? "lt" : "ht";
    return f;
}

inline void write_scores_tsv(const std::filesystem::path& path,
                             const std::vector<ScoredSample>& samples,
                             const std::string& version, uint64_t seed) {
    std::ostringstream out;
    out << "# scores\tversion=" << version << "\tseed=" << seed << "\n";
    for (const auto& s : samples)
        out << s.user_id << "\t" << s.item_id << "\t" << format_double(s.score) << "\t"
            << s.label << "\t" << sample_flags(s) << "\n";
    write_text_file(path, out.str());
}

inline std::vector<ScoredSample> read_scores_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::vector<ScoredSample> samples;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        ScoredSample s;
        std::string flags;
        if (!(ss >> s.user_id >> s.item_id >> s.score >> s.label >> flags))
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": expected `user item score label flags`");
        if (flags.size() != 8 || flags[2] != ',' || flags[5] != ',')
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": malformed flags `" + flags + "`");
        s.user_tail = flags.substr(0, 2) == "ut";
        s.item_tail = flags.substr(3, 2) == "it";
        s.longtail = flags.substr(6, 2) == "lt";
        samples.push_back(s);
    }
    if (samples.empty()) throw DataError(path.string() + ": no scored samples");
    return samples;
}

}  // namespace ltrec
