#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ltrec/dataset_io.hpp"
#include "ltrec/errors.hpp"

namespace ltrec {

// Flat `[section]` / `key = value` files: integers, floats, booleans and
// double-quoted strings, `#` comments. No nesting, no arrays — every run
// parameter is a scalar, and keeping the grammar small keeps the config hash
// that stamps artifacts easy to reason about.
class Config {
   public:
    static const std::set<std::string>& schema() {
        static const std::set<std::string> keys = {
            "dataset.seed",
            "dataset.num_users",
            "dataset.num_items",
            "dataset.num_events",
            "dataset.num_days",
            "dataset.test_days",
            "dataset.num_categories",
            "dataset.latent_dim",
            "dataset.content_noise",
            "dataset.zipf_item",
            "dataset.zipf_user",
            "dataset.candidate_size",
            "dataset.choice_sharpness",
            "dataset.click_affinity",
            "dataset.click_popularity",
            "dataset.click_bias",
            "dataset.tail_threshold_user",
            "dataset.tail_threshold_item",
            "dataset.cooc_window",
            "dataset.cooc_min_count",
            "align.epochs",
            "align.batch_size",
            "align.lr",
            "align.temperature",
            "align.hidden_dim",
            "align.rep_dim",
            "align.history_decay",
            "quantize.levels",
            "quantize.codebook_size",
            "quantize.code_dim",
            "quantize.epochs",
            "quantize.batch_size",
            "quantize.lr",
            "quantize.beta",
            "quantize.ema_decay",
            "quantize.reserve_zero",
            "quantize.reseed_dead",
            "train.epochs",
            "train.batch_size",
            "train.lr",
            "train.embed_dim",
            "train.fusion_dim",
            "train.gate_hidden",
            "train.ranker_hidden",
            "train.init_std",
            "train.history_cap",
            "train.cluster_history_cap",
            "train.scale_attention",
            "train.lambda_head",
            "train.lambda_tail",
            "train.tau_transfer",
            "train.lambda_ortho",
            "train.no_individual",
            "train.no_cluster",
            "train.no_cgae_gate",
            "train.no_instance_view",
            "train.no_cluster_view",
            "train.no_hfa_gate",
            "eval.write_text_report",
            "ablate.train_epochs",
            "ablate.seeds",
        };
        return keys;
    }

    static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
        Config cfg;
        std::istringstream in(text);
        std::string line;
        std::string section;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": unterminated section header");
                section = trim(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            if (key.empty() || value.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key or value");
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": key `" + key + "` appears before any [section]");
            std::string full = section + "." + key;
            if (schema().count(full) == 0)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key `" + full +
                                  "`");
            if (cfg.values_.count(full))
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key `" +
                                  full + "`");
            cfg.values_[full] = value;
        }
        return cfg;
    }

    static Config parse_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config: " + path.string());
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_string(buf.str(), path.string());
    }

    bool has(const std::string& section, const std::string& key) const {
        return values_.count(section + "." + key) > 0;
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        std::string full = section + "." + key;
        if (schema().count(full) == 0)
            throw ConfigError("unknown key `" + full + "`");
        values_[full] = value;
    }

    int64_t get_int(const std::string& section, const std::string& key, int64_t def) const {
        const std::string* raw = find(section, key);
        if (!raw) return def;
        const char* begin = raw->c_str();
        char* end = nullptr;
        long long v = std::strtoll(begin, &end, 10);
        if (end == begin || *end != '\0')
            throw ConfigError(section + "." + key + ": expected integer, got `" + *raw + "`");
        return v;
    }

    double get_double(const std::string& section, const std::string& key, double def) const {
        const std::string* raw = find(section, key);
        if (!raw) return def;
        const char* begin = raw->c_str();
        char* end = nullptr;
        double v = std::strtod(begin, &end);
        if (end == begin || *end != '\0')
            throw ConfigError(section + "." + key + ": expected number, got `" + *raw + "`");
        return v;
    }

    bool get_bool(const std::string& section, const std::string& key, bool def) const {
        const std::string* raw = find(section, key);
        if (!raw) return def;
        if (*raw == "true") return true;
        if (*raw == "false") return false;
        throw ConfigError(section + "." + key + ": expected true/false, got `" + *raw + "`");
    }

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& def) const {
        const std::string* raw = find(section, key);
        if (!raw) return def;
        if (raw->size() >= 2 && raw->front() == '"' && raw->back() == '"')
            return raw->substr(1, raw->size() - 2);
        return *raw;
    }

    // Stable text form; two configs with the same effective values hash alike
    // regardless of key order or formatting in the source file.
    std::string canonical() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
        return out.str();
    }

    std::string hash() const { return hash_string(canonical()); }

    const std::map<std::string, std::string>& values() const { return values_; }

   private:
    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    static std::string strip_comment(const std::string& s) {
        bool in_quotes = false;
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') in_quotes = !in_quotes;
            else if (s[i] == '#' && !in_quotes) return s.substr(0, i);
        }
        return s;
    }

    const std::string* find(const std::string& section, const std::string& key) const {
        auto it = values_.find(section + "." + key);
        return it == values_.end() ? nullptr : &it->second;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace ltrec
