#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltrec/errors.hpp"
#include "ltrec/records.hpp"

namespace ltrec {

using json = nlohmann::ordered_json;

inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

// 64-bit FNV-1a. Used for config hashes and output-file fingerprints; not a
// cryptographic digest.
inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 14695981039346656037ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string hash_string(const std::string& s) {
    return hash_hex(fnv1a_bytes(s.data(), s.size()));
}

inline std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("hash_file: cannot open " + path.string());
    uint64_t h = 14695981039346656037ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a_bytes(buf, static_cast<size_t>(in.gcount()), h);
    return hash_hex(h);
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << content;
    if (!out) throw DataError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace detail {

inline json meta_line(const std::string& kind, const std::string& version, uint64_t seed) {
    json m;
    m["meta"] = {{"kind", kind}, {"version", version}, {"seed", seed}};
    return m;
}

inline json parse_json_line(const std::string& line, const std::string& file, size_t lineno) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
        throw DataError(file + ":" + std::to_string(lineno) + ": malformed JSON line");
    return j;
}

}  // namespace detail

// ---- items.jsonl ----------------------------------------------------------

inline void write_items_jsonl(const std::filesystem::path& path,
                              const std::vector<ItemRecord>& items,
                              const std::string& version, uint64_t seed) {
    std::ostringstream out;
    out << detail::meta_line("items", version, seed).dump() << "\n";
    for (const auto& it : items) {
        json j;
        j["id"] = it.id;
        j["latent"] = it.latent;
        j["content_rep"] = it.content_rep;
        j["popularity"] = it.popularity;
        j["category"] = it.category;
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

inline std::vector<ItemRecord> read_items_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::vector<ItemRecord> items;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = detail::parse_json_line(line, path.string(), lineno);
        if (j.contains("meta")) continue;
        ItemRecord it;
        it.id = j.at("id").get<int>();
        it.latent = j.at("latent").get<std::vector<double>>();
        it.content_rep = j.at("content_rep").get<std::vector<double>>();
        it.popularity = j.at("popularity").get<double>();
        it.category = j.at("category").get<int>();
        items.push_back(std::move(it));
    }
    if (items.empty()) throw DataError(path.string() + ": no item records");
    return items;
}

// ---- users.jsonl ----------------------------------------------------------

inline void write_users_jsonl(const std::filesystem::path& path,
                              const std::vector<UserRecord>& users,
                              const std::string& version, uint64_t seed) {
    std::ostringstream out;
    out << detail::meta_line("users", version, seed).dump() << "\n";
    for (const auto& u : users) {
        json j;
        j["id"] = u.id;
        j["latent"] = u.latent;
        j["activity"] = u.activity;
        j["profile"] = u.profile;
        json hist = json::array();
        for (const auto& [item, ts] : u.history) hist.push_back({item, ts});
        j["history"] = std::move(hist);
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

inline std::vector<UserRecord> read_users_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::vector<UserRecord> users;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = detail::parse_json_line(line, path.string(), lineno);
        if (j.contains("meta")) continue;
        UserRecord u;
        u.id = j.at("id").get<int>();
        u.latent = j.at("latent").get<std::vector<double>>();
        u.activity = j.at("activity").get<double>();
        u.profile = j.at("profile").get<std::vector<double>>();
        for (const auto& h : j.at("history"))
            u.history.emplace_back(h.at(0).get<int>(), h.at(1).get<int64_t>());
        users.push_back(std::move(u));
    }
    if (users.empty()) throw DataError(path.string() + ": no user records");
    return users;
}

// ---- events.tsv -----------------------------------------------------------

inline void write_events_tsv(const std::filesystem::path& path,
                             const std::vector<InteractionEvent>& events,
                             const std::string& version, uint64_t seed) {
    std::ostringstream out;
    out << "# events\tversion=" << version << "\tseed=" << seed << "\n";
    for (const auto& e : events)
        out << e.user_id << "\t" << e.item_id << "\t" << e.ts << "\t" << e.label << "\n";
    write_text_file(path, out.str());
}

inline std::vector<InteractionEvent> read_events_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::vector<InteractionEvent> events;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        InteractionEvent e;
        std::istringstream ss(line);
        long long ts = 0;
        if (!(ss >> e.user_id >> e.item_id >> ts >> e.label) ||
            (e.label != 0 && e.label != 1))
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": expected `user item ts label` with label 0/1");
        e.ts = ts;
        events.push_back(e);
    }
    if (events.empty()) throw DataError(path.string() + ": no events");
    return events;
}

// ---- labels.json ----------------------------------------------------------

inline void write_labels_json(const std::filesystem::path& path, const ActivityLabels& lab,
                              const std::string& version, uint64_t seed) {
    json j = detail::meta_line("labels", version, seed);
    j["user_threshold"] = lab.user_threshold;
    j["item_threshold"] = lab.item_threshold;
    auto dump_side = [](const std::map<int, EntityActivity>& m) {
        json side = json::object();
        for (const auto& [id, ea] : m) {
            side[std::to_string(id)] = {{"tail", ea.tail},
                                        {"interactions", ea.interactions},
                                        {"exposures", ea.exposures},
                                        {"f_act", ea.f_act},
                                        {"stats", ea.stats}};
        }
        return side;
    };
    j["users"] = dump_side(lab.users);
    j["items"] = dump_side(lab.items);
    write_text_file(path, j.dump(1) + "\n");
}

inline ActivityLabels read_labels_json(const std::filesystem::path& path) {
    json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw DataError(path.string() + ": malformed JSON");
    ActivityLabels lab;
    lab.user_threshold = j.at("user_threshold").get<int>();
    lab.item_threshold = j.at("item_threshold").get<int>();
    auto load_side = [&](const json& side, std::map<int, EntityActivity>& m) {
        for (const auto& [key, val] : side.items()) {
            EntityActivity ea;
            ea.tail = val.at("tail").get<bool>();
            ea.interactions = val.at("interactions").get<int64_t>();
            ea.exposures = val.at("exposures").get<int64_t>();
            ea.f_act = val.at("f_act").get<std::vector<double>>();
            ea.stats = val.at("stats").get<std::vector<double>>();
            m[std::stoi(key)] = std::move(ea);
        }
    };
    load_side(j.at("users"), lab.users);
    load_side(j.at("items"), lab.items);
    return lab;
}

// ---- item_reps.jsonl / user_reps.jsonl ------------------------------------

inline void write_reps_jsonl(const std::filesystem::path& path, const SemanticRepStore& store,
                             const std::string& encoder_hash, const std::string& version,
                             uint64_t seed) {
    std::ostringstream out;
    json meta = detail::meta_line(store.kind + "_reps", version, seed);
    meta["meta"]["encoder_hash"] = encoder_hash;
    meta["meta"]["dim"] = store.dim;
    out << meta.dump() << "\n";
    for (const auto& [id, rep] : store.reps) {
        json j;
        j["id"] = id;
        j["rep"] = rep;
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

inline SemanticRepStore read_reps_jsonl(const std::filesystem::path& path,
                                        const std::string& kind) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    SemanticRepStore store;
    store.kind = kind;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = detail::parse_json_line(line, path.string(), lineno);
        if (j.contains("meta")) {
            store.dim = j["meta"].value("dim", 0);
            continue;
        }
        store.reps[j.at("id").get<int>()] = j.at("rep").get<std::vector<double>>();
    }
    if (store.reps.empty()) throw DataError(path.string() + ": no representations");
    if (store.dim == 0) store.dim = static_cast<int>(store.reps.begin()->second.size());
    return store;
}

// ---- semantic_ids.tsv -----------------------------------------------------

inline void write_semantic_ids_tsv(const std::filesystem::path& path,
                                   const std::map<int, SemanticID>& item_ids,
                                   const std::map<int, SemanticID>& user_ids,
                                   const std::string& version, uint64_t seed) {
    std::ostringstream out;
    out << "# semantic_ids\tversion=" << version << "\tseed=" << seed << "\n";
    auto dump = [&](const char* kind, const std::map<int, SemanticID>& m) {
        for (const auto& [id, sid] : m) {
            out << kind << "\t" << id;
            for (int c : sid.ids) out << "\t" << c;
            out << "\n";
        }
    };
    dump("item", item_ids);
    dump("user", user_ids);
    write_text_file(path, out.str());
}

inline std::pair<std::map<int, SemanticID>, std::map<int, SemanticID>>
read_semantic_ids_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::map<int, SemanticID> items, users;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string kind;
        int id;
        if (!(ss >> kind >> id))
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
        SemanticID sid;
        int code;
        while (ss >> code) sid.ids.push_back(code);
        if (sid.ids.empty())
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": row without codes");
        if (kind == "item") items[id] = std::move(sid);
        else if (kind == "user") users[id] = std::move(sid);
        else throw DataError(path.string() + ":" + std::to_string(lineno) +
                             ": unknown entity kind `" + kind + "`");
    }
    if (items.empty() && users.empty())
        throw DataError(path.string() + ": no semantic id rows");
    return {std::move(items), std::move(users)};
}

}  // namespace ltrec
