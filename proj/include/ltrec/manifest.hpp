#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltrec/dataset_io.hpp"
#include "ltrec/errors.hpp"
#include "ltrec/version.hpp"

namespace ltrec {

// Every stage writes one of these next to its artifacts. Inputs are keyed
// `stage:file` and carry the content hash the stage actually read, so a later
// stage can prove its inputs are exactly what an earlier stage produced.
// Deliberately no wall-clock fields: two runs with equal inputs and seeds
// must produce byte-identical manifests.
struct RunManifest {
    std::string stage;
    std::string version = kVersion;
    uint64_t seed = 0;
    std::string config_hash;
    std::map<std::string, std::string> inputs;   // "stage:file" -> hash
    std::map<std::string, std::string> outputs;  // "file" -> hash

    json to_json() const {
        json j;
        j["stage"] = stage;
        j["version"] = version;
        j["seed"] = seed;
        j["config_hash"] = config_hash;
        j["inputs"] = json::object();
        for (const auto& [k, v] : inputs) j["inputs"][k] = v;
        j["outputs"] = json::object();
        for (const auto& [k, v] : outputs) j["outputs"][k] = v;
        return j;
    }

    static RunManifest from_json(const json& j) {
        RunManifest m;
        m.stage = j.at("stage").get<std::string>();
        m.version = j.at("version").get<std::string>();
        m.seed = j.at("seed").get<uint64_t>();
        m.config_hash = j.at("config_hash").get<std::string>();
        for (auto it = j.at("inputs").begin(); it != j.at("inputs").end(); ++it)
            m.inputs[it.key()] = it.value().get<std::string>();
        for (auto it = j.at("outputs").begin(); it != j.at("outputs").end(); ++it)
            m.outputs[it.key()] = it.value().get<std::string>();
        return m;
    }

    void record_output(const std::filesystem::path& dir, const std::string& file) {
        outputs[file] = hash_file(dir / file);
    }

    void record_input(const RunManifest& upstream, const std::string& file) {
        auto it = upstream.outputs.find(file);
        if (it == upstream.outputs.end())
            throw DependencyError("stage `" + upstream.stage + "` did not produce `" + file + "`");
        inputs[upstream.stage + ":" + file] = it->second;
    }
};

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
    write_text_file(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

// Loads the manifest of a completed stage; absence means the stage has not
// been run, which is a dependency error for whoever is asking.
inline RunManifest read_manifest(const std::filesystem::path& dir,
                                 const std::string& expected_stage) {
    std::filesystem::path p = dir / "manifest.json";
    if (!std::filesystem::exists(p))
        throw DependencyError("missing " + p.string() + "; run the `" + expected_stage +
                              "` stage first");
    RunManifest m = RunManifest::from_json(json::parse(read_text_file(p)));
    if (m.stage != expected_stage)
        throw DependencyError(p.string() + " was written by stage `" + m.stage + "`, expected `" +
                              expected_stage + "`");
    return m;
}

// Checks that the files a stage is about to read still hash to what the
// upstream manifest recorded, i.e. nobody regenerated or edited them since.
inline void verify_artifacts(const std::filesystem::path& dir, const RunManifest& m,
                             const std::vector<std::string>& files) {
    for (const auto& f : files) {
        auto it = m.outputs.find(f);
        if (it == m.outputs.end())
            throw DependencyError("stage `" + m.stage + "` manifest lists no artifact `" + f + "`");
        std::filesystem::path p = dir / f;
        if (!std::filesystem::exists(p))
            throw DependencyError("artifact missing on disk: " + p.string() + "; re-run stage `" +
                                  m.stage + "`");
        std::string h = hash_file(p);
        if (h != it->second)
            throw DependencyError("artifact " + p.string() + " does not match the `" + m.stage +
                                  "` manifest (stale or modified); re-run stage `" + m.stage + "`");
    }
}

}  // namespace ltrec
