#pragma once

// Run manifests: every command records what it ran (command, seed, full
// config with defaults expanded, tool version) and what it produced
// (artifact list with checksums, stage timings). Artifact paths are relative
// to the run directory; verify() re-hashes them all.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "config_json.hpp"

namespace iflab {

struct ArtifactEntry {
    std::string path;  // relative to the run directory
    uint64_t bytes = 0;
    std::string checksum;  // 16-hex FNV-1a 64
};

inline std::string checksum_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct RunManifest {
    std::string run_id;
    std::string command;
    uint64_t seed = 0;
    std::string tool_version = kToolVersion;
    Json config = Json::object();
    std::vector<ArtifactEntry> artifacts;
    std::vector<std::pair<std::string, double>> timings;  // stage -> seconds

    // Deterministic id from what defines the run (not when it ran).
    static std::string make_id(const std::string& command, uint64_t seed, const Json& config) {
        uint64_t h = fnv1a64(command);
        h = fnv1a64(std::to_string(seed), h);
        h = fnv1a64(config.dump(), h);
        return "run-" + checksum_hex(h);
    }

    void add_artifact(const std::filesystem::path& run_dir, const std::string& rel) {
        std::filesystem::path p = run_dir / rel;
        ArtifactEntry e;
        e.path = rel;
        e.bytes = std::filesystem::file_size(p);
        e.checksum = checksum_hex(checksum_file(p));
        artifacts.push_back(std::move(e));
    }

    void add_tree(const std::filesystem::path& run_dir, const std::string& subdir) {
        std::filesystem::path root = run_dir / subdir;
        if (!std::filesystem::exists(root)) return;
        std::vector<std::string> rels;
        for (const auto& entry : std::filesystem::recursive_directory_iterator(root))
            if (entry.is_regular_file())
                rels.push_back(std::filesystem::relative(entry.path(), run_dir).generic_string());
        std::sort(rels.begin(), rels.end());
        for (const auto& r : rels) add_artifact(run_dir, r);
    }

    void save(const std::filesystem::path& run_dir) const {
        Json arts = Json::array();
        for (const auto& a : artifacts)
            arts.push_back(Json{{"path", a.path}, {"bytes", a.bytes}, {"checksum", a.checksum}});
        Json times = Json::array();
        for (const auto& [name, secs] : timings)
            times.push_back(Json{{"stage", name}, {"seconds", secs}});
        Json j{{"run_id", run_id},   {"command", command}, {"seed", seed},
               {"tool_version", tool_version}, {"config", config},
               {"artifacts", arts},  {"timings", times}};
        std::ofstream f(run_dir / "manifest.json");
        if (!f) throw IntegrityError("cannot write manifest in " + run_dir.string());
        f << j.dump(2) << "\n";
        if (!f) throw IntegrityError("short write on manifest in " + run_dir.string());
    }

    static RunManifest load(const std::filesystem::path& run_dir) {
        std::filesystem::path p = run_dir / "manifest.json";
        std::ifstream f(p);
        if (!f) throw IntegrityError("missing manifest: " + p.string());
        Json j;
        try {
            j = Json::parse(f);
        } catch (const Json::exception& e) {
            throw IntegrityError("malformed manifest " + p.string() + ": " + e.what());
        }
        RunManifest m;
        try {
            m.run_id = j.at("run_id").get<std::string>();
            m.command = j.at("command").get<std::string>();
            m.seed = j.at("seed").get<uint64_t>();
            m.tool_version = j.at("tool_version").get<std::string>();
            m.config = j.at("config");
            for (const Json& a : j.at("artifacts"))
                m.artifacts.push_back(ArtifactEntry{a.at("path").get<std::string>(),
                                                    a.at("bytes").get<uint64_t>(),
                                                    a.at("checksum").get<std::string>()});
            for (const Json& t : j.at("timings"))
                m.timings.emplace_back(t.at("stage").get<std::string>(),
                                       t.at("seconds").get<double>());
        } catch (const Json::exception& e) {
            throw IntegrityError("manifest missing fields in " + p.string() + ": " + e.what());
        }
        return m;
    }

    // Every referenced artifact must exist with matching size and checksum.
    void verify(const std::filesystem::path& run_dir) const {
        for (const auto& a : artifacts) {
            std::filesystem::path p = run_dir / a.path;
            if (!std::filesystem::exists(p))
                throw IntegrityError("manifest artifact missing: " + a.path);
            if (std::filesystem::file_size(p) != a.bytes)
                throw IntegrityError("manifest artifact size mismatch: " + a.path);
            if (checksum_hex(checksum_file(p)) != a.checksum)
                throw IntegrityError("manifest artifact checksum mismatch: " + a.path);
        }
    }
};

// Wall-clock stage timer appending into a manifest.
class StageTimer {
public:
    StageTimer(RunManifest& m, std::string stage)
        : m_(m), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        m_.timings.emplace_back(stage_, secs);
    }

private:
    RunManifest& m_;
    std::string stage_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace iflab
