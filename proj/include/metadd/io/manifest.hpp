#pragma once

#include <unistd.h>

#include <chrono>
#include <ctime>
#include <json.hpp>
#include <map>

#include "metadd/io/dataset.hpp"

namespace metadd::io {

inline std::string iso_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

/// Per-run bookkeeping: config hash, stage states, produced artifacts.
/// Writes are atomic (temp then rename), and a completed stage can never be
/// downgraded.
struct RunManifest {
  std::string config_hash;
  std::string component_version = "metadd-0.1";
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::string> stages;     // stage -> status
  std::map<std::string, std::string> artifacts;  // name -> path

  bool stage_complete(const std::string& stage) const {
    auto it = stages.find(stage);
    return it != stages.end() && it->second == "complete";
  }

  void mark_stage(const std::string& stage, const std::string& status) {
    auto it = stages.find(stage);
    if (it != stages.end() && it->second == "complete" && status != "complete")
      throw ContractError("stage '" + stage +
                          "' is complete and cannot be re-marked " + status);
    stages[stage] = status;
  }

  nlohmann::json to_json() const {
    return {{"config_hash", config_hash},
            {"component_version", component_version},
            {"started_at", started_at},
            {"finished_at", finished_at},
            {"stages", stages},
            {"artifacts", artifacts}};
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::path tmp = fs::path(dir) / "manifest.json.tmp";
    {
      std::ofstream os(tmp);
      os << to_json().dump(2) << "\n";
      if (!os) throw IoError("cannot write manifest in " + dir);
    }
    fs::rename(tmp, fs::path(dir) / "manifest.json");
  }

  static RunManifest load(const std::string& dir) {
    std::ifstream in(std::filesystem::path(dir) / "manifest.json");
    if (!in) throw IoError("no manifest in " + dir);
    nlohmann::json j = nlohmann::json::parse(in);
    RunManifest m;
    m.config_hash = j.value("config_hash", "");
    m.component_version = j.value("component_version", "");
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
    if (j.contains("stages"))
      m.stages = j.at("stages").get<std::map<std::string, std::string>>();
    if (j.contains("artifacts"))
      m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    return m;
  }

  static bool exists(const std::string& dir) {
    return std::filesystem::exists(std::filesystem::path(dir) / "manifest.json");
  }
};

/// Advisory lock on a run directory: refuses to start when another live
/// process holds it; removed on destruction.
class RunLock {
 public:
  explicit RunLock(const std::string& dir) : path_(std::filesystem::path(dir) / "run.lock") {
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(path_)) {
      std::ifstream in(path_);
      std::string owner((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
      throw IoError("run directory is locked by " + owner + " (" +
                    path_.string() + ")");
    }
    std::ofstream os(path_);
    os << "pid=" << ::getpid() << " started=" << iso_now();
    if (!os) throw IoError("cannot create lock file " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Line-delimited JSON log.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) : os_(path, std::ios::app) {
    if (!os_) throw IoError("cannot open log " + path);
  }
  void write(const nlohmann::json& j) {
    os_ << j.dump() << "\n";
    os_.flush();
  }

 private:
  std::ofstream os_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace metadd::io
