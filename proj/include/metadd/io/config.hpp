#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "metadd/core/sha256.hpp"
#include "metadd/distill/run.hpp"
#include "metadd/eval/evaluate.hpp"
#include "metadd/zoo/pretrain.hpp"

namespace metadd::io {

using nlohmann::json;

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Reject keys that are not present in the reference (default-built) config,
/// suggesting the nearest valid key.
inline void check_unknown_keys(const json& given, const json& reference,
                               const std::string& prefix) {
  if (!given.is_object() || !reference.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!reference.contains(it.key())) {
      std::string best;
      std::size_t best_d = SIZE_MAX;
      for (auto rit = reference.begin(); rit != reference.end(); ++rit) {
        std::size_t d = edit_distance(it.key(), rit.key());
        if (d < best_d) {
          best_d = d;
          best = rit.key();
        }
      }
      throw ConfigError("unknown config key '" + prefix + it.key() +
                        "' (nearest valid key: '" + prefix + best + "')");
    }
    if (it.value().is_object())
      check_unknown_keys(it.value(), reference.at(it.key()),
                         prefix + it.key() + ".");
  }
}

}  // namespace detail

struct DatasetConfig {
  std::string name = "shapes3";
  std::string root;  // empty: procedurally generated stand-in corpus
  std::vector<std::string> subset;
  i64 classes = 3;
  i64 train_per_class = 1000;
  i64 val_per_class = 200;
  i64 resolution = 32;

  json to_json() const {
    return {{"name", name},       {"root", root},
            {"subset", subset},   {"classes", classes},
            {"train_per_class", train_per_class},
            {"val_per_class", val_per_class},
            {"resolution", resolution}};
  }
  void from_json(const json& j) {
    name = j.value("name", name);
    root = j.value("root", root);
    subset = j.value("subset", subset);
    classes = j.value("classes", classes);
    train_per_class = j.value("train_per_class", train_per_class);
    val_per_class = j.value("val_per_class", val_per_class);
    resolution = j.value("resolution", resolution);
  }
};

struct PoolConfig {
  zoo::ArchitectureSpec backbone;
  std::vector<zoo::ArchitectureSpec> auxiliaries;
  zoo::PretrainSchedule pretrain;

  PoolConfig() {
    backbone.family = zoo::ArchFamily::ConvPlain;
    backbone.depth = 3;
    backbone.width = 32;
    backbone.num_classes = 3;
    backbone.input_resolution = 32;
    zoo::ArchitectureSpec res = backbone;
    res.family = zoo::ArchFamily::ConvResidual;
    res.depth = 9;
    res.width = 16;
    zoo::ArchitectureSpec mob = backbone;
    mob.family = zoo::ArchFamily::ConvMobile;
    mob.depth = 8;
    mob.width = 16;
    zoo::ArchitectureSpec att;
    att.family = zoo::ArchFamily::Attention;
    att.depth = 4;
    att.width = 128;
    att.patch_size = 4;
    att.num_classes = 3;
    att.input_resolution = 32;
    auxiliaries = {res, mob, att};
  }

  json to_json() const {
    json aux = json::array();
    for (const auto& a : auxiliaries) aux.push_back(a.to_json());
    return {{"backbone", backbone.to_json()},
            {"auxiliaries", aux},
            {"pretrain",
             {{"epochs", pretrain.epochs},
              {"batch_size", pretrain.batch_size},
              {"base_lr", pretrain.base_lr},
              {"momentum", pretrain.momentum},
              {"weight_decay", pretrain.weight_decay},
              {"warmup_fraction", pretrain.warmup_fraction}}}};
  }
  void from_json(const json& j) {
    if (j.contains("backbone"))
      backbone = zoo::ArchitectureSpec::from_json(j.at("backbone"));
    if (j.contains("auxiliaries")) {
      auxiliaries.clear();
      for (const auto& a : j.at("auxiliaries"))
        auxiliaries.push_back(zoo::ArchitectureSpec::from_json(a));
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      pretrain.epochs = p.value("epochs", pretrain.epochs);
      pretrain.batch_size = p.value("batch_size", pretrain.batch_size);
      pretrain.base_lr = p.value("base_lr", pretrain.base_lr);
      pretrain.momentum = p.value("momentum", pretrain.momentum);
      pretrain.weight_decay = p.value("weight_decay", pretrain.weight_decay);
      pretrain.warmup_fraction = p.value("warmup_fraction", pretrain.warmup_fraction);
    }
  }
};

struct DistillSection {
  distill::DistillConfig cfg;

  json to_json() const {
    return {{"baseline", cfg.baseline},
            {"metadd", cfg.metadd},
            {"iterations", cfg.iterations},
            {"synthetic_lr", cfg.synthetic_lr},
            {"synthetic_momentum", cfg.synthetic_momentum},
            {"ipc", cfg.ipc},
            {"init_mode", cfg.init_mode == distill::InitMode::Noise
                              ? "noise"
                              : "real-sample"},
            {"batch_synth", cfg.batch_synth},
            {"batch_real_per_class", cfg.batch_real_per_class},
            {"weights",
             {{"ai", cfg.weights.ai},
              {"var", cfg.weights.var},
              {"pos", cfg.weights.pos},
              {"pos_sign", cfg.weights.pos_sign},
              {"pos_normalized", cfg.weights.pos_normalized}}},
            {"dc",
             {{"reinit_every", cfg.dc.reinit_every},
              {"inner_steps", cfg.dc.inner_steps},
              {"inner_lr", cfg.dc.inner_lr},
              {"inner_momentum", cfg.dc.inner_momentum},
              {"inner_batch", cfg.dc.inner_batch}}},
            {"snapshot_every", cfg.snapshot_every}};
  }
  void from_json(const json& j) {
    cfg.baseline = j.value("baseline", cfg.baseline);
    cfg.metadd = j.value("metadd", cfg.metadd);
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.synthetic_lr = j.value("synthetic_lr", cfg.synthetic_lr);
    cfg.synthetic_momentum = j.value("synthetic_momentum", cfg.synthetic_momentum);
    cfg.ipc = j.value("ipc", cfg.ipc);
    if (j.contains("init_mode"))
      cfg.init_mode = distill::init_mode_from(j.at("init_mode").get<std::string>());
    cfg.batch_synth = j.value("batch_synth", cfg.batch_synth);
    cfg.batch_real_per_class =
        j.value("batch_real_per_class", cfg.batch_real_per_class);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      cfg.weights.ai = w.value("ai", cfg.weights.ai);
      cfg.weights.var = w.value("var", cfg.weights.var);
      cfg.weights.pos = w.value("pos", cfg.weights.pos);
      cfg.weights.pos_sign = w.value("pos_sign", cfg.weights.pos_sign);
      cfg.weights.pos_normalized =
          w.value("pos_normalized", cfg.weights.pos_normalized);
    }
    if (j.contains("dc")) {
      const auto& d = j.at("dc");
      cfg.dc.reinit_every = d.value("reinit_every", cfg.dc.reinit_every);
      cfg.dc.inner_steps = d.value("inner_steps", cfg.dc.inner_steps);
      cfg.dc.inner_lr = d.value("inner_lr", cfg.dc.inner_lr);
      cfg.dc.inner_momentum = d.value("inner_momentum", cfg.dc.inner_momentum);
      cfg.dc.inner_batch = d.value("inner_batch", cfg.dc.inner_batch);
    }
    cfg.snapshot_every = j.value("snapshot_every", cfg.snapshot_every);
  }
};

struct EvalSection {
  eval::EvalSchedule schedule;
  i64 repeats = 3;
  std::vector<zoo::ArchitectureSpec> unseen;

  EvalSection() {
    zoo::ArchitectureSpec u1;
    u1.family = zoo::ArchFamily::ConvResidual;
    u1.depth = 11;
    u1.width = 24;
    u1.num_classes = 3;
    u1.input_resolution = 32;
    zoo::ArchitectureSpec u2;
    u2.family = zoo::ArchFamily::Attention;
    u2.depth = 3;
    u2.width = 96;
    u2.patch_size = 8;
    u2.num_classes = 3;
    u2.input_resolution = 32;
    unseen = {u1, u2};
  }

  json to_json() const {
    json u = json::array();
    for (const auto& a : unseen) u.push_back(a.to_json());
    return {{"warmup_steps", schedule.warmup_steps},
            {"decay_steps", schedule.decay_steps},
            {"batch_size", schedule.batch_size},
            {"momentum", schedule.momentum},
            {"weight_decay", schedule.weight_decay},
            {"lr_scale", schedule.lr_scale},
            {"repeats", repeats},
            {"unseen", u}};
  }
  void from_json(const json& j) {
    schedule.warmup_steps = j.value("warmup_steps", schedule.warmup_steps);
    schedule.decay_steps = j.value("decay_steps", schedule.decay_steps);
    schedule.batch_size = j.value("batch_size", schedule.batch_size);
    schedule.momentum = j.value("momentum", schedule.momentum);
    schedule.weight_decay = j.value("weight_decay", schedule.weight_decay);
    schedule.lr_scale = j.value("lr_scale", schedule.lr_scale);
    repeats = j.value("repeats", repeats);
    if (j.contains("unseen")) {
      unseen.clear();
      for (const auto& a : j.at("unseen"))
        unseen.push_back(zoo::ArchitectureSpec::from_json(a));
    }
  }
};

struct ErasureSection {
  i64 max_train_samples = 900;
  i64 repeats = 3;
  i64 warmup_steps = 150;
  i64 decay_steps = 300;

  json to_json() const {
    return {{"max_train_samples", max_train_samples},
            {"repeats", repeats},
            {"warmup_steps", warmup_steps},
            {"decay_steps", decay_steps}};
  }
  void from_json(const json& j) {
    max_train_samples = j.value("max_train_samples", max_train_samples);
    repeats = j.value("repeats", repeats);
    warmup_steps = j.value("warmup_steps", warmup_steps);
    decay_steps = j.value("decay_steps", decay_steps);
  }
};

/// Whole-experiment configuration. The canonical serialization (sorted keys,
/// fixed field set) backs the config hash, so identical settings hash
/// identically regardless of key order in the file.
struct ExperimentConfig {
  DatasetConfig dataset;
  PoolConfig pool;
  DistillSection distill;
  EvalSection eval;
  ErasureSection erasure;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;

  json to_json() const {
    return {{"dataset", dataset.to_json()}, {"pool", pool.to_json()},
            {"distill", distill.to_json()}, {"eval", eval.to_json()},
            {"erasure", erasure.to_json()}, {"output_dir", output_dir},
            {"seed", seed}};
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    detail::check_unknown_keys(j, c.to_json(), "");
    if (j.contains("dataset")) c.dataset.from_json(j.at("dataset"));
    if (j.contains("pool")) c.pool.from_json(j.at("pool"));
    if (j.contains("distill")) c.distill.from_json(j.at("distill"));
    if (j.contains("eval")) c.eval.from_json(j.at("eval"));
    if (j.contains("erasure")) c.erasure.from_json(j.at("erasure"));
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const std::exception& e) {
      throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  std::string canonical() const { return to_json().dump(); }
  std::string hash() const { return sha256_hex(canonical()); }
  std::string short_hash() const { return hash().substr(0, 12); }

  /// Hash of the inputs that determine the pretrained pool, used to share
  /// pool checkpoints between stages.
  std::string pool_hash() const {
    json j = {{"dataset", dataset.to_json()},
              {"pool", pool.to_json()},
              {"seed", seed}};
    return sha256_hex(j.dump()).substr(0, 12);
  }
};

}  // namespace metadd::io
