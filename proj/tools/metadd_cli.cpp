// metadd command-line driver: pretrain | distill | eval | cam-export |
// erase-study | report. Every stage is resumable from its run manifest and
// keyed by the hash of the resolved configuration.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "metadd/eval/erasure.hpp"
#include "metadd/io/config.hpp"
#include "metadd/io/export.hpp"
#include "metadd/io/plot.hpp"
#include "metadd/io/synthgen.hpp"
#include "metadd/zoo/pretrain.hpp"

namespace fs = std::filesystem;
using namespace metadd;

namespace {

int exit_code_for(const std::string& category) {
  if (category == "config") return 2;
  if (category == "data") return 3;
  if (category == "contract") return 4;
  if (category == "train") return 5;
  if (category == "io") return 6;
  if (category == "numeric") return 7;
  return 1;
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<i64> ipc;
  std::optional<std::string> metadd;    // "on" | "off"
  std::optional<std::string> baseline;  // "dc" | "dm"
  std::optional<std::string> out;
  std::optional<std::string> pool_file;
};

io::ExperimentConfig resolve_config(const std::string& path, const Overrides& o) {
  io::ExperimentConfig cfg =
      path.empty() ? io::ExperimentConfig() : io::ExperimentConfig::load(path);
  if (const char* env = std::getenv("METADD_DATA_ROOT"))
    if (*env) cfg.dataset.root = env;
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.distill.cfg.seed = *o.seed;
  } else {
    cfg.distill.cfg.seed = cfg.seed;
  }
  if (o.ipc) cfg.distill.cfg.ipc = *o.ipc;
  if (o.metadd) {
    if (*o.metadd != "on" && *o.metadd != "off")
      throw ConfigError("--metadd expects on|off");
    cfg.distill.cfg.metadd = *o.metadd == "on";
  }
  if (o.baseline) cfg.distill.cfg.baseline = *o.baseline;
  if (o.out) cfg.output_dir = *o.out;
  return cfg;
}

io::Dataset acquire_dataset(const io::ExperimentConfig& cfg) {
  if (!cfg.dataset.root.empty()) {
    std::optional<std::vector<std::string>> subset;
    if (!cfg.dataset.subset.empty()) subset = cfg.dataset.subset;
    return io::ingest_dataset(cfg.dataset.name, cfg.dataset.root, subset);
  }
  return io::generate_shapes_dataset(cfg.dataset.classes,
                                     cfg.dataset.train_per_class,
                                     cfg.dataset.val_per_class,
                                     cfg.dataset.resolution, cfg.seed);
}

std::string pretrain_dir(const io::ExperimentConfig& cfg) {
  return cfg.output_dir + "/pretrain/" + cfg.pool_hash();
}

void write_resolved_config(const io::ExperimentConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / "config.json") << cfg.to_json().dump(2) << "\n";
}

zoo::AuxiliaryPool load_pool(const io::ExperimentConfig& cfg,
                             const Overrides& o) {
  zoo::AuxiliaryPool pool;
  pool.working_resolution = cfg.dataset.resolution;
  pool.backbone.net = zoo::build_model(cfg.pool.backbone, cfg.seed);
  std::vector<std::string> paths;
  if (o.pool_file) {
    nlohmann::json j;
    std::ifstream in(*o.pool_file);
    if (!in) throw ConfigError("cannot open pool file " + *o.pool_file);
    in >> j;
    for (const auto& p : j.at("auxiliaries"))
      paths.push_back(p.get<std::string>());
  } else {
    std::string dir = pretrain_dir(cfg);
    if (!io::RunManifest::exists(dir) ||
        !io::RunManifest::load(dir).stage_complete("pretrain"))
      throw IoError("no pretrained pool under " + dir +
                    "; run `metadd pretrain` with this config first "
                    "(or pass --pool)");
    for (const auto& aux : cfg.pool.auxiliaries) {
      zoo::ArchitectureSpec s = aux;
      s.num_classes = cfg.dataset.subset.empty()
                          ? cfg.dataset.classes
                          : i64(cfg.dataset.subset.size());
      paths.push_back(dir + "/" + s.id() + ".ckpt");
    }
  }
  for (const auto& p : paths)
    pool.auxiliaries.push_back(zoo::freeze(zoo::load_checkpoint(p)));
  pool.validate();
  return pool;
}

int cmd_pretrain(const std::string& config_path, const Overrides& o) {
  io::ExperimentConfig cfg = resolve_config(config_path, o);
  std::string dir = pretrain_dir(cfg);
  if (io::RunManifest::exists(dir) &&
      io::RunManifest::load(dir).stage_complete("pretrain")) {
    std::cout << "pretrain already complete in " << dir << "\n";
    return 0;
  }
  io::RunLock lock(dir);
  write_resolved_config(cfg, dir);
  io::RunManifest manifest;
  manifest.config_hash = cfg.pool_hash();
  manifest.started_at = io::iso_now();
  manifest.mark_stage("pretrain", "running");
  manifest.save(dir);
  io::Dataset data = acquire_dataset(cfg);
  auto train_one = [&](const zoo::ArchitectureSpec& spec, bool freeze_it) {
    zoo::ArchitectureSpec s = spec;
    s.num_classes = data.num_classes();
    zoo::PretrainSchedule sched = cfg.pool.pretrain;
    sched.base_lr = zoo::default_lr(s.family);
    std::uint64_t seed =
        Rng::derive(cfg.seed, "pretrain/" + s.id()).next_u64();
    std::cout << "pretraining " << s.id() << "...\n";
    auto model = zoo::pretrain(s, data.train, data.val, sched, seed);
    model.provenance.dataset_id = data.id;
    if (freeze_it) model = zoo::freeze(model);
    std::string path = dir + "/" + s.id() + ".ckpt";
    zoo::save_checkpoint(model, path);
    std::cout << "  top-1 " << model.provenance.final_top1 << " -> " << path
              << "\n";
    manifest.artifacts[s.id()] = path;
    return model.provenance.final_top1;
  };
  for (const auto& aux : cfg.pool.auxiliaries) train_one(aux, true);
  train_one(cfg.pool.backbone, false);
  manifest.mark_stage("pretrain", "complete");
  manifest.finished_at = io::iso_now();
  manifest.save(dir);
  return 0;
}

std::string distill_dir(const io::ExperimentConfig& cfg) {
  return cfg.output_dir + "/distill/" + cfg.short_hash();
}

int cmd_distill(const std::string& config_path, const Overrides& o) {
  io::ExperimentConfig cfg = resolve_config(config_path, o);
  std::string dir = distill_dir(cfg);
  if (io::RunManifest::exists(dir) &&
      io::RunManifest::load(dir).stage_complete("distill")) {
    std::cout << "distill already complete in " << dir << "\n";
    return 0;
  }
  io::RunLock lock(dir);
  write_resolved_config(cfg, dir);
  io::RunManifest manifest;
  manifest.config_hash = cfg.hash();
  manifest.started_at = io::iso_now();
  manifest.mark_stage("distill", "running");
  manifest.save(dir);
  io::Dataset data = acquire_dataset(cfg);
  zoo::AuxiliaryPool pool;
  if (cfg.distill.cfg.metadd) {
    pool = load_pool(cfg, o);
  } else {
    pool.working_resolution = cfg.dataset.resolution;
    zoo::ArchitectureSpec b = cfg.pool.backbone;
    b.num_classes = data.num_classes();
    pool.backbone.net = zoo::build_model(b, cfg.seed);
  }
  distill::DistillConfig dcfg = cfg.distill.cfg;
  io::JsonlWriter log(dir + "/steps.jsonl");
  auto snapshot = [&](i64 step, const distill::SyntheticDataset& S) {
    char name[64];
    std::snprintf(name, sizeof(name), "snapshot-%06lld.mdds",
                  static_cast<long long>(step));
    distill::save_synthetic(S, dir + "/" + name);
  };
  std::cout << "distilling (" << dcfg.baseline
            << (dcfg.metadd ? "+metadd" : "") << ", K=" << dcfg.iterations
            << ", ipc=" << dcfg.ipc << ")...\n";
  distill::RunResult run;
  try {
    run = distill::distill_run(
        dcfg, data, pool,
        dcfg.snapshot_every > 0 ? snapshot : distill::SnapshotFn(),
        [&](const distill::StepRecord& r) { log.write(r.to_json()); });
  } catch (const TrainError&) {
    manifest.mark_stage("distill", "failed");
    manifest.finished_at = io::iso_now();
    manifest.save(dir);
    throw;  // last snapshot stays in the run directory
  }
  run.S.provenance.config_hash = cfg.hash();
  distill::save_synthetic(run.S, dir + "/distilled.mdds");
  manifest.artifacts["distilled"] = dir + "/distilled.mdds";
  fs::create_directories(dir + "/images");
  for (i64 i = 0; i < std::min<i64>(run.S.size(), 60); ++i)
    io::write_rgb_image_png(
        dir + "/images/s" + std::to_string(i) + "-class" +
            std::to_string(run.S.labels[std::size_t(i)]) + ".png",
        reshape(slice(run.S.images, 0, i, 1),
                {3, run.S.images.dim(2), run.S.images.dim(3)}));
  manifest.mark_stage("distill", "complete");
  manifest.finished_at = io::iso_now();
  manifest.save(dir);
  std::cout << "distilled set written to " << dir << "/distilled.mdds\n";
  if (!run.log.empty())
    std::cout << "final total loss " << run.log.back().total << "\n";
  return 0;
}

std::vector<std::pair<zoo::ArchitectureSpec, bool>> eval_arch_list(
    const io::ExperimentConfig& cfg, i64 classes) {
  std::vector<std::pair<zoo::ArchitectureSpec, bool>> archs;
  for (auto a : cfg.pool.auxiliaries) {
    a.num_classes = classes;
    archs.emplace_back(a, true);
  }
  for (auto a : cfg.eval.unseen) {
    a.num_classes = classes;
    archs.emplace_back(a, false);
  }
  return archs;
}

int cmd_eval(const std::string& config_path, const Overrides& o,
             std::string run_dir, bool snapshots) {
  io::ExperimentConfig cfg = resolve_config(config_path, o);
  if (run_dir.empty()) run_dir = distill_dir(cfg);
  if (!io::RunManifest::exists(run_dir))
    throw IoError("no run manifest in " + run_dir + "; distill first");
  io::RunManifest manifest = io::RunManifest::load(run_dir);
  if (!manifest.stage_complete("distill"))
    throw ContractError("distill stage is not complete in " + run_dir);
  if (manifest.stage_complete("eval") && !snapshots) {
    std::cout << "eval already complete in " << run_dir << "\n";
    std::ifstream table(run_dir + "/eval_report.txt");
    std::cout << table.rdbuf();
    return 0;
  }
  if (!manifest.stage_complete("eval")) {
    manifest.mark_stage("eval", "running");
    manifest.save(run_dir);
  }
  io::Dataset data = acquire_dataset(cfg);
  auto S = distill::load_synthetic(run_dir + "/distilled.mdds");
  auto archs = eval_arch_list(cfg, data.num_classes());
  std::cout << "evaluating " << archs.size() << " architectures x "
            << cfg.eval.repeats << " repeats...\n";
  auto report = eval::cross_arch_report(S, data.val, archs, cfg.eval.repeats,
                                        cfg.eval.schedule, cfg.seed);
  report.config_hash = cfg.hash();
  nlohmann::json rj = report.to_json();
  try {
    zoo::AuxiliaryPool pool = load_pool(cfg, o);
    rj["cam_variance_metric"] = eval::cam_variance_metric(S, pool);
  } catch (const Error&) {
    // no pretrained pool available: accuracy-only report
  }
  std::ofstream(run_dir + "/eval_report.json") << rj.dump(2) << "\n";
  std::ofstream(run_dir + "/eval_report.txt") << report.render_table();
  std::cout << report.render_table();
  if (snapshots) {
    io::JsonlWriter sev(run_dir + "/snapshot_evals.jsonl");
    for (const auto& e : fs::directory_iterator(run_dir)) {
      std::string name = e.path().filename().string();
      if (name.rfind("snapshot-", 0) != 0 || e.path().extension() != ".mdds")
        continue;
      i64 step = std::stol(name.substr(9, 6));
      auto Ss = distill::load_synthetic(e.path().string());
      for (const auto& [spec, seen] : archs) {
        double acc = eval::train_on_distilled(
            spec, Ss, data.val, cfg.eval.schedule,
            Rng::derive(cfg.seed, "snapshot-eval/" + spec.id()).next_u64());
        sev.write({{"step", step},
                   {"arch", spec.id()},
                   {"seen", seen},
                   {"accuracy", acc}});
      }
    }
    manifest.artifacts["snapshot_evals"] = run_dir + "/snapshot_evals.jsonl";
  }
  manifest.artifacts["eval_report"] = run_dir + "/eval_report.json";
  manifest.mark_stage("eval", "complete");
  manifest.finished_at = io::iso_now();
  manifest.save(run_dir);
  return 0;
}

int cmd_cam_export(const std::string& config_path, const Overrides& o,
                   std::string run_dir, i64 samples) {
  io::ExperimentConfig cfg = resolve_config(config_path, o);
  if (run_dir.empty()) run_dir = distill_dir(cfg);
  auto S = distill::load_synthetic(run_dir + "/distilled.mdds");
  zoo::AuxiliaryPool pool = load_pool(cfg, o);
  i64 n = std::min<i64>(samples, S.size());
  std::vector<i64> idx;
  for (i64 i = 0; i < n; ++i) idx.push_back(i);
  std::string dir = run_dir + "/cams";
  io::export_cams_and_masks(dir, pool, S.batch(idx, false), S.batch_labels(idx));
  if (io::RunManifest::exists(run_dir)) {
    auto manifest = io::RunManifest::load(run_dir);
    manifest.mark_stage("cam-export", "complete");
    manifest.artifacts["cams"] = dir;
    manifest.save(run_dir);
  }
  std::cout << "wrote map/mask gallery for " << n << " samples to " << dir
            << "\n";
  return 0;
}

int cmd_erase_study(const std::string& config_path, const Overrides& o) {
  io::ExperimentConfig cfg = resolve_config(config_path, o);
  nlohmann::json key = {{"dataset", cfg.dataset.to_json()},
                        {"pool", cfg.pool.to_json()},
                        {"erasure", cfg.erasure.to_json()},
                        {"seed", cfg.seed}};
  std::string dir =
      cfg.output_dir + "/erase-study/" + sha256_hex(key.dump()).substr(0, 12);
  if (io::RunManifest::exists(dir) &&
      io::RunManifest::load(dir).stage_complete("erase-study")) {
    std::cout << "erase-study already complete in " << dir << "\n";
    std::ifstream table(dir + "/erasure_report.txt");
    std::cout << table.rdbuf();
    return 0;
  }
  io::RunLock lock(dir);
  write_resolved_config(cfg, dir);
  io::RunManifest manifest;
  manifest.config_hash = cfg.hash();
  manifest.started_at = io::iso_now();
  manifest.mark_stage("erase-study", "running");
  manifest.save(dir);
  io::Dataset data = acquire_dataset(cfg);
  zoo::AuxiliaryPool pool = load_pool(cfg, o);
  // the attention auxiliary is the study target when present
  zoo::ArchitectureSpec target = pool.auxiliaries.back().spec();
  for (const auto& aux : pool.auxiliaries)
    if (aux.spec().family == zoo::ArchFamily::Attention) target = aux.spec();
  eval::ErasureConfig ecfg;
  ecfg.max_train_samples = cfg.erasure.max_train_samples;
  ecfg.repeats = cfg.erasure.repeats;
  ecfg.schedule.warmup_steps = cfg.erasure.warmup_steps;
  ecfg.schedule.decay_steps = cfg.erasure.decay_steps;
  std::cout << "erasure study on " << target.id() << "...\n";
  auto report = eval::erasure_study(data, pool, target, ecfg, cfg.seed);
  std::ofstream(dir + "/erasure_report.json")
      << report.to_json().dump(2) << "\n";
  std::ofstream(dir + "/erasure_report.txt") << report.render_table();
  std::cout << report.render_table();
  manifest.artifacts["erasure_report"] = dir + "/erasure_report.json";
  manifest.mark_stage("erase-study", "complete");
  manifest.finished_at = io::iso_now();
  manifest.save(dir);
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, std::string out_dir) {
  check(!run_dirs.empty(), "report needs at least one run directory");
  if (out_dir.empty()) out_dir = run_dirs[0] + "/report";
  fs::create_directories(out_dir);
  std::vector<io::Series> loss_series;
  std::vector<io::Series> acc_series;
  std::ostringstream table;
  table << std::left << std::setw(16) << "run" << std::setw(14) << "method"
        << std::setw(8) << "steps" << std::setw(12) << "final loss"
        << std::setw(11) << "seen avg" << std::setw(12) << "unseen avg"
        << "map variance\n";
  table << std::string(86, '-') << "\n";
  for (const auto& dir : run_dirs) {
    std::string name = fs::path(dir).filename().string();
    io::Series s;
    s.label = name + " total loss";
    double final_total = 0;
    for (const auto& j : io::read_jsonl(dir + "/steps.jsonl")) {
      s.xs.push_back(j.at("step").get<double>());
      s.ys.push_back(j.at("total").get<double>());
      final_total = j.at("total").get<double>();
    }
    std::string method = "?";
    double seen = 0, unseen = 0, camvar = 0;
    bool have_eval = false, have_var = false;
    if (fs::exists(dir + "/config.json")) {
      std::ifstream in(dir + "/config.json");
      nlohmann::json cj = nlohmann::json::parse(in);
      method = cj.at("distill").at("baseline").get<std::string>();
      if (cj.at("distill").at("metadd").get<bool>()) method += "+metadd";
    }
    if (fs::exists(dir + "/eval_report.json")) {
      std::ifstream in(dir + "/eval_report.json");
      nlohmann::json ej = nlohmann::json::parse(in);
      seen = ej.at("seen_average").get<double>();
      unseen = ej.at("unseen_average").get<double>();
      have_var = ej.contains("cam_variance_metric");
      camvar = ej.value("cam_variance_metric", 0.0);
      have_eval = true;
    }
    table << std::left << std::setw(16) << name.substr(0, 15) << std::setw(14)
          << method << std::setw(8) << s.xs.size() << std::setw(12)
          << std::fixed << std::setprecision(4) << final_total;
    if (have_eval) {
      table << std::setw(11) << seen << std::setw(12) << unseen;
      if (have_var)
        table << std::scientific << std::setprecision(3) << camvar
              << std::fixed;
      else
        table << "-";
    } else {
      table << "(no eval report)";
    }
    table << "\n";
    loss_series.push_back(std::move(s));
    if (fs::exists(dir + "/snapshot_evals.jsonl")) {
      std::map<std::string, io::Series> per_arch;
      for (const auto& j : io::read_jsonl(dir + "/snapshot_evals.jsonl")) {
        auto& ser = per_arch[j.at("arch").get<std::string>()];
        ser.label = name + " " + j.at("arch").get<std::string>();
        ser.xs.push_back(j.at("step").get<double>());
        ser.ys.push_back(j.at("accuracy").get<double>());
      }
      for (auto& [k, v] : per_arch) acc_series.push_back(std::move(v));
    }
  }
  io::write_line_plot(out_dir + "/loss_vs_step.png", loss_series, "step",
                      "total loss");
  if (!acc_series.empty())
    io::write_line_plot(out_dir + "/accuracy_vs_step.png", acc_series, "step",
                        "top-1 accuracy");
  std::ofstream(out_dir + "/comparison.txt") << table.str();
  std::cout << table.str();
  std::cout << "plots written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-architecture dataset distillation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides o;
  std::uint64_t seed_flag = 0;
  i64 ipc_flag = 0;
  std::string metadd_flag, baseline_flag, out_flag, pool_flag, run_dir;
  bool snapshots = false;
  i64 samples = 16;
  std::vector<std::string> report_dirs;
  std::string report_out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_flag, "global seed (overrides config)");
    sub->add_option("--out", out_flag, "output directory (overrides config)");
    sub->add_option("--pool", pool_flag, "pool spec file (auxiliary checkpoints)");
  };

  auto* pre = app.add_subcommand("pretrain",
                                 "pretrain the backbone and auxiliary pool");
  add_common(pre);

  auto* dil = app.add_subcommand("distill", "run baseline or metadd distillation");
  add_common(dil);
  dil->add_option("--ipc", ipc_flag, "images per class");
  dil->add_option("--metadd", metadd_flag, "on|off")
      ->check(CLI::IsMember({"on", "off"}));
  dil->add_option("--baseline", baseline_flag, "dc|dm")
      ->check(CLI::IsMember({"dc", "dm"}));

  auto* ev = app.add_subcommand("eval", "cross-architecture evaluation of a run");
  add_common(ev);
  ev->add_option("--run", run_dir, "distill run directory");
  ev->add_option("--ipc", ipc_flag, "images per class");
  ev->add_option("--metadd", metadd_flag, "on|off")
      ->check(CLI::IsMember({"on", "off"}));
  ev->add_option("--baseline", baseline_flag, "dc|dm")
      ->check(CLI::IsMember({"dc", "dm"}));
  ev->add_flag("--snapshots", snapshots, "also evaluate periodic snapshots");

  auto* ce = app.add_subcommand("cam-export", "export map and mask galleries");
  add_common(ce);
  ce->add_option("--run", run_dir, "distill run directory");
  ce->add_option("--ipc", ipc_flag, "images per class");
  ce->add_option("--metadd", metadd_flag, "on|off");
  ce->add_option("--baseline", baseline_flag, "dc|dm");
  ce->add_option("--samples", samples, "number of samples to export");

  auto* er = app.add_subcommand("erase-study", "feature-erasure retraining study");
  add_common(er);

  auto* rp = app.add_subcommand("report", "compare runs: tables and plots");
  rp->add_option("runs", report_dirs, "run directories")->required();
  rp->add_option("--out", report_out, "report output directory");

  CLI11_PARSE(app, argc, argv);

  if (pre->count("--seed") || dil->count("--seed") || ev->count("--seed") ||
      ce->count("--seed") || er->count("--seed"))
    o.seed = seed_flag;
  if (dil->count("--ipc") || ev->count("--ipc") || ce->count("--ipc"))
    o.ipc = ipc_flag;
  if (!metadd_flag.empty()) o.metadd = metadd_flag;
  if (!baseline_flag.empty()) o.baseline = baseline_flag;
  if (!out_flag.empty()) o.out = out_flag;
  if (!pool_flag.empty()) o.pool_file = pool_flag;

  try {
    if (app.got_subcommand(pre)) return cmd_pretrain(config_path, o);
    if (app.got_subcommand(dil)) return cmd_distill(config_path, o);
    if (app.got_subcommand(ev)) return cmd_eval(config_path, o, run_dir, snapshots);
    if (app.got_subcommand(ce)) return cmd_cam_export(config_path, o, run_dir, samples);
    if (app.got_subcommand(er)) return cmd_erase_study(config_path, o);
    if (app.got_subcommand(rp)) return cmd_report(report_dirs, report_out);
  } catch (const Error& e) {
    std::cerr << nlohmann::json({{"error", e.category()}, {"message", e.what()}})
                     .dump()
              << "\n";
    return exit_code_for(e.category());
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json({{"error", "internal"}, {"message", e.what()}})
                     .dump()
              << "\n";
    return 1;
  }
  return 0;
}
