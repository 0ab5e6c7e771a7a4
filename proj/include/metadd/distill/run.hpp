#pragma once

#include <functional>

#include "metadd/distill/engines.hpp"
#include "metadd/losses/losses.hpp"

namespace metadd::distill {

struct DistillConfig {
  std::string baseline = "dm";  // dc | dm
  bool metadd = false;
  i64 iterations = 200;           // K
  double synthetic_lr = 1.0;      // eta
  double synthetic_momentum = 0.0;  // optional, off by default
  i64 ipc = 10;
  InitMode init_mode = InitMode::RealSample;
  i64 batch_synth = 0;            // 0 = whole S each step
  i64 batch_real_per_class = 64;
  losses::LossWeights weights;    // applied only when metadd is on
  DcEngineConfig dc;
  i64 snapshot_every = 0;         // 0 = no periodic snapshots
  std::uint64_t seed = 0;

  void validate(i64 train_size, i64 classes) const {
    check(iterations >= 0, "iterations must be >= 0");
    check(synthetic_lr >= 0.0, "synthetic learning rate must be nonnegative");
    check(ipc >= 1, "ipc must be >= 1");
    check(batch_synth >= 0 && batch_synth <= classes * ipc,
          "batch_synth exceeds |S|");
    check(batch_real_per_class >= 1 &&
              batch_real_per_class * classes <= train_size,
          "real batch size exceeds |T|");
  }

  losses::LossWeights active_weights() const {
    if (metadd) return weights;
    losses::LossWeights off;
    off.ai = off.var = off.pos = 0.0;
    return off;
  }
};

struct StepRecord {
  i64 step = 0;
  double l_dd = 0, l_ai = 0, var = 0, pos = 0, total = 0;

  nlohmann::json to_json() const {
    return {{"step", step}, {"l_dd", l_dd}, {"l_ai", l_ai},
            {"var", var},   {"pos", pos},   {"total", total}};
  }
};

/// One outer iteration: baseline loss on the sampled batches, plus the
/// consensus terms when active, then a plain gradient step on the sampled
/// synthetic pixels followed by [0,1] clamping. Auxiliaries stay untouched.
inline losses::LossBreakdown metadd_step(
    SyntheticDataset& S, const std::vector<i64>& bs_idx, i64 step,
    BaselineEngine& engine, const zoo::AuxiliaryPool& pool,
    const Tensor& real_images, const std::vector<i64>& real_labels,
    const DistillConfig& cfg, std::vector<double>* velocity = nullptr) {
  engine.begin_step(step);
  Tensor bs_images = S.batch(bs_idx, /*requires_grad=*/true);
  std::vector<i64> bs_labels = S.batch_labels(bs_idx);
  Tensor l_dd = engine.loss(bs_images, bs_labels, real_images, real_labels);
  losses::LossWeights w = cfg.active_weights();
  zoo::AuxiliaryPool step_pool = pool;
  step_pool.backbone = engine.backbone();
  losses::LossBreakdown bd;
  try {
    bd = losses::total_loss(l_dd, step_pool, bs_images, bs_labels, w, true);
  } catch (const NumericError& e) {
    throw TrainError(std::string("distillation aborted: ") + e.what(), step);
  }
  Tensor g = grad_of(bd.total_tensor, {bs_images})[0];
  i64 n = bs_images.numel() / i64(bs_idx.size());
  Tensor updated = Tensor::leaf(bs_images.shape());
  for (std::size_t b = 0; b < bs_idx.size(); ++b) {
    const double* x = bs_images.data() + i64(b) * n;
    const double* gg = g.data() + i64(b) * n;
    double* out = updated.data() + i64(b) * n;
    if (velocity) {
      double* v = velocity->data() + bs_idx[b] * n;
      for (i64 i = 0; i < n; ++i) {
        v[i] = cfg.synthetic_momentum * v[i] + gg[i];
        out[i] = x[i] - cfg.synthetic_lr * v[i];
      }
    } else {
      for (i64 i = 0; i < n; ++i) out[i] = x[i] - cfg.synthetic_lr * gg[i];
    }
  }
  S.apply_update(bs_idx, updated);
  engine.end_step(S);
  bd.total_tensor = Tensor();  // drop the graph before the record escapes
  return bd;
}

struct RunResult {
  SyntheticDataset S;
  std::vector<StepRecord> log;
};

using SnapshotFn = std::function<void(i64 step, const SyntheticDataset&)>;
using RecordFn = std::function<void(const StepRecord&)>;

/// Full distillation run per the outer-loop protocol: deterministic in the
/// config seed, per-step component log, optional periodic snapshots. On a
/// numeric failure the error carries the failing step; the last snapshot
/// written stays on disk.
inline RunResult distill_run(const DistillConfig& cfg, const io::Dataset& T,
                             const zoo::AuxiliaryPool& pool,
                             const SnapshotFn& snapshot = nullptr,
                             const RecordFn& on_record = nullptr) {
  cfg.validate(T.train.size(), T.num_classes());
  if (cfg.metadd) {
    check(!pool.auxiliaries.empty(),
          "metadd requires a pretrained auxiliary pool");
    pool.validate();
  }
  RunResult run;
  run.S = init_synthetic(T, cfg.ipc, cfg.init_mode, cfg.seed);
  run.S.provenance.method =
      cfg.baseline + (cfg.metadd ? std::string("+metadd") : std::string());
  run.S.provenance.components = cfg.metadd ? "ai,var,pos" : "";
  auto engine = make_engine(cfg.baseline, pool.backbone.spec(), cfg.seed, cfg.dc);
  Rng synth_rng = Rng::derive(cfg.seed, "distill/synth-batch");
  Rng real_rng = Rng::derive(cfg.seed, "distill/real-batch");
  std::vector<double> velocity;
  if (cfg.synthetic_momentum != 0.0)
    velocity.assign(std::size_t(run.S.images.numel()), 0.0);
  i64 classes = T.num_classes();
  std::vector<std::vector<i64>> class_idx;
  for (i64 c = 0; c < classes; ++c)
    class_idx.push_back(T.train.indices_of_class(c));

  for (i64 k = 0; k < cfg.iterations; ++k) {
    // sample B_s (class-balanced) and B_t (per class)
    std::vector<i64> bs_idx;
    if (cfg.batch_synth == 0 || cfg.batch_synth >= run.S.size()) {
      for (i64 i = 0; i < run.S.size(); ++i) bs_idx.push_back(i);
    } else {
      i64 per_class = std::max<i64>(1, cfg.batch_synth / classes);
      for (i64 c = 0; c < classes; ++c) {
        std::vector<i64> members = run.S.indices_of_class(c);
        synth_rng.shuffle(members);
        for (i64 i = 0; i < std::min<i64>(per_class, i64(members.size())); ++i)
          bs_idx.push_back(members[std::size_t(i)]);
      }
    }
    std::vector<i64> bt_idx;
    for (i64 c = 0; c < classes; ++c) {
      const auto& members = class_idx[std::size_t(c)];
      for (i64 i = 0; i < cfg.batch_real_per_class; ++i)
        bt_idx.push_back(members[std::size_t(real_rng.below(members.size()))]);
    }
    Tensor real_images = T.train.batch(bt_idx);
    std::vector<i64> real_labels = T.train.batch_labels(bt_idx);

    losses::LossBreakdown bd =
        metadd_step(run.S, bs_idx, k, *engine, pool, real_images, real_labels,
                    cfg, velocity.empty() ? nullptr : &velocity);
    StepRecord rec{k, bd.l_dd, bd.l_ai, bd.var_term, bd.pos_term, bd.total};
    run.log.push_back(rec);
    if (on_record) on_record(rec);
    if (snapshot && cfg.snapshot_every > 0 && (k + 1) % cfg.snapshot_every == 0)
      snapshot(k, run.S);
  }
  run.S.check_invariants();
  return run;
}

}  // namespace metadd::distill
