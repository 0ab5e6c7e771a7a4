#pragma once

#include "metadd/nn/optim.hpp"
#include "metadd/zoo/checkpoint.hpp"
#include "metadd/zoo/model.hpp"

namespace metadd::zoo {

struct PretrainSchedule {
  i64 epochs = 20;
  i64 batch_size = 64;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;  // of total steps
};

/// Default initial learning rates per family; tuned once on the shapes
/// corpus and held fixed everywhere for fairness across components.
inline double default_lr(ArchFamily family) {
  switch (family) {
    case ArchFamily::ConvPlain: return 0.05;
    case ArchFamily::ConvResidual: return 0.05;
    case ArchFamily::ConvMobile: return 0.05;
    case ArchFamily::Attention: return 0.02;
  }
  return 0.05;
}

/// Supervised training from scratch. Deterministic in (spec, data order,
/// seed): batches are drawn by a per-epoch shuffle of a seed-derived stream.
/// Divergence (non-finite loss) aborts with the failing step attached.
inline PretrainedModel pretrain(const ArchitectureSpec& spec,
                                const io::Split& train, const io::Split& val,
                                const PretrainSchedule& schedule,
                                std::uint64_t seed) {
  check(train.size() > 0, "pretrain: empty training split");
  check(schedule.epochs >= 0 && schedule.batch_size > 0,
        "pretrain: schedule needs positive step counts");
  auto net = build_model(spec, seed);
  std::vector<Tensor> params;
  for (auto& [name, t] : net->parameters()) params.push_back(t);
  nn::Sgd opt(params, schedule.momentum, schedule.weight_decay);
  i64 steps_per_epoch = (train.size() + schedule.batch_size - 1) / schedule.batch_size;
  nn::WarmupCosine sched;
  sched.base_lr = schedule.base_lr;
  sched.total_steps = std::max<i64>(1, schedule.epochs * steps_per_epoch);
  sched.warmup_steps = i64(schedule.warmup_fraction * double(sched.total_steps));
  Rng order_rng = Rng::derive(seed, "pretrain/order/" + spec.id());
  i64 step = 0;
  for (i64 epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::vector<i64> perm(std::size_t(train.size()));
    for (i64 i = 0; i < train.size(); ++i) perm[std::size_t(i)] = i;
    order_rng.shuffle(perm);
    for (i64 start = 0; start < train.size(); start += schedule.batch_size) {
      i64 stop = std::min(train.size(), start + schedule.batch_size);
      std::vector<i64> idx(perm.begin() + start, perm.begin() + stop);
      Tensor x = train.batch(idx);
      Tensor loss = nn::cross_entropy(net->forward(x).logits,
                                      train.batch_labels(idx));
      if (!std::isfinite(loss.item()))
        throw TrainError("pretraining loss diverged", step);
      opt.zero_grad();
      backward(loss);
      opt.step(sched.lr_at(step));
      ++step;
    }
  }
  PretrainedModel model;
  model.net = net;
  model.provenance.dataset_id = "";  // caller fills; accuracy recorded below
  model.provenance.epochs = schedule.epochs;
  model.provenance.seed = seed;
  model.provenance.final_top1 = evaluate_accuracy(*net, val);
  return model;
}

}  // namespace metadd::zoo
