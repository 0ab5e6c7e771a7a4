#pragma once

#include "metadd/eval/evaluate.hpp"

namespace metadd::eval {

struct ErasureVariant {
  std::string name;          // "none", "meta", or an auxiliary arch id
  double erased_fraction = 0.0;
  std::vector<double> accuracies;
  double mean_accuracy = 0.0;
  double delta_vs_none = 0.0;
};

struct ErasureReport {
  std::string target_arch;
  std::vector<ErasureVariant> variants;

  const ErasureVariant* find(const std::string& name) const {
    for (const auto& v : variants)
      if (v.name == name) return &v;
    return nullptr;
  }

  nlohmann::json to_json() const {
    nlohmann::json v = nlohmann::json::array();
    for (const auto& row : variants)
      v.push_back({{"variant", row.name},
                   {"erased_fraction", row.erased_fraction},
                   {"accuracies", row.accuracies},
                   {"mean_accuracy", row.mean_accuracy},
                   {"delta_vs_none", row.delta_vs_none}});
    return {{"target_arch", target_arch}, {"variants", v}};
  }

  std::string render_table() const {
    std::ostringstream os;
    os << "erasure study, target " << target_arch << "\n";
    os << std::left << std::setw(34) << "erased features" << std::setw(12)
       << "area frac" << std::setw(12) << "top-1" << "delta\n";
    os << std::string(70, '-') << "\n";
    for (const auto& v : variants) {
      os << std::left << std::setw(34) << v.name << std::setw(12) << std::fixed
         << std::setprecision(4) << v.erased_fraction << std::setw(12)
         << std::setprecision(4) << v.mean_accuracy << std::showpos
         << std::setprecision(4) << v.delta_vs_none << std::noshowpos << "\n";
    }
    return os.str();
  }
};

struct ErasureConfig {
  i64 max_train_samples = 0;  // 0 = whole split
  i64 repeats = 3;
  i64 mask_chunk = 32;
  EvalSchedule schedule;
};

namespace detail {

struct SampleMasks {
  std::vector<meta::BinaryMask> hetero;  // one per auxiliary
  meta::BinaryMask meta_region;
};

inline std::vector<SampleMasks> masks_for_split(const io::Split& split,
                                                const std::vector<i64>& subset,
                                                const AuxiliaryPool& pool,
                                                i64 chunk) {
  std::vector<SampleMasks> out(subset.size());
  for (std::size_t start = 0; start < subset.size(); start += std::size_t(chunk)) {
    std::size_t stop = std::min(subset.size(), start + std::size_t(chunk));
    std::vector<i64> idx(subset.begin() + i64(start), subset.begin() + i64(stop));
    Tensor x = split.batch(idx);
    x.set_requires_grad(true);
    auto ctx = losses::ai_loss(pool, x, split.batch_labels(idx));
    auto cams =
        cam::compute_pool_cams(ctx, split.height, split.width, false);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      auto stack = cams.stack_for_sample(i64(b));
      SampleMasks sm;
      sm.meta_region = meta::meta_mask(stack);
      for (i64 m = 0; m < stack.M(); ++m)
        sm.hetero.push_back(meta::hetero_mask(stack, m, sm.meta_region));
      out[start + b] = std::move(sm);
    }
  }
  return out;
}

inline io::Split erased_split(const io::Split& split,
                              const std::vector<i64>& subset,
                              const std::vector<SampleMasks>& masks,
                              i64 variant,  // -1 meta, else auxiliary index
                              const meta::FillPolicy& fill,
                              double* erased_fraction) {
  io::Split out;
  out.channels = split.channels;
  out.height = split.height;
  out.width = split.width;
  i64 n = split.image_numel();
  double frac = 0.0;
  for (std::size_t s = 0; s < subset.size(); ++s) {
    Tensor img = split.batch({subset[s]});
    img = reshape(img, {split.channels, split.height, split.width});
    const meta::BinaryMask& mask = variant < 0
                                       ? masks[s].meta_region
                                       : masks[s].hetero[std::size_t(variant)];
    Tensor erased = meta::erase(img, mask, fill);
    frac += mask.fraction();
    for (i64 i = 0; i < n; ++i)
      out.pixels.push_back(std::uint8_t(
          std::lround(std::min(1.0, std::max(0.0, erased.data()[i])) * 255.0)));
    out.labels.push_back(split.labels[std::size_t(subset[s])]);
  }
  if (erased_fraction) *erased_fraction = frac / double(subset.size());
  return out;
}

}  // namespace detail

/// Retrain `target` from scratch on variants of the training split with
/// different feature regions erased (none, each auxiliary's heterogeneous
/// region, the meta region) and report the accuracy deltas together with the
/// erased-area fractions.
inline ErasureReport erasure_study(const io::Dataset& data,
                                   const AuxiliaryPool& pool,
                                   const ArchitectureSpec& target,
                                   const ErasureConfig& cfg,
                                   std::uint64_t seed) {
  pool.validate();
  std::vector<i64> subset;
  i64 n = cfg.max_train_samples > 0
              ? std::min<i64>(cfg.max_train_samples, data.train.size())
              : data.train.size();
  // deterministic class-interleaved prefix keeps the subset balanced
  for (i64 i = 0; i < n; ++i) subset.push_back(i);
  auto masks = detail::masks_for_split(data.train, subset, pool, cfg.mask_chunk);

  meta::FillPolicy fill;
  fill.mode = meta::FillPolicy::Mode::ChannelMean;
  fill.channel_means = data.train.channel_means();

  ErasureReport report;
  report.target_arch = target.id();
  auto train_variant = [&](const std::string& name, i64 variant) {
    ErasureVariant row;
    row.name = name;
    io::Split split;
    if (variant == -2) {  // unmodified
      split.channels = data.train.channels;
      split.height = data.train.height;
      split.width = data.train.width;
      i64 sz = data.train.image_numel();
      for (i64 s : subset) {
        split.pixels.insert(split.pixels.end(),
                            data.train.pixels.begin() + s * sz,
                            data.train.pixels.begin() + (s + 1) * sz);
        split.labels.push_back(data.train.labels[std::size_t(s)]);
      }
    } else {
      split = detail::erased_split(data.train, subset, masks, variant, fill,
                                   &row.erased_fraction);
    }
    for (i64 r = 0; r < cfg.repeats; ++r) {
      std::uint64_t rep_seed =
          Rng::derive(seed, "erasure/" + name + "/" + std::to_string(r))
              .next_u64();
      auto net = zoo::build_model(target, rep_seed);
      std::vector<Tensor> params;
      for (auto& [nm, p] : net->parameters()) params.push_back(p);
      nn::Sgd opt(params, cfg.schedule.momentum, cfg.schedule.weight_decay);
      nn::WarmupCosine lr;
      lr.base_lr = zoo::default_lr(target.family) * cfg.schedule.lr_scale;
      lr.warmup_steps = cfg.schedule.warmup_steps;
      lr.total_steps = cfg.schedule.warmup_steps + cfg.schedule.decay_steps;
      Rng order = Rng::derive(rep_seed, "erasure/order");
      std::vector<i64> perm(std::size_t(split.size()));
      for (i64 i = 0; i < split.size(); ++i) perm[std::size_t(i)] = i;
      i64 cursor = split.size();
      i64 bs = std::min<i64>(cfg.schedule.batch_size, split.size());
      for (i64 step = 0; step < lr.total_steps; ++step) {
        std::vector<i64> idx;
        for (i64 i = 0; i < bs; ++i) {
          if (cursor >= split.size()) {
            order.shuffle(perm);
            cursor = 0;
          }
          idx.push_back(perm[std::size_t(cursor++)]);
        }
        Tensor x = split.batch(idx);
        Tensor loss =
            nn::cross_entropy(net->forward(x).logits, split.batch_labels(idx));
        if (!std::isfinite(loss.item()))
          throw TrainError("erasure-study training diverged", step);
        opt.zero_grad();
        backward(loss);
        opt.step(lr.lr_at(step));
      }
      row.accuracies.push_back(zoo::evaluate_accuracy(*net, data.val));
    }
    for (double a : row.accuracies) row.mean_accuracy += a;
    row.mean_accuracy /= double(row.accuracies.size());
    report.variants.push_back(std::move(row));
  };

  train_variant("none", -2);
  for (i64 m = 0; m < pool.M(); ++m)
    train_variant(pool.auxiliaries[std::size_t(m)].spec().id(), m);
  train_variant("meta", -1);
  double base = report.variants[0].mean_accuracy;
  for (auto& v : report.variants) v.delta_vs_none = v.mean_accuracy - base;
  return report;
}

}  // namespace metadd::eval
