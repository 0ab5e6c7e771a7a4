#pragma once

#include <iostream>
#include <memory>
#include <set>

#include "metadd/distill/synthetic.hpp"
#include "metadd/nn/optim.hpp"
#include "metadd/zoo/network.hpp"

namespace metadd::distill {

/// Behavioral contract of a baseline distillation method: given label-aligned
/// synthetic and real batches it produces a differentiable matching loss, and
/// it owns its backbone's re-initialization/update policy. Engines never
/// touch the auxiliaries.
class BaselineEngine {
 public:
  virtual ~BaselineEngine() = default;
  virtual const char* name() const = 0;
  virtual zoo::PretrainedModel& backbone() = 0;
  virtual void begin_step(i64 step) = 0;
  virtual Tensor loss(const Tensor& syn_images, const std::vector<i64>& syn_labels,
                      const Tensor& real_images,
                      const std::vector<i64>& real_labels) = 0;
  virtual void end_step(const SyntheticDataset& S) = 0;
};

namespace detail {

inline std::vector<i64> class_members(const std::vector<i64>& labels, i64 c) {
  std::vector<i64> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i64(i));
  return out;
}

inline Tensor take_rows4(const Tensor& x, const std::vector<i64>& rows) {
  std::vector<Tensor> parts;
  parts.reserve(rows.size());
  for (i64 r : rows) parts.push_back(slice(x, 0, r, 1));
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

}  // namespace detail

struct DcEngineConfig {
  i64 reinit_every = 10;
  i64 inner_steps = 10;
  double inner_lr = 0.01;
  double inner_momentum = 0.5;
  i64 inner_batch = 64;
};

/// Gradient matching: per class, align the backbone's parameter gradients on
/// real and synthetic batches (per-output-row cosine distance, 1-dim
/// parameters skipped). The backbone re-initializes periodically and trains
/// on the current distilled set between outer steps.
class DcEngine : public BaselineEngine {
 public:
  DcEngine(const zoo::ArchitectureSpec& spec, std::uint64_t seed,
           DcEngineConfig cfg = {})
      : spec_(spec), cfg_(cfg),
        init_rng_(Rng::derive(seed, "dc/backbone-init")),
        inner_rng_(Rng::derive(seed, "dc/inner-batch")) {
    reinit();
  }

  const char* name() const override { return "dc"; }
  zoo::PretrainedModel& backbone() override { return backbone_; }

  void begin_step(i64 step) override {
    if (cfg_.reinit_every > 0 && step > 0 && step % cfg_.reinit_every == 0)
      reinit();
  }

  Tensor loss(const Tensor& syn_images, const std::vector<i64>& syn_labels,
              const Tensor& real_images,
              const std::vector<i64>& real_labels) override {
    auto& net = *backbone_.net;
    std::vector<Tensor> weights;
    for (auto& [nm, p] : net.parameters())
      if (p.ndim() >= 2) weights.push_back(p);
    std::set<i64> classes(syn_labels.begin(), syn_labels.end());
    Tensor total;
    for (i64 c : classes) {
      auto syn_rows = detail::class_members(syn_labels, c);
      auto real_rows = detail::class_members(real_labels, c);
      if (real_rows.empty()) {
        std::cerr << "[dc] warning: class " << c
                  << " missing from the real batch; skipped\n";
        continue;
      }
      std::vector<i64> lab_s(syn_rows.size(), c), lab_r(real_rows.size(), c);
      Tensor g_loss_real = nn::cross_entropy(
          net.forward(detail::take_rows4(real_images, real_rows)).logits, lab_r);
      std::vector<Tensor> g_real = grad_of(g_loss_real, weights, false);
      Tensor g_loss_syn = nn::cross_entropy(
          net.forward(detail::take_rows4(syn_images, syn_rows)).logits, lab_s);
      std::vector<Tensor> g_syn = grad_of(g_loss_syn, weights, /*create_graph=*/true);
      for (std::size_t wi = 0; wi < weights.size(); ++wi) {
        Tensor d = layer_distance(g_syn[wi], g_real[wi].detach());
        total = total.defined() ? add(total, d) : d;
      }
    }
    check(total.defined(), "dc_loss: no class had samples in both batches");
    return total;
  }

  void end_step(const SyntheticDataset& S) override {
    if (cfg_.inner_steps <= 0) return;
    auto& net = *backbone_.net;
    std::vector<Tensor> params;
    for (auto& [nm, p] : net.parameters()) params.push_back(p);
    nn::Sgd opt(params, cfg_.inner_momentum, 0.0);
    for (i64 it = 0; it < cfg_.inner_steps; ++it) {
      std::vector<i64> idx;
      i64 bs = std::min<i64>(cfg_.inner_batch, S.size());
      for (i64 i = 0; i < bs; ++i) idx.push_back(inner_rng_.range(0, S.size()));
      Tensor x = S.batch(idx, false);
      Tensor l = nn::cross_entropy(net.forward(x).logits, S.batch_labels(idx));
      opt.zero_grad();
      backward(l);
      opt.step(cfg_.inner_lr);
    }
    for (auto& [nm, p] : net.parameters()) p.zero_grad();
  }

 private:
  void reinit() {
    backbone_.net = zoo::build_model(spec_, init_rng_.next_u64());
    backbone_.provenance.dataset_id = "dc-backbone";
  }

  /// Per-output-row cosine distance between gradient tensors, summed.
  /// The real-side gradient is a constant target.
  Tensor layer_distance(const Tensor& gs, const Tensor& gt) {
    i64 out_dim = gs.dim(0);
    i64 cols = gs.numel() / out_dim;
    Tensor a = reshape(gs, {out_dim, cols});
    Tensor b = reshape(gt, {out_dim, cols});
    Tensor dot = sum_axis(mul(a, b), 1);                       // [out,1]
    Tensor na = sqrt(sum_axis(mul(a, a), 1));
    Tensor nb = sqrt(sum_axis(mul(b, b), 1));
    Tensor cosine = div(dot, add_scalar(mul(na, nb), 1e-6));
    return sum_all(sub(Tensor::full({out_dim, 1}, 1.0), cosine));
  }

  zoo::ArchitectureSpec spec_;
  DcEngineConfig cfg_;
  zoo::PretrainedModel backbone_;
  Rng init_rng_;
  Rng inner_rng_;
};

/// Distribution matching: per class, squared distance between mean
/// penultimate embeddings of real and synthetic batches under a freshly
/// re-initialized backbone each step.
class DmEngine : public BaselineEngine {
 public:
  DmEngine(const zoo::ArchitectureSpec& spec, std::uint64_t seed)
      : spec_(spec), init_rng_(Rng::derive(seed, "dm/backbone-init")) {
    resample();
  }

  const char* name() const override { return "dm"; }
  zoo::PretrainedModel& backbone() override { return backbone_; }

  void begin_step(i64) override { resample(); }

  Tensor loss(const Tensor& syn_images, const std::vector<i64>& syn_labels,
              const Tensor& real_images,
              const std::vector<i64>& real_labels) override {
    auto& net = *backbone_.net;
    Tensor emb_syn = net.forward(syn_images).embedding;  // [Bs,F]
    Tensor emb_real;
    {
      NoGradGuard ng;  // real side is a constant target
      emb_real = net.forward(real_images).embedding;
    }
    std::set<i64> classes(syn_labels.begin(), syn_labels.end());
    Tensor total;
    for (i64 c : classes) {
      auto syn_rows = detail::class_members(syn_labels, c);
      auto real_rows = detail::class_members(real_labels, c);
      if (real_rows.empty()) {
        std::cerr << "[dm] warning: class " << c
                  << " missing from the real batch; skipped\n";
        continue;
      }
      Tensor ms = mean_rows(emb_syn, syn_rows);
      Tensor mr = mean_rows(emb_real, real_rows).detach();
      Tensor d = sub(ms, mr);
      Tensor term = sum_all(mul(d, d));
      total = total.defined() ? add(total, term) : term;
    }
    check(total.defined(), "dm_loss: no class had samples in both batches");
    return total;
  }

  void end_step(const SyntheticDataset&) override {}

 private:
  void resample() {
    backbone_.net = zoo::build_model(spec_, init_rng_.next_u64());
    backbone_.net->set_trainable(false);  // embeddings only, never trained
    backbone_.provenance.dataset_id = "dm-backbone";
  }

  Tensor mean_rows(const Tensor& emb, const std::vector<i64>& rows) {
    Tensor sel = detail::take_rows4(emb, rows);  // [k,F]
    return mul_scalar(sum_axis(sel, 0), 1.0 / double(rows.size()));
  }

  zoo::ArchitectureSpec spec_;
  zoo::PretrainedModel backbone_;
  Rng init_rng_;
};

inline std::unique_ptr<BaselineEngine> make_engine(
    const std::string& name, const zoo::ArchitectureSpec& backbone_spec,
    std::uint64_t seed, const DcEngineConfig& dc_cfg = {}) {
  if (name == "dc")
    return std::make_unique<DcEngine>(backbone_spec, seed, dc_cfg);
  if (name == "dm") return std::make_unique<DmEngine>(backbone_spec, seed);
  throw ConfigError("unknown baseline engine '" + name + "' (expected dc or dm)");
}

}  // namespace metadd::distill
