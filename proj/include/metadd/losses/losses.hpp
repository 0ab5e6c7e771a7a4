#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "metadd/cam/engine.hpp"

namespace metadd::losses {

using cam::AiContext;
using cam::CamStack;
using cam::PoolCams;
using zoo::AuxiliaryPool;

struct LossWeights {
  double ai = 1.0;
  double var = 1.0;
  double pos = 1.0;
  // the positive-map term enters the minimized total negated; +1 flips it
  // for ablation
  double pos_sign = -1.0;
  // divide the positive term by (M * pixels); off reproduces the bare sum
  bool pos_normalized = true;

  bool metadd_active() const { return ai != 0.0 || var != 0.0 || pos != 0.0; }
};

/// Per-step component record. The stored terms are the weighted
/// contributions, so they sum to `total` by construction.
struct LossBreakdown {
  double l_dd = 0.0;
  double l_ai = 0.0;
  double var_term = 0.0;
  double pos_term = 0.0;
  double total = 0.0;
  std::vector<double> per_aux_ce;
  std::vector<double> per_aux_kd;
  Tensor total_tensor;

  nlohmann::json to_json() const {
    return {{"l_dd", l_dd},     {"l_ai", l_ai}, {"var", var_term},
            {"pos", pos_term},  {"total", total},
            {"per_aux_ce", per_aux_ce}, {"per_aux_kd", per_aux_kd}};
  }
};

/// KL(p_m || p_mu) with natural log, batch-averaged. Inputs must be rows of
/// probabilities; zeros are clamped at 1e-12 inside the logs.
inline Tensor kd_loss(const Tensor& p_m, const Tensor& p_mu) {
  check(p_m.ndim() == 2 && p_mu.shape() == p_m.shape(),
        "kd_loss expects matching [B,C] probability rows");
  const double* p = p_m.data();
  const double* q = p_mu.data();
  i64 B = p_m.dim(0), C = p_m.dim(1);
  for (i64 r = 0; r < B; ++r) {
    double sp = 0, sq = 0;
    for (i64 c = 0; c < C; ++c) {
      if (p[r * C + c] < 0 || q[r * C + c] < 0)
        throw ContractError("kd_loss: negative probability entry");
      sp += p[r * C + c];
      sq += q[r * C + c];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
      throw ContractError("kd_loss: rows must sum to 1 within 1e-6");
  }
  return nn::kl_div_rows(p_m, p_mu);
}

/// Architecture-invariant loss over the pool: sum over auxiliaries of
/// cross-entropy plus KL against the backbone's (detached) distribution.
/// Keeps the per-auxiliary forward traces so maps can be extracted from the
/// same evaluation.
inline AiContext ai_loss(const AuxiliaryPool& pool, const Tensor& images,
                         const std::vector<i64>& labels) {
  check(pool.M() > 0, "ai_loss: empty auxiliary pool");
  check(images.ndim() == 4, "ai_loss expects [B,3,H,W] images");
  AiContext ctx;
  ctx.batch_size = images.dim(0);
  // The backbone distribution is a target only in the parameter sense: this
  // loss never updates backbone weights, but the pixel path through the
  // backbone logits stays live.
  Tensor backbone_logits = pool.backbone.net->forward(images).logits;
  Tensor p_mu = nn::softmax_lastdim(backbone_logits);
  Tensor total;
  for (const auto& aux : pool.auxiliaries) {
    AiContext::AuxTrace at;
    at.family = aux.spec().family;
    at.arch_id = aux.spec().id();
    at.trace = aux.net->forward(images);
    Tensor ce = nn::cross_entropy(at.trace.logits, labels);
    Tensor p_m = nn::softmax_lastdim(at.trace.logits);
    Tensor kd = nn::kl_div_rows(p_m, p_mu);
    ctx.per_aux_ce.push_back(ce.item());
    ctx.per_aux_kd.push_back(kd.item());
    Tensor term = add(ce, kd);
    total = total.defined() ? add(total, term) : term;
    ctx.aux.push_back(std::move(at));
  }
  ctx.total = total;
  assert_finite(ctx.total, "architecture-invariant loss");
  return ctx;
}

/// Per-pixel population variance across the stack's maps, averaged over
/// pixels.
inline Tensor cam_variance(const CamStack& stack) {
  check(stack.M() >= 1, "cam_variance: empty stack");
  i64 M = stack.M();
  i64 H = stack.maps[0].dim(0), W = stack.maps[0].dim(1);
  if (M == 1) return Tensor::zeros({1});
  std::vector<Tensor> rows;
  for (const auto& m : stack.maps) {
    check(m.dim(0) == H && m.dim(1) == W, "cam_variance: map size mismatch");
    rows.push_back(reshape(m, {1, H * W}));
  }
  Tensor mat = concat(rows, 0);                    // [M, H*W]
  Tensor mean = mean_axis(mat, 0);                 // [1, H*W]
  Tensor dev = sub(mat, mean);
  return mul_scalar(sum_all(mul(dev, dev)), 1.0 / double(M * H * W));
}

/// Positive-map term over the raw (pre-normalization) maps of one sample:
/// sign * sum of entries, optionally normalized by map count and pixels.
/// Maps may have different sizes; each contributes its own pixel mean.
inline Tensor pos_loss(const std::vector<Tensor>& raw_maps,
                       const LossWeights& w = {}) {
  if (raw_maps.empty()) return Tensor::zeros({1});
  Tensor acc;
  for (const auto& m : raw_maps) {
    Tensor s = sum_all(m);
    if (w.pos_normalized) s = mul_scalar(s, 1.0 / double(m.numel()));
    acc = acc.defined() ? add(acc, s) : s;
  }
  if (w.pos_normalized) acc = mul_scalar(acc, 1.0 / double(raw_maps.size()));
  return mul_scalar(acc, w.pos_sign);
}

namespace detail {

inline void check_component(double v, const char* name) {
  if (!std::isfinite(v))
    throw NumericError(std::string("loss component '") + name +
                       "' is non-finite");
}

}  // namespace detail

/// Total objective for one batch: the baseline distillation loss plus the
/// weighted architecture-invariant, map-variance and positive-map terms. The
/// variance and positive terms are per-sample quantities averaged over the
/// batch. With all weights zero the extraction machinery is skipped and the
/// total is exactly l_dd.
inline LossBreakdown total_loss(const Tensor& l_dd, const AuxiliaryPool& pool,
                                const Tensor& images,
                                const std::vector<i64>& labels,
                                const LossWeights& w = {},
                                bool create_graph = true) {
  check(l_dd.defined() && l_dd.numel() == 1, "total_loss: l_dd must be scalar");
  LossBreakdown out;
  out.l_dd = l_dd.item();
  detail::check_component(out.l_dd, "l_dd");
  Tensor total = l_dd;
  if (w.metadd_active()) {
    AiContext ctx = ai_loss(pool, images, labels);
    out.per_aux_ce = ctx.per_aux_ce;
    out.per_aux_kd = ctx.per_aux_kd;
    if (w.ai != 0.0) {
      Tensor term = mul_scalar(ctx.total, w.ai);
      out.l_ai = term.item();
      detail::check_component(out.l_ai, "l_ai");
      total = add(total, term);
    }
    if (w.var != 0.0 || w.pos != 0.0) {
      i64 H = images.dim(2), W = images.dim(3);
      PoolCams cams = cam::compute_pool_cams(ctx, H, W, create_graph);
      GradModeGuard guard(create_graph);
      if (w.var != 0.0) {
        Tensor acc;
        for (i64 b = 0; b < ctx.batch_size; ++b) {
          Tensor v = cam_variance(cams.stack_for_sample(b));
          acc = acc.defined() ? add(acc, v) : v;
        }
        Tensor term = mul_scalar(acc, w.var / double(ctx.batch_size));
        out.var_term = term.item();
        detail::check_component(out.var_term, "var");
        total = add(total, term);
      }
      if (w.pos != 0.0) {
        std::vector<Tensor> raw_batched;
        for (const auto& r : cams.raw) raw_batched.push_back(r.values);
        // normalized mode: the per-map mean over [B,I,J] already equals the
        // batch mean of per-sample terms; bare-sum mode needs explicit /B
        Tensor p = pos_loss(raw_batched, w);
        double scale = w.pos * (w.pos_normalized ? 1.0 : 1.0 / double(ctx.batch_size));
        Tensor term = mul_scalar(p, scale);
        out.pos_term = term.item();
        detail::check_component(out.pos_term, "pos");
        total = add(total, term);
      }
    }
  }
  out.total_tensor = total;
  out.total = total.item();
  detail::check_component(out.total, "total");
  return out;
}

}  // namespace metadd::losses
