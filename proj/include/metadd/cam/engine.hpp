#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "metadd/zoo/model.hpp"

namespace metadd::cam {

using zoo::ArchFamily;
using zoo::AuxiliaryPool;
using zoo::ForwardTrace;
using zoo::Network;

// Activation maps are taken without rectification: negative evidence is kept,
// so raw maps are signed and unbounded. Normalization to [0,1] happens only
// in resize_normalize.

/// Signed activation map(s). `values` is [B,I,J] for a batch (slice for one
/// sample).
struct RawCam {
  Tensor values;
  std::string source_arch;
};

/// Per-sample stack of M normalized maps at a common size, plus the
/// pre-normalization extrema of each map.
struct CamStack {
  std::vector<Tensor> maps;  // M tensors [H,W], entries in [0,1]
  std::vector<std::pair<double, double>> min_max;
  std::vector<std::string> arch_ids;
  i64 sample_index = 0;

  i64 M() const { return i64(maps.size()); }
};

/// Last conv-stage activations and their gradients w.r.t. a loss, batched.
struct ConvCapture {
  Tensor activations;  // [B,K,I,J]
  Tensor gradients;    // same shape
};

struct AttentionCapture {
  Tensor attn_cls;       // [B,heads,N]
  Tensor patch_tokens;   // [B,N,E]
  Tensor patch_grads;    // [B,N,E]
  Tensor cls_token;      // [B,E]
};

/// Forward-pass handles an architecture-invariant loss evaluation leaves
/// behind, enough to extract activation maps for every auxiliary afterwards.
struct AiContext {
  Tensor total;  // scalar loss (graph)
  std::vector<double> per_aux_ce;
  std::vector<double> per_aux_kd;
  struct AuxTrace {
    ArchFamily family = ArchFamily::ConvPlain;
    std::string arch_id;
    ForwardTrace trace;
  };
  std::vector<AuxTrace> aux;
  i64 batch_size = 0;
};

/// Run a conv-family model and capture last-stage activations together with
/// their gradients w.r.t. `loss(trace)`. Exists for direct instrumentation;
/// the batched pipeline below uses one gradient sweep for all auxiliaries.
template <typename LossFn>
inline ConvCapture capture_conv(const Network& model, const Tensor& batch,
                                LossFn&& loss, bool create_graph = false) {
  check(model.spec().family != ArchFamily::Attention,
        "capture_conv on an attention-family model: wrong family");
  ForwardTrace trace = model.forward(batch);
  Tensor loss_value = loss(trace);
  ConvCapture cap;
  cap.activations = trace.conv_features;
  cap.gradients = grad_of(loss_value, {trace.conv_features}, create_graph)[0];
  return cap;
}

/// alpha_k = spatial mean of dL/dA_k; map = sum_k alpha_k A_k. No relu.
inline RawCam conv_cam(const ConvCapture& cap, const std::string& arch_id = "") {
  check(cap.activations.defined() && cap.gradients.defined(),
        "conv_cam needs activations and gradients");
  check(cap.activations.shape() == cap.gradients.shape(),
        "conv_cam: activation/gradient shape mismatch");
  i64 B = cap.activations.dim(0), K = cap.activations.dim(1);
  i64 I = cap.activations.dim(2), J = cap.activations.dim(3);
  Tensor A2 = reshape(cap.activations, {B, K, I * J});
  Tensor G2 = reshape(cap.gradients, {B, K, I * J});
  Tensor alpha = mean_axis(G2, 2);                   // [B,K,1]
  Tensor c = bmm(permute(alpha, {0, 2, 1}), A2);     // [B,1,I*J]
  return {reshape(c, {B, I, J}), arch_id};
}

/// Attention map: aggregated cls->patch attention weights times the
/// gradient projection of each patch embedding, on the sqrt(N) grid. No relu.
inline RawCam attention_cam(const AttentionCapture& cap,
                            const std::string& arch_id = "") {
  check(cap.attn_cls.defined() && cap.patch_tokens.defined() &&
            cap.patch_grads.defined(),
        "attention_cam needs attention rows, patch outputs and their gradients");
  i64 B = cap.attn_cls.dim(0), N = cap.attn_cls.dim(2);
  i64 side = i64(std::llround(std::sqrt(double(N))));
  check(side * side == N, "attention_cam: patch count is not a square");
  Tensor w_agg = reshape(sum_axis(cap.attn_cls, 1), {B, N});
  Tensor s = reshape(sum_axis(mul(cap.patch_tokens, cap.patch_grads), 2), {B, N});
  Tensor c = mul(w_agg, s);
  return {reshape(c, {B, side, side}), arch_id};
}

/// Bilinear-resize a signed map to the target size, then min-max normalize
/// to [0,1]. Constant maps (max == min) normalize to all zeros.
/// Returns the normalized [H,W] map; extrema returned through out-params.
inline Tensor resize_normalize(const Tensor& map2d, i64 H_ref, i64 W_ref,
                               double* out_min = nullptr,
                               double* out_max = nullptr) {
  check(map2d.ndim() == 2, "resize_normalize expects a [I,J] map");
  assert_finite(map2d, "activation map");
  Tensor resized = reshape(
      bilinear_resize(reshape(map2d, {1, 1, map2d.dim(0), map2d.dim(1)}),
                      H_ref, W_ref),
      {H_ref, W_ref});
  Tensor lo = min_all(resized);
  Tensor hi = max_all(resized);
  double lo_v = lo.item(), hi_v = hi.item();
  if (out_min) *out_min = lo_v;
  if (out_max) *out_max = hi_v;
  if (hi_v == lo_v) return Tensor::zeros({H_ref, W_ref});
  return div(sub(resized, lo), sub(hi, lo));
}

/// Signed sum of all raw map entries (per sample if batched).
inline Tensor pos_score(const Tensor& map) {
  if (map.ndim() == 2) return sum_all(map);
  check(map.ndim() == 3, "pos_score expects [I,J] or [B,I,J]");
  i64 B = map.dim(0);
  return reshape(sum_axis(reshape(map, {B, map.dim(1) * map.dim(2)}), 1), {B});
}

/// Batched result of one extraction pass over the whole pool.
struct PoolCams {
  std::vector<RawCam> raw;                       // per aux, [B,I,J]
  std::vector<std::vector<Tensor>> normalized;   // [aux][sample], [H,W]
  std::vector<std::vector<std::pair<double, double>>> extrema;
  i64 H_ref = 0, W_ref = 0, batch = 0;

  CamStack stack_for_sample(i64 b) const {
    CamStack st;
    st.sample_index = b;
    for (std::size_t m = 0; m < normalized.size(); ++m) {
      st.maps.push_back(normalized[m][std::size_t(b)]);
      st.min_max.push_back(extrema[m][std::size_t(b)]);
      st.arch_ids.push_back(raw[m].source_arch);
    }
    return st;
  }
};

/// Extract raw and normalized maps for every auxiliary from one gradient
/// sweep of the architecture-invariant loss. With `create_graph` everything
/// stays differentiable w.r.t. the input pixels, through both the
/// activations and the loss gradients; otherwise the maps are plain values.
inline PoolCams compute_pool_cams(const AiContext& ctx, i64 H_ref, i64 W_ref,
                                  bool create_graph = false) {
  check(!ctx.aux.empty(), "cam extraction: empty auxiliary pool");
  std::vector<Tensor> wanted;
  for (const auto& aux : ctx.aux) {
    if (aux.family == ArchFamily::Attention)
      wanted.push_back(aux.trace.patch_tokens);
    else
      wanted.push_back(aux.trace.conv_features);
  }
  std::vector<Tensor> grads = grad_of(ctx.total, wanted, create_graph);
  GradModeGuard guard(create_graph);
  PoolCams out;
  out.H_ref = H_ref;
  out.W_ref = W_ref;
  out.batch = ctx.batch_size;
  for (std::size_t m = 0; m < ctx.aux.size(); ++m) {
    const auto& aux = ctx.aux[m];
    if (aux.family == ArchFamily::Attention) {
      AttentionCapture cap;
      cap.attn_cls = aux.trace.attn_cls;
      cap.patch_tokens = aux.trace.patch_tokens;
      cap.patch_grads = grads[m];
      cap.cls_token = aux.trace.cls_token;
      out.raw.push_back(attention_cam(cap, aux.arch_id));
    } else {
      ConvCapture cap;
      cap.activations = aux.trace.conv_features;
      cap.gradients = grads[m];
      out.raw.push_back(conv_cam(cap, aux.arch_id));
    }
  }
  for (std::size_t m = 0; m < out.raw.size(); ++m) {
    const Tensor& batch_maps = out.raw[m].values;
    std::vector<Tensor> per_sample;
    std::vector<std::pair<double, double>> mm;
    for (i64 b = 0; b < ctx.batch_size; ++b) {
      Tensor one = reshape(slice(batch_maps, 0, b, 1),
                           {batch_maps.dim(1), batch_maps.dim(2)});
      double lo = 0, hi = 0;
      per_sample.push_back(resize_normalize(one, H_ref, W_ref, &lo, &hi));
      mm.emplace_back(lo, hi);
    }
    out.normalized.push_back(std::move(per_sample));
    out.extrema.push_back(std::move(mm));
  }
  return out;
}

/// Per-sample normalized stacks for the whole pool at H_ref x W_ref. Map
/// order follows pool order.
inline std::vector<CamStack> cam_stack(const AiContext& ctx, i64 H_ref,
                                       i64 W_ref, bool create_graph = false) {
  PoolCams cams = compute_pool_cams(ctx, H_ref, W_ref, create_graph);
  std::vector<CamStack> stacks;
  stacks.reserve(std::size_t(ctx.batch_size));
  for (i64 b = 0; b < ctx.batch_size; ++b)
    stacks.push_back(cams.stack_for_sample(b));
  return stacks;
}

}  // namespace metadd::cam
