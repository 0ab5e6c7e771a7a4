#pragma once

#include <cmath>
#include <vector>

#include "metadd/core/ops.hpp"

namespace metadd::nn {

/// conv2d: x [B,C,H,W], w [K,C,kh,kw], optional bias [K].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     i64 stride = 1, i64 pad = 0) {
  i64 B = x.dim(0), H = x.dim(2), W = x.dim(3);
  i64 K = w.dim(0), C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check(x.dim(1) == C, "conv2d channel mismatch");
  i64 OH = (H + 2 * pad - kh) / stride + 1;
  i64 OW = (W + 2 * pad - kw) / stride + 1;
  Tensor cols = unfold(x, kh, kw, stride, pad);        // [B, C*kh*kw, L]
  Tensor w2 = reshape(w, {1, K, C * kh * kw});
  Tensor y = bmm(w2, cols);                            // [B, K, L]
  if (bias.defined()) y = add(y, reshape(bias, {1, K, 1}));
  return reshape(y, {B, K, OH, OW});
}

/// Depthwise conv2d: x [B,C,H,W], w [C,kh,kw], optional bias [C].
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& w,
                               const Tensor& bias, i64 stride = 1, i64 pad = 0) {
  i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  i64 kh = w.dim(1), kw = w.dim(2);
  check(w.dim(0) == C, "depthwise_conv2d channel mismatch");
  i64 OH = (H + 2 * pad - kh) / stride + 1;
  i64 OW = (W + 2 * pad - kw) / stride + 1;
  Tensor cols = unfold(x, kh, kw, stride, pad);        // [B, C*kh*kw, L]
  Tensor c4 = reshape(cols, {B, C, kh * kw, OH * OW});
  Tensor w4 = reshape(w, {1, C, kh * kw, 1});
  Tensor y = sum_axis(mul(c4, w4), 2);                 // [B, C, 1, L]
  y = reshape(y, {B, C, OH, OW});
  if (bias.defined()) y = add(y, reshape(bias, {1, C, 1, 1}));
  return y;
}

inline Tensor avg_pool2x2(const Tensor& x) {
  i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % 2 == 0 && W % 2 == 0, "avg_pool2x2 expects even spatial dims");
  Tensor cols = unfold(x, 2, 2, 2, 0);                 // [B, C*4, L]
  Tensor y = sum_axis(reshape(cols, {B, C, 4, (H / 2) * (W / 2)}), 2);
  return reshape(mul_scalar(y, 0.25), {B, C, H / 2, W / 2});
}

inline Tensor global_avg_pool(const Tensor& x) {
  i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y = sum_axis(reshape(x, {B, C, H * W}), 2);
  return reshape(mul_scalar(y, 1.0 / double(H * W)), {B, C});
}

/// linear: x [..., in] (2D or 3D), w [out,in], optional bias [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  i64 in = w.dim(1), out_f = w.dim(0);
  Tensor x2 = x;
  Shape orig = x.shape();
  check(orig.back() == in, "linear input feature mismatch");
  i64 rows = x.numel() / in;
  x2 = reshape(x, {rows, in});
  Tensor y = matmul(x2, transpose2(w));
  if (bias.defined()) y = add(y, reshape(bias, {1, out_f}));
  Shape os = orig;
  os.back() = out_f;
  return reshape(y, os);
}

/// Normalize over trailing `norm_len` elements of each row of x viewed as
/// [groups, norm_len]; gamma/beta broadcast per the caller's reshape.
inline Tensor normalize_rows(const Tensor& x, i64 groups, i64 norm_len,
                             double eps) {
  Tensor x2 = reshape(x, {groups, norm_len});
  Tensor mu = mean_axis(x2, 1);                        // [groups,1]
  Tensor xc = sub(x2, mu);
  Tensor var = mean_axis(mul(xc, xc), 1);
  Tensor inv = reciprocal(sqrt(add_scalar(var, eps)));
  return mul(xc, inv);                                 // [groups, norm_len]
}

/// Instance norm with affine params: x [B,C,H,W], gamma/beta [C].
inline Tensor instance_norm(const Tensor& x, const Tensor& gamma,
                            const Tensor& beta, double eps = 1e-5) {
  i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y = normalize_rows(x, B * C, H * W, eps);
  y = reshape(y, {B, C, H * W});
  y = add(mul(y, reshape(gamma, {1, C, 1})), reshape(beta, {1, C, 1}));
  return reshape(y, {B, C, H, W});
}

/// Layer norm over the last axis: x [..., E], gamma/beta [E].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  i64 E = x.shape().back();
  i64 rows = x.numel() / E;
  Tensor y = normalize_rows(x, rows, E, eps);
  y = add(mul(y, reshape(gamma, {1, E})), reshape(beta, {1, E}));
  return reshape(y, x.shape());
}

inline Tensor gelu(const Tensor& x) {
  // tanh approximation
  Tensor inner = mul_scalar(add(x, mul_scalar(mul(x, mul(x, x)), 0.044715)),
                            0.7978845608028654);
  return mul_scalar(mul(x, add_scalar(tanh(inner), 1.0)), 0.5);
}

/// Softmax over the last axis. The row max is subtracted as a constant
/// shift, which leaves both the value and the derivative unchanged.
inline Tensor softmax_lastdim(const Tensor& x) {
  i64 C = x.shape().back();
  i64 R = x.numel() / C;
  Tensor x2 = reshape(x, {R, C});
  Tensor shift = Tensor::leaf({R, 1});
  {
    const double* p = x2.data();
    double* s = shift.data();
    for (i64 r = 0; r < R; ++r) {
      double m = p[r * C];
      for (i64 c = 1; c < C; ++c) m = std::max(m, p[r * C + c]);
      s[r] = m;
    }
  }
  Tensor z = sub(x2, shift);
  Tensor e = exp(z);
  Tensor denom = sum_axis(e, 1);
  return reshape(div(e, denom), x.shape());
}

inline Tensor log_softmax_lastdim(const Tensor& x) {
  i64 C = x.shape().back();
  i64 R = x.numel() / C;
  Tensor x2 = reshape(x, {R, C});
  Tensor shift = Tensor::leaf({R, 1});
  {
    const double* p = x2.data();
    double* s = shift.data();
    for (i64 r = 0; r < R; ++r) {
      double m = p[r * C];
      for (i64 c = 1; c < C; ++c) m = std::max(m, p[r * C + c]);
      s[r] = m;
    }
  }
  Tensor z = sub(x2, shift);
  Tensor lse = log(sum_axis(exp(z), 1));
  return reshape(sub(z, lse), x.shape());
}

/// Mean cross-entropy of logits [B,C] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<i64>& labels) {
  check(logits.ndim() == 2, "cross_entropy expects [B,C] logits");
  i64 B = logits.dim(0);
  check(i64(labels.size()) == B, "one label per row required");
  Tensor lsm = log_softmax_lastdim(logits);
  Tensor picked = gather_rows(reshape(lsm, {B, logits.dim(1)}), labels);
  return mul_scalar(sum_all(picked), -1.0 / double(B));
}

constexpr double kProbEps = 1e-12;

/// max(p, eps), exact, via the relu identity.
inline Tensor clamp_min_eps(const Tensor& p, double eps = kProbEps) {
  return add_scalar(relu(add_scalar(p, -eps)), eps);
}

/// Batch-mean KL(p || q) for row-wise probability vectors [B,C].
/// Entries are clamped at eps inside the logs only.
inline Tensor kl_div_rows(const Tensor& p, const Tensor& q) {
  check(p.shape() == q.shape() && p.ndim() == 2, "kl_div_rows expects matching [B,C]");
  i64 B = p.dim(0);
  Tensor lp = log(clamp_min_eps(p));
  Tensor lq = log(clamp_min_eps(q));
  Tensor terms = mul(p, sub(lp, lq));
  return mul_scalar(sum_all(terms), 1.0 / double(B));
}

}  // namespace metadd::nn
