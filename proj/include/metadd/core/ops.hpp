#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "metadd/core/tensor.hpp"

// Differentiable primitives. Every vjp below is written in terms of these
// same primitives, so gradients are themselves graph tensors and reverse-mode
// can be applied to them again (needed for pixel gradients of losses that
// consume activation gradients).

namespace metadd {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMapC = Eigen::Map<const EMat>;
using EMap = Eigen::Map<EMat>;

namespace detail {

inline Shape pad_left(const Shape& s, std::size_t nd) {
  Shape r(nd, 1);
  std::copy(s.begin(), s.end(), r.begin() + (nd - s.size()));
  return r;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t nd = std::max(a.size(), b.size());
  Shape pa = pad_left(a, nd), pb = pad_left(b, nd), out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    if (pa[i] == pb[i]) out[i] = pa[i];
    else if (pa[i] == 1) out[i] = pb[i];
    else if (pb[i] == 1) out[i] = pa[i];
    else
      throw ContractError("shapes not broadcastable: " + shape_str(a) + " vs " +
                          shape_str(b));
  }
  return out;
}

inline std::vector<i64> row_major_strides(const Shape& s) {
  std::vector<i64> st(s.size(), 1);
  for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// strides of `shape` padded/broadcast against `out_shape` (0 where broadcast)
inline std::vector<i64> bcast_strides(const Shape& shape, const Shape& out_shape) {
  Shape p = pad_left(shape, out_shape.size());
  auto st = row_major_strides(p);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] == 1 && out_shape[i] != 1) st[i] = 0;
  return st;
}

// Coalesce adjacent dims that are jointly contiguous for all given stride
// sets, to keep recursive loops shallow.
inline void coalesce_dims(Shape& shape, std::vector<std::vector<i64>*> strides) {
  std::size_t d = 0;
  while (d + 1 < shape.size()) {
    bool mergeable = true;
    for (auto* st : strides)
      if ((*st)[d] != (*st)[d + 1] * shape[d + 1]) mergeable = false;
    if (mergeable) {
      shape[d + 1] *= shape[d];
      for (auto* st : strides) st->erase(st->begin() + i64(d));
      shape.erase(shape.begin() + i64(d));
    } else {
      ++d;
    }
  }
}

template <typename F>
inline void bcast_recurse(const double* pa, const double* pb, double* po,
                          const i64* shape, const i64* sa, const i64* sb,
                          const i64* so, int nd, F f) {
  if (nd == 1) {
    i64 n = shape[0], da = sa[0], db = sb[0];
    if (da == 1 && db == 1)
      for (i64 i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    else if (da == 1 && db == 0) {
      double v = *pb;
      for (i64 i = 0; i < n; ++i) po[i] = f(pa[i], v);
    } else if (da == 0 && db == 1) {
      double v = *pa;
      for (i64 i = 0; i < n; ++i) po[i] = f(v, pb[i]);
    } else {
      double v = f(*pa, *pb);
      for (i64 i = 0; i < n; ++i) po[i] = v;
    }
    return;
  }
  for (i64 i = 0; i < shape[0]; ++i)
    bcast_recurse(pa + i * sa[0], pb + i * sb[0], po + i * so[0], shape + 1,
                  sa + 1, sb + 1, so + 1, nd - 1, f);
}

template <typename F>
inline void binary_bcast_eval(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  i64 n = out.numel();
  if (n == 0) return;
  if (a.shape() == b.shape()) {
    for (i64 i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return;
  }
  if (b.numel() == 1) {
    double v = pb[0];
    for (i64 i = 0; i < n; ++i) po[i] = f(pa[i], v);
    return;
  }
  if (a.numel() == 1) {
    double v = pa[0];
    for (i64 i = 0; i < n; ++i) po[i] = f(v, pb[i]);
    return;
  }
  Shape os = out.shape();
  auto sa = bcast_strides(a.shape(), os);
  auto sb = bcast_strides(b.shape(), os);
  auto so = row_major_strides(os);
  coalesce_dims(os, {&sa, &sb, &so});
  bcast_recurse(pa, pb, po, os.data(), sa.data(), sb.data(), so.data(),
                int(os.size()), f);
}

// copy with source strides (broadcast_to, permute)
inline void strided_copy_recurse(const double* ps, double* po, const i64* shape,
                                 const i64* ss, const i64* so, int nd) {
  if (nd == 1) {
    i64 n = shape[0], d = ss[0];
    if (d == 1)
      std::memcpy(po, ps, std::size_t(n) * sizeof(double));
    else if (d == 0)
      std::fill(po, po + n, *ps);
    else
      for (i64 i = 0; i < n; ++i) po[i] = ps[i * d];
    return;
  }
  for (i64 i = 0; i < shape[0]; ++i)
    strided_copy_recurse(ps + i * ss[0], po + i * so[0], shape + 1, ss + 1,
                         so + 1, nd - 1);
}

// accumulate contiguous source into strided destination (sum_to_shape)
inline void strided_accum_recurse(const double* ps, double* po, const i64* shape,
                                  const i64* ss, const i64* sd, int nd) {
  if (nd == 1) {
    i64 n = shape[0], d = sd[0];
    if (d == 1)
      for (i64 i = 0; i < n; ++i) po[i] += ps[i];
    else if (d == 0) {
      double acc = 0;
      for (i64 i = 0; i < n; ++i) acc += ps[i];
      *po += acc;
    } else
      for (i64 i = 0; i < n; ++i) po[i * d] += ps[i];
    return;
  }
  for (i64 i = 0; i < shape[0]; ++i)
    strided_accum_recurse(ps + i * ss[0], po + i * sd[0], shape + 1, ss + 1,
                          sd + 1, nd - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// forward declarations used inside vjps
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor sum_to_shape(const Tensor& x, const Shape& target);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor sum_axis(const Tensor& x, int axis);
Tensor slice(const Tensor& x, int axis, i64 start, i64 len);
Tensor embed_slice(const Tensor& x, int axis, i64 start, i64 full);
Tensor mul_scalar(const Tensor& x, double c);
Tensor unfold(const Tensor& x, i64 kh, i64 kw, i64 stride, i64 pad);
Tensor fold(const Tensor& cols, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad);
Tensor bilinear_resize(const Tensor& x, i64 H2, i64 W2);
Tensor bilinear_resize_adjoint(const Tensor& g, i64 H1, i64 W1);
Tensor take_at(const Tensor& x, i64 idx);
Tensor scatter_at(const Tensor& g, i64 idx, const Shape& shape);
Tensor gather_rows(const Tensor& x, const std::vector<i64>& idx);
Tensor scatter_rows(const Tensor& v, const std::vector<i64>& idx, i64 cols);

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  Shape os = detail::broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::result(
      os, {a, b},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        const auto& ps = out.node()->parents;
        std::vector<Tensor> r(2);
        if (ps[0].requires_grad()) r[0] = sum_to_shape(g, ps[0].shape());
        if (ps[1].requires_grad()) r[1] = sum_to_shape(g, ps[1].shape());
        return r;
      },
      "add");
  detail::binary_bcast_eval(a, b, out, [](double x, double y) { return x + y; });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Shape os = detail::broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::result(
      os, {a, b},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        const auto& ps = out.node()->parents;
        std::vector<Tensor> r(2);
        if (ps[0].requires_grad()) r[0] = sum_to_shape(mul(g, ps[1]), ps[0].shape());
        if (ps[1].requires_grad()) r[1] = sum_to_shape(mul(g, ps[0]), ps[1].shape());
        return r;
      },
      "mul");
  detail::binary_bcast_eval(a, b, out, [](double x, double y) { return x * y; });
  return out;
}

inline Tensor neg(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {neg(g)};
      },
      "neg");
  const double* p = x.data();
  double* o = out.data();
  for (i64 i = 0; i < x.numel(); ++i) o[i] = -p[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor reciprocal(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {neg(mul(g, mul(out, out)))};
      },
      "reciprocal");
  const double* p = x.data();
  double* o = out.data();
  for (i64 i = 0; i < x.numel(); ++i) o[i] = 1.0 / p[i];
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

inline Tensor add_scalar(const Tensor& x, double c) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor&) -> std::vector<Tensor> { return {g}; },
      "add_scalar");
  const double* p = x.data();
  double* o = out.data();
  for (i64 i = 0; i < x.numel(); ++i) o[i] = p[i] + c;
  return out;
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [c](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {mul_scalar(g, c)};
      },
      "mul_scalar");
  const double* p = x.data();
  double* o = out.data();
  for (i64 i = 0; i < x.numel(); ++i) o[i] = p[i] * c;
  return out;
}

inline Tensor exp(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {mul(g, out)};
      },
      "exp");
  Eigen::Map<Eigen::ArrayXd>(out.data(), out.numel()) =
      Eigen::Map<const Eigen::ArrayXd>(x.data(), x.numel()).exp();
  return out;
}

inline Tensor log(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {mul(g, reciprocal(out.node()->parents[0]))};
      },
      "log");
  Eigen::Map<Eigen::ArrayXd>(out.data(), out.numel()) =
      Eigen::Map<const Eigen::ArrayXd>(x.data(), x.numel()).log();
  return out;
}

inline Tensor sqrt(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {mul_scalar(mul(g, reciprocal(out)), 0.5)};
      },
      "sqrt");
  Eigen::Map<Eigen::ArrayXd>(out.data(), out.numel()) =
      Eigen::Map<const Eigen::ArrayXd>(x.data(), x.numel()).sqrt();
  return out;
}

inline Tensor tanh(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {mul(g, add_scalar(neg(mul(out, out)), 1.0))};
      },
      "tanh");
  // 1 - 2/(e^{2x}+1): the exp path is vectorized for doubles, tanh is not
  Eigen::Map<Eigen::ArrayXd> o(out.data(), out.numel());
  o = 1.0 - 2.0 / ((2.0 * Eigen::Map<const Eigen::ArrayXd>(x.data(), x.numel())).exp() + 1.0);
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = Tensor::result(
      x.shape(), {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        const Tensor& xin = out.node()->parents[0];
        Tensor mask = Tensor::leaf(xin.shape());
        const double* p = xin.data();
        double* m = mask.data();
        for (i64 i = 0; i < xin.numel(); ++i) m[i] = p[i] > 0.0 ? 1.0 : 0.0;
        return {mul(g, mask)};
      },
      "relu");
  const double* p = x.data();
  double* o = out.data();
  for (i64 i = 0; i < x.numel(); ++i) o[i] = p[i] > 0.0 ? p[i] : 0.0;
  return out;
}

inline Tensor square(const Tensor& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  check(numel_of(shape) == x.numel(),
        "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->storage = x.node()->storage;  // view
  n->op = "reshape";
  if (GradMode::enabled() && x.requires_grad()) {
    n->requires_grad = true;
    n->parents = {x};
    n->vjp = [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
      return {reshape(g, out.node()->parents[0].shape())};
    };
  }
  return Tensor(std::move(n));
}

inline Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  check(int(dims.size()) == x.ndim(), "permute rank mismatch");
  Shape os(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) os[i] = x.dim(dims[i]);
  std::vector<int> inv(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) inv[std::size_t(dims[i])] = int(i);
  Tensor out = Tensor::result(
      os, {x},
      [inv](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {permute(g, inv)};
      },
      "permute");
  auto xstr = detail::row_major_strides(x.shape());
  std::vector<i64> src_stride(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i)
    src_stride[i] = xstr[std::size_t(dims[i])];
  Shape oshape = os;
  auto so = detail::row_major_strides(oshape);
  detail::coalesce_dims(oshape, {&src_stride, &so});
  detail::strided_copy_recurse(x.data(), out.data(), oshape.data(),
                               src_stride.data(), so.data(), int(oshape.size()));
  return out;
}

inline Tensor transpose2(const Tensor& x) {
  check(x.ndim() == 2, "transpose2 expects a matrix");
  return permute(x, {1, 0});
}

inline Tensor broadcast_to(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  Tensor out = Tensor::result(
      target, {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {sum_to_shape(g, out.node()->parents[0].shape())};
      },
      "broadcast_to");
  Shape os = target;
  auto st = detail::bcast_strides(x.shape(), os);
  auto so = detail::row_major_strides(os);
  detail::coalesce_dims(os, {&st, &so});
  detail::strided_copy_recurse(x.data(), out.data(), os.data(), st.data(),
                               so.data(), int(os.size()));
  return out;
}

inline Tensor sum_to_shape(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  check(detail::broadcast_shape(x.shape(), target) == x.shape(),
        "sum_to_shape: " + shape_str(target) + " does not broadcast to " +
            shape_str(x.shape()));
  Tensor out = Tensor::result(
      target, {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {broadcast_to(g, out.node()->parents[0].shape())};
      },
      "sum_to_shape");
  Shape xs = x.shape();
  auto sd = detail::bcast_strides(target, xs);
  auto ss = detail::row_major_strides(xs);
  detail::coalesce_dims(xs, {&sd, &ss});
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  detail::strided_accum_recurse(x.data(), o, xs.data(), ss.data(), sd.data(),
                                int(xs.size()));
  return out;
}

inline Tensor slice(const Tensor& x, int axis, i64 start, i64 len) {
  check(axis >= 0 && axis < x.ndim(), "slice axis out of range");
  check(start >= 0 && len >= 0 && start + len <= x.dim(axis),
        "slice bounds exceed dim " + std::to_string(x.dim(axis)));
  Shape os = x.shape();
  os[std::size_t(axis)] = len;
  i64 full = x.dim(axis);
  Tensor out = Tensor::result(
      os, {x},
      [axis, start, full](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {embed_slice(g, axis, start, full)};
      },
      "slice");
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  const double* p = x.data();
  double* o = out.data();
  for (i64 a = 0; a < outer; ++a)
    std::memcpy(o + a * len * inner, p + (a * full + start) * inner,
                std::size_t(len * inner) * sizeof(double));
  return out;
}

inline Tensor embed_slice(const Tensor& x, int axis, i64 start, i64 full) {
  Shape os = x.shape();
  i64 len = os[std::size_t(axis)];
  os[std::size_t(axis)] = full;
  Tensor out = Tensor::result(
      os, {x},
      [axis, start, len](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {slice(g, axis, start, len)};
      },
      "embed_slice");
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  const double* p = x.data();
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  for (i64 a = 0; a < outer; ++a)
    std::memcpy(o + (a * full + start) * inner, p + a * len * inner,
                std::size_t(len * inner) * sizeof(double));
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat of zero tensors");
  Shape os = parts[0].shape();
  i64 total = 0;
  for (const auto& p : parts) {
    check(p.ndim() == int(os.size()), "concat rank mismatch");
    total += p.dim(axis);
  }
  os[std::size_t(axis)] = total;
  std::vector<i64> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  Tensor out = Tensor::result(
      os, parts,
      [axis, lens](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        std::vector<Tensor> r;
        i64 off = 0;
        for (i64 len : lens) {
          r.push_back(slice(g, axis, off, len));
          off += len;
        }
        return r;
      },
      "concat");
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[std::size_t(d)];
  for (int d = axis + 1; d < int(os.size()); ++d) inner *= os[std::size_t(d)];
  double* o = out.data();
  i64 off = 0;
  for (const auto& p : parts) {
    i64 len = p.dim(axis);
    const double* src = p.data();
    for (i64 a = 0; a < outer; ++a)
      std::memcpy(o + (a * total + off) * inner, src + a * len * inner,
                  std::size_t(len * inner) * sizeof(double));
    off += len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::result(
      {1}, {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {broadcast_to(g, out.node()->parents[0].shape())};
      },
      "sum_all");
  const double* p = x.data();
  double s = 0.0;
  for (i64 i = 0; i < x.numel(); ++i) s += p[i];
  out.data()[0] = s;
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  return mul_scalar(sum_all(x), 1.0 / double(x.numel()));
}

/// Sum over one axis, keeping it as size 1.
inline Tensor sum_axis(const Tensor& x, int axis) {
  check(axis >= 0 && axis < x.ndim(), "sum_axis axis out of range");
  Shape os = x.shape();
  os[std::size_t(axis)] = 1;
  Tensor out = Tensor::result(
      os, {x},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        return {broadcast_to(g, out.node()->parents[0].shape())};
      },
      "sum_axis");
  i64 outer = 1, inner = 1, n = x.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  const double* p = x.data();
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  for (i64 a = 0; a < outer; ++a)
    for (i64 k = 0; k < n; ++k) {
      const double* row = p + (a * n + k) * inner;
      double* dst = o + a * inner;
      for (i64 i = 0; i < inner; ++i) dst[i] += row[i];
    }
  return out;
}

inline Tensor mean_axis(const Tensor& x, int axis) {
  return mul_scalar(sum_axis(x, axis), 1.0 / double(x.dim(axis)));
}

inline Tensor take_at(const Tensor& x, i64 idx) {
  Shape xs = x.shape();
  Tensor out = Tensor::result(
      {1}, {x},
      [idx, xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter_at(g, idx, xs)};
      },
      "take_at");
  out.data()[0] = x.data()[idx];
  return out;
}

inline Tensor scatter_at(const Tensor& g, i64 idx, const Shape& shape) {
  Tensor out = Tensor::result(
      shape, {g},
      [idx](const Tensor& gg, const Tensor&) -> std::vector<Tensor> {
        return {take_at(gg, idx)};
      },
      "scatter_at");
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  o[idx] = g.data()[0];
  return out;
}

/// Max over all entries; the subgradient routes to the first arg max.
inline Tensor max_all(const Tensor& x) {
  const double* p = x.data();
  i64 best = 0;
  for (i64 i = 1; i < x.numel(); ++i)
    if (p[i] > p[best]) best = i;
  Shape xs = x.shape();
  Tensor out = Tensor::result(
      {1}, {x},
      [best, xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter_at(g, best, xs)};
      },
      "max_all");
  out.data()[0] = p[best];
  return out;
}

inline Tensor min_all(const Tensor& x) {
  const double* p = x.data();
  i64 best = 0;
  for (i64 i = 1; i < x.numel(); ++i)
    if (p[i] < p[best]) best = i;
  Shape xs = x.shape();
  Tensor out = Tensor::result(
      {1}, {x},
      [best, xs](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter_at(g, best, xs)};
      },
      "min_all");
  out.data()[0] = p[best];
  return out;
}

// ---------------------------------------------------------------------------
// indexed access

inline Tensor gather_rows(const Tensor& x, const std::vector<i64>& idx) {
  check(x.ndim() == 2, "gather_rows expects [rows, cols]");
  i64 rows = x.dim(0), cols = x.dim(1);
  check(i64(idx.size()) == rows, "gather_rows: one index per row expected");
  Tensor out = Tensor::result(
      {rows}, {x},
      [idx, cols](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {scatter_rows(g, idx, cols)};
      },
      "gather_rows");
  const double* p = x.data();
  double* o = out.data();
  for (i64 r = 0; r < rows; ++r) {
    check(idx[std::size_t(r)] >= 0 && idx[std::size_t(r)] < cols,
          "gather_rows index out of range");
    o[r] = p[r * cols + idx[std::size_t(r)]];
  }
  return out;
}

inline Tensor scatter_rows(const Tensor& v, const std::vector<i64>& idx, i64 cols) {
  check(v.ndim() == 1, "scatter_rows expects a vector");
  i64 rows = v.dim(0);
  Tensor out = Tensor::result(
      {rows, cols}, {v},
      [idx](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {gather_rows(g, idx)};
      },
      "scatter_rows");
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  const double* p = v.data();
  for (i64 r = 0; r < rows; ++r) o[r * cols + idx[std::size_t(r)]] = p[r];
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
        "matmul shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  i64 M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor out = Tensor::result(
      {M, N}, {a, b},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        const auto& ps = out.node()->parents;
        std::vector<Tensor> r(2);
        if (ps[0].requires_grad()) r[0] = matmul(g, transpose2(ps[1]));
        if (ps[1].requires_grad()) r[1] = matmul(transpose2(ps[0]), g);
        return r;
      },
      "matmul");
  EMapC A(a.data(), M, K), B(b.data(), K, N);
  EMap C(out.data(), M, N);
  C.noalias() = A * B;
  return out;
}

/// Batched matmul [P,M,K] x [P,K,N] -> [P,M,N]; either batch may be 1
/// (broadcast).
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 3 && b.ndim() == 3 && a.dim(2) == b.dim(1),
        "bmm shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  i64 Pa = a.dim(0), Pb = b.dim(0);
  check(Pa == Pb || Pa == 1 || Pb == 1, "bmm batch mismatch");
  i64 P = std::max(Pa, Pb);
  i64 M = a.dim(1), K = a.dim(2), N = b.dim(2);
  Tensor out = Tensor::result(
      {P, M, N}, {a, b},
      [](const Tensor& g, const Tensor& out) -> std::vector<Tensor> {
        const auto& ps = out.node()->parents;
        std::vector<Tensor> r(2);
        if (ps[0].requires_grad()) {
          Tensor ga = bmm(g, permute(ps[1], {0, 2, 1}));
          if (ps[0].dim(0) == 1 && ga.dim(0) != 1) ga = sum_axis(ga, 0);
          r[0] = ga;
        }
        if (ps[1].requires_grad()) {
          Tensor gb = bmm(permute(ps[0], {0, 2, 1}), g);
          if (ps[1].dim(0) == 1 && gb.dim(0) != 1) gb = sum_axis(gb, 0);
          r[1] = gb;
        }
        return r;
      },
      "bmm");
  for (i64 p = 0; p < P; ++p) {
    EMapC A(a.data() + (Pa == 1 ? 0 : p) * M * K, M, K);
    EMapC B(b.data() + (Pb == 1 ? 0 : p) * K * N, K, N);
    EMap C(out.data() + p * M * N, M, N);
    C.noalias() = A * B;
  }
  return out;
}

// ---------------------------------------------------------------------------
// image ops

/// im2col: [B,C,H,W] -> [B, C*kh*kw, OH*OW], zero padding.
inline Tensor unfold(const Tensor& x, i64 kh, i64 kw, i64 stride, i64 pad) {
  check(x.ndim() == 4, "unfold expects [B,C,H,W]");
  i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  i64 OH = (H + 2 * pad - kh) / stride + 1;
  i64 OW = (W + 2 * pad - kw) / stride + 1;
  check(OH > 0 && OW > 0, "unfold: kernel larger than padded input");
  Tensor out = Tensor::result(
      {B, C * kh * kw, OH * OW}, {x},
      [C, H, W, kh, kw, stride, pad](const Tensor& g,
                                     const Tensor&) -> std::vector<Tensor> {
        return {fold(g, C, H, W, kh, kw, stride, pad)};
      },
      "unfold");
  const double* p = x.data();
  double* o = out.data();
  auto ceil_div = [](i64 a, i64 b) { return a >= 0 ? (a + b - 1) / b : a / b; };
  for (i64 b = 0; b < B; ++b)
    for (i64 c = 0; c < C; ++c)
      for (i64 ki = 0; ki < kh; ++ki)
        for (i64 kj = 0; kj < kw; ++kj) {
          i64 row = ((c * kh + ki) * kw + kj);
          double* dst = o + (b * C * kh * kw + row) * OH * OW;
          const double* src = p + (b * C + c) * H * W;
          i64 oi0 = std::max<i64>(0, ceil_div(pad - ki, stride));
          i64 oi1 = std::min(OH, pad - ki + H <= 0 ? i64(0)
                                                   : (H - 1 - ki + pad) / stride + 1);
          i64 oj0 = std::max<i64>(0, ceil_div(pad - kj, stride));
          i64 oj1 = std::min(OW, pad - kj + W <= 0 ? i64(0)
                                                   : (W - 1 - kj + pad) / stride + 1);
          if (oi0 > 0) std::fill(dst, dst + oi0 * OW, 0.0);
          for (i64 oi = oi0; oi < oi1; ++oi) {
            double* drow = dst + oi * OW;
            const double* srow = src + (oi * stride + ki - pad) * W;
            if (oj0 > 0) std::fill(drow, drow + oj0, 0.0);
            if (stride == 1) {
              std::memcpy(drow + oj0, srow + oj0 + kj - pad,
                          std::size_t(oj1 - oj0) * sizeof(double));
            } else {
              for (i64 oj = oj0; oj < oj1; ++oj)
                drow[oj] = srow[oj * stride + kj - pad];
            }
            if (oj1 < OW) std::fill(drow + oj1, drow + OW, 0.0);
          }
          if (oi1 < OH) std::fill(dst + std::max(oi0, oi1) * OW, dst + OH * OW, 0.0);
        }
  return out;
}

/// col2im scatter-add, exact adjoint of unfold with the same geometry.
inline Tensor fold(const Tensor& cols, i64 C, i64 H, i64 W, i64 kh, i64 kw,
                   i64 stride, i64 pad) {
  check(cols.ndim() == 3 && cols.dim(1) == C * kh * kw, "fold shape mismatch");
  i64 B = cols.dim(0);
  i64 OH = (H + 2 * pad - kh) / stride + 1;
  i64 OW = (W + 2 * pad - kw) / stride + 1;
  check(cols.dim(2) == OH * OW, "fold column count mismatch");
  Tensor out = Tensor::result(
      {B, C, H, W}, {cols},
      [kh, kw, stride, pad](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {unfold(g, kh, kw, stride, pad)};
      },
      "fold");
  const double* p = cols.data();
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  auto ceil_div = [](i64 a, i64 b) { return a >= 0 ? (a + b - 1) / b : a / b; };
  for (i64 b = 0; b < B; ++b)
    for (i64 c = 0; c < C; ++c)
      for (i64 ki = 0; ki < kh; ++ki)
        for (i64 kj = 0; kj < kw; ++kj) {
          i64 row = ((c * kh + ki) * kw + kj);
          const double* src = p + (b * C * kh * kw + row) * OH * OW;
          double* dst = o + (b * C + c) * H * W;
          i64 oi0 = std::max<i64>(0, ceil_div(pad - ki, stride));
          i64 oi1 = std::min(OH, pad - ki + H <= 0 ? i64(0)
                                                   : (H - 1 - ki + pad) / stride + 1);
          i64 oj0 = std::max<i64>(0, ceil_div(pad - kj, stride));
          i64 oj1 = std::min(OW, pad - kj + W <= 0 ? i64(0)
                                                   : (W - 1 - kj + pad) / stride + 1);
          for (i64 oi = oi0; oi < oi1; ++oi) {
            const double* srow = src + oi * OW;
            double* drow = dst + (oi * stride + ki - pad) * W + kj - pad;
            if (stride == 1) {
              for (i64 oj = oj0; oj < oj1; ++oj) drow[oj] += srow[oj];
            } else {
              for (i64 oj = oj0; oj < oj1; ++oj)
                drow[oj * stride] += srow[oj];
            }
          }
        }
  return out;
}

namespace detail {

struct BilinearTap {
  i64 lo, hi;
  double w_hi;  // weight of hi sample; lo gets 1 - w_hi
};

inline std::vector<BilinearTap> bilinear_taps(i64 src, i64 dst) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(dst));
  for (i64 i = 0; i < dst; ++i) {
    double f = (double(i) + 0.5) * double(src) / double(dst) - 0.5;
    double fl = std::floor(f);
    i64 lo = i64(fl);
    double w = f - fl;
    i64 hi = lo + 1;
    if (lo < 0) lo = 0;
    if (hi > src - 1) hi = src - 1;
    if (lo > src - 1) lo = src - 1;
    taps[std::size_t(i)] = {lo, hi, w};
  }
  return taps;
}

}  // namespace detail

/// Bilinear interpolation, half-pixel centers, clamped borders:
/// [B,C,H,W] -> [B,C,H2,W2].
inline Tensor bilinear_resize(const Tensor& x, i64 H2, i64 W2) {
  check(x.ndim() == 4, "bilinear_resize expects [B,C,H,W]");
  i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H2 > 0 && W2 > 0, "bilinear_resize target must be positive");
  Tensor out = Tensor::result(
      {B, C, H2, W2}, {x},
      [H, W](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
        return {bilinear_resize_adjoint(g, H, W)};
      },
      "bilinear_resize");
  auto ty = detail::bilinear_taps(H, H2);
  auto tx = detail::bilinear_taps(W, W2);
  const double* p = x.data();
  double* o = out.data();
  for (i64 bc = 0; bc < B * C; ++bc) {
    const double* src = p + bc * H * W;
    double* dst = o + bc * H2 * W2;
    for (i64 i = 0; i < H2; ++i) {
      const auto& a = ty[std::size_t(i)];
      for (i64 j = 0; j < W2; ++j) {
        const auto& b = tx[std::size_t(j)];
        double v00 = src[a.lo * W + b.lo], v01 = src[a.lo * W + b.hi];
        double v10 = src[a.hi * W + b.lo], v11 = src[a.hi * W + b.hi];
        dst[i * W2 + j] = (1 - a.w_hi) * ((1 - b.w_hi) * v00 + b.w_hi * v01) +
                          a.w_hi * ((1 - b.w_hi) * v10 + b.w_hi * v11);
      }
    }
  }
  return out;
}

inline Tensor bilinear_resize_adjoint(const Tensor& g, i64 H1, i64 W1) {
  check(g.ndim() == 4, "bilinear_resize_adjoint expects [B,C,H,W]");
  i64 B = g.dim(0), C = g.dim(1), H2 = g.dim(2), W2 = g.dim(3);
  Tensor out = Tensor::result(
      {B, C, H1, W1}, {g},
      [H2, W2](const Tensor& gg, const Tensor&) -> std::vector<Tensor> {
        return {bilinear_resize(gg, H2, W2)};
      },
      "bilinear_resize_adjoint");
  auto ty = detail::bilinear_taps(H1, H2);
  auto tx = detail::bilinear_taps(W1, W2);
  const double* p = g.data();
  double* o = out.data();
  std::fill(o, o + out.numel(), 0.0);
  for (i64 bc = 0; bc < B * C; ++bc) {
    const double* src = p + bc * H2 * W2;
    double* dst = o + bc * H1 * W1;
    for (i64 i = 0; i < H2; ++i) {
      const auto& a = ty[std::size_t(i)];
      for (i64 j = 0; j < W2; ++j) {
        const auto& b = tx[std::size_t(j)];
        double v = src[i * W2 + j];
        dst[a.lo * W1 + b.lo] += (1 - a.w_hi) * (1 - b.w_hi) * v;
        dst[a.lo * W1 + b.hi] += (1 - a.w_hi) * b.w_hi * v;
        dst[a.hi * W1 + b.lo] += a.w_hi * (1 - b.w_hi) * v;
        dst[a.hi * W1 + b.hi] += a.w_hi * b.w_hi * v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// operators

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul_scalar(a, 1.0 / c); }
inline Tensor operator/(double c, const Tensor& a) {
  return mul_scalar(reciprocal(a), c);
}

// ---------------------------------------------------------------------------
// misc helpers

inline bool all_finite(const Tensor& t) {
  const double* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

inline void assert_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t)) throw NumericError(what + " contains non-finite values");
}

}  // namespace metadd
