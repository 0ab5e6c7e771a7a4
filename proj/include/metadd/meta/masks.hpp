#pragma once

#include <string>
#include <vector>

#include "metadd/cam/engine.hpp"
#include "metadd/core/rng.hpp"

namespace metadd::meta {

enum class MaskKind { Thresholded, Meta, Heterogeneous };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::Thresholded: return "thresholded";
    case MaskKind::Meta: return "meta";
    case MaskKind::Heterogeneous: return "heterogeneous";
  }
  return "?";
}

struct BinaryMask {
  i64 height = 0, width = 0;
  std::vector<std::uint8_t> values;  // exactly 0 or 1
  MaskKind kind = MaskKind::Thresholded;
  std::string source;  // arch id(s) the mask came from

  i64 count() const {
    i64 n = 0;
    for (auto v : values) n += v;
    return n;
  }
  double fraction() const {
    return values.empty() ? 0.0 : double(count()) / double(values.size());
  }
  std::uint8_t at(i64 i, i64 j) const {
    return values[std::size_t(i * width + j)];
  }
};

/// High-confidence indicator: 1 where the normalized map is >= 0.5
/// (inclusive at the boundary).
inline BinaryMask threshold_mask(const Tensor& normalized,
                                 const std::string& source = "") {
  check(normalized.ndim() == 2, "threshold_mask expects a [H,W] map");
  BinaryMask m;
  m.height = normalized.dim(0);
  m.width = normalized.dim(1);
  m.kind = MaskKind::Thresholded;
  m.source = source;
  m.values.resize(std::size_t(normalized.numel()));
  const double* p = normalized.data();
  for (i64 i = 0; i < normalized.numel(); ++i) {
    if (p[i] < 0.0 || p[i] > 1.0)
      throw ContractError("threshold_mask input outside [0,1]");
    m.values[std::size_t(i)] = p[i] >= 0.5 ? 1 : 0;
  }
  return m;
}

/// Meta-feature mask: elementwise product of all per-architecture
/// high-confidence masks (their intersection).
inline BinaryMask meta_mask(const cam::CamStack& stack) {
  check(stack.M() > 0, "meta_mask: empty stack");
  BinaryMask mu = threshold_mask(stack.maps[0], "");
  mu.kind = MaskKind::Meta;
  std::string src = stack.arch_ids.empty() ? "" : stack.arch_ids[0];
  for (i64 m = 1; m < stack.M(); ++m) {
    BinaryMask hm = threshold_mask(stack.maps[std::size_t(m)]);
    check(hm.height == mu.height && hm.width == mu.width,
          "meta_mask: stack maps disagree on size");
    for (std::size_t i = 0; i < mu.values.size(); ++i)
      mu.values[i] = std::uint8_t(mu.values[i] * hm.values[i]);
    if (!stack.arch_ids.empty())
      src += "*" + stack.arch_ids[std::size_t(m)];
  }
  mu.source = src;
  return mu;
}

/// Heterogeneous-feature mask of architecture m: its high-confidence region
/// minus the meta region. Disjoint from mu by construction.
inline BinaryMask hetero_mask(const cam::CamStack& stack, i64 m,
                              const BinaryMask& mu) {
  check(m >= 0 && m < stack.M(), "hetero_mask: index out of range");
  BinaryMask h = threshold_mask(
      stack.maps[std::size_t(m)],
      stack.arch_ids.empty() ? "" : stack.arch_ids[std::size_t(m)]);
  check(h.height == mu.height && h.width == mu.width,
        "hetero_mask: size mismatch with meta mask");
  h.kind = MaskKind::Heterogeneous;
  for (std::size_t i = 0; i < h.values.size(); ++i)
    h.values[i] = std::uint8_t(h.values[i] - (h.values[i] & mu.values[i]));
  return h;
}

struct FillPolicy {
  enum class Mode { ChannelMean, Zero, UniformNoise } mode = Mode::ChannelMean;
  std::vector<double> channel_means;  // used by ChannelMean
  std::uint64_t noise_seed = 0;       // used by UniformNoise
};

/// Replace masked pixels of a [C,H,W] image per the fill policy; the rest is
/// untouched. Idempotent for deterministic fills.
inline Tensor erase(const Tensor& image, const BinaryMask& mask,
                    const FillPolicy& fill) {
  check(image.ndim() == 3, "erase expects a [C,H,W] image");
  i64 C = image.dim(0), H = image.dim(1), W = image.dim(2);
  check(H == mask.height && W == mask.width,
        "erase: mask size does not match image");
  Tensor out = image.clone();
  Rng noise(fill.noise_seed);
  double* o = out.data();
  for (i64 c = 0; c < C; ++c) {
    double fill_v = 0.0;
    if (fill.mode == FillPolicy::Mode::ChannelMean) {
      check(i64(fill.channel_means.size()) == C,
            "erase: channel means missing for mean fill");
      fill_v = fill.channel_means[std::size_t(c)];
    }
    for (i64 i = 0; i < H; ++i)
      for (i64 j = 0; j < W; ++j) {
        if (!mask.at(i, j)) continue;
        double v = fill_v;
        if (fill.mode == FillPolicy::Mode::UniformNoise) v = noise.uniform();
        o[(c * H + i) * W + j] = v;
      }
  }
  return out;
}

}  // namespace metadd::meta
