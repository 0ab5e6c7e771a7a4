#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "metadd/core/rng.hpp"
#include "metadd/core/sha256.hpp"
#include "metadd/nn/functional.hpp"
#include "metadd/zoo/spec.hpp"

namespace metadd::zoo {

/// Everything a forward pass exposes beyond logits: the capture points the
/// activation-map machinery needs, and the penultimate embedding used by the
/// distribution-matching engine.
struct ForwardTrace {
  Tensor logits;        // [B, classes]
  Tensor conv_features; // conv families: last-stage maps [B,K,I,J]
  Tensor attn_cls;      // attention: per-head cls->patch rows [B,H,N]
  Tensor patch_tokens;  // attention: last-block patch outputs [B,N,E]
  Tensor cls_token;     // attention: last-block cls output [B,E]
  Tensor embedding;     // penultimate features [B,F]
};

class Network {
 public:
  explicit Network(ArchitectureSpec spec) : spec_(std::move(spec)) {}
  virtual ~Network() = default;

  const ArchitectureSpec& spec() const { return spec_; }
  bool frozen() const { return frozen_; }

  /// Forward a batch of [B,3,R,R] pixels in [0,1]. Inputs at a different
  /// resolution are bilinearly resized to the network's native resolution.
  ForwardTrace forward(const Tensor& images) const {
    check(images.ndim() == 4 && images.dim(1) == 3,
          "expected [B,3,H,W] input, got " + shape_str(images.shape()));
    Tensor x = images;
    if (images.dim(2) != spec_.input_resolution ||
        images.dim(3) != spec_.input_resolution)
      x = bilinear_resize(images, spec_.input_resolution, spec_.input_resolution);
    return run(x);
  }

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }

  void set_trainable(bool trainable) {
    for (auto& [name, p] : params_) p.set_requires_grad(trainable);
    frozen_ = !trainable;
  }

  bool any_param_grad_allocated() const {
    for (const auto& [name, p] : params_)
      if (p.has_grad()) return true;
    return false;
  }

  /// SHA-256 over parameter names and raw values, in registration order.
  std::string parameter_checksum() const {
    Sha256 h;
    for (const auto& [name, p] : params_) {
      h.update(name);
      h.update(p.data(), std::size_t(p.numel()) * sizeof(double));
    }
    return h.hex_digest();
  }

  void copy_parameters_from(const Network& other) {
    check(other.params_.size() == params_.size(), "parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      check(other.params_[i].second.shape() == params_[i].second.shape(),
            "parameter shape mismatch at " + params_[i].first);
      std::copy(other.params_[i].second.data(),
                other.params_[i].second.data() + params_[i].second.numel(),
                params_[i].second.data());
    }
  }

 protected:
  virtual ForwardTrace run(const Tensor& x) const = 0;

  Tensor param(const std::string& name, const Shape& shape) {
    Tensor t = Tensor::leaf(shape, true);
    params_.emplace_back(name, t);
    return t;
  }

  Tensor param_uniform(const std::string& name, const Shape& shape, Rng& rng,
                       double bound) {
    Tensor t = param(name, shape);
    for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-bound, bound);
    return t;
  }

  Tensor param_normal(const std::string& name, const Shape& shape, Rng& rng,
                      double stddev) {
    Tensor t = param(name, shape);
    for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * stddev;
    return t;
  }

  Tensor param_const(const std::string& name, const Shape& shape, double v) {
    Tensor t = param(name, shape);
    for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = v;
    return t;
  }

  ArchitectureSpec spec_;
  std::vector<std::pair<std::string, Tensor>> params_;
  bool frozen_ = false;
};

namespace detail {

inline double he_bound(i64 fan_in) { return std::sqrt(6.0 / double(fan_in)); }

}  // namespace detail

/// Plain ConvNet: depth blocks of [3x3 conv, instance norm, relu, 2x2 avg
/// pool], then a linear head on the flattened maps.
class ConvPlainNet : public Network {
 public:
  ConvPlainNet(const ArchitectureSpec& spec, std::uint64_t seed)
      : Network(spec) {
    Rng rng = Rng::derive(seed, "init/" + spec.id());
    i64 cin = 3;
    for (i64 d = 0; d < spec.depth; ++d) {
      std::string p = "block" + std::to_string(d) + ".";
      w_.push_back(param_uniform(p + "conv.w", {spec.width, cin, 3, 3}, rng,
                                 detail::he_bound(cin * 9)));
      b_.push_back(param_const(p + "conv.b", {spec.width}, 0.0));
      gamma_.push_back(param_const(p + "norm.g", {spec.width}, 1.0));
      beta_.push_back(param_const(p + "norm.b", {spec.width}, 0.0));
      cin = spec.width;
    }
    i64 side = spec.input_resolution >> spec.depth;
    feat_dim_ = spec.width * side * side;
    head_w_ = param_uniform("head.w", {spec.num_classes, feat_dim_}, rng,
                            detail::he_bound(feat_dim_));
    head_b_ = param_const("head.b", {spec.num_classes}, 0.0);
  }

 protected:
  ForwardTrace run(const Tensor& x) const override {
    Tensor h = x;
    for (std::size_t d = 0; d < w_.size(); ++d) {
      h = nn::conv2d(h, w_[d], b_[d], 1, 1);
      h = nn::instance_norm(h, gamma_[d], beta_[d]);
      h = relu(h);
      h = nn::avg_pool2x2(h);
    }
    ForwardTrace t;
    t.conv_features = h;
    t.embedding = reshape(h, {h.dim(0), feat_dim_});
    t.logits = nn::linear(t.embedding, head_w_, head_b_);
    return t;
  }

 private:
  std::vector<Tensor> w_, b_, gamma_, beta_;
  Tensor head_w_, head_b_;
  i64 feat_dim_ = 0;
};

/// Small residual net: stem, then two stages of residual blocks with one
/// 2x downsample between them; global average pooling head. `depth` is the
/// approximate conv-layer count (stem + 2 per block).
class ConvResidualNet : public Network {
 public:
  ConvResidualNet(const ArchitectureSpec& spec, std::uint64_t seed)
      : Network(spec) {
    Rng rng = Rng::derive(seed, "init/" + spec.id());
    i64 w = spec.width;
    stem_w_ = param_uniform("stem.w", {w, 3, 3, 3}, rng, detail::he_bound(27));
    stem_b_ = param_const("stem.b", {w}, 0.0);
    stem_g_ = param_const("stem.norm.g", {w}, 1.0);
    stem_bt_ = param_const("stem.norm.b", {w}, 0.0);
    i64 nblocks = std::max<i64>(2, (spec.depth - 1) / 2);
    i64 half = (nblocks + 1) / 2;
    i64 cin = w;
    for (i64 i = 0; i < nblocks; ++i) {
      Block blk;
      blk.cout = i < half ? w : 2 * w;
      blk.downsample = (i == half);
      std::string p = "res" + std::to_string(i) + ".";
      blk.w1 = param_uniform(p + "conv1.w", {blk.cout, cin, 3, 3}, rng,
                             detail::he_bound(cin * 9));
      blk.g1 = param_const(p + "norm1.g", {blk.cout}, 1.0);
      blk.b1 = param_const(p + "norm1.b", {blk.cout}, 0.0);
      blk.w2 = param_uniform(p + "conv2.w", {blk.cout, blk.cout, 3, 3}, rng,
                             detail::he_bound(blk.cout * 9));
      blk.g2 = param_const(p + "norm2.g", {blk.cout}, 1.0);
      blk.b2 = param_const(p + "norm2.b", {blk.cout}, 0.0);
      if (blk.cout != cin) {
        blk.proj = param_uniform(p + "proj.w", {blk.cout, cin, 1, 1}, rng,
                                 detail::he_bound(cin));
        blk.proj_g = param_const(p + "proj.norm.g", {blk.cout}, 1.0);
        blk.proj_b = param_const(p + "proj.norm.b", {blk.cout}, 0.0);
      }
      blocks_.push_back(blk);
      cin = blk.cout;
    }
    head_w_ = param_uniform("head.w", {spec.num_classes, cin}, rng,
                            detail::he_bound(cin));
    head_b_ = param_const("head.b", {spec.num_classes}, 0.0);
  }

 protected:
  ForwardTrace run(const Tensor& x) const override {
    Tensor h = nn::conv2d(x, stem_w_, stem_b_, 1, 1);
    h = relu(nn::instance_norm(h, stem_g_, stem_bt_));
    h = nn::avg_pool2x2(h);
    for (const auto& blk : blocks_) {
      if (blk.downsample) h = nn::avg_pool2x2(h);
      Tensor skip = h;
      if (blk.proj.defined()) {
        skip = nn::conv2d(h, blk.proj, Tensor(), 1, 0);
        skip = nn::instance_norm(skip, blk.proj_g, blk.proj_b);
      }
      Tensor m = nn::conv2d(h, blk.w1, Tensor(), 1, 1);
      m = relu(nn::instance_norm(m, blk.g1, blk.b1));
      m = nn::conv2d(m, blk.w2, Tensor(), 1, 1);
      m = nn::instance_norm(m, blk.g2, blk.b2);
      h = relu(add(m, skip));
    }
    ForwardTrace t;
    t.conv_features = h;
    t.embedding = nn::global_avg_pool(h);
    t.logits = nn::linear(t.embedding, head_w_, head_b_);
    return t;
  }

 private:
  struct Block {
    i64 cout = 0;
    bool downsample = false;
    Tensor w1, g1, b1, w2, g2, b2, proj, proj_g, proj_b;
  };
  Tensor stem_w_, stem_b_, stem_g_, stem_bt_;
  std::vector<Block> blocks_;
  Tensor head_w_, head_b_;
};

/// Depthwise-separable net: stem conv, then blocks of [3x3 depthwise,
/// norm, relu, 1x1 pointwise, norm, relu]; GAP head. `depth` approximates
/// the conv-layer count (stem + 2 per block).
class ConvMobileNet : public Network {
 public:
  ConvMobileNet(const ArchitectureSpec& spec, std::uint64_t seed)
      : Network(spec) {
    Rng rng = Rng::derive(seed, "init/" + spec.id());
    i64 w = spec.width;
    stem_w_ = param_uniform("stem.w", {w, 3, 3, 3}, rng, detail::he_bound(27));
    stem_b_ = param_const("stem.b", {w}, 0.0);
    stem_g_ = param_const("stem.norm.g", {w}, 1.0);
    stem_bt_ = param_const("stem.norm.b", {w}, 0.0);
    i64 nblocks = std::max<i64>(2, (spec.depth - 2) / 2);
    i64 cin = w;
    for (i64 i = 0; i < nblocks; ++i) {
      Block blk;
      blk.stride = (i == 0 || i == nblocks / 2) ? 2 : 1;
      blk.cout = i >= nblocks / 2 ? 2 * w : w;
      std::string p = "mb" + std::to_string(i) + ".";
      blk.dw = param_uniform(p + "dw.w", {cin, 3, 3}, rng, detail::he_bound(9));
      blk.dw_g = param_const(p + "dw.norm.g", {cin}, 1.0);
      blk.dw_b = param_const(p + "dw.norm.b", {cin}, 0.0);
      blk.pw = param_uniform(p + "pw.w", {blk.cout, cin, 1, 1}, rng,
                             detail::he_bound(cin));
      blk.pw_g = param_const(p + "pw.norm.g", {blk.cout}, 1.0);
      blk.pw_b = param_const(p + "pw.norm.b", {blk.cout}, 0.0);
      blocks_.push_back(blk);
      cin = blk.cout;
    }
    head_w_ = param_uniform("head.w", {spec.num_classes, cin}, rng,
                            detail::he_bound(cin));
    head_b_ = param_const("head.b", {spec.num_classes}, 0.0);
  }

 protected:
  ForwardTrace run(const Tensor& x) const override {
    Tensor h = nn::conv2d(x, stem_w_, stem_b_, 1, 1);
    h = relu(nn::instance_norm(h, stem_g_, stem_bt_));
    for (const auto& blk : blocks_) {
      h = nn::depthwise_conv2d(h, blk.dw, Tensor(), blk.stride, 1);
      h = relu(nn::instance_norm(h, blk.dw_g, blk.dw_b));
      h = nn::conv2d(h, blk.pw, Tensor(), 1, 0);
      h = relu(nn::instance_norm(h, blk.pw_g, blk.pw_b));
    }
    ForwardTrace t;
    t.conv_features = h;
    t.embedding = nn::global_avg_pool(h);
    t.logits = nn::linear(t.embedding, head_w_, head_b_);
    return t;
  }

 private:
  struct Block {
    i64 cout = 0, stride = 1;
    Tensor dw, dw_g, dw_b, pw, pw_g, pw_b;
  };
  Tensor stem_w_, stem_b_, stem_g_, stem_bt_;
  std::vector<Block> blocks_;
  Tensor head_w_, head_b_;
};

/// Compact vision transformer with a class token and learned positional
/// embeddings. The last block's per-head cls->patch attention and patch
/// outputs are exposed for the activation-map machinery.
class AttentionNet : public Network {
 public:
  AttentionNet(const ArchitectureSpec& spec, std::uint64_t seed)
      : Network(spec) {
    Rng rng = Rng::derive(seed, "init/" + spec.id());
    i64 E = spec.width, p = spec.patch_size;
    heads_ = std::max<i64>(2, E / 32);
    n_patches_ = (spec.input_resolution / p) * (spec.input_resolution / p);
    patch_w_ = param_normal("patch.w", {E, 3 * p * p}, rng, 0.02);
    patch_b_ = param_const("patch.b", {E}, 0.0);
    cls_ = param_normal("cls", {1, 1, E}, rng, 0.02);
    pos_ = param_normal("pos", {1, n_patches_ + 1, E}, rng, 0.02);
    i64 hidden = 2 * E;
    for (i64 d = 0; d < spec.depth; ++d) {
      std::string pre = "blk" + std::to_string(d) + ".";
      BlockParams bp;
      bp.ln1_g = param_const(pre + "ln1.g", {E}, 1.0);
      bp.ln1_b = param_const(pre + "ln1.b", {E}, 0.0);
      bp.qkv_w = param_normal(pre + "qkv.w", {3 * E, E}, rng, 0.02);
      bp.qkv_b = param_const(pre + "qkv.b", {3 * E}, 0.0);
      bp.proj_w = param_normal(pre + "proj.w", {E, E}, rng, 0.02);
      bp.proj_b = param_const(pre + "proj.b", {E}, 0.0);
      bp.ln2_g = param_const(pre + "ln2.g", {E}, 1.0);
      bp.ln2_b = param_const(pre + "ln2.b", {E}, 0.0);
      bp.fc1_w = param_normal(pre + "fc1.w", {hidden, E}, rng, 0.02);
      bp.fc1_b = param_const(pre + "fc1.b", {hidden}, 0.0);
      bp.fc2_w = param_normal(pre + "fc2.w", {E, hidden}, rng, 0.02);
      bp.fc2_b = param_const(pre + "fc2.b", {E}, 0.0);
      blocks_.push_back(bp);
    }
    ln_f_g_ = param_const("lnf.g", {E}, 1.0);
    ln_f_b_ = param_const("lnf.b", {E}, 0.0);
    head_w_ = param_normal("head.w", {spec.num_classes, E}, rng, 0.02);
    head_b_ = param_const("head.b", {spec.num_classes}, 0.0);
  }

  i64 heads() const { return heads_; }
  i64 patch_count() const { return n_patches_; }

 protected:
  ForwardTrace run(const Tensor& x) const override {
    i64 B = x.dim(0), E = spec_.width, p = spec_.patch_size;
    i64 N = n_patches_, T = N + 1;
    // patchify: each p x p patch becomes one token
    Tensor cols = unfold(x, p, p, p, 0);             // [B, 3*p*p, N]
    Tensor tokens = permute(cols, {0, 2, 1});        // [B, N, 3*p*p]
    tokens = nn::linear(tokens, patch_w_, patch_b_); // [B, N, E]
    Tensor cls = broadcast_to(cls_, {B, 1, E});
    Tensor h = concat({cls, tokens}, 1);             // [B, T, E]
    h = add(h, pos_);
    Tensor last_attn;                                // [B*H, T, T]
    for (std::size_t d = 0; d < blocks_.size(); ++d) {
      const auto& bp = blocks_[d];
      Tensor hn = nn::layer_norm(h, bp.ln1_g, bp.ln1_b);
      Tensor qkv = nn::linear(hn, bp.qkv_w, bp.qkv_b);  // [B,T,3E]
      Tensor q = split_heads(slice(qkv, 2, 0, E), B, T);
      Tensor k = split_heads(slice(qkv, 2, E, E), B, T);
      Tensor v = split_heads(slice(qkv, 2, 2 * E, E), B, T);
      i64 dh = E / heads_;
      Tensor scores = mul_scalar(bmm(q, permute(k, {0, 2, 1})),
                                 1.0 / std::sqrt(double(dh)));
      Tensor attn = nn::softmax_lastdim(scores);     // [B*H, T, T]
      if (d + 1 == blocks_.size()) last_attn = attn;
      Tensor ctx = bmm(attn, v);                     // [B*H, T, dh]
      ctx = merge_heads(ctx, B, T);
      h = add(h, nn::linear(ctx, bp.proj_w, bp.proj_b));
      Tensor mn = nn::layer_norm(h, bp.ln2_g, bp.ln2_b);
      Tensor m = nn::gelu(nn::linear(mn, bp.fc1_w, bp.fc1_b));
      h = add(h, nn::linear(m, bp.fc2_w, bp.fc2_b));
    }
    ForwardTrace t;
    t.patch_tokens = slice(h, 1, 1, N);              // [B, N, E]
    t.cls_token = reshape(slice(h, 1, 0, 1), {B, E});
    // per-head cls->patch attention rows (cls column dropped)
    Tensor cls_rows = slice(last_attn, 1, 0, 1);     // [B*H, 1, T]
    cls_rows = slice(cls_rows, 2, 1, N);             // [B*H, 1, N]
    t.attn_cls = reshape(cls_rows, {B, heads_, N});
    Tensor hf = nn::layer_norm(h, ln_f_g_, ln_f_b_);
    Tensor cls_f = reshape(slice(hf, 1, 0, 1), {B, E});
    t.embedding = cls_f;
    t.logits = nn::linear(cls_f, head_w_, head_b_);
    return t;
  }

 private:
  Tensor split_heads(const Tensor& x, i64 B, i64 T) const {
    i64 E = spec_.width, dh = E / heads_;
    Tensor r = reshape(x, {B, T, heads_, dh});
    r = permute(r, {0, 2, 1, 3});                    // [B,H,T,dh]
    return reshape(r, {B * heads_, T, dh});
  }

  Tensor merge_heads(const Tensor& x, i64 B, i64 T) const {
    i64 E = spec_.width, dh = E / heads_;
    Tensor r = reshape(x, {B, heads_, T, dh});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {B, T, E});
  }

  struct BlockParams {
    Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  i64 heads_ = 4, n_patches_ = 0;
  Tensor patch_w_, patch_b_, cls_, pos_;
  std::vector<BlockParams> blocks_;
  Tensor ln_f_g_, ln_f_b_, head_w_, head_b_;
};

/// Instantiate a network for the given spec. Deterministic in (spec, seed).
inline std::shared_ptr<Network> build_model(const ArchitectureSpec& spec,
                                            std::uint64_t seed) {
  spec.validate();
  switch (spec.family) {
    case ArchFamily::ConvPlain:
      return std::make_shared<ConvPlainNet>(spec, seed);
    case ArchFamily::ConvResidual:
      return std::make_shared<ConvResidualNet>(spec, seed);
    case ArchFamily::ConvMobile:
      return std::make_shared<ConvMobileNet>(spec, seed);
    case ArchFamily::Attention:
      return std::make_shared<AttentionNet>(spec, seed);
  }
  throw ConfigError("unsupported architecture family");
}

}  // namespace metadd::zoo
