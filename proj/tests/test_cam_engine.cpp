#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "metadd/cam/engine.hpp"
#include "metadd/losses/losses.hpp"
#include "testing_util.hpp"

using namespace metadd;
using namespace metadd::cam;
using metadd::testing::random_tensor;

namespace {

// Independent reference bilinear interpolation (half-pixel centers, clamped),
// written against the definition rather than the library path.
std::vector<double> reference_bilinear(const std::vector<double>& src, i64 H,
                                       i64 W, i64 H2, i64 W2) {
  std::vector<double> out(std::size_t(H2 * W2));
  for (i64 i = 0; i < H2; ++i)
    for (i64 j = 0; j < W2; ++j) {
      double fy = (double(i) + 0.5) * double(H) / double(H2) - 0.5;
      double fx = (double(j) + 0.5) * double(W) / double(W2) - 0.5;
      i64 y0 = i64(std::floor(fy)), x0 = i64(std::floor(fx));
      double wy = fy - double(y0), wx = fx - double(x0);
      auto at = [&](i64 y, i64 x) {
        y = std::min(H - 1, std::max<i64>(0, y));
        x = std::min(W - 1, std::max<i64>(0, x));
        return src[std::size_t(y * W + x)];
      };
      out[std::size_t(i * W2 + j)] =
          (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
          wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
    }
  return out;
}

ConvCapture make_capture(const Tensor& A, const Tensor& G) {
  ConvCapture c;
  c.activations = A;
  c.gradients = G;
  return c;
}

}  // namespace

TEST_CASE("conv_cam closed-form cases") {
  SECTION("single channel, unit gradients: map equals the activation") {
    Tensor A = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor G = Tensor::full({1, 1, 2, 2}, 1.0);
    RawCam c = conv_cam(make_capture(A, G));
    REQUIRE(c.values.shape() == Shape{1, 2, 2});
    CHECK(c.values.data()[0] == Catch::Approx(1.0));
    CHECK(c.values.data()[1] == Catch::Approx(2.0));
    CHECK(c.values.data()[2] == Catch::Approx(3.0));
    CHECK(c.values.data()[3] == Catch::Approx(4.0));
  }
  SECTION("zero gradients give a zero map") {
    Tensor A = Tensor::from({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor G = Tensor::zeros({1, 2, 2, 2});
    RawCam c = conv_cam(make_capture(A, G));
    for (i64 i = 0; i < 4; ++i) CHECK(c.values.data()[i] == 0.0);
  }
  SECTION("opposite channel weights cancel: negative evidence is retained") {
    // alpha_1 = +1, alpha_2 = -1, A1 == A2 -> exact cancellation
    Tensor A = Tensor::from({1, 2, 2, 2}, {1, 2, 3, 4, 1, 2, 3, 4});
    Tensor G = Tensor::from({1, 2, 2, 2}, {1, 1, 1, 1, -1, -1, -1, -1});
    RawCam c = conv_cam(make_capture(A, G));
    for (i64 i = 0; i < 4; ++i) CHECK(c.values.data()[i] == Catch::Approx(0.0));
  }
  SECTION("no rectification: net-negative weighting yields negative entries") {
    Tensor A = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor G = Tensor::full({1, 1, 2, 2}, -1.0);
    RawCam c = conv_cam(make_capture(A, G));
    double mn = c.values.data()[0];
    for (i64 i = 0; i < 4; ++i) mn = std::min(mn, c.values.data()[i]);
    CHECK(mn < 0.0);
  }
  SECTION("linearity in activations for fixed gradients") {
    Rng rng(3);
    Tensor A = random_tensor({2, 3, 4, 4}, rng, -1, 1, false);
    Tensor G = random_tensor({2, 3, 4, 4}, rng, -1, 1, false);
    RawCam c1 = conv_cam(make_capture(A, G));
    Tensor A2 = Tensor::leaf(A.shape());
    for (i64 i = 0; i < A.numel(); ++i) A2.data()[i] = 2.0 * A.data()[i];
    RawCam c2 = conv_cam(make_capture(A2, G));
    for (i64 i = 0; i < c1.values.numel(); ++i)
      CHECK(c2.values.data()[i] == Catch::Approx(2.0 * c1.values.data()[i]));
  }
  SECTION("batch of 2 gives two independent maps") {
    Rng rng(5);
    Tensor A = random_tensor({2, 2, 3, 3}, rng, -1, 1, false);
    Tensor G = random_tensor({2, 2, 3, 3}, rng, -1, 1, false);
    RawCam both = conv_cam(make_capture(A, G));
    RawCam first = conv_cam(make_capture(
        reshape(slice(A, 0, 0, 1), {1, 2, 3, 3}),
        reshape(slice(G, 0, 0, 1), {1, 2, 3, 3})));
    for (i64 i = 0; i < 9; ++i)
      CHECK(both.values.data()[i] == Catch::Approx(first.values.data()[i]));
  }
}

TEST_CASE("attention_cam closed-form cases") {
  SECTION("uniform attention and constant projection give a constant map") {
    i64 B = 1, Hh = 2, N = 4, E = 3;
    Tensor attn = Tensor::full({B, Hh, N}, 1.0 / double(N));
    // Z[n] . G[n] == 1 for every patch
    Tensor Z = Tensor::full({B, N, E}, 1.0);
    Tensor G = Tensor::full({B, N, E}, 1.0 / double(E));
    AttentionCapture cap;
    cap.attn_cls = attn;
    cap.patch_tokens = Z;
    cap.patch_grads = G;
    RawCam c = attention_cam(cap);
    REQUIRE(c.values.shape() == Shape{1, 2, 2});
    for (i64 i = 0; i < 4; ++i)
      CHECK(c.values.data()[i] == Catch::Approx(2.0 / double(N)));
  }
  SECTION("zero gradients w.r.t. patch outputs give a zero map") {
    Rng rng(7);
    AttentionCapture cap;
    cap.attn_cls = random_tensor({2, 3, 9}, rng, 0, 1, false);
    cap.patch_tokens = random_tensor({2, 9, 5}, rng, -1, 1, false);
    cap.patch_grads = Tensor::zeros({2, 9, 5});
    RawCam c = attention_cam(cap);
    for (i64 i = 0; i < c.values.numel(); ++i) CHECK(c.values.data()[i] == 0.0);
  }
  SECTION("64 patches reshape to an 8x8 grid") {
    Rng rng(9);
    AttentionCapture cap;
    cap.attn_cls = random_tensor({1, 4, 64}, rng, 0, 1, false);
    cap.patch_tokens = random_tensor({1, 64, 16}, rng, -1, 1, false);
    cap.patch_grads = random_tensor({1, 64, 16}, rng, -1, 1, false);
    CHECK(attention_cam(cap).values.shape() == Shape{1, 8, 8});
  }
}

TEST_CASE("resize_normalize") {
  SECTION("2x2 identity-size case") {
    Tensor c = Tensor::from({2, 2}, {0.2, 0.6, 1.0, 0.2});
    Tensor n = resize_normalize(c, 2, 2);
    CHECK(n.data()[0] == Catch::Approx(0.0));
    CHECK(n.data()[1] == Catch::Approx(0.5));
    CHECK(n.data()[2] == Catch::Approx(1.0));
    CHECK(n.data()[3] == Catch::Approx(0.0));
  }
  SECTION("constant map goes to all zeros") {
    Tensor c = Tensor::full({3, 3}, 0.7);
    Tensor n = resize_normalize(c, 4, 4);
    for (i64 i = 0; i < n.numel(); ++i) CHECK(n.data()[i] == 0.0);
  }
  SECTION("upsampling matches the independent reference, extremes preserved") {
    Tensor c = Tensor::from({2, 2}, {0.0, 0.25, 0.5, 1.0});
    double lo = 0, hi = 0;
    Tensor n = resize_normalize(c, 4, 4, &lo, &hi);
    auto ref = reference_bilinear({0.0, 0.25, 0.5, 1.0}, 2, 2, 4, 4);
    double rmin = 1e9, rmax = -1e9;
    for (double v : ref) {
      rmin = std::min(rmin, v);
      rmax = std::max(rmax, v);
    }
    for (i64 i = 0; i < 16; ++i) {
      double expect = (ref[std::size_t(i)] - rmin) / (rmax - rmin);
      CHECK(n.data()[i] == Catch::Approx(expect).margin(1e-12));
    }
    CHECK(lo == Catch::Approx(rmin));
    CHECK(hi == Catch::Approx(rmax));
    double got_min = 1e9, got_max = -1e9;
    for (i64 i = 0; i < 16; ++i) {
      got_min = std::min(got_min, n.data()[i]);
      got_max = std::max(got_max, n.data()[i]);
    }
    CHECK(got_min == Catch::Approx(0.0).margin(1e-12));
    CHECK(got_max == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("downsampling against the reference on random maps") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      i64 H = rng.range(2, 9), W = rng.range(2, 9);
      i64 H2 = rng.range(1, 7), W2 = rng.range(1, 7);
      std::vector<double> src(std::size_t(H * W));
      for (auto& v : src) v = rng.uniform(-2, 2);
      Tensor x = Tensor::from({1, 1, H, W}, src);
      Tensor y = bilinear_resize(x, H2, W2);
      auto ref = reference_bilinear(src, H, W, H2, W2);
      for (i64 i = 0; i < H2 * W2; ++i)
        REQUIRE(y.data()[i] == Catch::Approx(ref[std::size_t(i)]).margin(1e-12));
    }
  }
  SECTION("non-finite input is a numeric error") {
    Tensor c = Tensor::from({2, 2}, {0.0, 1.0, std::nan(""), 0.5});
    CHECK_THROWS_AS(resize_normalize(c, 2, 2), NumericError);
  }
  SECTION("normalization bounds property over random maps") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
      i64 H = rng.range(1, 9), W = rng.range(1, 9);
      Tensor c = Tensor::leaf({H, W});
      for (i64 i = 0; i < c.numel(); ++i) c.data()[i] = rng.uniform(-5, 5);
      Tensor n = resize_normalize(c, 8, 8);
      double mn = 1e300, mx = -1e300;
      for (i64 i = 0; i < n.numel(); ++i) {
        REQUIRE(n.data()[i] >= 0.0);
        REQUIRE(n.data()[i] <= 1.0);
        mn = std::min(mn, n.data()[i]);
        mx = std::max(mx, n.data()[i]);
      }
      if (H * W > 1) {  // non-constant with probability 1
        REQUIRE(mn <= 1e-6);
        REQUIRE(mx >= 1.0 - 1e-6);
      }
    }
  }
}

TEST_CASE("pos_score") {
  Tensor c = Tensor::from({2, 2}, {-1, 2, 0, 3});
  CHECK(pos_score(c).item() == Catch::Approx(4.0));
  CHECK(pos_score(Tensor::zeros({3, 3})).item() == 0.0);
  Tensor nc = neg(c);
  CHECK(pos_score(nc).item() == Catch::Approx(-4.0));
  // batched variant gives one score per sample
  Tensor b = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
  Tensor s = pos_score(b);
  REQUIRE(s.shape() == Shape{2});
  CHECK(s.data()[0] == Catch::Approx(3.0));
  CHECK(s.data()[1] == Catch::Approx(7.0));
}

namespace {

zoo::AuxiliaryPool tiny_pool(i64 classes, i64 res, std::uint64_t seed,
                             bool with_attention = true) {
  using namespace metadd::zoo;
  AuxiliaryPool pool;
  ArchitectureSpec bs;
  bs.family = ArchFamily::ConvPlain;
  bs.depth = 2;
  bs.width = 6;
  bs.num_classes = classes;
  bs.input_resolution = res;
  pool.backbone.net = build_model(bs, seed);
  pool.backbone.net->set_trainable(false);
  ArchitectureSpec a1 = bs;
  a1.width = 5;
  pool.auxiliaries.push_back(freeze({build_model(a1, seed + 1), {}}));
  if (with_attention) {
    ArchitectureSpec a2;
    a2.family = ArchFamily::Attention;
    a2.depth = 1;
    a2.width = 16;
    a2.patch_size = res / 2;
    a2.num_classes = classes;
    a2.input_resolution = res;
    pool.auxiliaries.push_back(freeze({build_model(a2, seed + 2), {}}));
  }
  ArchitectureSpec a3 = bs;
  a3.family = ArchFamily::ConvMobile;
  a3.depth = 6;
  a3.width = 4;
  pool.auxiliaries.push_back(freeze({build_model(a3, seed + 3), {}}));
  pool.working_resolution = res;
  return pool;
}

}  // namespace

TEST_CASE("cam_stack over a pool") {
  i64 res = 8;
  auto pool = tiny_pool(2, res, 100);
  pool.validate();
  Rng rng(11);
  Tensor images = random_tensor({2, 3, res, res}, rng, 0, 1, true);
  std::vector<i64> labels = {0, 1};

  SECTION("one normalized map per auxiliary, pool order, all at H_ref x W_ref") {
    auto ctx = losses::ai_loss(pool, images, labels);
    auto stacks = cam_stack(ctx, res, res);
    REQUIRE(stacks.size() == 2);
    for (const auto& st : stacks) {
      REQUIRE(st.M() == pool.M());
      for (i64 m = 0; m < st.M(); ++m) {
        CHECK(st.maps[std::size_t(m)].shape() == Shape{res, res});
        CHECK(st.arch_ids[std::size_t(m)] ==
              pool.auxiliaries[std::size_t(m)].spec().id());
      }
    }
  }

  SECTION("duplicated auxiliary produces two identical maps") {
    auto pool2 = pool;
    pool2.auxiliaries.push_back(pool2.auxiliaries[0]);
    auto ctx = losses::ai_loss(pool2, images, labels);
    auto stacks = cam_stack(ctx, res, res);
    const auto& st = stacks[0];
    i64 last = st.M() - 1;
    for (i64 i = 0; i < res * res; ++i)
      CHECK(st.maps[0].data()[i] ==
            Catch::Approx(st.maps[std::size_t(last)].data()[i]).margin(1e-12));
    // forwarded property: identical maps contribute zero variance
    cam::CamStack pair;
    pair.maps = {st.maps[0], st.maps[std::size_t(last)]};
    CHECK(losses::cam_variance(pair).item() == Catch::Approx(0.0).margin(1e-15));
  }

  SECTION("stacks are differentiable w.r.t. pixels when create_graph is set") {
    auto ctx = losses::ai_loss(pool, images, labels);
    auto stacks = cam_stack(ctx, res, res, /*create_graph=*/true);
    Tensor probe = sum_all(stacks[0].maps[0]);
    REQUIRE(probe.requires_grad());
    Tensor g = grad_of(probe, {images})[0];
    double norm = 0;
    for (i64 i = 0; i < g.numel(); ++i) norm += g.data()[i] * g.data()[i];
    CHECK(norm > 0.0);
  }
}

TEST_CASE("capture_conv instrumentation") {
  auto pool = tiny_pool(2, 8, 200, false);
  Rng rng(13);
  Tensor images = random_tensor({2, 3, 8, 8}, rng, 0, 1, true);
  std::vector<i64> labels = {0, 1};
  const auto& net = *pool.auxiliaries[0].net;

  SECTION("returns activations and loss gradients of matching shape") {
    auto cap = capture_conv(net, images, [&](const zoo::ForwardTrace& tr) {
      return nn::cross_entropy(tr.logits, labels);
    });
    CHECK(cap.activations.shape() == cap.gradients.shape());
    CHECK(cap.activations.dim(0) == 2);
  }
  SECTION("constant-zero loss gives zero gradient maps") {
    auto cap = capture_conv(net, images, [&](const zoo::ForwardTrace& tr) {
      return mul_scalar(sum_all(tr.conv_features), 0.0);
    });
    for (i64 i = 0; i < cap.gradients.numel(); ++i)
      CHECK(cap.gradients.data()[i] == 0.0);
  }
  SECTION("attention-family model is rejected") {
    auto pool2 = tiny_pool(2, 8, 300, true);
    const auto& vit = *pool2.auxiliaries[1].net;
    REQUIRE(vit.spec().family == zoo::ArchFamily::Attention);
    CHECK_THROWS_AS(
        capture_conv(vit, images, [&](const zoo::ForwardTrace& tr) {
          return nn::cross_entropy(tr.logits, labels);
        }),
        ContractError);
  }
}
