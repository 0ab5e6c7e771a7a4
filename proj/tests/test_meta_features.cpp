#include <catch2/catch_amalgamated.hpp>

#include "metadd/meta/masks.hpp"
#include "testing_util.hpp"

using namespace metadd;
using namespace metadd::meta;

namespace {

cam::CamStack random_stack(Rng& rng, i64 M, i64 H, i64 W) {
  cam::CamStack st;
  for (i64 m = 0; m < M; ++m) {
    Tensor t = Tensor::leaf({H, W});
    for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform();
    st.maps.push_back(t);
    st.arch_ids.push_back("arch" + std::to_string(m));
    st.min_max.emplace_back(0.0, 1.0);
  }
  return st;
}

}  // namespace

TEST_CASE("threshold_mask") {
  SECTION("inclusive 0.5 boundary") {
    Tensor c = Tensor::from({2, 2}, {0.5, 0.49, 0.7, 0.1});
    BinaryMask m = threshold_mask(c);
    CHECK(m.values == std::vector<std::uint8_t>{1, 0, 1, 0});
  }
  SECTION("all-zero and all-one maps") {
    CHECK(threshold_mask(Tensor::zeros({3, 3})).count() == 0);
    CHECK(threshold_mask(Tensor::full({3, 3}, 1.0)).count() == 9);
  }
  SECTION("out-of-range input is a contract error") {
    Tensor c = Tensor::from({1, 2}, {0.2, 1.3});
    CHECK_THROWS_AS(threshold_mask(c), ContractError);
    Tensor c2 = Tensor::from({1, 2}, {-0.1, 0.3});
    CHECK_THROWS_AS(threshold_mask(c2), ContractError);
  }
}

TEST_CASE("meta_mask and hetero_mask hand cases") {
  // H1 = [[1,0],[1,0]], H2 = [[1,1],[0,0]] -> mu = [[1,0],[0,0]]
  cam::CamStack st;
  st.maps.push_back(Tensor::from({2, 2}, {0.9, 0.1, 0.8, 0.2}));
  st.maps.push_back(Tensor::from({2, 2}, {0.7, 0.6, 0.3, 0.4}));
  st.arch_ids = {"a", "b"};
  st.min_max = {{0, 1}, {0, 1}};
  BinaryMask mu = meta_mask(st);
  CHECK(mu.values == std::vector<std::uint8_t>{1, 0, 0, 0});
  CHECK(mu.kind == MaskKind::Meta);

  // beta1 = H1 - mu = [[0,0],[1,0]]
  BinaryMask b1 = hetero_mask(st, 0, mu);
  CHECK(b1.values == std::vector<std::uint8_t>{0, 0, 1, 0});
  CHECK(b1.kind == MaskKind::Heterogeneous);

  SECTION("single-map stack: mu equals its threshold mask") {
    cam::CamStack one;
    one.maps.push_back(st.maps[0]);
    one.arch_ids = {"a"};
    one.min_max = {{0, 1}};
    BinaryMask m1 = meta_mask(one);
    CHECK(m1.values == threshold_mask(st.maps[0]).values);
  }
  SECTION("an all-zero member zeroes the intersection") {
    cam::CamStack z = st;
    z.maps.push_back(Tensor::zeros({2, 2}));
    z.arch_ids.push_back("c");
    z.min_max.emplace_back(0.0, 0.0);
    CHECK(meta_mask(z).count() == 0);
  }
  SECTION("H equal to mu gives an empty heterogeneous mask") {
    cam::CamStack same;
    same.maps = {st.maps[0], st.maps[0]};
    same.arch_ids = {"a", "a"};
    same.min_max = {{0, 1}, {0, 1}};
    BinaryMask mu2 = meta_mask(same);
    CHECK(hetero_mask(same, 0, mu2).count() == 0);
  }
}

TEST_CASE("mask algebra properties on random stacks") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    i64 M = rng.range(1, 6), H = rng.range(1, 9), W = rng.range(1, 9);
    auto st = random_stack(rng, M, H, W);
    BinaryMask mu = meta_mask(st);
    for (i64 m = 0; m < M; ++m) {
      BinaryMask h = threshold_mask(st.maps[std::size_t(m)]);
      BinaryMask beta = hetero_mask(st, m, mu);
      for (std::size_t i = 0; i < h.values.size(); ++i) {
        // decomposition H = mu + beta, disjointness mu * beta = 0
        REQUIRE(int(h.values[i]) == int(mu.values[i]) + int(beta.values[i]));
        REQUIRE(int(mu.values[i]) * int(beta.values[i]) == 0);
      }
    }
    // monotonicity: adding a map never grows mu
    auto grown = st;
    grown.maps.push_back(random_stack(rng, 1, H, W).maps[0]);
    grown.arch_ids.push_back("extra");
    grown.min_max.emplace_back(0.0, 1.0);
    BinaryMask mu2 = meta_mask(grown);
    for (std::size_t i = 0; i < mu.values.size(); ++i)
      REQUIRE(mu2.values[i] <= mu.values[i]);
  }
}

TEST_CASE("erase") {
  Rng rng(7);
  Tensor img = Tensor::leaf({3, 4, 4});
  for (i64 i = 0; i < img.numel(); ++i) img.data()[i] = rng.uniform();
  FillPolicy mean_fill;
  mean_fill.mode = FillPolicy::Mode::ChannelMean;
  mean_fill.channel_means = {0.25, 0.5, 0.75};

  SECTION("all-zero mask leaves the image unchanged") {
    BinaryMask m;
    m.height = m.width = 4;
    m.values.assign(16, 0);
    Tensor out = erase(img, m, mean_fill);
    for (i64 i = 0; i < img.numel(); ++i)
      CHECK(out.data()[i] == img.data()[i]);
  }
  SECTION("all-ones mask produces a constant image at the fill value") {
    BinaryMask m;
    m.height = m.width = 4;
    m.values.assign(16, 1);
    Tensor out = erase(img, m, mean_fill);
    for (i64 c = 0; c < 3; ++c)
      for (i64 i = 0; i < 16; ++i)
        CHECK(out.data()[c * 16 + i] == mean_fill.channel_means[std::size_t(c)]);
  }
  SECTION("idempotence for every fill mode") {
    BinaryMask m;
    m.height = m.width = 4;
    m.values.assign(16, 0);
    for (std::size_t i = 0; i < 16; i += 3) m.values[i] = 1;
    for (auto mode : {FillPolicy::Mode::ChannelMean, FillPolicy::Mode::Zero,
                      FillPolicy::Mode::UniformNoise}) {
      FillPolicy fp = mean_fill;
      fp.mode = mode;
      fp.noise_seed = 42;
      Tensor once = erase(img, m, fp);
      Tensor twice = erase(once, m, fp);
      for (i64 i = 0; i < img.numel(); ++i)
        REQUIRE(twice.data()[i] == once.data()[i]);
    }
  }
  SECTION("mask size mismatch is rejected") {
    BinaryMask m;
    m.height = 3;
    m.width = 4;
    m.values.assign(12, 0);
    CHECK_THROWS_AS(erase(img, m, mean_fill), ContractError);
  }
}
