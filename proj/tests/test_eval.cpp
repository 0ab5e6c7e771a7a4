#include <catch2/catch_amalgamated.hpp>

#include "metadd/eval/erasure.hpp"
#include "metadd/eval/evaluate.hpp"
#include "metadd/io/synthgen.hpp"
#include "testing_util.hpp"

using namespace metadd;
using namespace metadd::eval;
using namespace metadd::zoo;

namespace {

const io::Dataset& data3() {
  static io::Dataset ds = io::generate_shapes_dataset(3, 150, 100, 32, 303);
  return ds;
}

ArchitectureSpec small_conv(i64 width = 12) {
  ArchitectureSpec s;
  s.family = ArchFamily::ConvPlain;
  s.depth = 2;
  s.width = width;
  s.num_classes = 3;
  s.input_resolution = 32;
  return s;
}

distill::SyntheticDataset real_subset_as_synthetic(i64 ipc, std::uint64_t seed) {
  return distill::init_synthetic(data3(), ipc, distill::InitMode::RealSample,
                                 seed);
}

}  // namespace

TEST_CASE("delta_acc") {
  CHECK(delta_acc(0.5, 0.5) == 0.0);
  CHECK(delta_acc(0.5, 0.4) == Catch::Approx(0.1));
  CHECK_THROWS_AS(delta_acc(1.2, 0.5), ContractError);

  SECTION("matrix identity diagonal and symmetric-equal sum") {
    // every architecture scores the same regardless of distilling source
    std::vector<std::vector<double>> accs = {{0.6, 0.5}, {0.6, 0.5}};
    auto m = delta_acc_matrix({"a", "b"}, accs);
    CHECK(m.delta[0][0] == 0.0);
    CHECK(m.delta[1][1] == 0.0);
    CHECK(m.summed_objective == Catch::Approx(0.0));
  }
  SECTION("matrix off-diagonal uses self-distilled accuracy as the anchor") {
    // accs[u][v]: arch v trained on S(u)
    std::vector<std::vector<double>> accs = {{0.6, 0.4}, {0.5, 0.55}};
    auto m = delta_acc_matrix({"a", "b"}, accs);
    CHECK(m.delta[0][1] == Catch::Approx(0.55 - 0.4));   // dAcc(b|a)
    CHECK(m.delta[1][0] == Catch::Approx(0.6 - 0.5));    // dAcc(a|b)
  }
}

TEST_CASE("train_on_distilled") {
  auto S = real_subset_as_synthetic(10, 17);

  SECTION("deterministic in the seed") {
    EvalSchedule sched;
    sched.warmup_steps = 10;
    sched.decay_steps = 20;
    double a = train_on_distilled(small_conv(), S, data3().val, sched, 5);
    double b = train_on_distilled(small_conv(), S, data3().val, sched, 5);
    CHECK(a == b);
  }
  SECTION("near-zero training stays at chance level") {
    EvalSchedule sched;
    sched.warmup_steps = 1;
    sched.decay_steps = 1;
    auto S1 = real_subset_as_synthetic(1, 23);
    double acc = train_on_distilled(small_conv(), S1, data3().val, sched, 7);
    CHECK(acc == Catch::Approx(1.0 / 3.0).margin(0.06));
  }
  SECTION("a generous schedule on a real subset learns something") {
    EvalSchedule sched;
    sched.warmup_steps = 60;
    sched.decay_steps = 120;
    double acc = train_on_distilled(small_conv(), S, data3().val, sched, 9);
    INFO("recorded anchor accuracy: " << acc);
    CHECK(acc > 0.6);
  }
}

TEST_CASE("cross_arch_report") {
  auto S = real_subset_as_synthetic(5, 29);
  EvalSchedule sched;
  sched.warmup_steps = 15;
  sched.decay_steps = 30;

  SECTION("two identical specs produce statistically indistinguishable rows") {
    std::vector<std::pair<ArchitectureSpec, bool>> archs = {
        {small_conv(), true}, {small_conv(), false}};
    auto rep = cross_arch_report(S, data3().val, archs, 3, sched, 31);
    REQUIRE(rep.rows.size() == 2);
    double gap = std::abs(rep.rows[0].mean - rep.rows[1].mean);
    double spread = std::max({rep.rows[0].stddev, rep.rows[1].stddev, 0.02});
    CHECK(gap <= 2.0 * spread + 1e-12);
    CHECK(rep.overall_average ==
          Catch::Approx((rep.rows[0].mean + rep.rows[1].mean) / 2.0));
    CHECK(rep.seen_average == Catch::Approx(rep.rows[0].mean));
    CHECK(rep.unseen_average == Catch::Approx(rep.rows[1].mean));
  }
  SECTION("repeats = 1 reports zero stds with the flag set") {
    std::vector<std::pair<ArchitectureSpec, bool>> archs = {{small_conv(), true}};
    auto rep = cross_arch_report(S, data3().val, archs, 1, sched, 33);
    CHECK(rep.single_repeat_flag);
    CHECK(rep.rows[0].stddev == 0.0);
    CHECK(rep.rows[0].accuracies.size() == 1);
  }
  SECTION("report renders and serializes") {
    std::vector<std::pair<ArchitectureSpec, bool>> archs = {{small_conv(), true}};
    auto rep = cross_arch_report(S, data3().val, archs, 1, sched, 35);
    std::string table = rep.render_table();
    CHECK(table.find("seen average") != std::string::npos);
    auto j = rep.to_json();
    CHECK(j.at("rows").size() == 1);
  }
}

TEST_CASE("cam_variance_metric") {
  auto S = real_subset_as_synthetic(3, 41);

  SECTION("duplicated auxiliary pool gives exactly zero") {
    AuxiliaryPool pool;
    pool.backbone.net = build_model(small_conv(), 51);
    auto aux = freeze({build_model(small_conv(10), 53), {}});
    pool.auxiliaries = {aux, aux};  // identical maps across the stack
    double v = cam_variance_metric(S, pool);
    CHECK(v == Catch::Approx(0.0).margin(1e-15));
  }

  SECTION("permutation invariance over S and nonnegativity") {
    AuxiliaryPool pool;
    pool.backbone.net = build_model(small_conv(), 61);
    pool.auxiliaries.push_back(freeze({build_model(small_conv(10), 63), {}}));
    ArchitectureSpec vit;
    vit.family = ArchFamily::Attention;
    vit.depth = 1;
    vit.width = 16;
    vit.patch_size = 8;
    vit.num_classes = 3;
    vit.input_resolution = 32;
    pool.auxiliaries.push_back(freeze({build_model(vit, 65), {}}));
    double v1 = cam_variance_metric(S, pool);
    CHECK(v1 >= 0.0);
    // permute S
    auto Sp = S;
    std::vector<i64> perm;
    for (i64 i = S.size() - 1; i >= 0; --i) perm.push_back(i);
    Sp.images = S.batch(perm, false);
    Sp.labels = S.batch_labels(perm);
    double v2 = cam_variance_metric(Sp, pool);
    CHECK(v1 == Catch::Approx(v2).epsilon(1e-12));
  }
}

TEST_CASE("erasure_study smoke") {
  AuxiliaryPool pool;
  pool.backbone.net = build_model(small_conv(), 71);
  pool.auxiliaries.push_back(freeze({build_model(small_conv(10), 73), {}}));
  ArchitectureSpec vit;
  vit.family = ArchFamily::Attention;
  vit.depth = 1;
  vit.width = 16;
  vit.patch_size = 8;
  vit.num_classes = 3;
  vit.input_resolution = 32;
  pool.auxiliaries.push_back(freeze({build_model(vit, 75), {}}));

  ErasureConfig cfg;
  cfg.max_train_samples = 60;
  cfg.repeats = 1;
  cfg.schedule.warmup_steps = 10;
  cfg.schedule.decay_steps = 20;
  auto report = erasure_study(data3(), pool, small_conv(), cfg, 77);

  REQUIRE(report.variants.size() == std::size_t(2 + pool.M()));
  CHECK(report.variants[0].name == "none");
  CHECK(report.variants[0].erased_fraction == 0.0);
  CHECK(report.variants[0].delta_vs_none == 0.0);
  CHECK(report.find("meta") != nullptr);
  for (const auto& v : report.variants) {
    CHECK(v.erased_fraction >= 0.0);
    CHECK(v.erased_fraction <= 1.0);
    CHECK(v.mean_accuracy >= 0.0);
    CHECK(v.mean_accuracy <= 1.0);
  }
  std::string table = report.render_table();
  CHECK(table.find("erasure study") != std::string::npos);
}
