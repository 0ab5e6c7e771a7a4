#pragma once

#include <iomanip>
#include <sstream>

#include "metadd/distill/synthetic.hpp"
#include "metadd/losses/losses.hpp"
#include "metadd/meta/masks.hpp"
#include "metadd/nn/optim.hpp"
#include "metadd/zoo/pretrain.hpp"

namespace metadd::eval {

using distill::SyntheticDataset;
using zoo::ArchitectureSpec;
using zoo::AuxiliaryPool;

struct EvalSchedule {
  i64 warmup_steps = 500;
  i64 decay_steps = 500;
  i64 batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_scale = 1.0;  // scales the per-family default initial rate
};

/// Train a fresh instance of `spec` on the distilled set only and report
/// top-1 accuracy on the real validation split. Deterministic in `seed`.
inline double train_on_distilled(const ArchitectureSpec& spec,
                                 const SyntheticDataset& S,
                                 const io::Split& val,
                                 const EvalSchedule& sched, std::uint64_t seed) {
  check(S.size() > 0, "train_on_distilled: empty distilled set");
  auto net = zoo::build_model(spec, seed);
  std::vector<Tensor> params;
  for (auto& [nm, p] : net->parameters()) params.push_back(p);
  nn::Sgd opt(params, sched.momentum, sched.weight_decay);
  nn::WarmupCosine lr;
  lr.base_lr = zoo::default_lr(spec.family) * sched.lr_scale;
  lr.warmup_steps = sched.warmup_steps;
  lr.total_steps = std::max<i64>(1, sched.warmup_steps + sched.decay_steps);
  Rng order = Rng::derive(seed, "eval/order/" + spec.id());
  i64 bs = std::min<i64>(sched.batch_size, S.size());
  std::vector<i64> perm(std::size_t(S.size()));
  for (i64 i = 0; i < S.size(); ++i) perm[std::size_t(i)] = i;
  i64 cursor = S.size();  // force initial shuffle
  for (i64 step = 0; step < lr.total_steps; ++step) {
    std::vector<i64> idx;
    for (i64 i = 0; i < bs; ++i) {
      if (cursor >= S.size()) {
        order.shuffle(perm);
        cursor = 0;
      }
      idx.push_back(perm[std::size_t(cursor++)]);
    }
    Tensor x = S.batch(idx, false);
    Tensor loss = nn::cross_entropy(net->forward(x).logits, S.batch_labels(idx));
    if (!std::isfinite(loss.item()))
      throw TrainError("evaluation training diverged", step);
    opt.zero_grad();
    backward(loss);
    opt.step(lr.lr_at(step));
  }
  return zoo::evaluate_accuracy(*net, val);
}

/// Cross-structural performance loss: accuracy of an architecture on data
/// distilled by itself minus its accuracy on data distilled by another.
inline double delta_acc(double acc_same, double acc_cross) {
  check(acc_same >= 0.0 && acc_same <= 1.0 && acc_cross >= 0.0 && acc_cross <= 1.0,
        "delta_acc expects accuracies in [0,1]");
  return acc_same - acc_cross;
}

struct DeltaAccMatrix {
  std::vector<std::string> archs;
  std::vector<std::vector<double>> delta;  // delta[u][v] = dAcc(v | u)
  double summed_objective = 0.0;
};

/// Build the cross-distillation matrix from accs[u][v] = accuracy of
/// architecture v trained on the set distilled by u. The diagonal is zero by
/// the identity dAcc(v|v) = 0.
inline DeltaAccMatrix delta_acc_matrix(
    const std::vector<std::string>& archs,
    const std::vector<std::vector<double>>& accs) {
  std::size_t n = archs.size();
  check(accs.size() == n, "delta_acc_matrix: need one row per architecture");
  DeltaAccMatrix m;
  m.archs = archs;
  m.delta.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t u = 0; u < n; ++u) {
    check(accs[u].size() == n, "delta_acc_matrix: ragged accuracy table");
    for (std::size_t v = 0; v < n; ++v) {
      m.delta[u][v] = delta_acc(accs[v][v], accs[u][v]);
      if (u != v) m.summed_objective += m.delta[u][v];
    }
  }
  return m;
}

struct ArchEval {
  ArchitectureSpec spec;
  bool seen = false;
  std::vector<double> accuracies;      // one per successful repeat
  std::vector<std::string> failures;   // notes for failed repeats
  double mean = 0.0;
  double stddev = 0.0;
};

struct EvalReport {
  std::vector<ArchEval> rows;
  i64 repeats = 0;
  bool single_repeat_flag = false;     // stddev fields are 0 by definition
  double seen_average = 0.0;
  double unseen_average = 0.0;
  double overall_average = 0.0;
  std::string config_hash;

  nlohmann::json to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows)
      rows_j.push_back({{"arch", r.spec.id()},
                        {"seen", r.seen},
                        {"accuracies", r.accuracies},
                        {"failures", r.failures},
                        {"mean", r.mean},
                        {"std", r.stddev}});
    return {{"rows", rows_j},
            {"repeats", repeats},
            {"single_repeat_flag", single_repeat_flag},
            {"seen_average", seen_average},
            {"unseen_average", unseen_average},
            {"overall_average", overall_average},
            {"config_hash", config_hash}};
  }

  std::string render_table() const {
    std::ostringstream os;
    os << std::left << std::setw(34) << "architecture" << std::setw(8)
       << "group" << std::setw(18) << "top-1 (mean+-std)" << "repeats\n";
    os << std::string(70, '-') << "\n";
    auto line = [&](const ArchEval& r) {
      std::ostringstream acc;
      acc << std::fixed << std::setprecision(2) << 100.0 * r.mean << " +- "
          << std::setprecision(2) << 100.0 * r.stddev;
      os << std::left << std::setw(34) << r.spec.id() << std::setw(8)
         << (r.seen ? "seen" : "unseen") << std::setw(18) << acc.str()
         << r.accuracies.size();
      for (const auto& f : r.failures) os << "  [failed: " << f << "]";
      os << "\n";
    };
    for (const auto& r : rows)
      if (r.seen) line(r);
    for (const auto& r : rows)
      if (!r.seen) line(r);
    os << std::string(70, '-') << "\n";
    os << std::fixed << std::setprecision(2);
    os << "seen average:    " << 100.0 * seen_average << "\n";
    os << "unseen average:  " << 100.0 * unseen_average << "\n";
    os << "overall average: " << 100.0 * overall_average << "\n";
    if (single_repeat_flag)
      os << "(single repeat: std fields are 0 by definition)\n";
    return os.str();
  }
};

/// Train every architecture `repeats` times on the distilled set and
/// aggregate per-architecture means/stds plus seen/unseen group averages.
/// Failed repeats are excluded and annotated.
inline EvalReport cross_arch_report(
    const SyntheticDataset& S, const io::Split& val,
    const std::vector<std::pair<ArchitectureSpec, bool>>& archs, i64 repeats,
    const EvalSchedule& sched, std::uint64_t seed) {
  check(!archs.empty() && repeats >= 1, "cross_arch_report: nothing to do");
  EvalReport report;
  report.repeats = repeats;
  report.single_repeat_flag = repeats == 1;
  double seen_sum = 0, unseen_sum = 0, all_sum = 0;
  i64 seen_n = 0, unseen_n = 0;
  for (const auto& [spec, seen] : archs) {
    ArchEval row;
    row.spec = spec;
    row.seen = seen;
    for (i64 r = 0; r < repeats; ++r) {
      std::uint64_t rep_seed =
          Rng::derive(seed, "eval/repeat/" + spec.id() + "/" + std::to_string(r))
              .next_u64();
      try {
        row.accuracies.push_back(
            train_on_distilled(spec, S, val, sched, rep_seed));
      } catch (const TrainError& e) {
        row.failures.push_back(e.what());
      }
    }
    double n = double(row.accuracies.size());
    if (n > 0) {
      for (double a : row.accuracies) row.mean += a;
      row.mean /= n;
      if (row.accuracies.size() > 1) {
        double ss = 0;
        for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
        row.stddev = std::sqrt(ss / (n - 1.0));
      }
    }
    all_sum += row.mean;
    if (seen) {
      seen_sum += row.mean;
      ++seen_n;
    } else {
      unseen_sum += row.mean;
      ++unseen_n;
    }
    report.rows.push_back(std::move(row));
  }
  report.seen_average = seen_n ? seen_sum / double(seen_n) : 0.0;
  report.unseen_average = unseen_n ? unseen_sum / double(unseen_n) : 0.0;
  report.overall_average = all_sum / double(report.rows.size());
  return report;
}

/// Mean per-sample map variance over the whole distilled set, under the
/// frozen pool. Diagnostic mirror of the variance loss; no graphs retained.
inline double cam_variance_metric(const SyntheticDataset& S,
                                  const AuxiliaryPool& pool,
                                  i64 chunk = 32) {
  pool.validate();
  double total = 0.0;
  for (i64 start = 0; start < S.size(); start += chunk) {
    i64 stop = std::min(S.size(), start + chunk);
    std::vector<i64> idx;
    for (i64 i = start; i < stop; ++i) idx.push_back(i);
    Tensor x = S.batch(idx, /*requires_grad=*/true);  // grads flow to maps only
    auto ctx = losses::ai_loss(pool, x, S.batch_labels(idx));
    auto cams = cam::compute_pool_cams(ctx, S.images.dim(2), S.images.dim(3),
                                       /*create_graph=*/false);
    for (i64 b = 0; b < stop - start; ++b)
      total += losses::cam_variance(cams.stack_for_sample(b)).item();
  }
  return total / double(S.size());
}

}  // namespace metadd::eval
