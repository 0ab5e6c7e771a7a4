#pragma once

#include <memory>
#include <string>
#include <vector>

#include "metadd/io/dataset.hpp"
#include "metadd/zoo/network.hpp"

namespace metadd::zoo {

struct Provenance {
  std::string dataset_id;
  i64 epochs = 0;
  double final_top1 = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"dataset_id", dataset_id},
            {"epochs", epochs},
            {"final_top1", final_top1},
            {"seed", seed}};
  }
  static Provenance from_json(const nlohmann::json& j) {
    Provenance p;
    p.dataset_id = j.at("dataset_id").get<std::string>();
    p.epochs = j.at("epochs").get<i64>();
    p.final_top1 = j.at("final_top1").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
  }
};

struct PretrainedModel {
  std::shared_ptr<Network> net;
  Provenance provenance;

  const ArchitectureSpec& spec() const { return net->spec(); }
  bool frozen() const { return net->frozen(); }
};

/// Mark all parameters non-trainable. Backward passes then neither allocate
/// parameter-gradient storage for this model nor traverse its weight
/// branches; input gradients still flow. Idempotent.
inline PretrainedModel freeze(PretrainedModel model) {
  model.net->set_trainable(false);
  return model;
}

/// Backbone plus frozen auxiliaries sharing a working resolution. Models
/// whose native resolution differs resize at their own input.
struct AuxiliaryPool {
  PretrainedModel backbone;
  std::vector<PretrainedModel> auxiliaries;
  i64 working_resolution = 32;

  i64 M() const { return i64(auxiliaries.size()); }

  void validate() const {
    check(backbone.net != nullptr, "pool has no backbone");
    i64 classes = backbone.spec().num_classes;
    for (const auto& aux : auxiliaries) {
      check(aux.net != nullptr, "pool has an empty auxiliary slot");
      check(aux.frozen(), "auxiliary " + aux.spec().id() + " is not frozen");
      check(aux.spec().num_classes == classes,
            "auxiliary " + aux.spec().id() + " disagrees on class count");
    }
  }

  std::vector<std::string> auxiliary_checksums() const {
    std::vector<std::string> out;
    for (const auto& aux : auxiliaries)
      out.push_back(aux.net->parameter_checksum());
    return out;
  }
};

/// Top-1 accuracy of a network over a split (no-grad).
inline double evaluate_accuracy(const Network& net, const io::Split& split,
                                i64 batch_size = 128) {
  NoGradGuard ng;
  i64 n = split.size();
  if (n == 0) return 0.0;
  i64 correct = 0;
  for (i64 start = 0; start < n; start += batch_size) {
    i64 stop = std::min(n, start + batch_size);
    std::vector<i64> idx;
    for (i64 i = start; i < stop; ++i) idx.push_back(i);
    Tensor x = split.batch(idx);
    Tensor logits = net.forward(x).logits;
    i64 C = logits.dim(1);
    for (i64 b = 0; b < stop - start; ++b) {
      const double* row = logits.data() + b * C;
      i64 best = 0;
      for (i64 c = 1; c < C; ++c)
        if (row[c] > row[best]) best = c;
      if (best == split.labels[std::size_t(start + b)]) ++correct;
    }
  }
  return double(correct) / double(n);
}

}  // namespace metadd::zoo
