#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "metadd/io/dataset.hpp"
#include "metadd/zoo/model.hpp"

namespace metadd::distill {

/// Trainable distilled dataset: pixel tensor plus immutable labels with
/// per-class bookkeeping.
struct SyntheticDataset {
  Tensor images;             // [N,3,H,W], values kept in [0,1]
  std::vector<i64> labels;   // fixed at initialization
  i64 ipc = 0;
  i64 num_classes = 0;

  struct Provenance {
    std::string method;      // "dc" | "dm" (+ "+metadd")
    std::string components;  // active loss terms
    std::uint64_t seed = 0;
    std::string config_hash;
  } provenance;

  i64 size() const { return i64(labels.size()); }

  std::vector<i64> indices_of_class(i64 c) const {
    std::vector<i64> out;
    for (i64 i = 0; i < size(); ++i)
      if (labels[std::size_t(i)] == c) out.push_back(i);
    return out;
  }

  void check_invariants() const {
    check(images.dim(0) == size(), "synthetic image/label count mismatch");
    std::vector<i64> counts(std::size_t(num_classes), 0);
    for (i64 l : labels) {
      check(l >= 0 && l < num_classes, "synthetic label out of range");
      ++counts[std::size_t(l)];
    }
    for (i64 c = 0; c < num_classes; ++c)
      check(counts[std::size_t(c)] == ipc,
            "class " + std::to_string(c) + " does not hold exactly ipc images");
    const double* p = images.data();
    for (i64 i = 0; i < images.numel(); ++i)
      check(p[i] >= 0.0 && p[i] <= 1.0, "synthetic pixel outside [0,1]");
  }

  Tensor batch(const std::vector<i64>& idx, bool requires_grad) const {
    i64 B = i64(idx.size());
    i64 C = images.dim(1), H = images.dim(2), W = images.dim(3);
    Tensor out = Tensor::leaf({B, C, H, W}, requires_grad);
    i64 n = C * H * W;
    for (i64 b = 0; b < B; ++b)
      std::copy(images.data() + idx[std::size_t(b)] * n,
                images.data() + (idx[std::size_t(b)] + 1) * n,
                out.data() + b * n);
    return out;
  }

  std::vector<i64> batch_labels(const std::vector<i64>& idx) const {
    std::vector<i64> out;
    for (i64 i : idx) out.push_back(labels[std::size_t(i)]);
    return out;
  }

  /// Write a row update back, clamping pixels into [0,1].
  void apply_update(const std::vector<i64>& idx, const Tensor& new_rows) {
    i64 n = images.dim(1) * images.dim(2) * images.dim(3);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* src = new_rows.data() + i64(b) * n;
      double* dst = images.data() + idx[b] * n;
      for (i64 i = 0; i < n; ++i)
        dst[i] = std::min(1.0, std::max(0.0, src[i]));
    }
  }
};

enum class InitMode { Noise, RealSample };

inline InitMode init_mode_from(const std::string& s) {
  if (s == "noise") return InitMode::Noise;
  if (s == "real-sample" || s == "real") return InitMode::RealSample;
  throw ConfigError("unknown synthetic init mode '" + s + "'");
}

/// Build the initial distilled set: ipc images per class, either i.i.d.
/// uniform noise or random per-class draws from the training split.
inline SyntheticDataset init_synthetic(const io::Dataset& T, i64 ipc,
                                       InitMode mode, std::uint64_t seed) {
  check(ipc >= 1, "init_synthetic: ipc must be >= 1");
  i64 classes = T.num_classes();
  i64 N = classes * ipc;
  check(N * 10 <= T.train.size(),
        "distilled set too large: |S|=" + std::to_string(N) +
            " exceeds 0.1 * |T|=" + std::to_string(T.train.size()));
  SyntheticDataset S;
  S.ipc = ipc;
  S.num_classes = classes;
  S.images = Tensor::leaf({N, 3, T.train.height, T.train.width});
  Rng rng = Rng::derive(seed, "synthetic/init");
  i64 row = 0;
  i64 n = 3 * T.train.height * T.train.width;
  for (i64 c = 0; c < classes; ++c) {
    std::vector<i64> members = T.train.indices_of_class(c);
    if (mode == InitMode::RealSample)
      check(i64(members.size()) >= ipc,
            "class " + std::to_string(c) + " has fewer than ipc samples");
    for (i64 k = 0; k < ipc; ++k, ++row) {
      S.labels.push_back(c);
      double* dst = S.images.data() + row * n;
      if (mode == InitMode::Noise) {
        for (i64 i = 0; i < n; ++i) dst[i] = rng.uniform();
      } else {
        i64 pick = members[std::size_t(rng.below(members.size()))];
        const std::uint8_t* src = T.train.pixels.data() + pick * n;
        for (i64 i = 0; i < n; ++i) dst[i] = double(src[i]) / 255.0;
      }
    }
  }
  S.provenance.seed = seed;
  return S;
}

// Distilled dataset container, version 1. Layout (little endian):
//   8 bytes  magic "MDDSYN1\0"
//   u32      header length, then header JSON
//            {"version":1,"config_hash":...,"provenance":{...},
//             "shape":[N,3,H,W],"ipc":...,"num_classes":...}
//   body     N*3*H*W float32 pixels, then N int64 labels
namespace detail {
constexpr char kSynMagic[8] = {'M', 'D', 'D', 'S', 'Y', 'N', '1', '\0'};
}

inline void save_synthetic(const SyntheticDataset& S, const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write distilled set: " + path);
    os.write(detail::kSynMagic, 8);
    nlohmann::json header;
    header["version"] = 1;
    header["config_hash"] = S.provenance.config_hash;
    header["provenance"] = {{"method", S.provenance.method},
                            {"components", S.provenance.components},
                            {"seed", S.provenance.seed}};
    header["shape"] = S.images.shape();
    header["ipc"] = S.ipc;
    header["num_classes"] = S.num_classes;
    std::string hs = header.dump();
    std::uint32_t hlen = std::uint32_t(hs.size());
    os.write(reinterpret_cast<const char*>(&hlen), 4);
    os.write(hs.data(), std::streamsize(hs.size()));
    std::vector<float> f(std::size_t(S.images.numel()));
    for (i64 i = 0; i < S.images.numel(); ++i)
      f[std::size_t(i)] = float(S.images.data()[i]);
    os.write(reinterpret_cast<const char*>(f.data()),
             std::streamsize(f.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(S.labels.data()),
             std::streamsize(S.labels.size() * sizeof(i64)));
    if (!os) throw IoError("failed writing distilled set: " + path);
  }
  fs::rename(tmp, p);  // atomic publish
}

inline SyntheticDataset load_synthetic(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open distilled set: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kSynMagic, 8) != 0)
    throw IoError("format: " + path + " is not a distilled-set container");
  std::uint32_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("version").get<int>() != 1)
    throw IoError("format: unsupported distilled-set version");
  SyntheticDataset S;
  Shape shape = header.at("shape").get<Shape>();
  S.ipc = header.at("ipc").get<i64>();
  S.num_classes = header.at("num_classes").get<i64>();
  S.provenance.config_hash = header.value("config_hash", "");
  S.provenance.method = header.at("provenance").at("method").get<std::string>();
  S.provenance.components =
      header.at("provenance").at("components").get<std::string>();
  S.provenance.seed = header.at("provenance").at("seed").get<std::uint64_t>();
  S.images = Tensor::leaf(shape);
  std::vector<float> f(std::size_t(numel_of(shape)));
  is.read(reinterpret_cast<char*>(f.data()),
          std::streamsize(f.size() * sizeof(float)));
  for (i64 i = 0; i < S.images.numel(); ++i)
    S.images.data()[i] = double(f[std::size_t(i)]);
  S.labels.resize(std::size_t(shape[0]));
  is.read(reinterpret_cast<char*>(S.labels.data()),
          std::streamsize(S.labels.size() * sizeof(i64)));
  if (!is) throw IoError("distilled set truncated: " + path);
  return S;
}

}  // namespace metadd::distill
