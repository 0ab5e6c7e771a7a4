#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "metadd/core/ops.hpp"
#include "metadd/core/sha256.hpp"
#include "metadd/io/png.hpp"

namespace metadd::io {

namespace fs = std::filesystem;

/// One split of a labeled image dataset. Pixels are stored as bytes and
/// materialized to [0,1] doubles per batch.
struct Split {
  i64 channels = 3;
  i64 height = 0;
  i64 width = 0;
  std::vector<std::uint8_t> pixels;  // N * C * H * W
  std::vector<i64> labels;

  i64 size() const { return i64(labels.size()); }
  i64 image_numel() const { return channels * height * width; }

  /// Materialize the given sample indices as a [B,C,H,W] tensor in [0,1].
  Tensor batch(const std::vector<i64>& indices) const {
    i64 B = i64(indices.size());
    Tensor t = Tensor::leaf({B, channels, height, width});
    double* o = t.data();
    i64 n = image_numel();
    for (i64 b = 0; b < B; ++b) {
      const std::uint8_t* src = pixels.data() + indices[std::size_t(b)] * n;
      for (i64 i = 0; i < n; ++i) o[b * n + i] = double(src[i]) / 255.0;
    }
    return t;
  }

  std::vector<i64> batch_labels(const std::vector<i64>& indices) const {
    std::vector<i64> out;
    out.reserve(indices.size());
    for (i64 i : indices) out.push_back(labels[std::size_t(i)]);
    return out;
  }

  /// Per-channel mean pixel value in [0,1].
  std::vector<double> channel_means() const {
    std::vector<double> m(std::size_t(channels), 0.0);
    i64 plane = height * width;
    for (i64 s = 0; s < size(); ++s)
      for (i64 c = 0; c < channels; ++c) {
        const std::uint8_t* p = pixels.data() + (s * channels + c) * plane;
        double acc = 0;
        for (i64 i = 0; i < plane; ++i) acc += p[i];
        m[std::size_t(c)] += acc / double(plane);
      }
    for (auto& v : m) v /= 255.0 * double(std::max<i64>(1, size()));
    return m;
  }

  std::vector<i64> indices_of_class(i64 cls) const {
    std::vector<i64> out;
    for (i64 i = 0; i < size(); ++i)
      if (labels[std::size_t(i)] == cls) out.push_back(i);
    return out;
  }
};

struct Dataset {
  std::string id;
  std::vector<std::string> class_names;
  Split train;
  Split val;

  i64 num_classes() const { return i64(class_names.size()); }
};

namespace detail {

constexpr i64 kCifarSide = 32;
constexpr i64 kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

inline void read_cifar_file(const fs::path& file, Split& split) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open " + file.string());
  in.seekg(0, std::ios::end);
  i64 bytes = i64(in.tellg());
  in.seekg(0);
  if (bytes % kCifarRecord != 0)
    throw DataError("integrity: " + file.string() + " size " +
                    std::to_string(bytes) + " is not a multiple of " +
                    std::to_string(kCifarRecord) + "-byte records");
  i64 n = bytes / kCifarRecord;
  std::vector<std::uint8_t> rec(static_cast<std::size_t>(kCifarRecord));
  for (i64 i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()), kCifarRecord);
    if (!in) throw DataError("short read in " + file.string());
    split.labels.push_back(i64(rec[0]));
    split.pixels.insert(split.pixels.end(), rec.begin() + 1, rec.end());
  }
}

inline std::string expected_cifar_layout() {
  return "expected layout: <root>/data_batch_1.bin .. data_batch_5.bin and "
         "test_batch.bin (or <root>/cifar-10-batches-bin/ containing them), "
         "records of 1 label byte + 3072 pixel bytes; or an image-folder tree "
         "<root>/train/<class>/*.png and <root>/val/<class>/*.png";
}

inline void verify_checksums(const fs::path& root) {
  fs::path list = root / "checksums.sha256";
  if (!fs::exists(list)) return;
  std::ifstream in(list);
  std::string hex, name;
  while (in >> hex >> name) {
    fs::path f = root / name;
    if (!fs::exists(f)) throw DataError("integrity: missing " + f.string());
    std::ifstream ff(f, std::ios::binary);
    std::vector<char> buf((std::istreambuf_iterator<char>(ff)),
                          std::istreambuf_iterator<char>());
    if (sha256_hex(buf.data(), buf.size()) != hex)
      throw DataError("integrity: checksum mismatch for " + f.string());
  }
}

inline const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names = {
      "airplane", "automobile", "bird",  "cat",  "deer",
      "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

inline Dataset load_cifar_binary(const fs::path& root) {
  Dataset ds;
  ds.id = "cifar10";
  ds.class_names = cifar10_class_names();
  ds.train.height = ds.train.width = kCifarSide;
  ds.val.height = ds.val.width = kCifarSide;
  verify_checksums(root);
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i) {
    fs::path f = root / ("data_batch_" + std::to_string(i) + ".bin");
    if (fs::exists(f)) train_files.push_back(f);
  }
  if (train_files.empty()) {
    // single-file layout
    if (fs::exists(root / "train.bin")) train_files.push_back(root / "train.bin");
  }
  fs::path test_file = root / "test_batch.bin";
  if (!fs::exists(test_file) && fs::exists(root / "test.bin"))
    test_file = root / "test.bin";
  if (train_files.empty() || !fs::exists(test_file))
    throw DataError("missing CIFAR files under " + root.string() + "; " +
                    expected_cifar_layout());
  for (const auto& f : train_files) read_cifar_file(f, ds.train);
  read_cifar_file(test_file, ds.val);
  return ds;
}

inline Split load_folder_split(const fs::path& dir,
                               const std::vector<std::string>& classes) {
  Split split;
  bool first = true;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    fs::path cdir = dir / classes[c];
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cdir))
      if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      PngImage img = read_png(f.string());
      if (first) {
        split.height = img.height;
        split.width = img.width;
        first = false;
      }
      if (img.height != split.height || img.width != split.width)
        throw DataError("image size mismatch in " + f.string());
      // interleaved RGB -> planar CHW
      i64 plane = split.height * split.width;
      std::size_t base = split.pixels.size();
      split.pixels.resize(base + std::size_t(3 * plane));
      for (i64 i = 0; i < plane; ++i)
        for (i64 ch = 0; ch < 3; ++ch)
          split.pixels[base + std::size_t(ch * plane + i)] =
              img.channels == 3 ? img.data[std::size_t(3 * i + ch)]
                                : img.data[std::size_t(i)];
      split.labels.push_back(i64(c));
    }
  }
  return split;
}

inline Dataset load_image_folder(const fs::path& root) {
  fs::path train_dir = root / "train", val_dir = root / "val";
  if (!fs::exists(train_dir) || !fs::exists(val_dir))
    throw DataError("missing train/ or val/ under " + root.string() + "; " +
                    expected_cifar_layout());
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(train_dir))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DataError("no class folders in " + train_dir.string());
  Dataset ds;
  ds.id = root.filename().string();
  ds.class_names = classes;
  ds.train = load_folder_split(train_dir, classes);
  ds.val = load_folder_split(val_dir, classes);
  return ds;
}

inline Split filter_split(const Split& in, const std::vector<i64>& keep) {
  // keep[i] = original class id; output labels are remapped to 0..k-1
  std::map<i64, i64> remap;
  for (std::size_t i = 0; i < keep.size(); ++i) remap[keep[i]] = i64(i);
  Split out;
  out.channels = in.channels;
  out.height = in.height;
  out.width = in.width;
  i64 n = in.image_numel();
  for (i64 s = 0; s < in.size(); ++s) {
    auto it = remap.find(in.labels[std::size_t(s)]);
    if (it == remap.end()) continue;
    out.labels.push_back(it->second);
    const std::uint8_t* src = in.pixels.data() + s * n;
    out.pixels.insert(out.pixels.end(), src, src + n);
  }
  return out;
}

}  // namespace detail

/// Load a dataset by name/root and optionally restrict it to a class subset
/// (names or indices). CIFAR binary batches and PNG image-folder trees are
/// understood. A present-but-empty subset is rejected; omit it to keep all
/// classes.
inline Dataset ingest_dataset(
    const std::string& name, const std::string& root,
    const std::optional<std::vector<std::string>>& subset = std::nullopt) {
  if (subset.has_value() && subset->empty())
    throw ContractError("class subset must not be empty when given");
  const std::vector<std::string> class_subset =
      subset.has_value() ? *subset : std::vector<std::string>{};
  fs::path r(root);
  if (!fs::exists(r))
    throw DataError("dataset root not found: " + root + "; " +
                    detail::expected_cifar_layout());
  if (fs::exists(r / "cifar-10-batches-bin")) r = r / "cifar-10-batches-bin";
  Dataset ds;
  bool cifar_like = fs::exists(r / "data_batch_1.bin") ||
                    fs::exists(r / "train.bin");
  if (cifar_like)
    ds = detail::load_cifar_binary(r);
  else
    ds = detail::load_image_folder(r);
  if (!name.empty()) ds.id = name;

  if (!class_subset.empty()) {
    std::vector<i64> keep;
    std::vector<std::string> kept_names;
    for (const auto& c : class_subset) {
      auto it = std::find(ds.class_names.begin(), ds.class_names.end(), c);
      i64 idx;
      if (it != ds.class_names.end()) {
        idx = it - ds.class_names.begin();
      } else {
        try {
          idx = std::stol(c);
        } catch (...) {
          throw ConfigError("unknown class '" + c + "' in subset");
        }
        if (idx < 0 || idx >= ds.num_classes())
          throw ConfigError("class index out of range in subset: " + c);
      }
      keep.push_back(idx);
      kept_names.push_back(ds.class_names[std::size_t(idx)]);
    }
    ds.train = detail::filter_split(ds.train, keep);
    ds.val = detail::filter_split(ds.val, keep);
    ds.class_names = kept_names;
    std::string suffix;
    for (const auto& c : kept_names) suffix += "-" + c;
    ds.id += suffix;
  }
  if (ds.num_classes() == 0 || ds.train.size() == 0)
    throw ContractError("dataset has no classes or no training samples");
  return ds;
}

}  // namespace metadd::io
