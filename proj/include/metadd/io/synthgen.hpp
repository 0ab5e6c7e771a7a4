#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>

#include "metadd/core/rng.hpp"
#include "metadd/io/dataset.hpp"

namespace metadd::io {

// Procedurally generated shape-classification corpus in the CIFAR record
// layout. Class identity is carried by geometry only (colors are random), so
// classifiers must attend to the shape region. Used as the desk-scale
// stand-in corpus when no real dataset is on disk.

namespace detail {

inline bool in_shape(i64 cls, double dy, double dx, double s) {
  double ax = std::abs(dx), ay = std::abs(dy);
  double r = std::sqrt(dx * dx + dy * dy);
  switch (cls % 10) {
    case 0: return r <= s;                                        // disk
    case 1: return (ax <= s / 3 || ay <= s / 3) && ax <= s && ay <= s;  // plus
    case 2: return dy >= -s && dy <= s && ax <= (dy + s) / 2;     // triangle
    case 3: return r <= s && r >= 0.55 * s;                       // ring
    case 4: return std::max(ax, ay) <= s && std::max(ax, ay) >= 0.6 * s;  // frame
    case 5: return std::abs(ax - ay) <= s / 4 && ax <= s && ay <= s;     // X
    case 6: return ax <= s && ay <= s && i64(std::floor((dx + s) / (s / 1.5))) % 2 == 0;  // bars
    case 7: return ax + ay <= s;                                  // diamond
    case 8: return ax <= s && ay <= s &&
                   (i64(std::floor((dx + s) / (s / 1.5))) + i64(std::floor((dy + s) / (s / 1.5)))) % 2 == 0;  // checker
    default: return ax <= s && ay <= s &&
                    std::fmod(dx + s, s / 1.5) < s / 3 && std::fmod(dy + s, s / 1.5) < s / 3;  // dots
  }
}

// Nuisance variation is kept mild on purpose: the corpus must stay learnable
// from a handful of images per class, or distilled-set evaluation cannot
// rise above chance at desk scale.
inline void render_sample(std::uint8_t* out, i64 res, i64 cls, Rng& rng) {
  double base = rng.uniform(0.38, 0.48);
  double gx = rng.uniform(-0.05, 0.05), gy = rng.uniform(-0.05, 0.05);
  double color[3];
  for (auto& c : color) c = rng.uniform(0.78, 1.0);  // bright shape, gray field
  double s = rng.uniform(0.20, 0.27) * double(res);
  double jitter = 0.09 * double(res);
  double cy = double(res) / 2 + rng.uniform(-jitter, jitter);
  double cx = double(res) / 2 + rng.uniform(-jitter, jitter);
  for (i64 y = 0; y < res; ++y)
    for (i64 x = 0; x < res; ++x) {
      bool inside = in_shape(cls, double(y) - cy, double(x) - cx, s);
      for (i64 ch = 0; ch < 3; ++ch) {
        double v;
        if (inside) {
          v = color[ch] + rng.uniform(-0.03, 0.03);
        } else {
          v = base + gx * (double(x) / res - 0.5) + gy * (double(y) / res - 0.5) +
              rng.uniform(-0.04, 0.04);
        }
        v = std::min(1.0, std::max(0.0, v));
        out[(ch * res + y) * res + x] = std::uint8_t(std::lround(v * 255.0));
      }
    }
}

inline Split generate_split(i64 classes, i64 per_class, i64 res, Rng& rng) {
  Split sp;
  sp.height = sp.width = res;
  sp.pixels.resize(std::size_t(classes * per_class * 3 * res * res));
  sp.labels.reserve(std::size_t(classes * per_class));
  // interleave classes so truncated prefixes stay balanced
  i64 n = 0;
  for (i64 i = 0; i < per_class; ++i)
    for (i64 c = 0; c < classes; ++c) {
      render_sample(sp.pixels.data() + n * 3 * res * res, res, c, rng);
      sp.labels.push_back(c);
      ++n;
    }
  return sp;
}

}  // namespace detail

inline Dataset generate_shapes_dataset(i64 classes, i64 train_per_class,
                                       i64 val_per_class, i64 resolution,
                                       std::uint64_t seed) {
  check(classes >= 2 && classes <= 10, "shapes corpus supports 2..10 classes");
  static const char* kNames[10] = {"disk", "plus",    "triangle", "ring",
                                   "frame", "xcross", "bars",     "diamond",
                                   "checker", "dots"};
  Dataset ds;
  ds.id = "shapes" + std::to_string(classes);
  for (i64 c = 0; c < classes; ++c) ds.class_names.push_back(kNames[c]);
  Rng rt = Rng::derive(seed, "shapes/train");
  Rng rv = Rng::derive(seed, "shapes/val");
  ds.train = detail::generate_split(classes, train_per_class, resolution, rt);
  ds.val = detail::generate_split(classes, val_per_class, resolution, rv);
  return ds;
}

/// Write a dataset (32x32 RGB, up to 10 classes) in the CIFAR binary batch
/// layout so it can be re-read through the standard ingestion path.
inline void write_cifar_layout(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  check(ds.train.height == 32 && ds.train.width == 32,
        "CIFAR layout requires 32x32 images");
  fs::create_directories(dir);
  auto write_split = [](const Split& sp, const fs::path& root,
                        const std::string& stem, i64 per_file) {
    i64 n = sp.size();
    i64 files = std::max<i64>(1, (n + per_file - 1) / per_file);
    i64 rec = 0;
    for (i64 f = 0; f < files; ++f) {
      fs::path name = root / (files == 1 && stem == "test_batch"
                                  ? stem + ".bin"
                                  : stem + (stem == "test_batch"
                                                ? std::string(".bin")
                                                : "_" + std::to_string(f + 1) + ".bin"));
      std::ofstream out(name, std::ios::binary);
      for (i64 i = 0; i < per_file && rec < n; ++i, ++rec) {
        std::uint8_t label = std::uint8_t(sp.labels[std::size_t(rec)]);
        out.write(reinterpret_cast<const char*>(&label), 1);
        out.write(reinterpret_cast<const char*>(sp.pixels.data() +
                                                 rec * sp.image_numel()),
                  sp.image_numel());
      }
    }
  };
  write_split(ds.train, dir, "data_batch", 10000);
  write_split(ds.val, dir, "test_batch", ds.val.size() > 0 ? ds.val.size() : 1);
}

}  // namespace metadd::io
