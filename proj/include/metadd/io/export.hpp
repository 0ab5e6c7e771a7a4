#pragma once

#include "metadd/io/manifest.hpp"
#include "metadd/io/png.hpp"
#include "metadd/losses/losses.hpp"
#include "metadd/meta/masks.hpp"

namespace metadd::io {

/// Grayscale activation-map image: the map is already normalized to [0,1].
inline void write_cam_png(const std::string& path, const Tensor& normalized) {
  PngImage img;
  img.width = normalized.dim(1);
  img.height = normalized.dim(0);
  img.channels = 1;
  img.data.resize(std::size_t(normalized.numel()));
  for (i64 i = 0; i < normalized.numel(); ++i)
    img.data[std::size_t(i)] =
        std::uint8_t(std::lround(255.0 * std::min(1.0, std::max(0.0, normalized.data()[i]))));
  write_png(path, img);
}

inline void write_mask_png(const std::string& path, const meta::BinaryMask& m) {
  PngImage img;
  img.width = m.width;
  img.height = m.height;
  img.channels = 1;
  img.data.resize(m.values.size());
  for (std::size_t i = 0; i < m.values.size(); ++i)
    img.data[i] = m.values[i];  // packed to 1 bit by the encoder
  write_png(path, img, /*bit_depth=*/1);
}

inline void write_rgb_image_png(const std::string& path, const Tensor& chw) {
  check(chw.ndim() == 3 && chw.dim(0) == 3, "expected [3,H,W] image");
  PngImage img;
  img.width = chw.dim(2);
  img.height = chw.dim(1);
  img.channels = 3;
  i64 plane = img.width * img.height;
  img.data.resize(std::size_t(3 * plane));
  for (i64 i = 0; i < plane; ++i)
    for (i64 c = 0; c < 3; ++c)
      img.data[std::size_t(3 * i + c)] = std::uint8_t(std::lround(
          255.0 * std::min(1.0, std::max(0.0, chw.data()[c * plane + i]))));
  write_png(path, img);
}

/// Export per-(sample, architecture) map images and per-sample mask images
/// for a batch of images under the pool, with JSON sidecar manifests.
inline void export_cams_and_masks(const std::string& dir,
                                  const zoo::AuxiliaryPool& pool,
                                  const Tensor& images,
                                  const std::vector<i64>& labels,
                                  i64 first_sample_id = 0) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Tensor x = images.clone(true);
  auto ctx = losses::ai_loss(pool, x, labels);
  auto cams = cam::compute_pool_cams(ctx, images.dim(2), images.dim(3), false);
  for (i64 b = 0; b < images.dim(0); ++b) {
    i64 sid = first_sample_id + b;
    auto stack = cams.stack_for_sample(b);
    meta::BinaryMask mu = meta::meta_mask(stack);
    std::string base = dir + "/sample" + std::to_string(sid);
    write_rgb_image_png(base + ".png",
                        reshape(slice(images, 0, b, 1),
                                {3, images.dim(2), images.dim(3)}));
    for (i64 m = 0; m < stack.M(); ++m) {
      std::string arch = stack.arch_ids[std::size_t(m)];
      std::string cam_path = base + ".cam." + arch + ".png";
      write_cam_png(cam_path, stack.maps[std::size_t(m)]);
      nlohmann::json side = {
          {"sample_id", sid},
          {"arch_id", arch},
          {"pre_normalization_min", stack.min_max[std::size_t(m)].first},
          {"pre_normalization_max", stack.min_max[std::size_t(m)].second}};
      std::ofstream(cam_path + ".json") << side.dump(2) << "\n";
      meta::BinaryMask beta = meta::hetero_mask(stack, m, mu);
      std::string mask_path = base + ".hetero." + arch + ".png";
      write_mask_png(mask_path, beta);
      std::ofstream(mask_path + ".json")
          << nlohmann::json({{"kind", "heterogeneous"},
                             {"source", arch},
                             {"threshold", 0.5}})
                 .dump(2)
          << "\n";
    }
    std::string mu_path = base + ".meta.png";
    write_mask_png(mu_path, mu);
    std::ofstream(mu_path + ".json")
        << nlohmann::json(
               {{"kind", "meta"}, {"source", mu.source}, {"threshold", 0.5}})
               .dump(2)
        << "\n";
  }
}

}  // namespace metadd::io
