#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "metadd/core/common.hpp"

namespace metadd::io {

struct PngImage {
  i64 width = 0;
  i64 height = 0;
  i64 channels = 0;                 // 1 or 3
  std::vector<std::uint8_t> data;   // row-major, interleaved
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png(const std::string& path, const PngImage& img,
                      int bit_depth = 8) {
  check(img.channels == 1 || img.channels == 3, "png: 1 or 3 channels");
  check(bit_depth == 8 || (bit_depth == 1 && img.channels == 1),
        "png: bit depth 1 is grayscale only");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failure: " + path);
  }
  png_init_io(png, fp.get());
  int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height),
               bit_depth, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_BASE,
               PNG_FILTER_TYPE_BASE);
  png_write_info(png, info);
  if (bit_depth == 1) png_set_packing(png);  // accept 1 byte per pixel input
  std::vector<png_bytep> rows(std::size_t(img.height));
  for (i64 y = 0; y < img.height; ++y)
    rows[std::size_t(y)] = const_cast<png_bytep>(
        img.data.data() + y * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline PngImage read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open for reading: " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw IoError("not a PNG file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng read failure: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  PngImage img;
  img.width = i64(png_get_image_width(png, info));
  img.height = i64(png_get_image_height(png, info));
  int color = png_get_color_type(png, info);
  img.channels = (color == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
  img.data.resize(std::size_t(img.width * img.height * img.channels));
  std::vector<png_bytep> rows(std::size_t(img.height));
  for (i64 y = 0; y < img.height; ++y)
    rows[std::size_t(y)] = img.data.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace metadd::io
