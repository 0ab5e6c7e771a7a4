#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "metadd/io/png.hpp"

namespace metadd::io {

// Minimal raster line plots for run reports: axes, tick labels with a 3x5
// digit font, one polyline per series. Colors cycle through a fixed palette;
// the caller writes a sidecar legend.

struct Series {
  std::string label;
  std::vector<double> xs;
  std::vector<double> ys;
};

namespace detail {

// 3x5 glyphs for 0-9, '.', '-', 'e'
inline const std::uint16_t* glyph(char c) {
  static const std::uint16_t digits[13][5] = {
      {0b111, 0b101, 0b101, 0b101, 0b111},  // 0
      {0b010, 0b110, 0b010, 0b010, 0b111},  // 1
      {0b111, 0b001, 0b111, 0b100, 0b111},  // 2
      {0b111, 0b001, 0b111, 0b001, 0b111},  // 3
      {0b101, 0b101, 0b111, 0b001, 0b001},  // 4
      {0b111, 0b100, 0b111, 0b001, 0b111},  // 5
      {0b111, 0b100, 0b111, 0b101, 0b111},  // 6
      {0b111, 0b001, 0b010, 0b010, 0b010},  // 7
      {0b111, 0b101, 0b111, 0b101, 0b111},  // 8
      {0b111, 0b101, 0b111, 0b001, 0b111},  // 9
      {0b000, 0b000, 0b000, 0b000, 0b010},  // .
      {0b000, 0b000, 0b111, 0b000, 0b000},  // -
      {0b111, 0b100, 0b110, 0b100, 0b111},  // e
  };
  if (c >= '0' && c <= '9') return digits[c - '0'];
  if (c == '.') return digits[10];
  if (c == '-') return digits[11];
  if (c == 'e' || c == 'E') return digits[12];
  return nullptr;
}

struct Canvas {
  i64 w, h;
  std::vector<std::uint8_t> px;  // RGB
  Canvas(i64 width, i64 height) : w(width), h(height), px(std::size_t(3 * w * h), 255) {}
  void set(i64 x, i64 y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    std::uint8_t* p = px.data() + 3 * (y * w + x);
    p[0] = r; p[1] = g; p[2] = b;
  }
  void line(i64 x0, i64 y0, i64 x1, i64 y1, std::uint8_t r, std::uint8_t g,
            std::uint8_t b) {
    i64 dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    i64 sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1, err = dx + dy;
    for (;;) {
      set(x0, y0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      i64 e2 = 2 * err;
      if (e2 >= dy) { err += dy; x0 += sx; }
      if (e2 <= dx) { err += dx; y0 += sy; }
    }
  }
  void text(i64 x, i64 y, const std::string& s) {
    for (char c : s) {
      const std::uint16_t* g = glyph(c);
      if (g) {
        for (int row = 0; row < 5; ++row)
          for (int col = 0; col < 3; ++col)
            if (g[row] >> (2 - col) & 1) set(x + col, y + row, 60, 60, 60);
      }
      x += 4;
    }
  }
};

inline std::string tick_label(double v) {
  char buf[32];
  if (v != 0 && (std::abs(v) >= 1e4 || std::abs(v) < 1e-3))
    std::snprintf(buf, sizeof(buf), "%.1e", v);
  else
    std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace detail

/// Render line series into a PNG and write a plain-text legend next to it.
inline void write_line_plot(const std::string& png_path,
                            const std::vector<Series>& series,
                            const std::string& x_label,
                            const std::string& y_label) {
  const i64 W = 640, H = 420, ML = 56, MR = 12, MT = 12, MB = 32;
  detail::Canvas cv(W, H);
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      xmin = std::min(xmin, s.xs[i]);
      xmax = std::max(xmax, s.xs[i]);
      ymin = std::min(ymin, s.ys[i]);
      ymax = std::max(ymax, s.ys[i]);
    }
  if (xmin > xmax) { xmin = 0; xmax = 1; }
  if (ymin > ymax) { ymin = 0; ymax = 1; }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) {
    return ML + i64((x - xmin) / (xmax - xmin) * double(W - ML - MR));
  };
  auto py = [&](double y) {
    return H - MB - i64((y - ymin) / (ymax - ymin) * double(H - MT - MB));
  };
  // axes + ticks
  cv.line(ML, MT, ML, H - MB, 0, 0, 0);
  cv.line(ML, H - MB, W - MR, H - MB, 0, 0, 0);
  for (int t = 0; t <= 4; ++t) {
    double xv = xmin + (xmax - xmin) * t / 4.0;
    double yv = ymin + (ymax - ymin) * t / 4.0;
    cv.line(px(xv), H - MB, px(xv), H - MB + 4, 0, 0, 0);
    cv.text(px(xv) - 8, H - MB + 7, detail::tick_label(xv));
    cv.line(ML - 4, py(yv), ML, py(yv), 0, 0, 0);
    cv.text(4, py(yv) - 2, detail::tick_label(yv));
  }
  static const std::uint8_t palette[6][3] = {{31, 119, 180}, {214, 39, 40},
                                             {44, 160, 44},  {255, 127, 14},
                                             {148, 103, 189}, {23, 190, 207}};
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& pal = palette[s % 6];
    const auto& sr = series[s];
    for (std::size_t i = 1; i < sr.xs.size(); ++i)
      cv.line(px(sr.xs[i - 1]), py(sr.ys[i - 1]), px(sr.xs[i]), py(sr.ys[i]),
              pal[0], pal[1], pal[2]);
  }
  PngImage img;
  img.width = W;
  img.height = H;
  img.channels = 3;
  img.data = std::move(cv.px);
  write_png(png_path, img);
  // sidecar legend
  std::ofstream legend(png_path + ".legend.txt");
  legend << "x: " << x_label << "\n" << "y: " << y_label << "\n";
  static const char* names[6] = {"blue", "red", "green", "orange", "purple", "cyan"};
  for (std::size_t s = 0; s < series.size(); ++s)
    legend << names[s % 6] << ": " << series[s].label << "\n";
}

}  // namespace metadd::io
