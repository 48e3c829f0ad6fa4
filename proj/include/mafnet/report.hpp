#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "training.hpp"

namespace mafnet {

// 8-bit image, 1 (gray) or 3 (RGB) channels, row-major.
struct Image8 {
  int width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c, std::uint8_t fill = 255)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  void set(int x, int y, std::array<std::uint8_t, 3> rgb) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &pixels[(static_cast<std::size_t>(y) * width + x) * channels];
    for (int c = 0; c < channels; ++c) p[c] = rgb[c];
  }
  // Copies `src` (same channel count) with its top-left corner at (x0, y0).
  void paste(const Image8& src, int x0, int y0) {
    require(src.channels == channels, ErrorCode::ShapeMismatch, "paste: channel mismatch");
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        if (x0 + x >= width || y0 + y >= height) continue;
        std::copy_n(&src.pixels[(static_cast<std::size_t>(y) * src.width + x) * channels], channels,
                    &pixels[(static_cast<std::size_t>(y0 + y) * width + x0 + x) * channels]);
      }
  }
};

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  require(img.channels == 1 || img.channels == 3, ErrorCode::ShapeMismatch, "write_png: 1 or 3 channels");
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  require(f != nullptr, ErrorCode::Io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    fail(ErrorCode::Io, "libpng failed writing " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

inline Image8 read_png(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  require(f != nullptr, ErrorCode::Io, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    fail(ErrorCode::Io, "libpng failed reading " + path.string());
  }
  png_init_io(png, f);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_read_update_info(png, info);
  Image8 img(static_cast<int>(png_get_image_width(png, info)), static_cast<int>(png_get_image_height(png, info)),
             png_get_channels(png, info));
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + y * stride, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(f);
  return img;
}

// [-1, 1] intensities to gray levels, clamped.
inline Image8 gray_from_unit_range(std::span<const float> v, int w, int h) {
  Image8 img(w, h, 1);
  for (std::size_t i = 0; i < v.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp((v[i] + 1.0f) * 127.5f, 0.0f, 255.0f)));
  return img;
}

// Perceptually ordered dark-blue -> yellow ramp for t in [0, 1].
inline std::array<std::uint8_t, 3> heat_color(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c) out[c] = static_cast<std::uint8_t>(std::lround(stops[i][c] * (1 - f) + stops[i + 1][c] * f));
  return out;
}

inline Image8 heatmap(std::span<const float> v, int w, int h, int scale) {
  Image8 img(w * scale, h * scale, 3);
  for (int y = 0; y < h * scale; ++y)
    for (int x = 0; x < w * scale; ++x) img.set(x, y, heat_color(v[(y / scale) * w + x / scale]));
  return img;
}

inline void draw_line(Image8& img, int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    img.set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) err += dy, x0 += sx;
    if (e2 <= dx) err += dx, y0 += sy;
  }
}

// Line plot of one series inside a framed box; the y range is the series'
// own min/max.
inline Image8 plot_series(std::span<const double> ys, int width = 640, int height = 360) {
  Image8 img(width, height, 3, 255);
  const int l = 40, r = width - 20, t = 20, b = height - 30;
  const std::array<std::uint8_t, 3> frame{90, 90, 90}, line{31, 119, 180};
  draw_line(img, l, t, r, t, frame);
  draw_line(img, l, b, r, b, frame);
  draw_line(img, l, t, l, b, frame);
  draw_line(img, r, t, r, b, frame);
  if (ys.empty()) return img;
  auto [lo_it, hi_it] = std::minmax_element(ys.begin(), ys.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  auto px = [&](std::size_t i) {
    return ys.size() == 1 ? (l + r) / 2 : l + static_cast<int>(std::lround((r - l) * static_cast<double>(i) / (ys.size() - 1)));
  };
  auto py = [&](double v) { return b - static_cast<int>(std::lround((b - t) * (v - lo) / (hi - lo))); };
  for (std::size_t i = 1; i < ys.size(); ++i) draw_line(img, px(i - 1), py(ys[i - 1]), px(i), py(ys[i]), line);
  if (ys.size() == 1) img.set(px(0), py(ys[0]), line);
  return img;
}

// ---------------------------------------------------------------------------
// Tables

inline std::string format_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string markdown_tables(const MetricsSummary& s, const std::string& method = "This run") {
  std::ostringstream os;
  os << "## Segmentation\n\n";
  os << "| Method | WT Dice | WT ASSD | ET Dice | ET ASSD | TC Dice | TC ASSD |\n";
  os << "|---|---|---|---|---|---|---|\n";
  os << "| " << method;
  for (int k = 0; k < 3; ++k) {  // WT, ET, TC
    os << " | " << format_fixed(100.0 * s.dice_mean[k], 1) << "%";
    os << " | " << (s.assd_mean[k] ? format_fixed(*s.assd_mean[k], 3) : std::string("n/a"));
  }
  os << " |\n\n";
  os << "## Synthesis\n\n";
  os << "| Method | SSIM | PSNR (dB) |\n";
  os << "|---|---|---|\n";
  os << "| " << method << " | " << (s.ssim_mean ? format_fixed(*s.ssim_mean, 4) : std::string("n/a")) << " | "
     << (s.psnr_mean ? format_fixed(*s.psnr_mean, 2) : std::string("n/a")) << " |\n\n";
  os << "Slices: " << s.slices << ". ASSD in " << s.assd_unit << "; slices where a region is empty in the prediction "
     << "or the reference are left out of its ASSD mean (WT " << s.assd_undefined[0] << ", ET "
     << s.assd_undefined[1] << ", TC " << s.assd_undefined[2] << "). PSNR is capped at "
     << format_fixed(kPsnrCap, 0) << " dB per slice.\n\n";
  os << "Reference anchors (BraTS 2020, full-scale training): SSIM 0.8879, PSNR 22.78 dB; "
        "Dice WT 88.0%, ET 41.8%, TC 67.9%. Desk-scale phantom runs are not comparable to these.\n";
  return os.str();
}

// metrics.csv, metrics.json and table.md for one evaluation.
inline MetricsSummary write_metrics_outputs(const MetricsReport& rep, const std::filesystem::path& dir,
                                            const std::string& method = "This run") {
  std::filesystem::create_directories(dir);
  const auto s = rep.summary();
  {
    std::ofstream f(dir / "metrics.csv");
    require(static_cast<bool>(f), ErrorCode::Io, "cannot write metrics.csv");
    f << to_csv(rep);
  }
  {
    std::ofstream f(dir / "metrics.json");
    f << to_json(s).dump(2) << '\n';
  }
  {
    std::ofstream f(dir / "table.md");
    f << markdown_tables(s, method);
  }
  return s;
}

// ---------------------------------------------------------------------------
// History figures

inline std::vector<StepRecord> read_history(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot open " + path.string());
  std::vector<StepRecord> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(f, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line).get<StepRecord>());
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptFile, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  require(!out.empty(), ErrorCode::EmptyHistory, path.string() + " holds no step records");
  return out;
}

// Every loss term that appears in at least one record, as a per-step series
// (NaN where a step did not log the term).
inline std::vector<std::pair<std::string, std::vector<double>>> loss_series(const std::vector<StepRecord>& h) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_x = 0;
  bool any_y = false, any_seg = false;
  for (const auto& r : h) {
    n_x = std::max(n_x, r.nce_x.size());
    any_y = any_y || r.nce_y.has_value();
    any_seg = any_seg || r.seg.has_value();
  }
  std::vector<std::pair<std::string, std::vector<double>>> out;
  auto add = [&](const std::string& name, auto get) {
    std::vector<double> v;
    for (const auto& r : h) v.push_back(get(r));
    out.emplace_back(name, std::move(v));
  };
  add("d", [](const StepRecord& r) { return r.d; });
  add("gan", [](const StepRecord& r) { return r.gan; });
  for (std::size_t i = 0; i < n_x; ++i)
    add("nce_x" + std::to_string(i + 1), [i, nan](const StepRecord& r) { return i < r.nce_x.size() ? r.nce_x[i] : nan; });
  if (any_y) add("nce_y", [nan](const StepRecord& r) { return r.nce_y.value_or(nan); });
  add("syn", [](const StepRecord& r) { return r.syn; });
  if (any_seg) add("seg", [nan](const StepRecord& r) { return r.seg.value_or(nan); });
  add("total", [](const StepRecord& r) { return r.total; });
  return out;
}

}  // namespace mafnet
