#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "json.hpp"

namespace mafnet {

inline constexpr double kPsnrCap = 99.0;

struct ImageView {
  std::span<const float> pixels;
  int height = 0, width = 0;
};

namespace metrics_detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0;
  for (int i = 0; i < size; ++i) s += (w[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma)));
  for (auto& v : w) v /= s;
  return w;
}

// Separable weighted filter restricted to fully contained windows.
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ho = h - n + 1, wo = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo, 0.0), out(static_cast<std::size_t>(ho) * wo, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * img[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

inline void require_same(const ImageView& a, const ImageView& b, const char* what) {
  require(a.height == b.height && a.width == b.width &&
              a.pixels.size() == static_cast<std::size_t>(a.height) * a.width && b.pixels.size() == a.pixels.size(),
          ErrorCode::ShapeMismatch, std::string(what) + ": image shapes differ");
}

}  // namespace metrics_detail

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1 = (0.01 R)^2,
// C2 = (0.03 R)^2, averaged over all fully contained window positions.
inline double ssim(const ImageView& a, const ImageView& b, double dynamic_range) {
  metrics_detail::require_same(a, b, "ssim");
  require(dynamic_range > 0, ErrorCode::BadConfig, "ssim: dynamic range must be positive");
  constexpr int kWin = 11;
  require(a.height >= kWin && a.width >= kWin, ErrorCode::ShapeMismatch, "ssim: image smaller than 11x11 window");
  const auto k = metrics_detail::gaussian_window(kWin, 1.5);
  const std::size_t n = a.pixels.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a.pixels[i];
    y[i] = b.pixels[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const int h = a.height, w = a.width;
  const auto mx = metrics_detail::filter_valid(x, h, w, k), my = metrics_detail::filter_valid(y, h, w, k);
  const auto mxx = metrics_detail::filter_valid(xx, h, w, k), myy = metrics_detail::filter_valid(yy, h, w, k);
  const auto mxy = metrics_detail::filter_valid(xy, h, w, k);
  const double c1 = std::pow(0.01 * dynamic_range, 2), c2 = std::pow(0.03 * dynamic_range, 2);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

// 10 log10(R^2 / MSE); +inf for identical images.
inline double psnr(const ImageView& a, const ImageView& b, double dynamic_range) {
  metrics_detail::require_same(a, b, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(dynamic_range * dynamic_range / mse);
}

inline double psnr_from_mse(double mse, double dynamic_range) {
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(dynamic_range * dynamic_range / mse);
}

inline double capped_psnr(double v) { return std::min(v, kPsnrCap); }

// 2|P ∩ G| / (|P| + |G|); 1 when both are empty.
inline double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  require(pred.size() == gt.size(), ErrorCode::ShapeMismatch, "dice: mask sizes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p += pred[i] != 0;
    g += gt[i] != 0;
    both += pred[i] != 0 && gt[i] != 0;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

// Mask pixels with at least one 4-neighbour outside the mask (the image
// border counts as outside).
inline Mask surface(std::span<const std::uint8_t> mask, int h, int w) {
  Mask out(mask.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!mask[i]) continue;
      const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1 || !mask[i - w] || !mask[i + w] ||
                        !mask[i - 1] || !mask[i + 1];
      out[i] = edge;
    }
  return out;
}

namespace metrics_detail {

// 1D squared distance transform (lower envelope of parabolas) with sample
// spacing `step`. f holds 0 at sites and +inf elsewhere (or partial results).
inline void edt_1d(std::vector<double>& f, double step) {
  const int n = static_cast<int>(f.size());
  std::vector<double> d(f.size());
  std::vector<int> v(f.size());
  std::vector<double> z(f.size() + 1);
  int k = -1;
  const double inf = std::numeric_limits<double>::infinity();
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * step;
    while (k >= 0) {
      const double pv = v[k] * step;
      const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2 * (pq - pv));
      if (s <= z[k]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    if (k == 0) {
      z[k] = -inf;
    } else {
      const double pv = v[k - 1] * step;
      z[k] = ((f[q] + pq * pq) - (f[v[k - 1]] + pv * pv)) / (2 * (pq - pv));
    }
    z[k + 1] = inf;
  }
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double pq = q * step;
    while (z[j + 1] < pq) ++j;
    const double pv = v[j] * step;
    d[q] = (pq - pv) * (pq - pv) + f[v[j]];
  }
  f = std::move(d);
}

}  // namespace metrics_detail

// Exact squared Euclidean distance from every pixel to the nearest site.
inline std::vector<double> squared_distance_to(std::span<const std::uint8_t> sites, int h, int w,
                                               std::array<double, 2> spacing) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
  std::vector<double> line;
  for (int x = 0; x < w; ++x) {
    line.resize(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) line[y] = g[static_cast<std::size_t>(y) * w + x];
    metrics_detail::edt_1d(line, spacing[0]);
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = line[y];
  }
  for (int y = 0; y < h; ++y) {
    line.assign(g.begin() + static_cast<std::ptrdiff_t>(y) * w, g.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
    metrics_detail::edt_1d(line, spacing[1]);
    std::copy(line.begin(), line.end(), g.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  return g;
}

// Average symmetric surface distance; nullopt if either mask is empty.
// spacing = {row (y) spacing, column (x) spacing}.
inline std::optional<double> assd(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int h, int w,
                                  std::array<double, 2> spacing = {1.0, 1.0}) {
  require(pred.size() == gt.size() && pred.size() == static_cast<std::size_t>(h) * w, ErrorCode::ShapeMismatch,
          "assd: mask sizes differ");
  const auto sp = surface(pred, h, w), sg = surface(gt, h, w);
  const auto np = std::count(sp.begin(), sp.end(), 1), ng = std::count(sg.begin(), sg.end(), 1);
  if (np == 0 || ng == 0) return std::nullopt;
  const auto dp = squared_distance_to(sg, h, w, spacing);  // distance to G's surface
  const auto dg = squared_distance_to(sp, h, w, spacing);
  double total = 0;
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i]) total += std::sqrt(dp[i]);
    if (sg[i]) total += std::sqrt(dg[i]);
  }
  return total / static_cast<double>(np + ng);
}

// 4-connected components; keeps the largest (earliest in raster order on ties).
inline Mask keep_largest_component(std::span<const std::uint8_t> mask, int h, int w) {
  require(mask.size() == static_cast<std::size_t>(h) * w, ErrorCode::ShapeMismatch, "keep_largest_component: size");
  std::vector<int> label(mask.size(), 0);
  int next = 0, best = 0;
  std::size_t best_size = 0;
  std::vector<std::size_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || label[start]) continue;
    label[start] = ++next;
    queue.assign(1, start);
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t i = queue[head];
      const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
      auto visit = [&](std::size_t j) {
        if (mask[j] && !label[j]) {
          label[j] = next;
          queue.push_back(j);
        }
      };
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
    }
    if (queue.size() > best_size) {
      best_size = queue.size();
      best = next;
    }
  }
  Mask out(mask.size(), 0);
  if (best == 0) return out;
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = label[i] == best;
  return out;
}

// ---------------------------------------------------------------------------

enum class Region { WT = 0, ET = 1, TC = 2 };
inline constexpr std::array<const char*, 3> kRegionNames{"WT", "ET", "TC"};

struct SliceReport {
  std::string case_id;
  int z = 0;
  std::array<double, 3> dice{};                 // WT, ET, TC
  std::array<std::optional<double>, 3> assd{};  // nullopt when undefined
  std::optional<double> ssim;
  std::optional<double> psnr;  // +inf for a perfect synthesis
};

struct EvalOptions {
  std::array<double, 2> spacing{1.0, 1.0};
  double dynamic_range = 2.0;  // images normalized to [-1, 1]
};

// Regions for both maps; largest-component cleanup on the predicted WT only.
inline SliceReport evaluate_slice(std::span<const std::uint8_t> pred_classes, std::span<const std::uint8_t> gt_classes,
                                  int h, int w, std::optional<std::span<const float>> synth = std::nullopt,
                                  std::optional<std::span<const float>> real_t1ce = std::nullopt,
                                  const EvalOptions& opts = {}) {
  require(pred_classes.size() == gt_classes.size() && pred_classes.size() == static_cast<std::size_t>(h) * w,
          ErrorCode::ShapeMismatch, "evaluate_slice: class map sizes differ");
  auto pr = compose_regions(pred_classes);
  const auto gr = compose_regions(gt_classes);
  pr.wt = keep_largest_component(pr.wt, h, w);
  SliceReport r;
  const std::array<const Mask*, 3> p{&pr.wt, &pr.et, &pr.tc}, g{&gr.wt, &gr.et, &gr.tc};
  for (int k = 0; k < 3; ++k) {
    r.dice[k] = dice(*p[k], *g[k]);
    r.assd[k] = assd(*p[k], *g[k], h, w, opts.spacing);
  }
  if (synth && real_t1ce) {
    const ImageView a{*synth, h, w}, b{*real_t1ce, h, w};
    r.ssim = ssim(a, b, opts.dynamic_range);
    r.psnr = psnr(a, b, opts.dynamic_range);
  }
  return r;
}

struct MetricsSummary {
  std::size_t slices = 0;
  std::array<double, 3> dice_mean{};
  std::array<std::optional<double>, 3> assd_mean{};
  std::array<std::size_t, 3> assd_undefined{};
  std::optional<double> ssim_mean;
  std::optional<double> psnr_mean;  // capped at 99 dB per slice before averaging
  std::string assd_unit = "pixels";
};

struct MetricsReport {
  std::vector<SliceReport> rows;
  std::string assd_unit = "pixels";

  MetricsSummary summary() const {
    MetricsSummary s;
    s.slices = rows.size();
    s.assd_unit = assd_unit;
    std::array<double, 3> assd_sum{};
    std::array<std::size_t, 3> assd_n{};
    double ssim_sum = 0, psnr_sum = 0;
    std::size_t syn_n = 0;
    for (const auto& r : rows) {
      for (int k = 0; k < 3; ++k) {
        s.dice_mean[k] += r.dice[k];
        if (r.assd[k]) {
          assd_sum[k] += *r.assd[k];
          ++assd_n[k];
        } else {
          ++s.assd_undefined[k];
        }
      }
      if (r.ssim && r.psnr) {
        ssim_sum += *r.ssim;
        psnr_sum += capped_psnr(*r.psnr);
        ++syn_n;
      }
    }
    for (int k = 0; k < 3; ++k) {
      if (!rows.empty()) s.dice_mean[k] /= static_cast<double>(rows.size());
      if (assd_n[k] > 0) s.assd_mean[k] = assd_sum[k] / static_cast<double>(assd_n[k]);
    }
    if (syn_n > 0) {
      s.ssim_mean = ssim_sum / static_cast<double>(syn_n);
      s.psnr_mean = psnr_sum / static_cast<double>(syn_n);
    }
    return s;
  }
};

namespace metrics_detail {
inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }
}  // namespace metrics_detail

// One row per slice; undefined values are "NA", PSNR is written capped.
inline std::string to_csv(const MetricsReport& report) {
  using metrics_detail::fmt;
  std::ostringstream os;
  os << "case_id,z,dice_wt,dice_et,dice_tc,assd_wt,assd_et,assd_tc,ssim,psnr\n";
  for (const auto& r : report.rows) {
    os << r.case_id << ',' << r.z;
    for (double d : r.dice) os << ',' << fmt(d);
    for (const auto& a : r.assd) os << ',' << fmt(a);
    os << ',' << fmt(r.ssim) << ','
       << (r.psnr ? fmt(capped_psnr(*r.psnr)) : std::string("NA")) << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const MetricsSummary& s) {
  nlohmann::json j;
  j["slices"] = s.slices;
  j["assd_unit"] = s.assd_unit;
  j["psnr_cap_db"] = kPsnrCap;
  for (int k = 0; k < 3; ++k) {
    auto& r = j["regions"][kRegionNames[k]];
    r["dice"] = s.dice_mean[k];
    r["assd"] = s.assd_mean[k] ? nlohmann::json(*s.assd_mean[k]) : nlohmann::json(nullptr);
    r["assd_undefined"] = s.assd_undefined[k];
  }
  j["ssim"] = s.ssim_mean ? nlohmann::json(*s.ssim_mean) : nlohmann::json(nullptr);
  j["psnr"] = s.psnr_mean ? nlohmann::json(*s.psnr_mean) : nlohmann::json(nullptr);
  return j;
}

}  // namespace mafnet
