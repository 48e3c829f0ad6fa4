#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "niftio.hpp"

namespace mafnet {

enum class Modality { T1, T2, Flair, T1ce };

inline const char* modality_suffix(Modality m) {
  switch (m) {
    case Modality::T1: return "t1";
    case Modality::T2: return "t2";
    case Modality::Flair: return "flair";
    case Modality::T1ce: return "t1ce";
  }
  return "";
}

// Segmentation classes after remapping.
enum SegClass : std::uint8_t { kBackground = 0, kNecrosis = 1, kEdema = 2, kEnhancing = 3 };
inline constexpr int kNumClasses = 4;

using Mask = std::vector<std::uint8_t>;

struct Case {
  std::string case_id;
  Volume t1, t2, flair;
  std::optional<Volume> t1ce;
  std::optional<Volume> labels;  // raw BraTS codes {0,1,2,4}

  const Volume& input(int n) const {
    switch (n) {
      case 0: return t1;
      case 1: return t2;
      default: return flair;
    }
  }
};

// One axial slice ready for the networks. Images are size x size, row = y,
// column = x.
struct SliceSample {
  int size = 0;
  std::vector<float> x;       // 3 * size * size, channels T1, T2, FLAIR, in [-1, 1]
  std::vector<float> y_t1ce;  // size * size or empty
  Mask seg;                   // size * size, classes {0..3}
  std::string case_id;
  int z = 0;

  std::size_t pixels() const { return static_cast<std::size_t>(size) * size; }
  std::span<const float> channel(int c) const { return std::span<const float>(x).subspan(c * pixels(), pixels()); }
};

struct RegionMasks {
  Mask wt, tc, et;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------

inline std::filesystem::path modality_path(const std::filesystem::path& dir, const std::string& case_id,
                                           const std::string& suffix) {
  return dir / (case_id + "_" + suffix + ".nii.gz");
}

struct LoadOptions {
  bool require_t1ce = false;
  bool require_labels = true;
};

// BraTS layout: <dir>/<case_id>_{t1,t2,flair,t1ce,seg}.nii.gz with case_id
// taken from the directory name. Plain .nii files are accepted as well.
inline Case load_case(const std::filesystem::path& dir, const LoadOptions& opts = {}) {
  Case c;
  c.case_id = dir.filename().string();
  if (c.case_id.empty()) c.case_id = dir.parent_path().filename().string();
  auto find = [&](const std::string& suffix) -> std::optional<std::filesystem::path> {
    for (const char* ext : {".nii.gz", ".nii"}) {
      auto p = dir / (c.case_id + "_" + suffix + ext);
      if (std::filesystem::exists(p)) return p;
    }
    return std::nullopt;
  };
  auto load_required = [&](const std::string& suffix) {
    auto p = find(suffix);
    require(p.has_value(), ErrorCode::MissingModality, c.case_id + ": missing " + suffix);
    return read_nifti_file(*p);
  };
  c.t1 = load_required("t1");
  c.t2 = load_required("t2");
  c.flair = load_required("flair");
  if (auto p = find("t1ce")) c.t1ce = read_nifti_file(*p);
  else require(!opts.require_t1ce, ErrorCode::MissingModality, c.case_id + ": missing t1ce");
  if (auto p = find("seg")) c.labels = read_nifti_file(*p);
  else require(!opts.require_labels, ErrorCode::MissingModality, c.case_id + ": missing seg");

  auto check = [&](const Volume& v, const char* what) {
    require(v.same_dims(c.t1), ErrorCode::DimensionMismatch,
            c.case_id + ": " + what + " dims differ from t1");
  };
  check(c.t2, "t2");
  check(c.flair, "flair");
  if (c.t1ce) check(*c.t1ce, "t1ce");
  if (c.labels) check(*c.labels, "seg");
  return c;
}

inline void write_case(const Case& c, const std::filesystem::path& root) {
  const auto dir = root / c.case_id;
  std::filesystem::create_directories(dir);
  write_nifti_file(modality_path(dir, c.case_id, "t1"), c.t1);
  write_nifti_file(modality_path(dir, c.case_id, "t2"), c.t2);
  write_nifti_file(modality_path(dir, c.case_id, "flair"), c.flair);
  if (c.t1ce) write_nifti_file(modality_path(dir, c.case_id, "t1ce"), *c.t1ce);
  if (c.labels) write_nifti_file(modality_path(dir, c.case_id, "seg"), *c.labels);
}

// Case directories under root, sorted by name.
inline std::vector<std::filesystem::path> list_case_dirs(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  require(std::filesystem::is_directory(root), ErrorCode::Io, root.string() + " is not a directory");
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

// Min-max to [-1, 1]; a constant slice maps to all -1.
inline std::vector<float> normalize(std::span<const float> slice) {
  require(!slice.empty(), ErrorCode::ShapeMismatch, "normalize: empty slice");
  double lo = slice[0], hi = slice[0];
  for (float v : slice) {
    require(std::isfinite(v), ErrorCode::NonFinite, "normalize: non-finite intensity");
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  std::vector<float> out(slice.size(), -1.0f);
  if (hi > lo)
    for (std::size_t i = 0; i < slice.size(); ++i)
      out[i] = static_cast<float>(2.0 * (slice[i] - lo) / (hi - lo) - 1.0);
  return out;
}

// BraTS codes 0/1/2/4 -> classes 0/1/2/3.
inline Mask remap_labels(std::span<const float> raw) {
  Mask out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const float v = raw[i];
    if (v == 0.0f) out[i] = kBackground;
    else if (v == 1.0f) out[i] = kNecrosis;
    else if (v == 2.0f) out[i] = kEdema;
    else if (v == 4.0f) out[i] = kEnhancing;
    else fail(ErrorCode::UnknownLabel, "label value " + std::to_string(v) + " not in {0,1,2,4}");
  }
  return out;
}

// WT = {necrosis, edema, enhancing}, TC = {necrosis, enhancing}, ET = {enhancing}.
inline RegionMasks compose_regions(std::span<const std::uint8_t> seg) {
  RegionMasks r{Mask(seg.size(), 0), Mask(seg.size(), 0), Mask(seg.size(), 0)};
  for (std::size_t i = 0; i < seg.size(); ++i) {
    const auto c = seg[i];
    r.wt[i] = c == kNecrosis || c == kEdema || c == kEnhancing;
    r.tc[i] = c == kNecrosis || c == kEnhancing;
    r.et[i] = c == kEnhancing;
  }
  return r;
}

// Centered window [lo, lo + crop) along an axis of length extent; the odd
// leftover pixel goes to the high side.
inline std::pair<int, int> crop_window(int extent, int crop) {
  require(extent >= crop, ErrorCode::TooSmall,
          "in-plane extent " + std::to_string(extent) + " < crop " + std::to_string(crop));
  const int lo = (extent - crop) / 2;
  return {lo, lo + crop};
}

struct SliceOptions {
  // Square center crop; nullopt keeps the full (square) in-plane extent.
  std::optional<int> crop_size = 224;
  // Keep only slices whose labels contain tumor.
  bool require_tumor = true;
};

inline std::vector<float> extract_plane(const Volume& v, int z, int x0, int y0, int size) {
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) out[static_cast<std::size_t>(r) * size + c] = v.at(x0 + c, y0 + r, z);
  return out;
}

inline std::vector<SliceSample> make_slices(const Case& cs, const SliceOptions& opts = {}) {
  const int nx = cs.t1.nx(), ny = cs.t1.ny();
  int size = 0;
  if (opts.crop_size) {
    size = *opts.crop_size;
  } else {
    require(nx == ny, ErrorCode::BadDims, "uncropped slicing needs a square in-plane extent");
    size = nx;
  }
  const auto [x0, x1] = crop_window(nx, size);
  const auto [y0, y1] = crop_window(ny, size);
  (void)x1;
  (void)y1;
  require(!opts.require_tumor || cs.labels.has_value(), ErrorCode::MissingModality,
          cs.case_id + ": tumor-slice selection needs labels");

  std::vector<SliceSample> out;
  for (int z = 0; z < cs.t1.nz(); ++z) {
    SliceSample s;
    if (cs.labels) {
      s.seg = remap_labels(extract_plane(*cs.labels, z, x0, y0, size));
      if (opts.require_tumor && std::all_of(s.seg.begin(), s.seg.end(), [](auto v) { return v == 0; })) continue;
    } else {
      s.seg.assign(static_cast<std::size_t>(size) * size, kBackground);
    }
    s.size = size;
    s.case_id = cs.case_id;
    s.z = z;
    s.x.reserve(3 * s.pixels());
    for (int n = 0; n < 3; ++n) {
      auto img = normalize(extract_plane(cs.input(n), z, x0, y0, size));
      s.x.insert(s.x.end(), img.begin(), img.end());
    }
    if (cs.t1ce) s.y_t1ce = normalize(extract_plane(*cs.t1ce, z, x0, y0, size));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

// Engine-only Fisher-Yates, stable across standard library implementations.
template <class V>
void portable_shuffle(std::vector<V>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(v[i - 1], v[j]);
  }
}

// 7:1:2 split at the case level: floor(0.7 n) train, floor(0.1 n) val, rest test.
inline DatasetSplit split_cases(std::vector<std::string> case_ids, std::uint64_t seed) {
  require(case_ids.size() >= 10, ErrorCode::TooFewCases,
          "need at least 10 cases for a 7:1:2 split, got " + std::to_string(case_ids.size()));
  std::sort(case_ids.begin(), case_ids.end());
  require(std::adjacent_find(case_ids.begin(), case_ids.end()) == case_ids.end(), ErrorCode::BadConfig,
          "duplicate case ids");
  std::mt19937_64 rng(seed);
  portable_shuffle(case_ids, rng);
  const std::size_t n = case_ids.size();
  const std::size_t n_train = n * 7 / 10, n_val = n / 10;
  DatasetSplit s;
  s.seed = seed;
  s.train.assign(case_ids.begin(), case_ids.begin() + n_train);
  s.val.assign(case_ids.begin() + n_train, case_ids.begin() + n_train + n_val);
  s.test.assign(case_ids.begin() + n_train + n_val, case_ids.end());
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic brain phantom

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{1, 1, 1};

  double level(double x, double y, double z) const {
    const double dx = (x - center[0]) / radii[0], dy = (y - center[1]) / radii[1], dz = (z - center[2]) / radii[2];
    return dx * dx + dy * dy + dz * dz;
  }
  bool contains(double x, double y, double z) const { return level(x, y, z) <= 1.0; }
};

// Nested tumor: edema shell around an enhancing rim around a necrotic core.
struct TumorSpec {
  std::array<double, 3> center{};
  std::array<double, 3> edema_radii{};
  double enhancing_scale = 0.65;  // enhancing radii relative to edema
  double necrosis_scale = 0.35;   // necrosis radii relative to edema
};

struct PhantomOptions {
  double noise_sigma = 0.03;  // fraction of the intensity dynamic range
  std::optional<TumorSpec> tumor;
};

enum class Tissue : std::uint8_t { Background, White, Gray, Csf, Edema, Enhancing, Necrosis };

// Intensity per tissue for T1, T2, FLAIR, T1ce. FLAIR suppresses CSF and
// brightens edema; T1ce brightens the enhancing rim.
inline std::array<float, 4> tissue_intensity(Tissue t) {
  switch (t) {
    case Tissue::Background: return {0, 0, 0, 0};
    case Tissue::White: return {700, 350, 400, 700};
    case Tissue::Gray: return {500, 500, 500, 500};
    case Tissue::Csf: return {200, 900, 100, 200};
    case Tissue::Edema: return {450, 800, 900, 450};
    case Tissue::Enhancing: return {550, 600, 700, 950};
    case Tissue::Necrosis: return {250, 850, 450, 250};
  }
  return {0, 0, 0, 0};
}
inline constexpr double kPhantomDynamicRange = 1000.0;

inline Case generate_phantom(std::uint64_t seed, std::array<int, 3> dims, const PhantomOptions& opts = {}) {
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  require(nx >= 16 && ny >= 16 && nz >= 4, ErrorCode::BadDims, "phantom needs at least 16x16x4 voxels");
  require(opts.noise_sigma >= 0, ErrorCode::BadConfig, "noise_sigma must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::array<double, 3> mid{(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0};
  const Ellipsoid brain{mid, {0.40 * nx, 0.46 * ny, 0.47 * nz}};
  const Ellipsoid white{mid, {0.30 * nx, 0.35 * ny, 0.38 * nz}};
  const Ellipsoid vent_l{{mid[0] - 0.07 * nx, mid[1] - 0.02 * ny, mid[2]}, {0.04 * nx, 0.12 * ny, 0.22 * nz}};
  const Ellipsoid vent_r{{mid[0] + 0.07 * nx, mid[1] - 0.02 * ny, mid[2]}, {0.04 * nx, 0.12 * ny, 0.22 * nz}};

  TumorSpec tumor;
  if (opts.tumor) {
    tumor = *opts.tumor;
  } else {
    const double r = 0.10 + 0.06 * unit(rng);
    tumor.edema_radii = {r * nx, r * ny * (0.85 + 0.3 * unit(rng)), std::max(2.0, 0.20 * nz * (0.8 + 0.4 * unit(rng)))};
    // Keep the tumor inside the brain and off the ventricles' axis.
    const double side = unit(rng) < 0.5 ? -1.0 : 1.0;
    tumor.center = {mid[0] + side * (0.12 + 0.08 * unit(rng)) * nx, mid[1] + (unit(rng) - 0.5) * 0.30 * ny,
                    mid[2] + (unit(rng) - 0.5) * 0.20 * nz};
  }
  const Ellipsoid edema{tumor.center, tumor.edema_radii};
  const Ellipsoid enhancing{tumor.center,
                            {tumor.edema_radii[0] * tumor.enhancing_scale, tumor.edema_radii[1] * tumor.enhancing_scale,
                             tumor.edema_radii[2] * tumor.enhancing_scale}};
  const Ellipsoid necrosis{tumor.center,
                           {tumor.edema_radii[0] * tumor.necrosis_scale, tumor.edema_radii[1] * tumor.necrosis_scale,
                            tumor.edema_radii[2] * tumor.necrosis_scale}};

  Case c;
  c.case_id = "phantom_" + std::to_string(seed);
  c.t1 = Volume::zeros(nx, ny, nz);
  c.t2 = c.t1;
  c.flair = c.t1;
  c.t1ce = c.t1;
  c.labels = c.t1;
  std::normal_distribution<double> noise(0.0, opts.noise_sigma * kPhantomDynamicRange);
  std::array<Volume*, 4> vols{&c.t1, &c.t2, &c.flair, &*c.t1ce};
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        Tissue t = Tissue::Background;
        float label = 0;
        if (brain.contains(x, y, z)) {
          t = white.contains(x, y, z) ? Tissue::White : Tissue::Gray;
          if (vent_l.contains(x, y, z) || vent_r.contains(x, y, z)) t = Tissue::Csf;
        }
        if (necrosis.contains(x, y, z)) {
          t = Tissue::Necrosis;
          label = 1;
        } else if (enhancing.contains(x, y, z)) {
          t = Tissue::Enhancing;
          label = 4;
        } else if (edema.contains(x, y, z)) {
          t = Tissue::Edema;
          label = 2;
        }
        const auto inten = tissue_intensity(t);
        for (int m = 0; m < 4; ++m) {
          double v = inten[m];
          // Noise only inside the head; background stays exactly zero.
          if (t != Tissue::Background && opts.noise_sigma > 0) v = std::max(0.0, v + noise(rng));
          vols[m]->at(x, y, z) = static_cast<float>(v);
        }
        c.labels->at(x, y, z) = label;
      }
  return c;
}

}  // namespace mafnet
