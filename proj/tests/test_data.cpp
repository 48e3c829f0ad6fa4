#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "mafnet/data.hpp"

using namespace mafnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mafnet_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::Usage;
}

TEST(Normalize, Examples) {
  const std::vector<float> a{0, 50, 100};
  EXPECT_FLOAT_EQ(normalize(a)[1], 0.0f);
  const std::vector<float> b{10, 15, 30};
  EXPECT_FLOAT_EQ(normalize(b)[1], 2.0f * (15 - 10) / 20 - 1);
  EXPECT_FLOAT_EQ(normalize(b)[0], -1.0f);
  EXPECT_FLOAT_EQ(normalize(b)[2], 1.0f);
  const std::vector<float> z(9, 0.0f);
  for (float v : normalize(z)) EXPECT_EQ(v, -1.0f);
  const std::vector<float> bad{1, std::numeric_limits<float>::infinity()};
  EXPECT_EQ(code_of([&] { normalize(bad); }), ErrorCode::NonFinite);
}

TEST(Normalize, MonotoneAndBounded) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-500, 500);
  std::vector<float> v(300);
  for (auto& x : v) x = u(rng);
  const auto n = normalize(v);
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_GE(n[i], -1.0f);
    EXPECT_LE(n[i], 1.0f);
    for (std::size_t j = 0; j < v.size(); j += 17)
      if (v[i] < v[j]) EXPECT_LE(n[i], n[j]);
  }
}

TEST(Labels, Remap) {
  const std::vector<float> raw{0, 1, 2, 4};
  EXPECT_EQ(remap_labels(raw), (Mask{0, 1, 2, 3}));
  const std::vector<float> zeros(5, 0);
  EXPECT_EQ(remap_labels(zeros), Mask(5, 0));
  const std::vector<float> three{0, 3};
  EXPECT_EQ(code_of([&] { remap_labels(three); }), ErrorCode::UnknownLabel);
}

TEST(Labels, ComposeRegions) {
  const Mask seg{1, 2, 3, 0};
  const auto r = compose_regions(seg);
  auto count = [](const Mask& m) { return std::accumulate(m.begin(), m.end(), 0); };
  EXPECT_EQ(count(r.wt), 3);
  EXPECT_EQ(count(r.tc), 2);
  EXPECT_EQ(count(r.et), 1);
  const auto full = compose_regions(Mask(6, 3));
  EXPECT_EQ(count(full.wt), 6);
  EXPECT_EQ(count(full.tc), 6);
  EXPECT_EQ(count(full.et), 6);
  const auto empty = compose_regions(Mask(6, 0));
  EXPECT_EQ(count(empty.wt) + count(empty.tc) + count(empty.et), 0);
}

TEST(Labels, NestingHoldsForAllInputs) {
  std::mt19937_64 rng(11);
  Mask seg(1000);
  for (auto& v : seg) v = static_cast<std::uint8_t>(rng() % 4);
  const auto r = compose_regions(seg);
  for (std::size_t i = 0; i < seg.size(); ++i) {
    EXPECT_LE(r.et[i], r.tc[i]);
    EXPECT_LE(r.tc[i], r.wt[i]);
  }
}

TEST(Slicing, CropWindow) {
  EXPECT_EQ(crop_window(240, 224), (std::pair<int, int>{8, 232}));
  EXPECT_EQ(crop_window(225, 224), (std::pair<int, int>{0, 224}));
  EXPECT_EQ(crop_window(227, 224), (std::pair<int, int>{1, 225}));
  EXPECT_EQ(code_of([] { crop_window(200, 224); }), ErrorCode::TooSmall);
}

TEST(Slicing, CropTakesCentralPixels) {
  auto c = generate_phantom(1, {20, 18, 6}, {.noise_sigma = 0});
  for (int i = 0; i < 20 * 18 * 6; ++i) c.t1.voxels[i] = static_cast<float>(i);
  const auto s = make_slices(c, {.crop_size = 16, .require_tumor = false});
  ASSERT_EQ(s.size(), 6u);
  // x0 = 2, y0 = 1; after min-max the corners keep their order.
  const auto raw = extract_plane(c.t1, 3, 2, 1, 16);
  EXPECT_EQ(raw[0], c.t1.at(2, 1, 3));
  EXPECT_EQ(raw[16 * 16 - 1], c.t1.at(17, 16, 3));
  EXPECT_EQ(s[3].z, 3);
  EXPECT_FLOAT_EQ(s[3].channel(0)[0], -1.0f);
  EXPECT_FLOAT_EQ(s[3].channel(0)[255], 1.0f);
  EXPECT_EQ(code_of([&] { make_slices(c, {.crop_size = 24}); }), ErrorCode::TooSmall);
}

TEST(Slicing, NoTumorMeansNoSlices) {
  auto c = generate_phantom(2, {32, 32, 8}, {.noise_sigma = 0});
  std::fill(c.labels->voxels.begin(), c.labels->voxels.end(), 0.0f);
  EXPECT_TRUE(make_slices(c, {.crop_size = 32}).empty());
}

TEST(Slicing, TumorSpanCountsSlices) {
  PhantomOptions opts;
  opts.tumor = TumorSpec{{20.0, 22.0, 15.0}, {6.0, 6.0, 5.5}};
  const auto c = generate_phantom(3, {48, 48, 30}, opts);
  // Oracle: scan labels for axial indices that contain tumor.
  std::set<int> tumor_z;
  for (int z = 0; z < 30; ++z)
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x)
        if (c.labels->at(x, y, z) != 0) tumor_z.insert(z);
  ASSERT_EQ(*tumor_z.begin(), 10);
  ASSERT_EQ(*tumor_z.rbegin(), 20);
  const auto s = make_slices(c, {.crop_size = std::nullopt});
  EXPECT_EQ(s.size(), tumor_z.size());
  EXPECT_EQ(s.size(), 11u);
  for (const auto& sample : s) {
    EXPECT_TRUE(tumor_z.count(sample.z));
    EXPECT_EQ(sample.size, 48);
    EXPECT_EQ(sample.x.size(), 3u * 48 * 48);
    EXPECT_EQ(sample.y_t1ce.size(), 48u * 48);
    EXPECT_TRUE(std::any_of(sample.seg.begin(), sample.seg.end(), [](auto v) { return v != 0; }));
    for (float v : sample.x) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Split, Sizes) {
  auto ids = [](int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("case" + std::to_string(i));
    return v;
  };
  const auto a = split_cases(ids(369), 42);
  EXPECT_EQ(a.train.size(), 258u);
  EXPECT_EQ(a.val.size(), 36u);
  EXPECT_EQ(a.test.size(), 75u);
  const auto b = split_cases(ids(10), 1);
  EXPECT_EQ(b.train.size(), 7u);
  EXPECT_EQ(b.val.size(), 1u);
  EXPECT_EQ(b.test.size(), 2u);
  EXPECT_EQ(code_of([&] { split_cases(ids(9), 1); }), ErrorCode::TooFewCases);
}

TEST(Split, PartitionAndDeterminism) {
  std::vector<std::string> v;
  for (int i = 0; i < 57; ++i) v.push_back("c" + std::to_string(i));
  const auto a = split_cases(v, 7), b = split_cases(v, 7), c = split_cases(v, 8);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
  std::multiset<std::string> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  all.insert(a.test.begin(), a.test.end());
  EXPECT_EQ(all, std::multiset<std::string>(v.begin(), v.end()));
  // Input order does not matter.
  std::reverse(v.begin(), v.end());
  EXPECT_EQ(split_cases(v, 7).test, a.test);
}

TEST(Phantom, Deterministic) {
  const auto a = generate_phantom(17, {40, 36, 10}), b = generate_phantom(17, {40, 36, 10});
  EXPECT_EQ(a.t1.voxels, b.t1.voxels);
  EXPECT_EQ(a.t2.voxels, b.t2.voxels);
  EXPECT_EQ(a.flair.voxels, b.flair.voxels);
  EXPECT_EQ(a.t1ce->voxels, b.t1ce->voxels);
  EXPECT_EQ(a.labels->voxels, b.labels->voxels);
  EXPECT_NE(a.t1ce->voxels, generate_phantom(18, {40, 36, 10}).t1ce->voxels);
  EXPECT_EQ(code_of([] { generate_phantom(1, {8, 32, 8}); }), ErrorCode::BadDims);
}

TEST(Phantom, ContrastRules) {
  const auto c = generate_phantom(5, {64, 64, 16});
  double rim = 0, core = 0, edema_flair = 0, wm_flair = 0;
  int n_rim = 0, n_core = 0, n_edema = 0, n_wm = 0;
  const auto wm = tissue_intensity(Tissue::White);
  for (std::size_t i = 0; i < c.t1.voxels.size(); ++i) {
    const float l = c.labels->voxels[i];
    if (l == 4) rim += c.t1ce->voxels[i], ++n_rim;
    if (l == 1) core += c.t1ce->voxels[i], ++n_core;
    if (l == 2) edema_flair += c.flair.voxels[i], ++n_edema;
    if (l == 0 && std::abs(c.t1.voxels[i] - wm[0]) < 100) wm_flair += c.flair.voxels[i], ++n_wm;
  }
  ASSERT_GT(n_rim, 0);
  ASSERT_GT(n_core, 0);
  ASSERT_GT(n_edema, 0);
  EXPECT_GT(rim / n_rim, core / n_core);
  EXPECT_GT(edema_flair / n_edema, wm_flair / std::max(n_wm, 1));
  for (float v : c.labels->voxels) EXPECT_TRUE(v == 0 || v == 1 || v == 2 || v == 4);
}

TEST(Phantom, NestedLabels) {
  const auto c = generate_phantom(9, {48, 48, 12}, {.noise_sigma = 0});
  const auto slices = make_slices(c, {.crop_size = std::nullopt});
  ASSERT_FALSE(slices.empty());
  for (const auto& s : slices) {
    const auto r = compose_regions(s.seg);
    for (std::size_t i = 0; i < s.seg.size(); ++i) {
      ASSERT_LE(r.et[i], r.tc[i]);
      ASSERT_LE(r.tc[i], r.wt[i]);
    }
  }
}

TEST(Cases, WriteLoadRoundTrip) {
  const auto root = scratch_dir("cases");
  const auto c = generate_phantom(21, {32, 32, 6});
  write_case(c, root);
  const auto dirs = list_case_dirs(root);
  ASSERT_EQ(dirs.size(), 1u);
  const auto back = load_case(dirs[0]);
  EXPECT_EQ(back.case_id, c.case_id);
  EXPECT_EQ(back.t1.voxels, c.t1.voxels);
  EXPECT_EQ(back.flair.voxels, c.flair.voxels);
  ASSERT_TRUE(back.t1ce && back.labels);
  EXPECT_EQ(back.t1ce->voxels, c.t1ce->voxels);
  EXPECT_EQ(back.labels->voxels, c.labels->voxels);

  fs::remove(modality_path(dirs[0], c.case_id, "flair"));
  EXPECT_EQ(code_of([&] { load_case(dirs[0]); }), ErrorCode::MissingModality);
}

TEST(Cases, DimensionMismatch) {
  const auto root = scratch_dir("mismatch");
  auto c = generate_phantom(22, {32, 32, 6});
  c.t2 = Volume::zeros(32, 32, 5);
  write_case(c, root);
  EXPECT_EQ(code_of([&] { load_case(root / c.case_id); }), ErrorCode::DimensionMismatch);
}

TEST(Cases, OptionalT1ceAndLabels) {
  const auto root = scratch_dir("optional");
  auto c = generate_phantom(23, {32, 32, 6});
  c.t1ce.reset();
  c.labels.reset();
  write_case(c, root);
  const auto back = load_case(root / c.case_id, {.require_t1ce = false, .require_labels = false});
  EXPECT_FALSE(back.t1ce.has_value());
  EXPECT_EQ(code_of([&] { load_case(root / c.case_id, {.require_t1ce = true, .require_labels = false}); }),
            ErrorCode::MissingModality);
  EXPECT_EQ(code_of([&] { load_case(root / c.case_id); }), ErrorCode::MissingModality);
}

TEST(Cases, BratsSizedCase) {
  const auto root = scratch_dir("brats");
  const auto c = generate_phantom(24, {240, 240, 155}, {.noise_sigma = 0});
  write_case(c, root);
  const auto back = load_case(root / c.case_id);
  EXPECT_EQ(back.t1.nx(), 240);
  EXPECT_EQ(back.t1.ny(), 240);
  EXPECT_EQ(back.t1.nz(), 155);
  const auto s = make_slices(back);
  ASSERT_FALSE(s.empty());
  EXPECT_EQ(s[0].size, 224);
  EXPECT_EQ(s[0].x.size(), 3u * 224 * 224);
  fs::remove_all(root);
}

}  // namespace
