#pragma once

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "report.hpp"
#include "training.hpp"

namespace mafnet::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 2, kDataError = 3, kNumericError = 4 };

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::Usage:
    case ErrorCode::BadConfig: return kUsage;
    case ErrorCode::NonFinite:
    case ErrorCode::NonFiniteLoss: return kNumericError;
    default: return kDataError;
  }
}

inline void require_empty_out(const fs::path& out) {
  if (fs::exists(out))
    require(fs::is_directory(out) && fs::is_empty(out), ErrorCode::ExistsNonEmpty,
            out.string() + " exists and is not empty");
  fs::create_directories(out);
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
  fs::path out;
  int cases = 10;
  std::uint64_t seed = 0;
  std::array<int, 3> dims{240, 240, 155};
  double noise_sigma = 0.03;
};

inline std::string phantom_case_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%03d", i);
  return buf;
}

inline std::uint64_t phantom_case_seed(std::uint64_t seed, int i) {
  return seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(i) + 1;
}

inline void cmd_phantom(const PhantomArgs& a) {
  require(a.cases >= 1, ErrorCode::Usage, "--cases must be >= 1");
  require_empty_out(a.out);
  PhantomOptions po;
  po.noise_sigma = a.noise_sigma;
  for (int i = 0; i < a.cases; ++i) {
    Case c = generate_phantom(phantom_case_seed(a.seed, i), a.dims, po);
    c.case_id = phantom_case_id(i);
    write_case(c, a.out);
  }
}

// ---------------------------------------------------------------------------
// dataset assembly shared by train / evaluate

struct CaseSets {
  std::vector<std::string> train, val, test;
  bool small_dataset = false;  // fewer than 10 cases: no split, everything trains and tests
};

inline CaseSets resolve_split(const fs::path& data_dir, std::uint64_t split_seed) {
  std::vector<std::string> ids;
  for (const auto& d : list_case_dirs(data_dir)) ids.push_back(d.filename().string());
  require(!ids.empty(), ErrorCode::TooFewCases, data_dir.string() + " holds no case directories");
  CaseSets s;
  if (ids.size() < 10) {
    s.small_dataset = true;
    s.train = ids;
    s.test = ids;
    return s;
  }
  const auto split = split_cases(ids, split_seed);
  s.train = split.train;
  s.val = split.val;
  s.test = split.test;
  return s;
}

// Keeps at most `limit` slices, centred on the middle of the selection.
inline void keep_central(std::vector<SliceSample>& s, int limit) {
  if (limit <= 0 || static_cast<int>(s.size()) <= limit) return;
  const std::size_t lo = (s.size() - limit) / 2;
  s = std::vector<SliceSample>(s.begin() + lo, s.begin() + lo + limit);
}

inline std::vector<SliceSample> load_slices(const fs::path& data_dir, const std::vector<std::string>& ids,
                                            const DataConfig& dc, bool need_t1ce) {
  std::vector<SliceSample> out;
  LoadOptions lo;
  lo.require_t1ce = need_t1ce;
  SliceOptions so;
  so.crop_size = dc.crop();
  for (const auto& id : ids) {
    auto s = make_slices(load_case(data_dir / id, lo), so);
    keep_central(s, dc.max_slices_per_case);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path data;
  std::optional<fs::path> config;
  fs::path out;
  bool desk_scale = false;
  std::optional<fs::path> resume;
  bool quiet = false;
};

inline std::atomic<bool>& interrupt_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

struct TrainOutcome {
  bool interrupted = false;
  std::size_t steps = 0;
  std::size_t epochs = 0;
  std::optional<StepRecord> last;
};

inline TrainOutcome cmd_train(const TrainArgs& a) {
  RunConfig rc = a.config ? load_run_config(*a.config, a.desk_scale) : RunConfig::defaults(a.desk_scale);
  rc.validate();
  if (!a.resume) require_empty_out(a.out);
  fs::create_directories(a.out);

  const auto sets = resolve_split(a.data, rc.data.split_seed);
  TrainData data;
  data.train = load_slices(a.data, sets.train, rc.data, true);
  data.val = load_slices(a.data, sets.val, rc.data, false);
  require(!data.train.empty(), ErrorCode::TooFewCases, "no tumor slices in the training cases");

  {
    std::ofstream f(a.out / "config.toml");
    f << rc.to_toml();
    json split{{"train", sets.train}, {"val", sets.val}, {"test", sets.test}, {"small_dataset", sets.small_dataset},
               {"train_slices", data.train.size()}, {"val_slices", data.val.size()}};
    std::ofstream(a.out / "split.json") << split.dump(2) << '\n';
  }

  auto state = a.resume ? load_checkpoint<float>(*a.resume, {rc.model, rc.train}) : TrainState<float>(rc.model, rc.train);
  state.metadata["run_config"] = rc;
  state.metadata["split"] = {{"train", sets.train}, {"val", sets.val}, {"test", sets.test}};
  state.diagnostics_dir = a.out / "diagnostics";

  interrupt_flag() = false;
  auto prev = std::signal(SIGINT, [](int) { interrupt_flag() = true; });
  FitOptions<float> fo;
  fo.out_dir = a.out;
  fo.should_stop = [](const StepRecord&) { return interrupt_flag().load(); };
  if (!a.quiet)
    fo.on_epoch = [](const EpochRecord& e) {
      std::cerr << "phase " << e.phase << " epoch " << e.epoch << " loss " << e.total;
      if (e.val_score) std::cerr << " val_dice " << *e.val_score;
      std::cerr << '\n';
    };
  FitResult res;
  try {
    res = fit(state, data, fo);
  } catch (...) {
    std::signal(SIGINT, prev);
    throw;
  }
  std::signal(SIGINT, prev);

  TrainOutcome o;
  o.interrupted = res.interrupted;
  o.steps = state.steps.size();
  o.epochs = state.history.size();
  if (!state.steps.empty()) o.last = state.steps.back();
  return o;
}

// ---------------------------------------------------------------------------
// synthesize

struct SynthesizeArgs {
  fs::path ckpt;
  fs::path data;
  fs::path out;
  int montage_rows = 4;
};

inline DataConfig data_config_of(const TrainState<float>& s) {
  if (s.metadata.contains("run_config")) return s.metadata.at("run_config").at("data").get<DataConfig>();
  return DataConfig{};
}

inline Image8 montage(const std::vector<SliceSample>& slices, const std::vector<SlicePrediction>& preds, int rows) {
  require(!slices.empty(), ErrorCode::TooSmall, "montage needs at least one slice");
  const int s = slices[0].size, pad = 2;
  rows = std::min<int>(rows, static_cast<int>(slices.size()));
  const bool has_real = !slices[0].y_t1ce.empty();
  const int cols = has_real ? 5 : 4;
  Image8 img(cols * (s + pad) - pad, rows * (s + pad) - pad, 1, 0);
  for (int r = 0; r < rows; ++r) {
    const std::size_t i = rows == 1 ? slices.size() / 2 : static_cast<std::size_t>(r) * (slices.size() - 1) / (rows - 1);
    const int y0 = r * (s + pad);
    for (int c = 0; c < 3; ++c) img.paste(gray_from_unit_range(slices[i].channel(c), s, s), c * (s + pad), y0);
    img.paste(gray_from_unit_range(preds[i].synth, s, s), 3 * (s + pad), y0);
    if (has_real) img.paste(gray_from_unit_range(slices[i].y_t1ce, s, s), 4 * (s + pad), y0);
  }
  return img;
}

inline fs::path synth_volume_path(const fs::path& out, const std::string& id) {
  return out / id / (id + "_t1ce_synth.nii.gz");
}
inline fs::path attention_path(const fs::path& out, const std::string& id) {
  return out / id / (id + "_attention.nii.gz");
}

// Per case: synthesized slices restacked into a volume (values in [-1, 1]),
// the fusion attention maps (slice z, modality n at z index 3z+n), and a
// montage PNG with columns T1 | T2 | FLAIR | synthesized | real T1ce.
inline std::vector<std::string> cmd_synthesize(const SynthesizeArgs& a) {
  auto state = load_checkpoint<float>(a.ckpt);
  const auto dc = data_config_of(state);
  fs::create_directories(a.out);
  std::vector<std::string> written;
  LoadOptions lo;
  lo.require_labels = false;
  SliceOptions so;
  so.crop_size = dc.crop();
  so.require_tumor = false;
  for (const auto& dir : list_case_dirs(a.data)) {
    const Case c = load_case(dir, lo);
    const auto slices = make_slices(c, so);
    const auto preds = predict(state.net, slices);
    const int s = slices.at(0).size, nz = static_cast<int>(slices.size());
    fs::create_directories(a.out / c.case_id);
    Volume v = Volume::zeros(s, s, nz, {c.t1.header.pixdim[1], c.t1.header.pixdim[2], c.t1.header.pixdim[3]});
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) v.at(x, y, z) = preds[z].synth[static_cast<std::size_t>(y) * s + x];
    write_nifti_file(synth_volume_path(a.out, c.case_id), v);

    const int as = preds[0].attention_size;
    Volume att = Volume::zeros(as, as, 3 * nz);
    for (int z = 0; z < nz; ++z)
      for (int n = 0; n < 3; ++n)
        for (int y = 0; y < as; ++y)
          for (int x = 0; x < as; ++x)
            att.at(x, y, 3 * z + n) = preds[z].attention[(static_cast<std::size_t>(n) * as + y) * as + x];
    write_nifti_file(attention_path(a.out, c.case_id), att);
    write_png(a.out / c.case_id / (c.case_id + "_montage.png"), montage(slices, preds, a.montage_rows));
    written.push_back(c.case_id);
  }
  return written;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  fs::path ckpt;
  fs::path data;
  fs::path out;
  bool all_cases = false;  // evaluate every case instead of the test split
};

inline MetricsSummary cmd_evaluate(const EvaluateArgs& a) {
  auto state = load_checkpoint<float>(a.ckpt);
  const auto dc = data_config_of(state);
  std::vector<std::string> ids;
  if (a.all_cases) {
    for (const auto& d : list_case_dirs(a.data)) ids.push_back(d.filename().string());
  } else {
    ids = resolve_split(a.data, dc.split_seed).test;
  }
  MetricsReport rep;
  rep.assd_unit = "mm";
  SliceOptions so;
  so.crop_size = dc.crop();
  for (const auto& id : ids) {
    const Case c = load_case(a.data / id);
    auto slices = make_slices(c, so);
    if (slices.empty()) continue;
    EvalOptions eo;
    eo.spacing = {c.t1.header.pixdim[2], c.t1.header.pixdim[1]};  // (row = y, column = x)
    auto part = evaluate_predictions(slices, predict(state.net, slices), eo);
    rep.rows.insert(rep.rows.end(), part.rows.begin(), part.rows.end());
  }
  require(!rep.rows.empty(), ErrorCode::TooFewCases, "no tumor slices to evaluate");
  return write_metrics_outputs(rep, a.out);
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  fs::path history;
  fs::path out;
  std::vector<fs::path> attention;  // *_attention.nii.gz dumps
  int heatmap_scale = 4;
};

struct ReportOutcome {
  std::vector<std::string> loss_figures;
  std::vector<std::string> attention_figures;
  double attention_max_sum_error = 0;  // max |sum_n A_n - 1| over all dumped pixels
};

inline ReportOutcome cmd_report(const ReportArgs& a) {
  const auto history = read_history(a.history);
  fs::create_directories(a.out);
  ReportOutcome o;
  for (const auto& [name, series] : loss_series(history)) {
    std::vector<double> finite;
    for (double v : series)
      if (std::isfinite(v)) finite.push_back(v);
    const std::string file = "loss_" + name + ".png";
    write_png(a.out / file, plot_series(finite));
    o.loss_figures.push_back(file);
  }
  for (const auto& path : a.attention) {
    const Volume att = read_nifti_file(path);
    require(att.nz() % 3 == 0, ErrorCode::BadDims, path.string() + ": attention dump needs 3 maps per slice");
    std::string stem = path.filename().string();
    stem = stem.substr(0, stem.find('.'));
    const int w = att.nx(), h = att.ny();
    const std::size_t px = static_cast<std::size_t>(w) * h;
    for (int z = 0; z < att.nz() / 3; ++z) {
      Image8 panel(3 * (w * a.heatmap_scale + 2) - 2, h * a.heatmap_scale, 3, 255);
      for (int n = 0; n < 3; ++n) {
        std::span<const float> map(att.voxels.data() + (3 * static_cast<std::size_t>(z) + n) * px, px);
        panel.paste(heatmap(map, w, h, a.heatmap_scale), n * (w * a.heatmap_scale + 2), 0);
      }
      for (std::size_t i = 0; i < px; ++i) {
        double sum = 0;
        for (int n = 0; n < 3; ++n) sum += att.voxels[(3 * static_cast<std::size_t>(z) + n) * px + i];
        o.attention_max_sum_error = std::max(o.attention_max_sum_error, std::abs(sum - 1.0));
      }
      char name[64];
      std::snprintf(name, sizeof name, "_z%03d.png", z);
      const std::string file = stem + name;
      write_png(a.out / file, panel);
      o.attention_figures.push_back(file);
    }
  }
  json summary{{"loss_figures", o.loss_figures},
               {"attention_figures", o.attention_figures},
               {"attention_max_sum_error", o.attention_max_sum_error},
               {"steps", history.size()}};
  std::ofstream(a.out / "report.json") << summary.dump(2) << '\n';
  return o;
}

}  // namespace mafnet::cli
