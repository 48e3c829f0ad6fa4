#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <map>
#include <numeric>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "optim.hpp"

namespace mafnet {

using json = nlohmann::json;

struct TrainConfig {
  double lr_g = 4e-4;
  double lr_h = 4e-4;
  double lr_d = 2e-4;
  double lr_seg = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 4;
  int epochs_synthesis = 10;
  int epochs_joint = 100;
  std::uint64_t seed = 0;
  LossWeights weights;
  bool allow_weight_override = false;
  // Cut the gradient path from the segmentation loss into the generator.
  bool detach_synthesis_for_seg = false;

  static TrainConfig desk_scale() {
    TrainConfig c;
    c.epochs_synthesis = 2;
    c.epochs_joint = 3;
    return c;
  }

  void validate() const {
    require(lr_g > 0 && lr_h > 0 && lr_d > 0 && lr_seg > 0, ErrorCode::BadConfig, "learning rates must be positive");
    require(epochs_synthesis >= 0 && epochs_joint >= 0, ErrorCode::BadConfig, "epoch counts must be >= 0");
    require(batch_size >= 1, ErrorCode::BadConfig, "batch_size must be >= 1");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0, ErrorCode::BadConfig,
            "invalid Adam settings");
    weights.validate(allow_weight_override);
  }
};

// ---------------------------------------------------------------------------
// JSON echo of configs

inline void to_json(json& j, const LossWeights& w) {
  j = json{{"lambda_x", w.lambda_x}, {"lambda_y", w.lambda_y}, {"tau", w.tau}, {"lambda", w.lambda},
           {"use_identity", w.use_identity}};
}
inline void from_json(const json& j, LossWeights& w) {
  j.at("lambda_x").get_to(w.lambda_x);
  j.at("lambda_y").get_to(w.lambda_y);
  j.at("tau").get_to(w.tau);
  j.at("lambda").get_to(w.lambda);
  j.at("use_identity").get_to(w.use_identity);
}
inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr_g", c.lr_g},
           {"lr_h", c.lr_h},
           {"lr_d", c.lr_d},
           {"lr_seg", c.lr_seg},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"batch_size", c.batch_size},
           {"epochs_synthesis", c.epochs_synthesis},
           {"epochs_joint", c.epochs_joint},
           {"seed", c.seed},
           {"weights", c.weights},
           {"allow_weight_override", c.allow_weight_override},
           {"detach_synthesis_for_seg", c.detach_synthesis_for_seg}};
}
inline void from_json(const json& j, TrainConfig& c) {
  j.at("lr_g").get_to(c.lr_g);
  j.at("lr_h").get_to(c.lr_h);
  j.at("lr_d").get_to(c.lr_d);
  j.at("lr_seg").get_to(c.lr_seg);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs_synthesis").get_to(c.epochs_synthesis);
  j.at("epochs_joint").get_to(c.epochs_joint);
  j.at("seed").get_to(c.seed);
  j.at("weights").get_to(c.weights);
  j.at("allow_weight_override").get_to(c.allow_weight_override);
  j.at("detach_synthesis_for_seg").get_to(c.detach_synthesis_for_seg);
}
inline void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"n_modalities", c.n_modalities}, {"base_width", c.base_width}, {"n_blocks", c.n_blocks},
           {"nce_layers", c.nce_layers},     {"num_patches", c.num_patches}, {"proj_dim", c.proj_dim}};
}
inline void from_json(const json& j, GeneratorConfig& c) {
  j.at("n_modalities").get_to(c.n_modalities);
  j.at("base_width").get_to(c.base_width);
  j.at("n_blocks").get_to(c.n_blocks);
  j.at("nce_layers").get_to(c.nce_layers);
  j.at("num_patches").get_to(c.num_patches);
  j.at("proj_dim").get_to(c.proj_dim);
}
inline void to_json(json& j, const DiscriminatorConfig& c) {
  j = json{{"base_width", c.base_width}, {"n_layers", c.n_layers}};
}
inline void from_json(const json& j, DiscriminatorConfig& c) {
  j.at("base_width").get_to(c.base_width);
  j.at("n_layers").get_to(c.n_layers);
}
inline void to_json(json& j, const UNetConfig& c) {
  j = json{{"in_channels", c.in_channels}, {"out_classes", c.out_classes}, {"base_width", c.base_width},
           {"depth", c.depth}};
}
inline void from_json(const json& j, UNetConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("out_classes").get_to(c.out_classes);
  j.at("base_width").get_to(c.base_width);
  j.at("depth").get_to(c.depth);
}
inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"generator", c.generator}, {"discriminator", c.discriminator}, {"unet", c.unet}};
}
inline void from_json(const json& j, ModelConfig& c) {
  j.at("generator").get_to(c.generator);
  j.at("discriminator").get_to(c.discriminator);
  j.at("unet").get_to(c.unet);
}

// ---------------------------------------------------------------------------
// Logging records

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
inline std::optional<double> number_or_null(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

struct StepRecord {
  int phase = 1;  // 1 synthesis, 2 joint
  int epoch = 0;
  std::int64_t step = 0;  // global step index
  double d = 0;           // discriminator loss
  double gan = 0;
  std::vector<double> nce_x;  // per modality; empty when lambda_x = 0
  std::optional<double> nce_y;
  double syn = 0;
  std::optional<double> seg;
  double total = 0;
};

inline void to_json(json& j, const StepRecord& r) {
  j = json{{"phase", r.phase}, {"epoch", r.epoch}, {"step", r.step},   {"d", r.d},
           {"gan", r.gan},     {"nce_x", r.nce_x}, {"nce_y", optional_number(r.nce_y)},
           {"syn", r.syn},     {"seg", optional_number(r.seg)}, {"total", r.total}};
}
inline void from_json(const json& j, StepRecord& r) {
  j.at("phase").get_to(r.phase);
  j.at("epoch").get_to(r.epoch);
  j.at("step").get_to(r.step);
  j.at("d").get_to(r.d);
  j.at("gan").get_to(r.gan);
  j.at("nce_x").get_to(r.nce_x);
  r.nce_y = number_or_null(j.at("nce_y"));
  j.at("syn").get_to(r.syn);
  r.seg = number_or_null(j.at("seg"));
  j.at("total").get_to(r.total);
}

struct EpochRecord {
  int phase = 1;
  int epoch = 0;
  int steps = 0;
  double d = 0, syn = 0, total = 0;  // means over the epoch's steps
  std::optional<double> seg;
  std::optional<std::array<double, 3>> val_dice;  // WT, ET, TC
  std::optional<double> val_score;                // mean of val_dice
};

inline void to_json(json& j, const EpochRecord& r) {
  j = json{{"phase", r.phase}, {"epoch", r.epoch}, {"steps", r.steps}, {"d", r.d},
           {"syn", r.syn},     {"total", r.total}, {"seg", optional_number(r.seg)},
           {"val_dice", r.val_dice ? json(*r.val_dice) : json(nullptr)},
           {"val_score", optional_number(r.val_score)}};
}
inline void from_json(const json& j, EpochRecord& r) {
  j.at("phase").get_to(r.phase);
  j.at("epoch").get_to(r.epoch);
  j.at("steps").get_to(r.steps);
  j.at("d").get_to(r.d);
  j.at("syn").get_to(r.syn);
  j.at("total").get_to(r.total);
  r.seg = number_or_null(j.at("seg"));
  if (j.at("val_dice").is_null()) r.val_dice.reset();
  else r.val_dice = j.at("val_dice").get<std::array<double, 3>>();
  r.val_score = number_or_null(j.at("val_score"));
}

// ---------------------------------------------------------------------------
// State

enum OptGroup { kGenerator = 0, kProjection = 1, kDiscriminator = 2, kSegmentor = 3 };
inline constexpr std::array<const char*, 4> kGroupNames{"generator", "projection", "discriminator", "segmentor"};

// Visiting order of one epoch and the unpaired T1ce partner of every slice.
struct EpochPlan {
  std::vector<int> order;
  std::vector<int> partners;
  bool empty() const { return order.empty(); }
};

template <class T>
struct TrainState {
  ModelConfig model_config;
  TrainConfig config;
  MafNet<T> net;
  std::array<AdamGroup<T>, 4> groups;
  std::mt19937_64 rng;
  int phase = 1;  // 3 once both phases are done
  int epoch = 0;  // within the phase
  int step_in_epoch = 0;
  std::int64_t global_step = 0;
  EpochPlan plan;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> history;
  std::optional<double> best_score;
  int best_epoch = -1;
  json metadata = json::object();         // free-form run information, persisted
  std::filesystem::path diagnostics_dir;  // NonFiniteLoss dumps; not persisted

  TrainState(const ModelConfig& mc, const TrainConfig& tc)
      : model_config(mc), config(tc), net(mc, tc.seed), rng(tc.seed ^ 0x9e3779b97f4a7c15ULL) {
    tc.validate();
    const std::array<double, 4> lrs{tc.lr_g, tc.lr_h, tc.lr_d, tc.lr_seg};
    const std::array<ParamList<T>, 4> params{net.generator_params(), net.head_params(), net.discriminator_params(),
                                             net.segmentor_params()};
    for (int g = 0; g < 4; ++g)
      groups[g] = AdamGroup<T>(kGroupNames[g], AdamSettings{lrs[g], tc.beta1, tc.beta2, tc.adam_eps}, params[g]);
  }
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;

  bool finished() const { return phase > 2; }
  void zero_grad() {
    for (auto& g : groups) g.zero_grad();
  }
};

// ---------------------------------------------------------------------------
// Batches

template <class T>
struct Batch {
  Var<T> x;  // (B,3,S,S)
  Var<T> y;  // (B,1,S,S) unpaired real T1ce
  std::vector<std::uint8_t> seg;  // B*S*S, belongs to x
  std::vector<std::string> case_ids;
};

template <class T>
Batch<T> make_batch(const std::vector<SliceSample>& data, std::span<const int> idx, std::span<const int> partners) {
  require(!idx.empty() && idx.size() == partners.size(), ErrorCode::ShapeMismatch, "make_batch: bad index lists");
  const int s = data.at(idx[0]).size;
  const std::size_t px = static_cast<std::size_t>(s) * s;
  const int b = static_cast<int>(idx.size());
  Tensor<T> x({b, 3, s, s}), y({b, 1, s, s});
  Batch<T> out;
  out.seg.reserve(b * px);
  for (int i = 0; i < b; ++i) {
    const auto& src = data.at(idx[i]);
    const auto& tgt = data.at(partners[i]);
    require(src.size == s && tgt.size == s, ErrorCode::ShapeMismatch, "make_batch: slices differ in size");
    require(tgt.y_t1ce.size() == px, ErrorCode::MissingModality, tgt.case_id + ": slice has no T1ce target");
    std::copy(src.x.begin(), src.x.end(), x.data() + i * 3 * px);
    std::copy(tgt.y_t1ce.begin(), tgt.y_t1ce.end(), y.data() + i * px);
    out.seg.insert(out.seg.end(), src.seg.begin(), src.seg.end());
    out.case_ids.push_back(src.case_id);
  }
  out.x = Var<T>(std::move(x));
  out.y = Var<T>(std::move(y));
  return out;
}

// Shuffled order; each slice is paired with a T1ce slice from a different
// case when the data holds more than one case.
inline EpochPlan make_epoch_plan(const std::vector<SliceSample>& data, std::mt19937_64& rng) {
  EpochPlan p;
  const int n = static_cast<int>(data.size());
  p.order.resize(n);
  std::iota(p.order.begin(), p.order.end(), 0);
  portable_shuffle(p.order, rng);
  const bool multi_case = std::any_of(data.begin(), data.end(), [&](const auto& s) { return s.case_id != data[0].case_id; });
  for (int i : p.order) {
    int j = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
    if (multi_case) {
      int tries = 0;
      while (data[j].case_id == data[i].case_id && ++tries < 64) j = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
      for (int k = 0; k < n && data[j].case_id == data[i].case_id; ++k) j = k;
    }
    p.partners.push_back(j);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Steps

namespace training_detail {

inline void dump_non_finite(const std::filesystem::path& dir, const json& info) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream f(dir / ("nonfinite_step" + std::to_string(info.value("step", 0LL)) + ".json"));
  f << info.dump(2) << '\n';
}

inline bool finite(double v) { return std::isfinite(v); }

template <class T>
void check_losses(const StepRecord& r, const Batch<T>& b, const std::filesystem::path& dir) {
  bool ok = finite(r.d) && finite(r.gan) && finite(r.syn) && finite(r.total);
  for (double v : r.nce_x) ok = ok && finite(v);
  if (r.nce_y) ok = ok && finite(*r.nce_y);
  if (r.seg) ok = ok && finite(*r.seg);
  if (ok) return;
  json info = r;
  info["cases"] = b.case_ids;
  dump_non_finite(dir, info);
  fail(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(r.step));
}

// Disables gradient tracking on a parameter list for the guard's lifetime.
template <class T>
struct FreezeGuard {
  const ParamList<T>& params;
  explicit FreezeGuard(const ParamList<T>& p) : params(p) { set_requires_grad(params, false); }
  ~FreezeGuard() { set_requires_grad(params, true); }
};

template <class T>
StepRecord train_step(TrainState<T>& s, const Batch<T>& b, bool joint) {
  StepRecord rec;
  rec.phase = joint ? 2 : 1;
  rec.epoch = s.epoch;
  rec.step = s.global_step;
  const auto& w = s.config.weights;
  const T tau = static_cast<T>(w.tau);
  auto& net = s.net;
  const int height = b.x.dim(2), width = b.x.dim(3);

  auto fail_numeric = [&](const Error& e) {
    if (e.code() != ErrorCode::NonFinite) throw;
    json info = rec;
    info["error"] = e.what();
    info["cases"] = b.case_ids;
    dump_non_finite(s.diagnostics_dir, info);
    fail(ErrorCode::NonFiniteLoss, std::string("step ") + std::to_string(rec.step) + ": " + e.what());
  };

  try {
    s.zero_grad();
    auto out = net.generator(b.x);

    // Discriminator update on real T1ce vs detached synthesis.
    {
      auto l_d = adversarial_loss(net.discriminator(b.y), net.discriminator(out.image.detach()),
                                  AdversarialSide::Discriminator);
      rec.d = static_cast<double>(l_d.item());
      require(std::isfinite(rec.d), ErrorCode::NonFinite, "discriminator loss is not finite");
      backward(l_d);
      s.groups[kDiscriminator].step();
      s.groups[kDiscriminator].zero_grad();
    }

    // Generator (+ head, + segmentor) update against the refreshed D.
    FreezeGuard<T> freeze(s.groups[kDiscriminator].params);
    SynthesisParts<T> parts;
    auto d_fake = net.discriminator(out.image);
    parts.gan = adversarial_loss(d_fake, d_fake, AdversarialSide::Generator);
    if (w.lambda_x != 0.0) {
      for (int n = 0; n < net.config.generator.n_modalities; ++n) {
        const auto pos = sample_layer_positions(net.config.generator, height, width, s.rng);
        const auto fake = net.generator.encode_for_nce(n, out.image);
        parts.nce_x.push_back(patch_nce_modality(out.pyramids[n], fake, n, pos, net.head, tau));
      }
    }
    if (w.lambda_y != 0.0) {
      std::vector<LayerPositions> pos;
      for (int n = 0; n < net.config.generator.n_modalities; ++n)
        pos.push_back(sample_layer_positions(net.config.generator, height, width, s.rng));
      parts.nce_y = patch_nce_identity(b.y, net.generator, pos, net.head, tau);
    }
    rec.gan = static_cast<double>(parts.gan.item());
    for (const auto& v : parts.nce_x) rec.nce_x.push_back(static_cast<double>(v.item()));
    if (parts.nce_y.defined()) rec.nce_y = static_cast<double>(parts.nce_y.item());
    auto l_syn = synthesis_objective(parts, w);
    rec.syn = static_cast<double>(l_syn.item());

    Var<T> total = l_syn;
    if (joint) {
      const Var<T> synth = s.config.detach_synthesis_for_seg ? out.image.detach() : out.image;
      auto logits = net.segmentor(concat_channels<T>({b.x, synth}));
      auto l_seg = segmentation_ce(logits, b.seg);
      rec.seg = static_cast<double>(l_seg.item());
      total = total_objective(l_syn, l_seg, w.lambda);
    }
    rec.total = static_cast<double>(total.item());
    check_losses(rec, b, s.diagnostics_dir);

    backward(total);
    s.groups[kGenerator].step();
    s.groups[kProjection].step();
    if (joint) s.groups[kSegmentor].step();
    s.zero_grad();
  } catch (const Error& e) {
    fail_numeric(e);
  }
  return rec;
}

}  // namespace training_detail

// One D update, then one G+H update on the synthesis objective.
template <class T>
StepRecord train_step_synthesis(TrainState<T>& s, const Batch<T>& b) {
  return training_detail::train_step(s, b, false);
}

// One D update, then one combined G+H+segmentor update on
// lambda * L_syn + L_seg with the segmentor fed concat(x, synthesis).
template <class T>
StepRecord train_step_joint(TrainState<T>& s, const Batch<T>& b) {
  return training_detail::train_step(s, b, true);
}

// ---------------------------------------------------------------------------
// Inference

struct SlicePrediction {
  std::vector<float> synth;      // S*S in [-1, 1]
  Mask classes;                  // S*S argmax labels
  std::vector<float> attention;  // 3*S'*S' at the bottleneck resolution
  int attention_size = 0;
};

template <class T>
std::vector<SlicePrediction> predict(const MafNet<T>& net, const std::vector<SliceSample>& data, int batch_size = 4) {
  NoGradGuard no_grad;
  std::vector<SlicePrediction> out;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(batch_size));
    const int b = static_cast<int>(hi - lo), s = data[lo].size;
    const std::size_t px = static_cast<std::size_t>(s) * s;
    Tensor<T> x({b, 3, s, s});
    for (int i = 0; i < b; ++i) {
      require(data[lo + i].size == s, ErrorCode::ShapeMismatch, "predict: slices differ in size");
      std::copy(data[lo + i].x.begin(), data[lo + i].x.end(), x.data() + i * 3 * px);
    }
    Var<T> xv(std::move(x));
    auto syn = net.generator(xv);
    const Var<T> logits = net.segmentor(concat_channels<T>({xv, syn.image}));
    const auto& lv = logits.value();
    const auto& av = syn.attention.value();
    const int as = av.dim(2);
    const std::size_t apx = static_cast<std::size_t>(as) * av.dim(3);
    for (int i = 0; i < b; ++i) {
      SlicePrediction p;
      p.synth.assign(syn.image.value().data() + i * px, syn.image.value().data() + (i + 1) * px);
      p.classes.resize(px);
      for (std::size_t k = 0; k < px; ++k) {
        int best = 0;
        T bv = lv[(static_cast<std::size_t>(i) * 4) * px + k];
        for (int c = 1; c < 4; ++c) {
          const T v = lv[(static_cast<std::size_t>(i) * 4 + c) * px + k];
          if (v > bv) bv = v, best = c;
        }
        p.classes[k] = static_cast<std::uint8_t>(best);
      }
      p.attention.assign(av.data() + i * 3 * apx, av.data() + (i + 1) * 3 * apx);
      p.attention_size = as;
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline MetricsReport evaluate_predictions(const std::vector<SliceSample>& data, const std::vector<SlicePrediction>& preds,
                                          const EvalOptions& opts = {}) {
  require(data.size() == preds.size(), ErrorCode::ShapeMismatch, "evaluate_predictions: count mismatch");
  MetricsReport rep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    std::optional<std::span<const float>> real;
    if (!s.y_t1ce.empty()) real = std::span<const float>(s.y_t1ce);
    auto r = evaluate_slice(preds[i].classes, s.seg, s.size, s.size, std::span<const float>(preds[i].synth), real, opts);
    r.case_id = s.case_id;
    r.z = s.z;
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "MAFNETCK" | u32 version | u64 header length | JSON header |
// tensor payload (little-endian, offsets relative to payload start) |
// u32 crc32 of everything before it.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'F', 'N', 'E', 'T', 'C', 'K'};

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

namespace training_detail {

template <class T>
void append_tensor(json& index, std::string& payload, const std::string& key, const Tensor<T>& t) {
  index.push_back({{"key", key}, {"shape", t.shape()}, {"offset", payload.size()}});
  payload.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
}

template <class U>
void put_le(std::string& s, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline std::string rng_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace training_detail

template <class T>
json checkpoint_header(const TrainState<T>& s) {
  json h;
  h["dtype"] = dtype_name<T>();
  h["model_config"] = s.model_config;
  h["train_config"] = s.config;
  h["counters"] = {{"phase", s.phase}, {"epoch", s.epoch}, {"step_in_epoch", s.step_in_epoch},
                   {"global_step", s.global_step}};
  h["rng"] = training_detail::rng_string(s.rng);
  h["plan"] = {{"order", s.plan.order}, {"partners", s.plan.partners}};
  h["steps"] = s.steps;
  h["history"] = s.history;
  h["best_score"] = optional_number(s.best_score);
  h["best_epoch"] = s.best_epoch;
  json adam = json::object();
  for (const auto& g : s.groups) adam[g.name] = {{"lr", g.settings.lr}, {"steps", g.steps}};
  h["adam"] = adam;
  h["metadata"] = s.metadata;
  return h;
}

template <class T>
void save_checkpoint(const TrainState<T>& s, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");
  json header = checkpoint_header(s);
  json index = json::array();
  std::string payload;
  for (const auto& [key, var] : s.net.all_params()) training_detail::append_tensor(index, payload, "param/" + key, var.value());
  for (const auto& g : s.groups)
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      training_detail::append_tensor(index, payload, "adam/m/" + g.params[i].first, g.m[i]);
      training_detail::append_tensor(index, payload, "adam/v/" + g.params[i].first, g.v[i]);
    }
  header["tensors"] = index;
  const std::string h = header.dump();

  std::string buf(kCheckpointMagic, 8);
  training_detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  training_detail::put_le<std::uint64_t>(buf, h.size());
  buf += h;
  buf += payload;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
  training_detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(crc));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot write " + tmp.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    require(static_cast<bool>(f), ErrorCode::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Reads the JSON header only, after validating framing and checksum.
inline json read_checkpoint_header(const std::filesystem::path& path, std::string* raw_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot open " + path.string());
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(raw.size() >= 24, ErrorCode::CorruptFile, path.string() + ": too short for a checkpoint");
  require(std::memcmp(raw.data(), kCheckpointMagic, 8) == 0, ErrorCode::CorruptFile, path.string() + ": bad magic");
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  const auto stored = training_detail::get_le<std::uint32_t>(p + raw.size() - 4);
  const auto crc = crc32(0L, p, static_cast<uInt>(raw.size() - 4));
  require(stored == static_cast<std::uint32_t>(crc), ErrorCode::CorruptFile, path.string() + ": checksum mismatch");
  const auto version = training_detail::get_le<std::uint32_t>(p + 8);
  require(version == kCheckpointVersion, ErrorCode::VersionMismatch,
          path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
              std::to_string(kCheckpointVersion));
  const auto hlen = training_detail::get_le<std::uint64_t>(p + 12);
  require(hlen <= raw.size() - 24, ErrorCode::CorruptFile, path.string() + ": header length out of range");
  json header;
  try {
    header = json::parse(raw.begin() + 20, raw.begin() + 20 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptFile, path.string() + ": bad header: " + e.what());
  }
  header["__payload_start"] = 20 + hlen;
  if (raw_out) *raw_out = std::move(raw);
  return header;
}

struct CheckpointExpectation {
  std::optional<ModelConfig> model;
  std::optional<TrainConfig> train;
};

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const CheckpointExpectation& expect = {}) {
  std::string raw;
  json h = read_checkpoint_header(path, &raw);
  try {
    require(h.at("dtype").get<std::string>() == dtype_name<T>(), ErrorCode::VersionMismatch,
            path.string() + ": stored as " + h.at("dtype").get<std::string>() + ", requested " + dtype_name<T>());
    const auto mc = h.at("model_config").get<ModelConfig>();
    const auto tc = h.at("train_config").get<TrainConfig>();
    if (expect.model)
      require(json(*expect.model) == h.at("model_config"), ErrorCode::VersionMismatch,
              path.string() + ": model config differs from the provided one");
    if (expect.train)
      require(json(*expect.train) == h.at("train_config"), ErrorCode::VersionMismatch,
              path.string() + ": training config differs from the provided one");

    TrainState<T> s(mc, tc);
    const auto& c = h.at("counters");
    s.phase = c.at("phase");
    s.epoch = c.at("epoch");
    s.step_in_epoch = c.at("step_in_epoch");
    s.global_step = c.at("global_step");
    std::istringstream(h.at("rng").get<std::string>()) >> s.rng;
    h.at("plan").at("order").get_to(s.plan.order);
    h.at("plan").at("partners").get_to(s.plan.partners);
    h.at("steps").get_to(s.steps);
    h.at("history").get_to(s.history);
    s.best_score = number_or_null(h.at("best_score"));
    s.best_epoch = h.at("best_epoch");
    s.metadata = h.value("metadata", json::object());
    for (auto& g : s.groups) g.steps = h.at("adam").at(g.name).at("steps");

    const std::size_t start = h.at("__payload_start");
    const std::size_t end = raw.size() - 4;
    std::map<std::string, const json*> index;
    for (const auto& t : h.at("tensors")) index[t.at("key").get<std::string>()] = &t;
    auto fill = [&](const std::string& key, Tensor<T>& dst) {
      auto it = index.find(key);
      require(it != index.end(), ErrorCode::CorruptFile, path.string() + ": missing tensor " + key);
      const auto shape = it->second->at("shape").get<Shape>();
      require(shape == dst.shape(), ErrorCode::VersionMismatch,
              path.string() + ": " + key + " has shape " + shape_str(shape) + ", model expects " + shape_str(dst.shape()));
      const std::size_t off = it->second->at("offset");
      const std::size_t bytes = dst.size() * sizeof(T);
      require(start + off + bytes <= end, ErrorCode::CorruptFile, path.string() + ": tensor " + key + " out of range");
      std::memcpy(dst.data(), raw.data() + start + off, bytes);
    };
    for (auto& [key, var] : s.net.all_params()) fill("param/" + key, var.mutable_value());
    for (auto& g : s.groups)
      for (std::size_t i = 0; i < g.params.size(); ++i) {
        fill("adam/m/" + g.params[i].first, g.m[i]);
        fill("adam/v/" + g.params[i].first, g.v[i]);
      }
    return s;
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptFile, path.string() + ": malformed header: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Two-phase schedule

struct TrainData {
  std::vector<SliceSample> train;
  std::vector<SliceSample> val;
};

template <class T>
struct FitOptions {
  std::optional<std::filesystem::path> out_dir;
  // Polled after every step; returning true interrupts the run and writes a
  // resumable checkpoint.
  std::function<bool(const StepRecord&)> should_stop;
  std::function<void(const EpochRecord&)> on_epoch;
  int predict_batch = 4;
};

struct FitResult {
  bool interrupted = false;
  std::optional<std::filesystem::path> resume_checkpoint;
};

inline void write_jsonl(const std::filesystem::path& path, const json& items) {
  std::ofstream f(path, std::ios::trunc);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot write " + path.string());
  for (const auto& it : items) f << it.dump() << '\n';
}

template <class T>
void write_histories(const TrainState<T>& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "history.jsonl", json(s.steps));
  write_jsonl(dir / "epochs.jsonl", json(s.history));
}

template <class T>
std::array<double, 3> validation_dice(const MafNet<T>& net, const std::vector<SliceSample>& val, int batch) {
  const auto summary = evaluate_predictions(val, predict(net, val, batch)).summary();
  return summary.dice_mean;
}

template <class T>
FitResult fit(TrainState<T>& s, const TrainData& data, const FitOptions<T>& opts = {}) {
  const auto& cfg = s.config;
  require(cfg.epochs_synthesis + cfg.epochs_joint == 0 || !data.train.empty(), ErrorCode::TooFewCases,
          "fit: empty training set");
  FitResult result;
  auto save = [&](const std::string& name) {
    if (!opts.out_dir) return;
    save_checkpoint(s, *opts.out_dir / name);
  };

  while (!s.finished()) {
    const int epochs = s.phase == 1 ? cfg.epochs_synthesis : cfg.epochs_joint;
    if (s.epoch >= epochs) {
      ++s.phase;
      s.epoch = 0;
      s.step_in_epoch = 0;
      continue;
    }
    if (s.plan.empty()) s.plan = make_epoch_plan(data.train, s.rng);
    const int n = static_cast<int>(s.plan.order.size());
    const int n_steps = (n + cfg.batch_size - 1) / cfg.batch_size;
    while (s.step_in_epoch < n_steps) {
      const int lo = s.step_in_epoch * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      const auto batch = make_batch<T>(data.train, std::span<const int>(s.plan.order).subspan(lo, hi - lo),
                                       std::span<const int>(s.plan.partners).subspan(lo, hi - lo));
      StepRecord rec = s.phase == 1 ? train_step_synthesis(s, batch) : train_step_joint(s, batch);
      s.steps.push_back(rec);
      ++s.step_in_epoch;
      ++s.global_step;
      if (opts.should_stop && opts.should_stop(rec)) {
        result.interrupted = true;
        if (opts.out_dir) {
          save("interrupted.ckpt");
          write_histories(s, *opts.out_dir);
          result.resume_checkpoint = *opts.out_dir / "interrupted.ckpt";
        }
        return result;
      }
    }

    EpochRecord er;
    er.phase = s.phase;
    er.epoch = s.epoch;
    double seg_sum = 0;
    for (auto it = s.steps.rbegin(); it != s.steps.rend() && it->phase == s.phase && it->epoch == s.epoch; ++it) {
      ++er.steps;
      er.d += it->d;
      er.syn += it->syn;
      er.total += it->total;
      if (it->seg) seg_sum += *it->seg;
    }
    if (er.steps > 0) {
      er.d /= er.steps;
      er.syn /= er.steps;
      er.total /= er.steps;
      if (s.phase == 2) er.seg = seg_sum / er.steps;
    }
    if (s.phase == 2 && !data.val.empty()) {
      er.val_dice = validation_dice(s.net, data.val, opts.predict_batch);
      er.val_score = ((*er.val_dice)[0] + (*er.val_dice)[1] + (*er.val_dice)[2]) / 3.0;
    }
    s.history.push_back(er);
    ++s.epoch;
    s.step_in_epoch = 0;
    s.plan = {};

    const bool joint_epoch = er.phase == 2;
    bool improved = false;
    if (joint_epoch) {
      if (!er.val_score) improved = true;  // no validation data: best tracks last
      else if (!s.best_score || *er.val_score > *s.best_score) improved = true;
      if (improved) {
        s.best_score = er.val_score;
        s.best_epoch = er.epoch;
      }
    }
    if (opts.on_epoch) opts.on_epoch(er);
    if (opts.out_dir) {
      save("last.ckpt");
      if (improved) save("best.ckpt");
      write_histories(s, *opts.out_dir);
    }
  }
  if (opts.out_dir) {
    save("last.ckpt");
    if (!std::filesystem::exists(*opts.out_dir / "best.ckpt")) save("best.ckpt");
    write_histories(s, *opts.out_dir);
  }
  return result;
}

}  // namespace mafnet
