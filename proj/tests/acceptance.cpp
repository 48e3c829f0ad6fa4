// Acceptance run: one line per criterion, each checked against an oracle
// written independently of the library code it exercises.

#include <CLI11.hpp>

#include <chrono>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <set>
#include <thread>

#include "gradcheck.hpp"
#include "mafnet/cli.hpp"

using namespace mafnet;
using mafnet::testing::gradcheck;
using mafnet::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mafnet_accept_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::vector<SliceSample> phantom_slices(std::uint64_t seed, std::array<int, 3> dims) {
  SliceOptions so;
  so.crop_size = std::nullopt;
  return make_slices(generate_phantom(seed, dims), so);
}

double max_step_diff(const std::vector<StepRecord>& a, const std::vector<StepRecord>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0;
  auto upd = [&](double x, double y) { worst = std::max(worst, std::abs(x - y)); };
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].phase != b[i].phase || a[i].step != b[i].step || a[i].nce_x.size() != b[i].nce_x.size() ||
        a[i].seg.has_value() != b[i].seg.has_value() || a[i].nce_y.has_value() != b[i].nce_y.has_value())
      return std::numeric_limits<double>::infinity();
    upd(a[i].d, b[i].d);
    upd(a[i].gan, b[i].gan);
    upd(a[i].syn, b[i].syn);
    upd(a[i].total, b[i].total);
    for (std::size_t k = 0; k < a[i].nce_x.size(); ++k) upd(a[i].nce_x[k], b[i].nce_x[k]);
    if (a[i].seg) upd(*a[i].seg, *b[i].seg);
    if (a[i].nce_y) upd(*a[i].nce_y, *b[i].nce_y);
  }
  return worst;
}

template <class T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

// ---------------------------------------------------------------------------
// 1. loss oracles

long double oracle_nce(const std::vector<double>& q, const std::vector<double>& pos,
                       const std::vector<std::vector<double>>& negs, long double tau) {
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
    return s;
  };
  const long double num = std::exp(dot(q, pos) / tau);
  long double den = num;
  for (const auto& n : negs) den += std::exp(dot(q, n) / tau);
  return -std::log(num / den);
}

long double oracle_ce(const std::vector<double>& logits, int n, int c, int hw, const std::vector<std::uint8_t>& t) {
  long double total = 0;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < hw; ++i) {
      long double z = 0;
      for (int k = 0; k < c; ++k) z += std::exp(static_cast<long double>(logits[(b * c + k) * hw + i]));
      const long double p = std::exp(static_cast<long double>(logits[(b * c + t[b * hw + i]) * hw + i])) / z;
      total -= std::log(p);
    }
  return total / (n * hw);
}

std::vector<double> unit_vector(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(d);
  double n = 0;
  for (auto& x : v) n += (x = g(rng)) * x;
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

Outcome criterion_loss_oracles() {
  std::mt19937_64 rng(1001);
  const double tau = 0.07;
  double worst_nce = 0, worst_patch = 0, worst_ce = 0;
  for (int f = 0; f < 1000; ++f) {
    const int d = 2 + static_cast<int>(rng() % 31), k = 1 + static_cast<int>(rng() % 16);
    auto q = unit_vector(d, rng), pos = unit_vector(d, rng);
    std::vector<std::vector<double>> negs;
    for (int i = 0; i < k; ++i) negs.push_back(unit_vector(d, rng));
    std::vector<std::span<const double>> nspans(negs.begin(), negs.end());
    const long double want = oracle_nce(q, pos, negs, tau);
    worst_nce = std::max(worst_nce, static_cast<double>(std::abs(nce_loss<double>(q, pos, nspans, tau) - want)));

    // Batched form on a single sample: row i of the keys is the positive of
    // query i; the mean over rows is compared with per-row oracle calls.
    const int p = k + 1;
    std::vector<std::vector<double>> qs, ks;
    for (int i = 0; i < p; ++i) qs.push_back(unit_vector(d, rng)), ks.push_back(unit_vector(d, rng));
    Tensor<double> tq({p, d}), tk({p, d});
    long double mean = 0;
    for (int i = 0; i < p; ++i) {
      std::vector<std::vector<double>> others;
      for (int j = 0; j < p; ++j)
        if (j != i) others.push_back(ks[j]);
      mean += oracle_nce(qs[i], ks[i], others, tau) / p;
      for (int c = 0; c < d; ++c) tq[static_cast<std::size_t>(i) * d + c] = qs[i][c], tk[static_cast<std::size_t>(i) * d + c] = ks[i][c];
    }
    const double got = patch_nce(Var<double>(tq), Var<double>(tk), 1, tau).item();
    worst_patch = std::max(worst_patch, static_cast<double>(std::abs(got - mean)));

    const int n = 1 + static_cast<int>(rng() % 2), h = 1 + static_cast<int>(rng() % 5), w = 1 + static_cast<int>(rng() % 5);
    std::uniform_real_distribution<double> u(-6, 6);
    std::vector<double> logits(static_cast<std::size_t>(n) * 4 * h * w);
    for (auto& v : logits) v = u(rng);
    std::vector<std::uint8_t> t(static_cast<std::size_t>(n) * h * w);
    for (auto& v : t) v = static_cast<std::uint8_t>(rng() % 4);
    const double ce = segmentation_ce(Var<double>(Tensor<double>({n, 4, h, w}, logits)), t).item();
    worst_ce = std::max(worst_ce, static_cast<double>(std::abs(ce - oracle_ce(logits, n, 4, h * w, t))));
  }
  const bool ok = worst_nce < 1e-6 && worst_patch < 1e-6 && worst_ce < 1e-6;
  return {ok, "1000 fixtures, max |err| nce " + fmt(worst_nce) + ", patch_nce " + fmt(worst_patch) + ", ce " +
                  fmt(worst_ce)};
}

// ---------------------------------------------------------------------------
// 2. gradients

Outcome criterion_gradients() {
  std::mt19937_64 rng(2002);
  double worst_fuse = 0, worst_ce = 0;
  for (int f = 0; f < 50; ++f) {
    const int c = 2 + static_cast<int>(rng() % 2), s = 3 + static_cast<int>(rng() % 2), b = 1 + static_cast<int>(rng() % 2);
    Initializer init(rng());
    init.stddev = 0.5;
    MafBlock<double> maf(c, 3, init);
    std::vector<int> pos;
    std::vector<int> all(static_cast<std::size_t>(s) * s);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    pos.assign(all.begin(), all.begin() + 4);
    std::vector<Var<double>> inputs;
    for (int n = 0; n < 3; ++n) inputs.emplace_back(random_tensor({b, c, s, s}, rng));
    inputs.emplace_back(random_tensor({b, c, s, s}, rng));  // key stream
    inputs.push_back(maf.attention.weight);
    inputs.push_back(maf.fuse.weight);
    worst_fuse = std::max(worst_fuse, gradcheck(inputs, [&](const std::vector<Var<double>>& in) {
                            MafBlock<double> m = maf;
                            m.attention.weight = in[4];
                            m.fuse.weight = in[5];
                            const auto fused = m({in[0], in[1], in[2]}).fused;
                            const auto q = l2_normalize_rows(gather_positions(fused, pos));
                            const auto k = l2_normalize_rows(gather_positions(in[3], pos));
                            return patch_nce(q, k, b, 0.07);
                          }));

    const int h = 2 + static_cast<int>(rng() % 3), w = 2 + static_cast<int>(rng() % 3);
    std::vector<std::uint8_t> t(static_cast<std::size_t>(b) * h * w);
    for (auto& v : t) v = static_cast<std::uint8_t>(rng() % 4);
    worst_ce = std::max(worst_ce, gradcheck({Var<double>(random_tensor({b, 4, h, w}, rng, -3, 3))},
                                            [&](const std::vector<Var<double>>& in) { return segmentation_ce(in[0], t); }));
  }
  return {worst_fuse < 1e-4 && worst_ce < 1e-4,
          "50 fixtures, max rel err maf_fuse+nce " + fmt(worst_fuse) + ", ce " + fmt(worst_ce)};
}

// ---------------------------------------------------------------------------
// 3. attention normalization

template <class T>
bool equal_logits_exact() {
  Initializer init(3);
  MafBlock<T> maf(2, 3, init);
  maf.attention.weight.mutable_value().fill(T(0));
  std::mt19937_64 rng(5);
  std::vector<Var<T>> feats;
  for (int n = 0; n < 3; ++n) {
    Tensor<T> t({1, 2, 5, 5});
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
    feats.emplace_back(t);
  }
  const auto a = maf(feats).attention;
  for (T v : a.value().values())
    if (v != T(1) / T(3)) return false;
  return true;
}

Outcome criterion_attention() {
  std::mt19937_64 rng(3003);
  double worst = 0;
  bool nonneg = true;
  for (int f = 0; f < 100; ++f) {
    const int c = 1 + static_cast<int>(rng() % 4), h = 1 + static_cast<int>(rng() % 6), w = 1 + static_cast<int>(rng() % 6);
    const int b = 1 + static_cast<int>(rng() % 2);
    Initializer init(rng());
    init.stddev = std::uniform_real_distribution<double>(0.02, 3.0)(rng);
    MafBlock<double> maf(c, 3, init);
    std::normal_distribution<double> bias(0, 2);
    for (auto& v : maf.attention.bias.mutable_value().values()) v = bias(rng);
    std::vector<Var<double>> feats;
    for (int n = 0; n < 3; ++n) feats.emplace_back(random_tensor({b, c, h, w}, rng, -10, 10));
    const auto a = maf(feats).attention.value();
    for (int i = 0; i < b; ++i)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double s = 0;
          for (int n = 0; n < 3; ++n) {
            s += a.at(i, n, y, x);
            nonneg = nonneg && a.at(i, n, y, x) >= 0;
          }
          worst = std::max(worst, std::abs(s - 1.0));
        }
  }
  const bool eq = equal_logits_exact<double>() && equal_logits_exact<float>();
  return {worst < 1e-6 && nonneg && eq, "100 fixtures, max |sum-1| " + fmt(worst) +
                                           (eq ? ", equal logits give exactly 1/3" : ", equal-logit fixture not 1/3")};
}

// ---------------------------------------------------------------------------
// 4. metric oracles

std::optional<double> oracle_assd(const Mask& p, const Mask& g, int h, int w, std::array<double, 2> sp) {
  auto border = [&](const Mask& m) {
    std::vector<std::pair<int, int>> out;
    auto in = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && m[y * w + x]; };
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (in(y, x) && (!in(y - 1, x) || !in(y + 1, x) || !in(y, x - 1) || !in(y, x + 1))) out.emplace_back(y, x);
    return out;
  };
  const auto bp = border(p), bg = border(g);
  if (bp.empty() || bg.empty()) return std::nullopt;
  auto min_dist = [&](std::pair<int, int> a, const std::vector<std::pair<int, int>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : set)
      best = std::min(best, std::hypot((a.first - b.first) * sp[0], (a.second - b.second) * sp[1]));
    return best;
  };
  double total = 0;
  for (const auto& a : bp) total += min_dist(a, bg);
  for (const auto& a : bg) total += min_dist(a, bp);
  return total / static_cast<double>(bp.size() + bg.size());
}

Mask random_mask(std::mt19937_64& rng, int h, int w) {
  Mask m(static_cast<std::size_t>(h) * w, 0);
  const int kind = static_cast<int>(rng() % 4);
  if (kind == 0) return m;  // empty
  if (kind == 1) {
    const double p = std::uniform_real_distribution<double>(0.05, 0.9)(rng);
    for (auto& v : m) v = std::uniform_real_distribution<double>(0, 1)(rng) < p;
    return m;
  }
  const int rects = 1 + static_cast<int>(rng() % 3);
  for (int r = 0; r < rects; ++r) {
    const int y0 = static_cast<int>(rng() % h), x0 = static_cast<int>(rng() % w);
    const int y1 = y0 + static_cast<int>(rng() % (h - y0)), x1 = x0 + static_cast<int>(rng() % (w - x0));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) m[y * w + x] = 1;
  }
  return m;
}

Outcome criterion_metrics() {
  std::mt19937_64 rng(4004);
  const int h = 16, w = 16;
  bool dice_exact = true, defined_agree = true;
  double worst_assd = 0;
  for (int f = 0; f < 100; ++f) {
    const auto p = random_mask(rng, h, w), g = random_mask(rng, h, w);
    std::set<int> sp, sg;
    for (int i = 0; i < h * w; ++i) {
      if (p[i]) sp.insert(i);
      if (g[i]) sg.insert(i);
    }
    std::vector<int> inter;
    std::set_intersection(sp.begin(), sp.end(), sg.begin(), sg.end(), std::back_inserter(inter));
    const double want = sp.empty() && sg.empty() ? 1.0 : 2.0 * inter.size() / static_cast<double>(sp.size() + sg.size());
    dice_exact = dice_exact && dice(p, g) == want;
    const std::array<double, 2> spacing = f % 2 ? std::array<double, 2>{1.0, 1.0} : std::array<double, 2>{1.5, 0.75};
    const auto got = assd(p, g, h, w, spacing), ref = oracle_assd(p, g, h, w, spacing);
    if (got.has_value() != ref.has_value()) defined_agree = false;
    else if (got) worst_assd = std::max(worst_assd, std::abs(*got - *ref));
  }
  std::vector<float> img(32 * 32);
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : img) v = u(rng);
  const double self = ssim({img, 32, 32}, {img, 32, 32}, 2.0);
  // 16 of 100 pixels off by 0.25 (exact in binary): MSE = 16 * 0.0625 / 100 = 0.01
  std::vector<float> zero(100, 0.0f), off(100, 0.0f);
  std::fill(off.begin(), off.begin() + 16, 0.25f);
  const double ps = psnr({zero, 10, 10}, {off, 10, 10}, 1.0);
  const double ps_direct = psnr_from_mse(0.01, 1.0);
  const bool ok = dice_exact && defined_agree && worst_assd < 1e-9 && self == 1.0 && std::abs(ps - 20.0) < 1e-9 &&
                  std::abs(ps_direct - 20.0) < 1e-9;
  return {ok, std::string("dice ") + (dice_exact ? "exact" : "MISMATCH") + ", assd max |err| " + fmt(worst_assd) +
                  (defined_agree ? "" : " (definedness differs)") + ", ssim(x,x) " + fmt(self, 17) + ", psnr " +
                  fmt(ps, 12) + " dB"};
}

// ---------------------------------------------------------------------------
// 5. objective composition

Outcome criterion_objectives() {
  std::mt19937_64 rng(5005);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  bool ok = true;
  double worst = 0;
  auto scalar = [](double v) { return Var<double>(Tensor<double>({1}, v), true); };
  for (const auto& w : {LossWeights::with_identity(true), LossWeights::with_identity(false)}) {
    for (int f = 0; f < 20; ++f) {
      const double gan = u(rng), x1 = u(rng), x2 = u(rng), x3 = u(rng), y = u(rng);
      SynthesisParts<double> parts{scalar(gan), {scalar(x1), scalar(x2), scalar(x3)}, scalar(y)};
      const auto out = synthesis_objective(parts, w);
      const long double want = gan + w.lambda_x * ((long double)x1 + x2 + x3) / 3 + w.lambda_y * (long double)y;
      worst = std::max(worst, static_cast<double>(std::abs(out.item() - want)));
      // Superposition: the response to each unit component is its weight,
      // and the weighted responses sum back to the full value.
      backward(out);
      const double gx = w.lambda_x / 3.0;
      ok = ok && parts.gan.grad_or_empty()[0] == 1.0;
      for (const auto& v : parts.nce_x) ok = ok && v.grad_or_empty()[0] == gx;
      ok = ok && (w.lambda_y == 0 ? parts.nce_y.grad_or_empty().empty() || parts.nce_y.grad_or_empty()[0] == 0
                                  : parts.nce_y.grad_or_empty()[0] == w.lambda_y);
      const double sum = 1.0 * gan + gx * (x1 + x2 + x3) + w.lambda_y * y;
      worst = std::max(worst, std::abs(out.item() - sum));
      worst = std::max(worst, std::abs(synthesis_objective(gan, (x1 + x2 + x3) / 3, y, w) - sum));
    }
    // (10, 0) also works with no identity term at all.
    if (w.lambda_y == 0) {
      SynthesisParts<double> parts{scalar(1.0), {scalar(2.0), scalar(2.0), scalar(2.0)}, {}};
      ok = ok && synthesis_objective(parts, w).item() == 21.0;
    }
  }
  for (int f = 0; f < 20; ++f) {
    const double syn = u(rng), seg = u(rng);
    auto vs = scalar(syn), vg = scalar(seg);
    const auto t = total_objective(vs, vg, 1e-3);
    backward(t);
    ok = ok && vs.grad_or_empty()[0] == 1e-3 && vg.grad_or_empty()[0] == 1.0;
    worst = std::max(worst, std::abs(t.item() - (1e-3 * syn + seg)));
    worst = std::max(worst, std::abs(total_objective(syn, seg, 1e-3) - (1e-3 * syn + seg)));
  }
  ok = ok && worst < 1e-12;
  return {ok, "weights (1,1), (10,0), lambda 1e-3: max |err| " + fmt(worst) + (ok ? ", unit responses exact" : "")};
}

// ---------------------------------------------------------------------------
// 6. schedule

Outcome criterion_schedule() {
  TrainData data;
  for (std::uint64_t seed : {61u, 62u}) {
    auto s = phantom_slices(seed, {32, 32, 8});
    data.train.insert(data.train.end(), s.begin(), s.end());
  }
  const auto tc = TrainConfig::desk_scale();
  TrainState<float> st(ModelConfig::desk_scale(), tc);
  std::vector<Tensor<float>> seg0;
  for (const auto& [k, v] : st.net.segmentor_params()) seg0.push_back(v.value());
  bool seg_frozen = true, seg_moved = false;
  std::vector<int> phases;
  FitOptions<float> fo;
  fo.should_stop = [&](const StepRecord& r) {
    const auto now = st.net.segmentor_params();
    bool same = true;
    for (std::size_t i = 0; i < now.size(); ++i) same = same && same_bits(now[i].second.value(), seg0[i]);
    if (r.phase == 1) seg_frozen = seg_frozen && same;
    else seg_moved = seg_moved || !same;
    return false;
  };
  fo.on_epoch = [&](const EpochRecord& e) { phases.push_back(e.phase); };
  fit(st, data, fo);
  const bool schedule = phases == std::vector<int>{1, 1, 2, 2, 2};
  const int per_epoch = (static_cast<int>(data.train.size()) + tc.batch_size - 1) / tc.batch_size;
  const bool steps = st.steps.size() == static_cast<std::size_t>(5 * per_epoch);
  const std::array<double, 4> want{4e-4, 4e-4, 2e-4, 1e-4};
  bool lrs = true;
  std::ostringstream lr_text;
  for (int g = 0; g < 4; ++g) {
    lrs = lrs && st.groups[g].settings.lr == want[g] && !st.groups[g].params.empty();
    lr_text << (g ? "/" : "") << st.groups[g].settings.lr;
  }
  const bool ok = schedule && steps && seg_frozen && seg_moved && lrs;
  std::ostringstream os;
  os << "epochs by phase";
  for (int p : phases) os << ' ' << p;
  os << ", " << st.steps.size() << " steps, segmentor " << (seg_frozen ? "unchanged" : "CHANGED") << " in phase 1"
     << (seg_moved ? " and updated in phase 2" : ", never updated in phase 2") << ", lr " << lr_text.str();
  return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 7. overfit smoke test

Outcome criterion_overfit(int steps) {
  TrainData d;
  for (std::uint64_t seed : {101u, 102u}) {
    auto s = phantom_slices(seed, {64, 64, 24});
    const std::size_t mid = s.size() / 2;
    d.train.insert(d.train.end(), s.begin() + static_cast<std::ptrdiff_t>(mid) - 2, s.begin() + static_cast<std::ptrdiff_t>(mid) + 2);
  }
  TrainState<float> st(ModelConfig::desk_scale(), TrainConfig::desk_scale());
  const int bs = st.config.batch_size;
  const auto t0 = std::chrono::steady_clock::now();
  for (int done = 0; done < steps;) {
    const auto plan = make_epoch_plan(d.train, st.rng);
    const int n = static_cast<int>(plan.order.size());
    for (int lo = 0; lo < n && done < steps; lo += bs, ++done) {
      const int len = std::min(bs, n - lo);
      train_step_joint(st, make_batch<float>(d.train, std::span<const int>(plan.order).subspan(lo, len),
                                             std::span<const int>(plan.partners).subspan(lo, len)));
    }
  }
  const auto s = evaluate_predictions(d.train, predict(st.net, d.train)).summary();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double ssim_v = s.ssim_mean.value_or(0.0);
  const bool ok = s.dice_mean[0] >= 0.80 && ssim_v >= 0.70 && secs <= 15 * 60;
  return {ok, std::to_string(d.train.size()) + " slices, " + std::to_string(steps) + " joint steps: Dice(WT) " +
                  fmt(s.dice_mean[0], 4) + " (>= 0.80), SSIM " + fmt(ssim_v, 4) + " (>= 0.70), " + fmt(secs, 4) +
                  " s on " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " core(s)"};
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

ModelConfig tiny_model() {
  ModelConfig m;
  m.generator.base_width = 4;
  m.generator.n_blocks = 1;
  m.generator.nce_layers = {0, 4, 8, 12};
  m.generator.num_patches = 16;
  m.generator.proj_dim = 8;
  m.discriminator.base_width = 4;
  m.unet.base_width = 4;
  m.unet.depth = 2;
  return m;
}

Outcome criterion_persistence() {
  TrainData data;
  for (std::uint64_t seed : {81u, 82u}) {
    auto s = phantom_slices(seed, {32, 32, 8});
    data.train.insert(data.train.end(), s.begin(), s.end());
  }
  TrainConfig tc;
  tc.seed = 8;
  tc.batch_size = 2;
  tc.epochs_synthesis = 1;
  tc.epochs_joint = 2;
  TrainState<float> a(tiny_model(), tc), b(tiny_model(), tc);
  fit(a, data);
  fit(b, data);
  const double rerun = max_step_diff(a.steps, b.steps);

  const auto dir = scratch("persist");
  fs::create_directories(dir);
  save_checkpoint(a, dir / "a.ckpt");
  auto loaded = load_checkpoint<float>(dir / "a.ckpt", {tiny_model(), tc});
  bool bits = true;
  const auto pa = a.net.all_params(), pl = loaded.net.all_params();
  bits = bits && pa.size() == pl.size();
  for (std::size_t i = 0; bits && i < pa.size(); ++i) bits = pa[i].first == pl[i].first && same_bits(pa[i].second.value(), pl[i].second.value());
  for (int g = 0; g < 4; ++g) {
    bits = bits && a.groups[g].steps == loaded.groups[g].steps && a.groups[g].m.size() == loaded.groups[g].m.size();
    for (std::size_t i = 0; bits && i < a.groups[g].m.size(); ++i)
      bits = same_bits(a.groups[g].m[i], loaded.groups[g].m[i]) && same_bits(a.groups[g].v[i], loaded.groups[g].v[i]);
  }
  save_checkpoint(loaded, dir / "b.ckpt");
  bits = bits && slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt") && max_step_diff(a.steps, loaded.steps) == 0.0;

  const int total = static_cast<int>(a.steps.size());
  double resume = 0;
  for (int stop_at : {1, total / 2, total - 2}) {
    TrainState<float> s(tiny_model(), tc);
    FitOptions<float> fo;
    fo.out_dir = dir / ("stop" + std::to_string(stop_at));
    fo.should_stop = [&](const StepRecord& r) { return r.step == stop_at; };
    const auto res = fit(s, data, fo);
    if (!res.interrupted || !res.resume_checkpoint) return {false, "run was not interrupted at step " + std::to_string(stop_at)};
    auto r = load_checkpoint<float>(*res.resume_checkpoint, {tiny_model(), tc});
    fit(r, data);
    resume = std::max(resume, max_step_diff(r.steps, a.steps));
    const auto pr = r.net.all_params();
    for (std::size_t i = 0; i < pr.size(); ++i)
      if (!same_bits(pr[i].second.value(), pa[i].second.value())) resume = std::max(resume, 1.0);
  }
  fs::remove_all(dir);
  const bool ok = rerun <= 1e-10 && bits && resume <= 1e-10;
  return {ok, std::to_string(total) + "-step history: rerun max |diff| " + fmt(rerun) + ", checkpoint " +
                  (bits ? "bit-exact" : "NOT bit-exact") + ", resume max |diff| " + fmt(resume)};
}

// ---------------------------------------------------------------------------
// 9. format round trip

Outcome criterion_formats() {
  std::mt19937_64 rng(9009);
  const auto dir = scratch("nifti");
  fs::create_directories(dir);
  int exact = 0;
  for (int f = 0; f < 100; ++f) {
    Volume v = Volume::zeros(1 + static_cast<int>(rng() % 12), 1 + static_cast<int>(rng() % 12),
                             1 + static_cast<int>(rng() % 6),
                             {0.5f + static_cast<float>(rng() % 8) / 4, 1.0f, 2.5f});
    for (auto& x : v.voxels) {
      // arbitrary finite bit patterns, plus signed zero and subnormals
      std::uint32_t bits;
      do bits = static_cast<std::uint32_t>(rng());
      while ((bits & 0x7f800000u) == 0x7f800000u);
      std::memcpy(&x, &bits, 4);
    }
    v.voxels[0] = -0.0f;
    if (v.voxels.size() > 1) v.voxels[1] = std::numeric_limits<float>::denorm_min();
    const auto path = dir / (std::to_string(f) + (f % 2 ? ".nii.gz" : ".nii"));
    write_nifti_file(path, v);
    const auto back = read_nifti_file(path);
    exact += back.same_dims(v) && back.voxels.size() == v.voxels.size() &&
             std::memcmp(back.voxels.data(), v.voxels.data(), 4 * v.voxels.size()) == 0 &&
             back.header.pixdim[1] == v.header.pixdim[1];
  }
  cli::cmd_phantom({dir / "tree", 3, 9, {32, 32, 10}});
  std::size_t cases = 0, slices = 0;
  bool tree_ok = true;
  for (const auto& c : list_case_dirs(dir / "tree")) {
    LoadOptions lo;
    lo.require_t1ce = true;
    const auto loaded = load_case(c, lo);
    SliceOptions so;
    so.crop_size = std::nullopt;
    const auto s = make_slices(loaded, so);
    tree_ok = tree_ok && !s.empty() && loaded.case_id == c.filename().string();
    slices += s.size();
    ++cases;
  }
  fs::remove_all(dir);
  const bool ok = exact == 100 && tree_ok && cases == 3;
  return {ok, std::to_string(exact) + "/100 volumes bit-exact, phantom tree " + std::to_string(cases) + " cases / " +
                  std::to_string(slices) + " tumor slices loaded"};
}

// ---------------------------------------------------------------------------
// 10. report fidelity

Outcome criterion_report() {
  const auto dir = scratch("report");
  cli::cmd_phantom({dir / "data", 3, 10, {32, 32, 10}});
  fs::create_directories(dir);
  std::ofstream(dir / "tiny.toml") << "[generator]\nbase_width = 4\nn_blocks = 1\nnce_layers = [0, 4, 8, 12]\n"
                                      "num_patches = 16\nproj_dim = 8\n[discriminator]\nbase_width = 4\n"
                                      "[unet]\nbase_width = 4\ndepth = 2\n[train]\nbatch_size = 2\n"
                                      "epochs_synthesis = 1\nepochs_joint = 1\n";
  cli::TrainArgs ta;
  ta.data = dir / "data";
  ta.config = dir / "tiny.toml";
  ta.out = dir / "run";
  ta.desk_scale = true;
  ta.quiet = true;
  cli::cmd_train(ta);
  cli::cmd_evaluate({dir / "run" / "best.ckpt", dir / "data", dir / "eval"});

  std::ifstream csv(dir / "eval" / "metrics.csv");
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(csv, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  const auto j = json::parse(slurp(dir / "eval" / "metrics.json"));
  const std::vector<std::pair<std::string, json>> cols{
      {"dice_wt", j["regions"]["WT"]["dice"]}, {"dice_et", j["regions"]["ET"]["dice"]},
      {"dice_tc", j["regions"]["TC"]["dice"]}, {"assd_wt", j["regions"]["WT"]["assd"]},
      {"assd_et", j["regions"]["ET"]["assd"]}, {"assd_tc", j["regions"]["TC"]["assd"]},
      {"ssim", j["ssim"]},                      {"psnr", j["psnr"]}};
  double worst = 0;
  bool shape_ok = rows.size() > 1;
  for (std::size_t k = 0; shape_ok && k < cols.size(); ++k) {
    shape_ok = rows[0][k + 2] == cols[k].first;
    long double sum = 0;
    int n = 0;
    for (std::size_t r = 1; r < rows.size(); ++r)
      if (rows[r][k + 2] != "NA") sum += std::stold(rows[r][k + 2]), ++n;
    if (n == 0) {
      shape_ok = shape_ok && cols[k].second.is_null();
      continue;
    }
    worst = std::max(worst, static_cast<double>(std::abs(cols[k].second.get<double>() - sum / n)));
  }
  const auto table = slurp(dir / "eval" / "table.md");
  const bool layout = table.find("| Method | WT Dice | WT ASSD | ET Dice | ET ASSD | TC Dice | TC ASSD |") != std::string::npos &&
                      table.find("| Method | SSIM | PSNR (dB) |") != std::string::npos &&
                      table.find("SSIM 0.8879, PSNR 22.78 dB; Dice WT 88.0%, ET 41.8%, TC 67.9%") != std::string::npos;
  const std::string wt = format_fixed(100.0 * j["regions"]["WT"]["dice"].get<double>(), 1) + "%";
  const bool values = table.find("| This run | " + wt + " |") != std::string::npos;
  fs::remove_all(dir);
  const bool ok = shape_ok && layout && values && worst <= 1e-9;
  return {ok, std::to_string(rows.size() - 1) + " rows, aggregates vs row means max |diff| " + fmt(worst) +
                  (layout ? ", table layout ok" : ", table layout WRONG") + (values ? "" : ", table values disagree")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only, expect_fail;
  int overfit_steps = 200;
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "criteria known not to meet their gate")->delimiter(',');
  app.add_option("--overfit-steps", overfit_steps, "joint steps for the overfit smoke test")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"loss oracles", criterion_loss_oracles},
      {"gradient check", criterion_gradients},
      {"attention normalization", criterion_attention},
      {"metric oracles", criterion_metrics},
      {"objective composition", criterion_objectives},
      {"schedule conformance", criterion_schedule},
      {"overfit smoke test", [&] { return criterion_overfit(overfit_steps); }},
      {"determinism and persistence", criterion_persistence},
      {"format round trip", criterion_formats},
      {"report fidelity", criterion_report},
  };
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool expected = std::find(expect_fail.begin(), expect_fail.end(), id) != expect_fail.end();
    if (!o.pass && !expected) ++unexpected;
    std::cout << "criterion " << std::setw(2) << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
              << " | " << o.detail << " | " << fmt(secs, 3) << " s" << (expected && !o.pass ? " | known failure" : "")
              << std::endl;
  }
  return unexpected == 0 ? 0 : 1;
}
