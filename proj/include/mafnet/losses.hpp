#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "models.hpp"

namespace mafnet {

struct LossWeights {
  double lambda_x = 1.0;
  double lambda_y = 1.0;
  double tau = 0.07;
  double lambda = 1e-3;  // weight of the synthesis objective in the joint loss
  bool use_identity = true;

  // (lambda_x, lambda_y) = (1, 1) with the identity term, (10, 0) without.
  static LossWeights with_identity(bool on) {
    LossWeights w;
    w.use_identity = on;
    w.lambda_x = on ? 1.0 : 10.0;
    w.lambda_y = on ? 1.0 : 0.0;
    return w;
  }

  bool standard_pair() const {
    return (lambda_x == 1.0 && lambda_y == 1.0) || (lambda_x == 10.0 && lambda_y == 0.0);
  }

  void validate(bool allow_override = false) const {
    require(tau > 0, ErrorCode::BadConfig, "tau must be positive");
    require(lambda >= 0, ErrorCode::BadConfig, "lambda must be non-negative");
    require(lambda_x >= 0 && lambda_y >= 0, ErrorCode::BadConfig, "loss weights must be non-negative");
    require(allow_override || standard_pair(), ErrorCode::BadConfig,
            "(lambda_x, lambda_y) must be (1,1) or (10,0) unless explicitly overridden");
  }
};

// -log( e^{q.k+/tau} / (e^{q.k+/tau} + sum_i e^{q.k_i/tau}) ) for a single
// query against one positive and K >= 1 negatives.
template <class T>
T nce_loss(std::span<const T> query, std::span<const T> positive, const std::vector<std::span<const T>>& negatives,
           T tau) {
  require(!negatives.empty(), ErrorCode::ZeroNegatives, "nce_loss needs at least one negative");
  auto dot = [](std::span<const T> a, std::span<const T> b) {
    require(a.size() == b.size(), ErrorCode::ShapeMismatch, "nce_loss: embedding size mismatch");
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  std::vector<T> logits;
  logits.push_back(dot(query, positive) / tau);
  for (const auto& n : negatives) logits.push_back(dot(query, n) / tau);
  // (mx - l0) + log(sum_i e^{l_i - mx}), with the argmax term split off so
  // that near-perfect matches keep full precision through log1p.
  const auto top = std::max_element(logits.begin(), logits.end());
  const T mx = *top;
  T rest = 0;
  for (auto it = logits.begin(); it != logits.end(); ++it)
    if (it != top) rest += std::exp(*it - mx);
  return (mx - logits[0]) + std::log1p(rest);
}

// Batched patchwise NCE. query/key: (B*P, D) rows, sample-major. Row i of a
// sample is the positive for query i; the other P-1 key rows of the same
// sample are its negatives. Returns the mean over all B*P terms.
template <class T>
Var<T> patch_nce(const Var<T>& query, const Var<T>& key, int batch, T tau) {
  require_rank(query.shape(), 2, "patch_nce query");
  require_shape(key.shape(), query.shape(), "patch_nce key");
  const int rows = query.dim(0), d = query.dim(1);
  require(batch > 0 && rows % batch == 0, ErrorCode::ShapeMismatch, "patch_nce: rows not divisible by batch");
  const int p = rows / batch;
  require(p >= 2, ErrorCode::ZeroNegatives, "patch_nce needs at least two positions per sample");
  // softmax probabilities per sample, kept for backward
  auto probs = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(batch) * p * p);
  T total = 0;
  for (int b = 0; b < batch; ++b) {
    detail::ConstMapMat<T> q(query.value().data() + static_cast<std::size_t>(b) * p * d, p, d);
    detail::ConstMapMat<T> k(key.value().data() + static_cast<std::size_t>(b) * p * d, p, d);
    detail::MapMat<T> pr(probs->data() + static_cast<std::size_t>(b) * p * p, p, p);
    pr.noalias() = q * k.transpose();
    pr /= tau;
    for (int i = 0; i < p; ++i) {
      int top = 0;
      const T mx = pr.row(i).maxCoeff(&top);
      const T diag = pr(i, i);
      T rest = 0;
      for (int j = 0; j < p; ++j) {
        pr(i, j) = std::exp(pr(i, j) - mx);
        if (j != top) rest += pr(i, j);
      }
      pr.row(i) /= T(1) + rest;
      total += (mx - diag) + std::log1p(rest);
    }
  }
  const T count = static_cast<T>(rows);
  return make_result<T>(Tensor<T>({1}, total / count), {query, key}, [probs, batch, p, d, tau, count](Node<T>& self) {
    auto& qn = self.input(0);
    auto& kn = self.input(1);
    const T g0 = self.grad[0];
    AlignedVector<T> dl(static_cast<std::size_t>(p) * p);
    for (int b = 0; b < batch; ++b) {
      const std::size_t off = static_cast<std::size_t>(b) * p * d;
      detail::MapMat<T> dlm(dl.data(), p, p);
      dlm = detail::ConstMapMat<T>(probs->data() + static_cast<std::size_t>(b) * p * p, p, p);
      for (int i = 0; i < p; ++i) dlm(i, i) -= T(1);
      dlm *= g0 / (count * tau);
      if (qn.requires_grad) {
        detail::MapMat<T> dq(qn.grad_buffer().data() + off, p, d);
        dq.noalias() += dlm * detail::ConstMapMat<T>(kn.value.data() + off, p, d);
      }
      if (kn.requires_grad) {
        detail::MapMat<T> dk(kn.grad_buffer().data() + off, p, d);
        dk.noalias() += dlm.transpose() * detail::ConstMapMat<T>(qn.value.data() + off, p, d);
      }
    }
  });
}

// Uniform sample of num_patches distinct flattened positions out of h*w.
inline std::vector<int> sample_patch_positions(int h, int w, int num_patches, std::mt19937_64& rng) {
  const int total = h * w;
  require(num_patches >= 1 && num_patches <= total, ErrorCode::TooManyPatches,
          std::to_string(num_patches) + " patches requested from a " + std::to_string(h) + "x" + std::to_string(w) +
              " layer");
  std::vector<int> all(static_cast<std::size_t>(total));
  std::iota(all.begin(), all.end(), 0);
  // Partial Fisher-Yates with an explicit uniform draw so results only depend
  // on the engine, not on library shuffle internals.
  for (int i = 0; i < num_patches; ++i) {
    const auto span = static_cast<std::uint64_t>(total - i);
    const auto j = i + static_cast<int>(rng() % span);
    std::swap(all[i], all[j]);
  }
  all.resize(static_cast<std::size_t>(num_patches));
  return all;
}

inline std::vector<int> sample_patch_positions(int h, int w, int num_patches, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_patch_positions(h, w, num_patches, rng);
}

// Positions for each NCE layer; count clamps to the layer's extent.
using LayerPositions = std::vector<std::vector<int>>;

inline LayerPositions sample_layer_positions(const GeneratorConfig& cfg, int height, int width, std::mt19937_64& rng) {
  LayerPositions out;
  for (int l : cfg.nce_layers) {
    const int s = cfg.stride_at(l);
    const int h = height / s, w = width / s;
    out.push_back(sample_patch_positions(h, w, std::min(cfg.num_patches, h * w), rng));
  }
  return out;
}

// PatchNCE for encoder n between a real image's pyramid (keys) and the
// synthesized image's pyramid (queries): mean over layers of the per-layer
// mean NCE. Keys are detached so the real stream acts as a fixed target.
template <class T>
Var<T> patch_nce_modality(const FeaturePyramid<T>& real, const FeaturePyramid<T>& fake, int n,
                          const LayerPositions& positions, const ProjectionHead<T>& head, T tau) {
  require(real.layers == fake.layers && real.layers.size() == positions.size(), ErrorCode::ShapeMismatch,
          "patch_nce_modality: pyramids/positions disagree");
  std::vector<Var<T>> terms;
  for (std::size_t i = 0; i < real.layers.size(); ++i) {
    require_shape(fake.features[i].shape(), real.features[i].shape(), "patch_nce_modality layer");
    const int batch = real.features[i].dim(0);
    Var<T> k;
    {
      NoGradGuard no_grad;
      k = head(n, i, real.features[i], positions[i]);
    }
    auto q = head(n, i, fake.features[i], positions[i]);
    terms.push_back(patch_nce(q, k, batch, tau));
  }
  return weighted_sum(terms, std::vector<T>(terms.size(), T(1) / static_cast<T>(terms.size())));
}

// Identity/consistency PatchNCE: the real target y is fed to all encoders,
// re-synthesized, and compared with itself per encoder; averaged over the N
// encoders. `gen` needs operator()(x) -> SynthesisResult and
// encode_for_nce(n, img).
template <class T, class Gen>
Var<T> patch_nce_identity(const Var<T>& y_real, const Gen& gen, const std::vector<LayerPositions>& positions,
                          const ProjectionHead<T>& head, T tau) {
  const int n_mod = static_cast<int>(positions.size());
  auto out = gen(repeat_channels(y_real, n_mod));
  std::vector<Var<T>> terms;
  for (int n = 0; n < n_mod; ++n) {
    auto fake = gen.encode_for_nce(n, out.image);
    terms.push_back(patch_nce_modality(out.pyramids[n], fake, n, positions[n], head, tau));
  }
  return weighted_sum(terms, std::vector<T>(terms.size(), T(1) / static_cast<T>(n_mod)));
}

enum class AdversarialSide { Generator, Discriminator };

// Mean BCE-with-logits against a constant target (1 real / 0 fake).
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, bool target_real) {
  const auto& v = logits.value();
  require(v.all_finite(), ErrorCode::NonFinite, "adversarial logits are not finite");
  const T n = static_cast<T>(v.size());
  auto softplus = [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  T total = 0;
  for (T l : v.values()) total += softplus(target_real ? -l : l);
  return make_result<T>(Tensor<T>({1}, total / n), {logits}, [n, target_real](Node<T>& self) {
    auto& in = self.input(0);
    auto& g = in.grad_buffer();
    const T g0 = self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-in.value[i]));
      g[i] += g0 * (target_real ? s - T(1) : s);
    }
  });
}

// Discriminator side: -(E log D(y) + E log(1 - D(G(x)))), D = sigmoid(logits).
// Generator side (non-saturating): -E log D(G(x)); d_real is ignored.
template <class T>
Var<T> adversarial_loss(const Var<T>& d_real, const Var<T>& d_fake, AdversarialSide side) {
  if (side == AdversarialSide::Generator) return bce_with_logits(d_fake, true);
  return add(bce_with_logits(d_real, true), bce_with_logits(d_fake, false));
}

// Mean multi-class cross-entropy. logits: (N,C,H,W); target: N*H*W class ids.
template <class T>
Var<T> segmentation_ce(const Var<T>& logits, std::span<const std::uint8_t> target) {
  require_rank(logits.shape(), 4, "segmentation_ce");
  const int n = logits.dim(0), c = logits.dim(1);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  require(target.size() == n * hw, ErrorCode::ShapeMismatch, "segmentation_ce: target size mismatch");
  for (auto t : target) require(t < c, ErrorCode::BadClass, "class id " + std::to_string(t) + " >= " + std::to_string(c));
  const auto& v = logits.value();
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  T total = 0;
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = static_cast<std::size_t>(b) * c * hw + i;
      T mx = v[base];
      for (int k = 1; k < c; ++k) mx = std::max(mx, v[base + k * hw]);
      T z = 0;
      for (int k = 0; k < c; ++k) z += ((*probs)[base + k * hw] = std::exp(v[base + k * hw] - mx));
      for (int k = 0; k < c; ++k) (*probs)[base + k * hw] /= z;
      const int t = target[b * hw + i];
      total -= v[base + t * hw] - mx - std::log(z);
    }
  const T m = static_cast<T>(n * hw);
  std::vector<std::uint8_t> tgt(target.begin(), target.end());
  return make_result<T>(Tensor<T>({1}, total / m), {logits}, [probs, tgt = std::move(tgt), n, c, hw, m](Node<T>& self) {
    auto& g = self.input(0).grad_buffer();
    const T g0 = self.grad[0] / m;
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t base = static_cast<std::size_t>(b) * c * hw + i;
        const int t = tgt[b * hw + i];
        for (int k = 0; k < c; ++k) g[base + k * hw] += g0 * ((*probs)[base + k * hw] - (k == t ? T(1) : T(0)));
      }
  });
}

// Components of the synthesis objective on one batch.
template <class T>
struct SynthesisParts {
  Var<T> gan;
  std::vector<Var<T>> nce_x;  // one per input modality
  Var<T> nce_y;               // undefined when the identity term is off
};

// L_GAN + lambda_x * (1/N) sum_i L^{X_i} + lambda_y * L^Y
template <class T>
Var<T> synthesis_objective(const SynthesisParts<T>& parts, const LossWeights& w) {
  std::vector<Var<T>> xs{parts.gan};
  std::vector<T> ws{T(1)};
  const T per = static_cast<T>(w.lambda_x) / static_cast<T>(parts.nce_x.size());
  for (const auto& v : parts.nce_x) {
    xs.push_back(v);
    ws.push_back(per);
  }
  if (w.lambda_y != 0.0) {
    require(parts.nce_y.defined(), ErrorCode::BadConfig, "lambda_y > 0 but no identity term computed");
    xs.push_back(parts.nce_y);
    ws.push_back(static_cast<T>(w.lambda_y));
  }
  auto out = weighted_sum(xs, ws);
  require(std::isfinite(out.item()), ErrorCode::NonFinite, "synthesis objective is not finite");
  return out;
}

inline double synthesis_objective(double gan, double nce_x_mean, double nce_y, const LossWeights& w) {
  const double out = gan + w.lambda_x * nce_x_mean + (w.lambda_y != 0.0 ? w.lambda_y * nce_y : 0.0);
  require(std::isfinite(out), ErrorCode::NonFinite, "synthesis objective is not finite");
  return out;
}

// lambda * l_syn + l_seg
template <class T>
Var<T> total_objective(const Var<T>& l_syn, const Var<T>& l_seg, double lambda) {
  require(std::isfinite(l_syn.item()) && std::isfinite(l_seg.item()), ErrorCode::NonFinite,
          "total objective inputs are not finite");
  return weighted_sum<T>({l_syn, l_seg}, {static_cast<T>(lambda), T(1)});
}

inline double total_objective(double l_syn, double l_seg, double lambda) {
  require(std::isfinite(l_syn) && std::isfinite(l_seg), ErrorCode::NonFinite, "total objective inputs are not finite");
  return lambda * l_syn + l_seg;
}

}  // namespace mafnet
