#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "models.hpp"

namespace mafnet {

struct AdamSettings {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over one named parameter group, with bias correction.
template <class T>
struct AdamGroup {
  std::string name;
  AdamSettings settings;
  ParamList<T> params;
  std::vector<Tensor<T>> m, v;
  std::int64_t steps = 0;

  AdamGroup() = default;
  AdamGroup(std::string name_, AdamSettings s, ParamList<T> p)
      : name(std::move(name_)), settings(s), params(std::move(p)) {
    for (const auto& [key, var] : params) {
      m.emplace_back(var.shape(), T(0));
      v.emplace_back(var.shape(), T(0));
    }
  }

  void zero_grad() {
    for (auto& [key, var] : params) var.zero_grad();
  }

  // Parameters without a gradient (not reached by backward) are left as is,
  // but their moments still decay as in the reference algorithm with a
  // zero gradient only when they had one before; here they are skipped.
  void step() {
    ++steps;
    const double b1 = settings.beta1, b2 = settings.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps));
    const T step_size = static_cast<T>(settings.lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(settings.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& var = params[i].second;
      const auto& g = var.grad_or_empty();
      if (g.empty()) continue;
      auto& w = var.mutable_value();
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t j = 0; j < g.size(); ++j) {
        mi[j] = static_cast<T>(b1) * mi[j] + static_cast<T>(1 - b1) * g[j];
        vi[j] = static_cast<T>(b2) * vi[j] + static_cast<T>(1 - b2) * g[j] * g[j];
        w[j] -= step_size * mi[j] / (std::sqrt(vi[j]) * inv_sqrt_c2 + eps);
      }
    }
  }
};

}  // namespace mafnet
