#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "hfvad/tensor.hpp"

namespace hfvad::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <std::floating_point T>
struct AdamState {
  std::vector<std::vector<T>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<T>> v;  // second moments
  std::size_t step = 0;
};

/// One Adam update of a single flat parameter buffer, with bias correction at step `t` (1-based).
template <std::floating_point T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t t,
                 const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  if (param.size() != grad.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam: state does not match parameter size");
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = c1 > 0 ? mi / c1 : mi;
    const double vhat = c2 > 0 ? vi / c2 : vi;
    param[i] = static_cast<T>(param[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Applies one Adam step to every parameter using its accumulated gradient; parameters
/// without a gradient are treated as having a zero gradient.
template <std::floating_point T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam: state does not match parameter list");
  ++state.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    std::vector<T> zeros;
    std::span<const T> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.numel(), T(0));
      g = zeros;
    }
    adam_update<T>(p.mutable_data(), g, state.m[k], state.v[k], state.step, cfg);
  }
}

}  // namespace hfvad::ad
