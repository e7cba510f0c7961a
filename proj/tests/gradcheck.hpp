#pragma once

// Central finite-difference gradient checker for 64-bit graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hfvad/ops.hpp"

namespace hfvad::testing {

using ad::Tensord;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t worst_leaf = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

/// Relative error with an absolute floor on the denominator so that gradients that are
/// (numerically) zero compare by absolute difference.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares d loss / d leaf from backward() with central differences at `probes_per_leaf`
/// random coordinates of each leaf (all coordinates when the leaf is small enough).
inline GradCheckResult grad_check(std::vector<Tensord>& leaves, const std::function<Tensord()>& loss_fn,
                                  std::size_t probes_per_leaf = 16, double h = 1e-5, std::uint64_t seed = 7,
                                  double floor = 1e-3) {
  for (auto& l : leaves) l.zero_grad();
  auto loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    auto g = l.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(l.numel(), 0.0);
  }
  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& leaf = leaves[k];
    std::vector<std::size_t> idx(leaf.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > probes_per_leaf) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(probes_per_leaf);
    }
    for (auto i : idx) {
      auto data = leaf.mutable_data();
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss_fn().item();
      data[i] = orig - h;
      const double down = loss_fn().item();
      data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = rel_error(analytic[k][i], numeric, floor);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_leaf = k;
        result.worst_analytic = analytic[k][i];
        result.worst_numeric = numeric;
      }
      ++result.probes;
    }
  }
  return result;
}

template <class T>
ad::Tensor<T> random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return ad::Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Values bounded away from zero (for kinked ops such as relu) with random sign.
inline Tensord random_away_from_zero(ad::Shape shape, std::mt19937_64& rng, double min_abs = 0.05) {
  std::uniform_real_distribution<double> mag(min_abs, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensord(std::move(shape), std::move(v), true);
}

}  // namespace hfvad::testing
