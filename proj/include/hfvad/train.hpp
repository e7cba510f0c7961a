#pragma once

// Mini-batch training loops for the three stages: flow autoencoder, frame predictor, joint fine-tuning.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "hfvad/cvae.hpp"
#include "hfvad/memae.hpp"
#include "hfvad/stc.hpp"

namespace hfvad::train {

using ad::Tensor;

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 3;
  double finetune_memae_weight = 1.0;  // joint loss = w * memae loss + cvae loss

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0, recon = 0, aux = 0;  // aux: entropy (memae) or KL (cvae)
};

using Curve = std::vector<EpochStats>;
using EpochCallback = std::function<void(const EpochStats&)>;

template <std::floating_point T>
struct Batch {
  Tensor<T> flow, cond, target;
};

inline std::size_t flow_channels(const stc::STCube& c) { return c.flow.size() / (32 * 32); }
inline std::size_t cond_channels(const stc::STCube& c) { return c.img.size() / (32 * 32); }

template <std::floating_point T>
Batch<T> make_batch(const std::vector<stc::STCube>& cubes, const std::vector<std::size_t>& idx) {
  std::vector<const std::vector<float>*> f, c, t;
  for (auto i : idx) {
    f.push_back(&cubes[i].flow);
    c.push_back(&cubes[i].img);
    t.push_back(&cubes[i].target);
  }
  const auto& first = cubes[idx.front()];
  return {nn::stack<T>(f, flow_channels(first), 32, 32), nn::stack<T>(c, cond_channels(first), 32, 32),
          nn::stack<T>(t, 3, 32, 32)};
}

inline void check_loss(double v, const char* stage, int epoch) {
  if (!std::isfinite(v))
    throw NumericError(std::string(stage) + ": loss diverged at epoch " + std::to_string(epoch));
}

/// Runs `epochs` passes over shuffled mini-batches. `step` builds the loss for one batch and
/// returns (loss, recon, aux); parameters are updated with Adam after each batch.
template <std::floating_point T>
Curve fit(std::size_t n, const TrainConfig& cfg, std::vector<Tensor<T>>& params, const char* stage,
          const std::function<std::array<Tensor<T>, 3>(const std::vector<std::size_t>&, std::mt19937_64&)>& step,
          const EpochCallback& on_epoch) {
  cfg.validate();
  if (n == 0) throw ConfigError(std::string(stage) + ": no training cubes");
  ad::AdamState<T> state;
  ad::AdamConfig adam;
  adam.lr = cfg.lr;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Curve curve;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::mt19937_64 rng(mix_seed(cfg.seed, {fnv1a(stage), static_cast<std::uint64_t>(e)}));
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats st;
    st.epoch = e;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + cfg.batch_size)));
      for (auto& p : params) p.zero_grad();
      const auto [loss, recon, aux] = step(idx, rng);
      loss.backward();
      ad::adam_step<T>(params, state, adam);
      const double w = static_cast<double>(idx.size()) / static_cast<double>(n);
      st.loss += w * loss.item();
      st.recon += w * recon.item();
      st.aux += w * aux.item();
    }
    check_loss(st.loss, stage, e);
    curve.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return curve;
}

template <std::floating_point T>
Curve train_memae(memae::MemAE<T>& model, const std::vector<stc::STCube>& cubes, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {}) {
  auto& params = model.params().tensors();
  return fit<T>(cubes.size(), cfg, params, "memae",
                [&](const std::vector<std::size_t>& idx, std::mt19937_64&) -> std::array<Tensor<T>, 3> {
                  const auto b = make_batch<T>(cubes, idx);
                  const auto o = model.forward(b.flow);
                  const auto l = model.loss(b.flow, o);
                  return {l.total, l.recon, l.entropy};
                },
                on_epoch);
}

/// Trains the predictor on flows reconstructed by the frozen autoencoder.
template <std::floating_point T>
Curve train_cvae(const memae::MemAE<T>& flow_model, cvae::CVAE<T>& model, const std::vector<stc::STCube>& cubes,
                 const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  auto& params = model.params().tensors();
  return fit<T>(cubes.size(), cfg, params, "cvae",
                [&](const std::vector<std::size_t>& idx, std::mt19937_64& rng) -> std::array<Tensor<T>, 3> {
                  const auto b = make_batch<T>(cubes, idx);
                  Tensor<T> recon;
                  {
                    ad::NoGradGuard guard;
                    recon = flow_model.forward(b.flow).recon;
                  }
                  const auto eps = model.sample_eps(idx.size(), rng);
                  const auto o = model.forward(b.cond, recon, cvae::LatentMode::posterior_sample, &eps);
                  const auto l = model.loss(o, b.target);
                  return {l.total, l.recon, l.kl};
                },
                on_epoch);
}

/// Updates both networks on the joint objective; the predictor consumes the live reconstruction.
template <std::floating_point T>
Curve finetune(memae::MemAE<T>& flow_model, cvae::CVAE<T>& model, const std::vector<stc::STCube>& cubes,
               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  std::vector<Tensor<T>> params = flow_model.params().tensors();
  for (const auto& p : model.params().tensors()) params.push_back(p);
  const auto w = static_cast<T>(cfg.finetune_memae_weight);
  return fit<T>(cubes.size(), cfg, params, "finetune",
                [&](const std::vector<std::size_t>& idx, std::mt19937_64& rng) -> std::array<Tensor<T>, 3> {
                  const auto b = make_batch<T>(cubes, idx);
                  const auto mo = flow_model.forward(b.flow);
                  const auto ml = flow_model.loss(b.flow, mo);
                  const auto eps = model.sample_eps(idx.size(), rng);
                  const auto o = model.forward(b.cond, mo.recon, cvae::LatentMode::posterior_sample, &eps);
                  const auto cl = model.loss(o, b.target);
                  return {ad::add(ad::scale(ml.total, w), cl.total), ml.recon, cl.recon};
                },
                on_epoch);
}

}  // namespace hfvad::train
