#pragma once

// Multi-level memory-augmented flow autoencoder with skip connections.
//
// Encoder levels e1 (32x32), e2 (16x16), e3 (8x8). Every level is read through its own memory:
// each spatial feature vector is replaced by a sparse convex combination of learned slots.
// The decoder starts from the memory read of e3 and adds the memory reads of e2 and e1 at the
// matching resolutions, so normal patterns stored in memory are all the decoder ever sees.

#include <array>
#include <json.hpp>
#include <string>
#include <vector>

#include "hfvad/nn.hpp"

namespace hfvad::memae {

using ad::Tensor;

struct MemAEConfig {
  std::size_t in_channels = 6;
  std::array<std::size_t, 3> widths{32, 64, 128};
  std::size_t num_slots = 100;
  double shrink = -1.0;  // hard-shrinkage threshold; negative selects 1/num_slots
  double gamma = 0.0002;
  double inv_temperature = 1.0;  // scales the cosine similarities before the softmax
  std::uint64_t seed = 1;

  double threshold() const { return shrink < 0 ? 1.0 / static_cast<double>(num_slots) : shrink; }

  void validate() const {
    if (num_slots < 2) throw ConfigError("memory needs at least 2 slots");
    if (threshold() >= 1.0) throw ConfigError("shrink threshold must lie in [0, 1)");
    if (gamma < 0) throw ConfigError("entropy weight must be non-negative");
    if (inv_temperature <= 0) throw ConfigError("memory temperature must be positive");
    if (in_channels == 0) throw ConfigError("memae needs input channels");
  }
};

inline nlohmann::json to_json(const MemAEConfig& c) {
  return {{"in_channels", c.in_channels}, {"widths", c.widths},   {"num_slots", c.num_slots},
          {"shrink", c.threshold()},      {"gamma", c.gamma},     {"inv_temperature", c.inv_temperature},
          {"seed", c.seed}};
}

template <std::floating_point T>
struct Addressing {
  Tensor<T> weights;  // [R, S]
  Tensor<T> output;   // [R, D]
};

/// Memory read for query rows [R, D] against slots [S, D]: softmax over cosine similarities,
/// hard shrinkage with renormalization, then the weighted sum of slots. A zero query has zero
/// similarity to every slot and therefore uniform weights before shrinkage.
template <std::floating_point T>
Addressing<T> memory_address(const Tensor<T>& query, const Tensor<T>& slots, T threshold, T inv_temperature = T(1)) {
  if (query.rank() != 2 || slots.rank() != 2 || query.dim(1) != slots.dim(1))
    throw DimensionError("memory_address: query " + ad::to_string(query.shape()) + " vs slots " +
                         ad::to_string(slots.shape()));
  auto sim = ad::matmul(ad::l2_normalize_rows(query), ad::transpose2d(ad::l2_normalize_rows(slots)));
  if (inv_temperature != T(1)) sim = ad::scale(sim, inv_temperature);
  auto w = ad::shrink_renormalize(ad::softmax(sim, 1), threshold);
  return {w, ad::matmul(w, slots)};
}

/// Mean addressing entropy over queries.
template <std::floating_point T>
Tensor<T> entropy_loss(const Tensor<T>& weights) {
  return ad::row_entropy_mean(weights, T(1e-12));
}

template <std::floating_point T>
struct MemAEOutput {
  Tensor<T> recon;
  std::array<Tensor<T>, 3> weights;
};

template <std::floating_point T>
struct MemAELoss {
  Tensor<T> total, recon, entropy;
};

template <std::floating_point T>
class MemAE {
 public:
  explicit MemAE(const MemAEConfig& cfg) : cfg_(cfg), params_(cfg.seed) {
    cfg.validate();
    const auto [w1, w2, w3] = cfg.widths;
    enc1_ = nn::Conv<T>(params_, "enc1", cfg.in_channels, w1, 3, 1, 1);
    enc2_ = nn::Conv<T>(params_, "enc2", w1, w2, 4, 2, 1);
    enc3_ = nn::Conv<T>(params_, "enc3", w2, w3, 4, 2, 1);
    const std::array<std::size_t, 3> dims{w1, w2, w3};
    for (std::size_t l = 0; l < 3; ++l) {
      memory_[l] = params_.add_uniform("mem" + std::to_string(l + 1), {cfg.num_slots, dims[l]},
                                       1.0 / std::sqrt(static_cast<double>(dims[l])));
    }
    dec3_ = nn::Conv<T>(params_, "dec3", w3, w2, 4, 2, 1, true);
    dec2_ = nn::Conv<T>(params_, "dec2", w2, w1, 4, 2, 1, true);
    out_ = nn::Conv<T>(params_, "out", w1, cfg.in_channels, 3, 1, 1);
  }

  const MemAEConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  /// x: [N, in_channels, S, S] with S divisible by 4.
  MemAEOutput<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) % 4 || x.dim(3) % 4)
      throw DimensionError("memae input must be [N," + std::to_string(cfg_.in_channels) + ",S,S], got " +
                           ad::to_string(x.shape()));
    MemAEOutput<T> out;
    const auto e1 = nn::lrelu(enc1_(x));
    const auto e2 = nn::lrelu(enc2_(e1));
    const auto e3 = nn::lrelu(enc3_(e2));
    const auto m1 = read(e1, 0, out), m2 = read(e2, 1, out), m3 = read(e3, 2, out);
    const auto d2 = ad::add(nn::lrelu(dec3_(m3)), m2);
    const auto d1 = ad::add(nn::lrelu(dec2_(d2)), m1);
    out.recon = out_(d1);
    return out;
  }

  MemAELoss<T> loss(const Tensor<T>& x, const MemAEOutput<T>& o) const {
    MemAELoss<T> l;
    l.recon = ad::mse(o.recon, x);
    l.entropy = ad::add(ad::add(entropy_loss(o.weights[0]), entropy_loss(o.weights[1])), entropy_loss(o.weights[2]));
    l.total = cfg_.gamma > 0 ? ad::add(l.recon, ad::scale(l.entropy, static_cast<T>(cfg_.gamma))) : l.recon;
    return l;
  }

 private:
  Tensor<T> read(const Tensor<T>& e, std::size_t level, MemAEOutput<T>& out) const {
    auto a = memory_address(ad::to_rows(e), memory_[level], static_cast<T>(cfg_.threshold()),
                            static_cast<T>(cfg_.inv_temperature));
    out.weights[level] = a.weights;
    return ad::from_rows(a.output, e.dim(0), e.dim(2), e.dim(3));
  }

  MemAEConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Conv<T> enc1_, enc2_, enc3_, dec3_, dec2_, out_;
  std::array<Tensor<T>, 3> memory_;
};

}  // namespace hfvad::memae
