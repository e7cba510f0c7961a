#pragma once

// Conditional VAE predicting the next object crop from the past crops and reconstructed flow.

#include <array>
#include <json.hpp>
#include <random>
#include <string>

#include "hfvad/nn.hpp"

namespace hfvad::cvae {

using ad::Tensor;

struct CVAEConfig {
  std::size_t cond_channels = 12;  // past frames stacked channel-wise
  std::size_t flow_channels = 6;
  std::size_t out_channels = 3;
  std::array<std::size_t, 3> widths{32, 64, 128};
  std::size_t z_dim = 64;
  double beta = 0.1;
  double logvar_limit = 8.0;
  std::uint64_t seed = 2;

  void validate() const {
    if (z_dim == 0) throw ConfigError("latent size must be positive");
    if (beta < 0) throw ConfigError("KL weight must be non-negative");
    if (logvar_limit <= 0) throw ConfigError("log-variance limit must be positive");
  }
};

inline nlohmann::json to_json(const CVAEConfig& c) {
  return {{"cond_channels", c.cond_channels}, {"flow_channels", c.flow_channels}, {"out_channels", c.out_channels},
          {"widths", c.widths},               {"z_dim", c.z_dim},                 {"beta", c.beta},
          {"logvar_limit", c.logvar_limit},   {"seed", c.seed}};
}

enum class LatentMode { posterior_sample, posterior_mean, prior_mean };

inline LatentMode latent_mode_from_string(const std::string& s) {
  if (s == "posterior-sample") return LatentMode::posterior_sample;
  if (s == "posterior-mean") return LatentMode::posterior_mean;
  if (s == "prior-mean") return LatentMode::prior_mean;
  throw ConfigError("unknown latent mode '" + s + "'");
}

template <std::floating_point T>
struct CVAEOutput {
  Tensor<T> pred;                    // [N, out, S, S] in [0, 1]
  Tensor<T> mu, logvar, mu0, logvar0;  // [N, z]
  Tensor<T> z;
};

template <std::floating_point T>
struct CVAELoss {
  Tensor<T> total, recon, kl;
};

/// z = mu + exp(logvar / 2) * eps.
template <std::floating_point T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& logvar, const Tensor<T>& eps) {
  return ad::add(mu, ad::mul(ad::exp(ad::scale(logvar, T(0.5))), eps));
}

template <std::floating_point T>
class CVAE {
 public:
  explicit CVAE(const CVAEConfig& cfg) : cfg_(cfg), params_(cfg.seed) {
    cfg.validate();
    const auto [w1, w2, w3] = cfg.widths;
    c1_ = nn::Conv<T>(params_, "cond1", cfg.cond_channels, w1, 3, 1, 1);
    c2_ = nn::Conv<T>(params_, "cond2", w1, w2, 4, 2, 1);
    c3_ = nn::Conv<T>(params_, "cond3", w2, w3, 4, 2, 1);
    f1_ = nn::Conv<T>(params_, "flow1", cfg.flow_channels, w1, 3, 1, 1);
    f2_ = nn::Conv<T>(params_, "flow2", w1, w2, 4, 2, 1);
    f3_ = nn::Conv<T>(params_, "flow3", w2, w3, 4, 2, 1);
    post_h_ = nn::Conv<T>(params_, "post_h", 2 * w3, w3, 4, 2, 1);
    post_ = nn::Conv<T>(params_, "post", w3, 2 * cfg.z_dim, 4, 1, 0);
    prior_h_ = nn::Conv<T>(params_, "prior_h", w3, w3, 4, 2, 1);
    prior_ = nn::Conv<T>(params_, "prior", w3, 2 * cfg.z_dim, 4, 1, 0);
    dz_ = nn::Conv<T>(params_, "dec_z", cfg.z_dim, w3, 8, 1, 0, true);
    d3_ = nn::Conv<T>(params_, "dec3", w3, w2, 4, 2, 1, true);
    d2_ = nn::Conv<T>(params_, "dec2", w2, w1, 4, 2, 1, true);
    out_ = nn::Conv<T>(params_, "out", w1, cfg.out_channels, 3, 1, 1);
  }

  const CVAEConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  /// cond: [N, cond_channels, 32, 32]; flow: [N, flow_channels, 32, 32]. `eps` ([N, z]) is
  /// required for posterior sampling and ignored otherwise.
  CVAEOutput<T> forward(const Tensor<T>& cond, const Tensor<T>& flow, LatentMode mode,
                        const Tensor<T>* eps = nullptr) const {
    if (cond.rank() != 4 || cond.dim(1) != cfg_.cond_channels || cond.dim(2) != 32 || cond.dim(3) != 32)
      throw DimensionError("cvae condition must be [N," + std::to_string(cfg_.cond_channels) + ",32,32], got " +
                           ad::to_string(cond.shape()));
    if (flow.rank() != 4 || flow.dim(0) != cond.dim(0) || flow.dim(1) != cfg_.flow_channels || flow.dim(2) != 32 ||
        flow.dim(3) != 32)
      throw DimensionError("cvae flow input has shape " + ad::to_string(flow.shape()));
    const std::size_t n = cond.dim(0), zd = cfg_.z_dim;
    const auto lim = static_cast<T>(cfg_.logvar_limit);
    CVAEOutput<T> o;
    const auto c1 = nn::lrelu(c1_(cond));
    const auto c2 = nn::lrelu(c2_(c1));
    const auto c3 = nn::lrelu(c3_(c2));
    const auto f3 = nn::lrelu(f3_(nn::lrelu(f2_(nn::lrelu(f1_(flow))))));
    const auto post = ad::reshape(post_(nn::lrelu(post_h_(ad::concat<T>({c3, f3}, 1)))), {n, 2 * zd});
    const auto prior = ad::reshape(prior_(nn::lrelu(prior_h_(c3))), {n, 2 * zd});
    o.mu = ad::slice(post, 1, 0, zd);
    o.logvar = ad::clamp(ad::slice(post, 1, zd, zd), -lim, lim);
    o.mu0 = ad::slice(prior, 1, 0, zd);
    o.logvar0 = ad::clamp(ad::slice(prior, 1, zd, zd), -lim, lim);
    switch (mode) {
      case LatentMode::posterior_sample:
        if (!eps || eps->shape() != ad::Shape{n, zd}) throw DimensionError("posterior sampling needs eps of [N,z]");
        o.z = reparameterize(o.mu, o.logvar, *eps);
        break;
      case LatentMode::posterior_mean:
        o.z = o.mu;
        break;
      case LatentMode::prior_mean:
        o.z = o.mu0;
        break;
    }
    auto d = ad::add(nn::lrelu(dz_(ad::reshape(o.z, {n, zd, 1, 1}))), c3);
    d = ad::add(nn::lrelu(d3_(d)), c2);
    d = ad::add(nn::lrelu(d2_(d)), c1);
    o.pred = ad::sigmoid(out_(d));
    return o;
  }

  CVAELoss<T> loss(const CVAEOutput<T>& o, const Tensor<T>& target) const {
    CVAELoss<T> l;
    l.recon = ad::mse(o.pred, target);
    l.kl = ad::kl_diag_gaussian(o.mu, o.logvar, o.mu0, o.logvar0);
    l.total = ad::add(l.recon, ad::scale(l.kl, static_cast<T>(cfg_.beta)));
    return l;
  }

  /// Standard-normal noise for posterior sampling, drawn from `rng`.
  Tensor<T> sample_eps(std::size_t n, std::mt19937_64& rng) const {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<T> v(n * cfg_.z_dim);
    for (auto& x : v) x = static_cast<T>(d(rng));
    return Tensor<T>({n, cfg_.z_dim}, std::move(v));
  }

 private:
  CVAEConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Conv<T> c1_, c2_, c3_, f1_, f2_, f3_, post_h_, post_, prior_h_, prior_, dz_, d3_, d2_, out_;
};

}  // namespace hfvad::cvae
