#pragma once

// Frame-wise and pixel-wise anomaly scores from per-cube flow reconstruction and frame
// prediction errors, standardized with statistics of normal calibration data.

#include <algorithm>
#include <array>
#include <cmath>
#include <json.hpp>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "hfvad/cvae.hpp"
#include "hfvad/memae.hpp"
#include "hfvad/stc.hpp"

namespace hfvad::scoring {

inline constexpr double kEps = 1e-8;
inline constexpr std::size_t kFlowChannels = 2;
inline constexpr std::size_t kImageChannels = 3;

struct ScoreWeights {
  double w_r = 10.0, w_p = 0.1;    // frame-wise
  double w_rp = 10.0, w_pp = 0.1;  // pixel-wise

  void validate() const {
    if (w_r < 0 || w_p < 0 || w_rp < 0 || w_pp < 0) throw ConfigError("score weights must be non-negative");
  }
};

struct TrainStats {
  double mu_r = 0, sigma_r = kEps, mu_p = 0, sigma_p = kEps;
  std::array<double, kFlowChannels> median_r{}, iqr_r{kEps, kEps};
  std::array<double, kImageChannels> median_p{}, iqr_p{kEps, kEps, kEps};
  std::size_t cubes = 0;
};

inline nlohmann::json to_json(const TrainStats& s) {
  return {{"mu_r", s.mu_r},         {"sigma_r", s.sigma_r},   {"mu_p", s.mu_p},     {"sigma_p", s.sigma_p},
          {"median_r", s.median_r}, {"iqr_r", s.iqr_r},       {"median_p", s.median_p}, {"iqr_p", s.iqr_p},
          {"cubes", s.cubes}};
}

inline TrainStats stats_from_json(const nlohmann::json& j) {
  try {
    TrainStats s;
    s.mu_r = j.at("mu_r");
    s.sigma_r = j.at("sigma_r");
    s.mu_p = j.at("mu_p");
    s.sigma_p = j.at("sigma_p");
    s.median_r = j.at("median_r");
    s.iqr_r = j.at("iqr_r");
    s.median_p = j.at("median_p");
    s.iqr_p = j.at("iqr_p");
    s.cubes = j.at("cubes");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed calibration stats: ") + e.what());
  }
}

/// Errors of one cube. e_r holds the squared flow error per pixel for u and v, averaged over
/// the flows in the window; e_p the squared prediction error per pixel and colour channel.
struct CubeErrors {
  double s_r = 0, s_p = 0;
  std::vector<float> e_r;  // 2 x S x S
  std::vector<float> e_p;  // 3 x S x S
};

/// Reduces raw model inputs and outputs of one cube. `flow`/`recon` hold (K x 2) channels of
/// S x S, `target`/`pred` hold 3 channels.
inline CubeErrors errors_from_outputs(std::span<const float> flow, std::span<const float> recon,
                                      std::span<const float> target, std::span<const float> pred, std::size_t s) {
  const std::size_t plane = s * s;
  if (flow.size() != recon.size() || flow.size() % (kFlowChannels * plane) || flow.empty())
    throw DimensionError("flow reconstruction does not match the cube");
  if (target.size() != kImageChannels * plane || pred.size() != target.size())
    throw DimensionError("frame prediction does not match the cube");
  const std::size_t k = flow.size() / (kFlowChannels * plane);
  CubeErrors e;
  e.e_r.assign(kFlowChannels * plane, 0.0f);
  e.e_p.assign(kImageChannels * plane, 0.0f);
  double sr = 0;
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t c = 0; c < kFlowChannels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t at = (f * kFlowChannels + c) * plane + i;
        const double d = static_cast<double>(recon[at]) - flow[at];
        sr += d * d;
        e.e_r[c * plane + i] += static_cast<float>(d * d / static_cast<double>(k));
      }
  double sp = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    sp += d * d;
    e.e_p[i] = static_cast<float>(d * d);
  }
  e.s_r = sr / static_cast<double>(flow.size());
  e.s_p = sp / static_cast<double>(target.size());
  return e;
}

/// Runs both networks on `cubes` in inference mode, `batch` cubes at a time.
template <std::floating_point T>
std::vector<CubeErrors> cube_errors(const memae::MemAE<T>& flow_model, const cvae::CVAE<T>& model,
                                    const std::vector<stc::STCube>& cubes, cvae::LatentMode mode,
                                    std::size_t batch = 32, std::uint64_t seed = 0) {
  if (mode == cvae::LatentMode::posterior_sample && seed == 0)
    throw ConfigError("posterior sampling at test time needs an explicit seed");
  std::vector<CubeErrors> out;
  out.reserve(cubes.size());
  ad::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  for (std::size_t b = 0; b < cubes.size(); b += batch) {
    const std::size_t n = std::min(batch, cubes.size() - b);
    std::vector<const std::vector<float>*> f, c, t;
    for (std::size_t i = b; i < b + n; ++i) {
      f.push_back(&cubes[i].flow);
      c.push_back(&cubes[i].img);
      t.push_back(&cubes[i].target);
    }
    const std::size_t s = 32;
    const auto flow = nn::stack<T>(f, cubes[b].flow.size() / (s * s), s, s);
    const auto cond = nn::stack<T>(c, cubes[b].img.size() / (s * s), s, s);
    const auto recon = flow_model.forward(flow).recon;
    ad::Tensor<T> eps;
    if (mode == cvae::LatentMode::posterior_sample) eps = model.sample_eps(n, rng);
    const auto pred = model.forward(cond, recon, mode, &eps).pred;
    const std::size_t fs = flow.numel() / n, ps = pred.numel() / n;
    std::vector<float> fr(fs), pr(ps);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < fs; ++k) fr[k] = static_cast<float>(recon[i * fs + k]);
      for (std::size_t k = 0; k < ps; ++k) pr[k] = static_cast<float>(pred[i * ps + k]);
      out.push_back(errors_from_outputs(cubes[b + i].flow, fr, cubes[b + i].target, pr, s));
    }
  }
  return out;
}

/// Percentile of sorted data by linear interpolation between order statistics.
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw MetricError("percentile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double eps_floor(double v) { return std::max(v, kEps); }

struct Robust {
  double median, iqr;
};

inline Robust robust_stats(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return {percentile(values, 0.5), eps_floor(percentile(values, 0.75) - percentile(values, 0.25))};
}

/// Mean/std of cube scores and pooled per-channel median/IQR of per-pixel errors.
inline TrainStats calibrate(const std::vector<CubeErrors>& errs) {
  if (errs.empty()) throw MetricError("calibration needs at least one cube");
  TrainStats s;
  s.cubes = errs.size();
  // Sorted before summation so the result does not depend on cube order.
  auto moments = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = static_cast<double>(v.size());
    double mean = 0, var = 0;
    for (double x : v) mean += x;
    mean /= n;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, eps_floor(std::sqrt(var / n))};
  };
  std::vector<double> r, p;
  for (const auto& e : errs) {
    r.push_back(e.s_r);
    p.push_back(e.s_p);
  }
  std::tie(s.mu_r, s.sigma_r) = moments(std::move(r));
  std::tie(s.mu_p, s.sigma_p) = moments(std::move(p));

  auto pool = [&](auto member, std::size_t channels, std::size_t c) {
    std::vector<double> v;
    for (const auto& e : errs) {
      const auto& patch = e.*member;
      const std::size_t plane = patch.size() / channels;
      v.insert(v.end(), patch.begin() + static_cast<std::ptrdiff_t>(c * plane),
               patch.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
    }
    return robust_stats(std::move(v));
  };
  for (std::size_t c = 0; c < kFlowChannels; ++c) {
    const auto r = pool(&CubeErrors::e_r, kFlowChannels, c);
    s.median_r[c] = r.median;
    s.iqr_r[c] = r.iqr;
  }
  for (std::size_t c = 0; c < kImageChannels; ++c) {
    const auto r = pool(&CubeErrors::e_p, kImageChannels, c);
    s.median_p[c] = r.median;
    s.iqr_p[c] = r.iqr;
  }
  return s;
}

inline double cube_score(double s_r, double s_p, const TrainStats& st, const ScoreWeights& w) {
  return w.w_r * (s_r - st.mu_r) / st.sigma_r + w.w_p * (s_p - st.mu_p) / st.sigma_p;
}

/// Max over cube scores; a frame without cubes scores 0.
inline double frame_score(const std::vector<double>& cube_scores) {
  if (cube_scores.empty()) return 0.0;
  return *std::max_element(cube_scores.begin(), cube_scores.end());
}

inline double robust_scale(double x, double median, double iqr) { return (x - median) / eps_floor(iqr); }

/// Signed pixel score: per source, robust-scale each channel and average over channels, then
/// combine the two sources with the pixel-wise weights.
inline std::vector<double> pixel_score_patch(const std::vector<float>& e_r, const std::vector<float>& e_p,
                                             const TrainStats& st, const ScoreWeights& w) {
  const std::size_t plane = e_r.size() / kFlowChannels;
  if (e_r.size() != kFlowChannels * plane || e_p.size() != kImageChannels * plane)
    throw DimensionError("error patches disagree in size");
  std::vector<double> out(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    double mr = 0, mp = 0;
    for (std::size_t c = 0; c < kFlowChannels; ++c) mr += robust_scale(e_r[c * plane + i], st.median_r[c], st.iqr_r[c]);
    for (std::size_t c = 0; c < kImageChannels; ++c) mp += robust_scale(e_p[c * plane + i], st.median_p[c], st.iqr_p[c]);
    out[i] = w.w_rp * mr / kFlowChannels + w.w_pp * mp / kImageChannels;
  }
  return out;
}

struct PlacedPatch {
  BBox box;
  std::vector<double> patch;  // signed S x S
};

/// Scatters patches into an H x W map; negative scores are clamped to 0 first.
inline stc::AnomalyMap frame_pixel_map(std::size_t height, std::size_t width, const std::vector<PlacedPatch>& patches,
                                       double frame_value) {
  stc::AnomalyMap map(height, width);
  for (const auto& p : patches) {
    const auto s = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(p.patch.size()))));
    std::vector<float> clamped(p.patch.size());
    for (std::size_t i = 0; i < clamped.size(); ++i) clamped[i] = static_cast<float>(std::max(0.0, p.patch[i]));
    stc::scatter_patch(map, p.box, clamped, s);
  }
  map.frame_score = static_cast<float>(frame_value);
  return map;
}

/// One scored cube of a scenario.
struct CubeRecord {
  int frame = 0;  // the predicted frame
  int track_id = -1;
  BBox box;
  double s_r = 0, s_p = 0, score = 0;
};

struct ScenarioScores {
  std::vector<double> frame_scores;
  std::vector<CubeRecord> cubes;
  std::vector<stc::AnomalyMap> maps;
};

/// Combines per-cube errors of one scenario into frame scores and pixel maps.
inline ScenarioScores score_scenario(std::size_t num_frames, std::size_t height, std::size_t width,
                                     const std::vector<CubeRecord>& cubes, const std::vector<CubeErrors>& errs,
                                     const TrainStats& st, const ScoreWeights& w) {
  w.validate();
  if (cubes.size() != errs.size()) throw DimensionError("cube records and errors disagree");
  ScenarioScores out;
  out.frame_scores.assign(num_frames, 0.0);
  std::vector<std::vector<double>> per_frame(num_frames);
  std::vector<std::vector<PlacedPatch>> patches(num_frames);
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    auto rec = cubes[i];
    rec.s_r = errs[i].s_r;
    rec.s_p = errs[i].s_p;
    rec.score = cube_score(rec.s_r, rec.s_p, st, w);
    const auto f = static_cast<std::size_t>(rec.frame);
    if (f >= num_frames) throw DimensionError("cube frame out of range");
    per_frame[f].push_back(rec.score);
    patches[f].push_back({rec.box, pixel_score_patch(errs[i].e_r, errs[i].e_p, st, w)});
    out.cubes.push_back(rec);
  }
  for (std::size_t f = 0; f < num_frames; ++f) {
    out.frame_scores[f] = frame_score(per_frame[f]);
    out.maps.push_back(frame_pixel_map(height, width, patches[f], out.frame_scores[f]));
  }
  return out;
}

}  // namespace hfvad::scoring
