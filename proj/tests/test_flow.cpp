#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hfvad/flow.hpp"
#include "hfvad/scene.hpp"

using namespace hfvad;
using namespace hfvad::flow;

namespace {

// Smooth random texture evaluated at (x - dx, y - dy), so the result is the base image moved by (dx, dy).
Image texture(std::size_t h, std::size_t w, double dx, double dy, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.15, 0.6), phase(0.0, 6.283), amp(0.05, 0.15);
  struct Wave {
    double fx, fy, ph, a;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 8; ++i) waves.push_back({freq(rng) * (i % 2 ? 1 : -1), freq(rng), phase(rng), amp(rng)});
  Image img(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.5;
      for (const auto& wv : waves) s += wv.a * std::sin(wv.fx * (x - dx) + wv.fy * (y - dy) + wv.ph);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(s);
    }
  return img;
}

struct Means {
  double u = 0, v_abs = 0;
};

Means interior_means(const FlowField& f, std::size_t border) {
  Means m;
  std::size_t n = 0;
  for (std::size_t y = border; y + border < f.height; ++y)
    for (std::size_t x = border; x + border < f.width; ++x) {
      m.u += f.u[y * f.width + x];
      m.v_abs += std::abs(f.v[y * f.width + x]);
      ++n;
    }
  m.u /= static_cast<double>(n);
  m.v_abs /= static_cast<double>(n);
  return m;
}

Image mirror(const Image& a) {
  Image b(a.channels, a.height, a.width);
  for (std::size_t c = 0; c < a.channels; ++c)
    for (std::size_t y = 0; y < a.height; ++y)
      for (std::size_t x = 0; x < a.width; ++x) b.at(c, y, a.width - 1 - x) = a.at(c, y, x);
  return b;
}

}  // namespace

TEST(Flow, IdenticalFramesGiveExactlyZero) {
  const auto a = texture(64, 64, 0, 0);
  const auto f = estimate_flow(a, a);
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    ASSERT_EQ(f.u[i], 0.0f);
    ASSERT_EQ(f.v[i], 0.0f);
  }
}

TEST(Flow, OnePixelTranslation) {
  const auto f = estimate_flow(texture(64, 64, 0, 0), texture(64, 64, 1, 0));
  const auto m = interior_means(f, 8);
  EXPECT_GE(m.u, 0.8);
  EXPECT_LE(m.u, 1.2);
  EXPECT_LE(m.v_abs, 0.2);
}

TEST(Flow, TwoPixelTranslationTwoLevels) {
  FlowParams p;
  p.levels = 2;
  const auto f = estimate_flow(texture(64, 64, 0, 0, 3), texture(64, 64, 2, 0, 3), p);
  const auto m = interior_means(f, 8);
  EXPECT_GE(m.u, 1.6);
  EXPECT_LE(m.u, 2.4);
}

TEST(Flow, VerticalTranslation) {
  const auto f = estimate_flow(texture(64, 64, 0, 0, 4), texture(64, 64, 0, 1, 4));
  double v = 0;
  for (float x : f.v) v += x;
  EXPECT_NEAR(v / static_cast<double>(f.v.size()), 1.0, 0.25);
}

TEST(Flow, MirrorCovariance) {
  const auto a = texture(64, 64, 0, 0, 5), b = texture(64, 64, 1.3, 0.4, 5);
  const auto f = estimate_flow(a, b);
  const auto g = estimate_flow(mirror(a), mirror(b));
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      EXPECT_NEAR(g.u[y * 64 + (63 - x)], -f.u[y * 64 + x], 1e-3);
      EXPECT_NEAR(g.v[y * 64 + (63 - x)], f.v[y * 64 + x], 1e-3);
    }
}

TEST(Flow, MagnitudeIsBoundedByMaxDisplacement) {
  FlowParams p;
  p.max_displacement = 0.5;
  const auto f = estimate_flow(texture(32, 32, 0, 0), texture(32, 32, 2, 1), p);
  for (float m : flow_magnitude_map(f)) EXPECT_LE(m, 0.5f + 1e-6f);
}

TEST(Flow, ShapeMismatchThrows) {
  EXPECT_THROW(estimate_flow(texture(32, 32, 0, 0), texture(32, 16, 0, 0)), DimensionError);
}

TEST(FlowMagnitude, ZeroAndPythagorean) {
  FlowField f(4, 5);
  for (float m : flow_magnitude_map(f)) EXPECT_EQ(m, 0.0f);
  std::fill(f.u.begin(), f.u.end(), 3.0f);
  std::fill(f.v.begin(), f.v.end(), 4.0f);
  for (float m : flow_magnitude_map(f)) EXPECT_EQ(m, 5.0f);
}

TEST(FlowMagnitude, RandomFieldMatchesFormula) {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> n(0, 2);
  FlowField f(7, 9);
  for (auto& x : f.u) x = n(rng);
  for (auto& x : f.v) x = n(rng);
  const auto m = flow_magnitude_map(f);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_FLOAT_EQ(m[i], std::hypot(f.u[i], f.v[i]));
}

TEST(Flow, RecoversGeneratorMotionOnLeadVehicle) {
  scene::ScenarioConfig c;
  c.num_frames = 80;
  c.lead.initial_gap = 11.0;
  c.ego_speed = {{0, 0.3}, {75, 0.0}};
  c.braking_events = {{40, 0.01, 3}};
  const auto s = scene::generate_scenario(c);
  // The estimated expansion of the lead vehicle during braking correlates with the generator's motion.
  const auto f = estimate_flow(s.frames[60], s.frames[61]);
  const auto& gt = s.motion[60];
  double dot = 0, nf = 0, ng = 0;
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    if (!s.truth.frames[60].anomaly_mask[i]) continue;
    dot += f.u[i] * gt.u[i] + f.v[i] * gt.v[i];
    nf += f.u[i] * f.u[i] + f.v[i] * f.v[i];
    ng += gt.u[i] * gt.u[i] + gt.v[i] * gt.v[i];
  }
  ASSERT_GT(ng, 0);
  EXPECT_GT(dot / std::sqrt(nf * ng), 0.5);
}

TEST(FlowIo, RoundTrip) {
  std::vector<FlowField> flows(3, FlowField(4, 6));
  flows[1].u[5] = 1.5f;
  flows[2].v[23] = -2.25f;
  const auto back = flows_from_tensor(flows_to_tensor(flows));
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1].u, flows[1].u);
  EXPECT_EQ(back[2].v, flows[2].v);
}
