#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hfvad/scoring.hpp"
#include "oracles.hpp"

using namespace hfvad;
using namespace hfvad::scoring;
using oracle::selection_percentile;

namespace {

std::vector<float> random_floats(std::size_t n, std::mt19937_64& rng, double lo = 0, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(d(rng));
  return v;
}

CubeErrors random_errors(std::mt19937_64& rng, std::size_t s = 32) {
  CubeErrors e;
  e.e_r = random_floats(2 * s * s, rng, 0, 0.2);
  e.e_p = random_floats(3 * s * s, rng, 0, 0.05);
  std::uniform_real_distribution<double> d(0, 1);
  e.s_r = d(rng);
  e.s_p = d(rng);
  return e;
}

TrainStats random_stats(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.01, 1);
  TrainStats st;
  st.mu_r = d(rng);
  st.sigma_r = d(rng);
  st.mu_p = d(rng);
  st.sigma_p = d(rng);
  for (auto& m : st.median_r) m = d(rng) * 0.1;
  for (auto& m : st.iqr_r) m = d(rng) * 0.1;
  for (auto& m : st.median_p) m = d(rng) * 0.02;
  for (auto& m : st.iqr_p) m = d(rng) * 0.02;
  return st;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cube errors

TEST(CubeErrors, PerfectReconstructionIsZero) {
  std::mt19937_64 rng(1);
  const auto flow = random_floats(6 * 1024, rng, -1, 1), img = random_floats(3 * 1024, rng);
  const auto e = errors_from_outputs(flow, flow, img, img, 32);
  EXPECT_EQ(e.s_r, 0.0);
  EXPECT_EQ(e.s_p, 0.0);
  EXPECT_TRUE(std::all_of(e.e_r.begin(), e.e_r.end(), [](float v) { return v == 0.0f; }));
  EXPECT_TRUE(std::all_of(e.e_p.begin(), e.e_p.end(), [](float v) { return v == 0.0f; }));
}

TEST(CubeErrors, ConstantOffsetGivesSquare) {
  std::vector<float> flow(6 * 1024, 0.25f), recon(6 * 1024, 0.75f), img(3 * 1024, 0.5f);
  const auto e = errors_from_outputs(flow, recon, img, img, 32);
  EXPECT_DOUBLE_EQ(e.s_r, 0.25);
  for (float v : e.e_r) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(CubeErrors, MatchesNaiveLoops) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto flow = random_floats(6 * 1024, rng, -2, 2), recon = random_floats(6 * 1024, rng, -2, 2);
    const auto img = random_floats(3 * 1024, rng), pred = random_floats(3 * 1024, rng);
    const auto e = errors_from_outputs(flow, recon, img, pred, 32);
    double sr = 0, sp = 0;
    for (std::size_t i = 0; i < flow.size(); ++i) sr += std::pow(double(recon[i]) - double(flow[i]), 2);
    for (std::size_t i = 0; i < img.size(); ++i) sp += std::pow(double(pred[i]) - double(img[i]), 2);
    EXPECT_NEAR(e.s_r, sr / 6144.0, 1e-6);
    EXPECT_NEAR(e.s_p, sp / 3072.0, 1e-6);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 1024; i += 37) {
        double m = 0;
        for (std::size_t f = 0; f < 3; ++f) {
          const std::size_t at = (f * 2 + c) * 1024 + i;
          m += std::pow(double(recon[at]) - double(flow[at]), 2) / 3.0;
        }
        EXPECT_NEAR(e.e_r[c * 1024 + i], m, 1e-6);
      }
  }
}

TEST(CubeErrors, ShapeMismatchThrows) {
  std::vector<float> a(6 * 1024), b(5 * 1024), img(3 * 1024);
  EXPECT_THROW(errors_from_outputs(a, b, img, img, 32), DimensionError);
}

// ---------------------------------------------------------------------------
// Calibration

TEST(Calibrate, ConstantScoresFloorSigma) {
  CubeErrors e;
  e.s_r = 0.3;
  e.s_p = 0.1;
  e.e_r.assign(2 * 4, 0.5f);
  e.e_p.assign(3 * 4, 0.5f);
  const auto st = calibrate({e, e, e});
  EXPECT_EQ(st.mu_r, 0.3);
  EXPECT_EQ(st.sigma_r, kEps);
  EXPECT_EQ(st.sigma_p, kEps);
  EXPECT_EQ(st.iqr_r[0], kEps);
  EXPECT_EQ(st.median_p[2], 0.5);
}

TEST(Calibrate, PercentileOfOneToFive) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  EXPECT_EQ(percentile(v, 0.5), 3.0);
  EXPECT_EQ(percentile(v, 0.25), 2.0);
  EXPECT_EQ(percentile(v, 0.75), 4.0);
  const auto r = robust_stats({5, 3, 1, 4, 2});
  EXPECT_EQ(r.median, 3.0);
  EXPECT_EQ(r.iqr, 2.0);
}

TEST(Calibrate, MatchesSelectionPercentileOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(1, 300);
  std::uniform_real_distribution<double> d(-5, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(static_cast<std::size_t>(len(rng)));
    for (auto& x : v) x = d(rng);
    const auto r = robust_stats(v);
    EXPECT_EQ(r.median, selection_percentile(v, 0.5));
    const double iqr = selection_percentile(v, 0.75) - selection_percentile(v, 0.25);
    EXPECT_EQ(r.iqr, std::max(iqr, kEps));
  }
}

TEST(Calibrate, PooledStatsMatchOracle) {
  std::mt19937_64 rng(4);
  std::vector<CubeErrors> errs;
  for (int i = 0; i < 7; ++i) errs.push_back(random_errors(rng, 8));
  const auto st = calibrate(errs);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> pooled;
    for (const auto& e : errs)
      for (std::size_t i = 0; i < 64; ++i) pooled.push_back(e.e_p[c * 64 + i]);
    EXPECT_EQ(st.median_p[c], selection_percentile(pooled, 0.5));
    EXPECT_EQ(st.iqr_p[c], selection_percentile(pooled, 0.75) - selection_percentile(pooled, 0.25));
  }
  double m = 0;
  for (const auto& e : errs) m += e.s_r;
  EXPECT_NEAR(st.mu_r, m / 7, 1e-15);
}

TEST(Calibrate, PermutationInvariant) {
  std::mt19937_64 rng(5);
  std::vector<CubeErrors> errs;
  for (int i = 0; i < 20; ++i) errs.push_back(random_errors(rng, 4));
  const auto a = to_json(calibrate(errs));
  std::shuffle(errs.begin(), errs.end(), rng);
  EXPECT_EQ(a, to_json(calibrate(errs)));
}

TEST(Calibrate, EmptyThrows) { EXPECT_THROW(calibrate({}), MetricError); }

TEST(Calibrate, JsonRoundTrip) {
  std::mt19937_64 rng(6);
  const auto st = random_stats(rng);
  EXPECT_EQ(to_json(stats_from_json(to_json(st))), to_json(st));
  EXPECT_THROW(stats_from_json({{"mu_r", 1}}), ConfigError);
}

// ---------------------------------------------------------------------------
// Frame score

TEST(FrameScore, AtMeanIsZero) {
  TrainStats st;
  st.mu_r = 0.4;
  st.sigma_r = 0.1;
  EXPECT_EQ(cube_score(0.4, 123.0, st, {1, 0, 0, 0}), 0.0);
}

TEST(FrameScore, UnitZ) {
  TrainStats st;
  st.mu_r = 0.4;
  st.sigma_r = 0.1;
  st.mu_p = 0.2;
  st.sigma_p = 0.05;
  EXPECT_NEAR(cube_score(0.5, 0.2, st, {10, 0.1, 0, 0}), 10.0, 1e-12);
}

TEST(FrameScore, MaxRuleAndEmptyFrame) {
  EXPECT_EQ(frame_score({1.0, 2.5, -0.3}), 2.5);
  EXPECT_EQ(frame_score({}), 0.0);
  EXPECT_EQ(frame_score({-4.0}), -4.0);
}

TEST(FrameScore, MatchesStraightLineFormula) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> d(0, 2);
  for (int t = 0; t < 500; ++t) {
    const auto st = random_stats(rng);
    const ScoreWeights w{d(rng), d(rng), 0, 0};
    const double sr = d(rng), sp = d(rng);
    const double expected = oracle::frame_formula(sr, sp, st, w);
    EXPECT_NEAR(cube_score(sr, sp, st, w), expected, 1e-10 * std::max(1.0, std::abs(expected)));
  }
}

TEST(FrameScore, LinearInWeightsAndArgmaxStable) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d(0, 1);
  for (int t = 0; t < 100; ++t) {
    const auto st = random_stats(rng);
    const ScoreWeights w{d(rng), d(rng), 0, 0};
    const double a = 0.1 + 5 * d(rng);
    const ScoreWeights wa{a * w.w_r, a * w.w_p, 0, 0};
    std::vector<double> s1, s2;
    for (int k = 0; k < 5; ++k) {
      const double sr = d(rng), sp = d(rng);
      s1.push_back(cube_score(sr, sp, st, w));
      s2.push_back(cube_score(sr, sp, st, wa));
    }
    EXPECT_NEAR(frame_score(s2), a * frame_score(s1), 1e-9 * std::max(1.0, std::abs(frame_score(s2))));
    EXPECT_EQ(std::max_element(s1.begin(), s1.end()) - s1.begin(), std::max_element(s2.begin(), s2.end()) - s2.begin());
  }
}

TEST(FrameScore, MonotoneInCubeReconstructionError) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(0, 1);
  for (int t = 0; t < 100; ++t) {
    const auto st = random_stats(rng);
    const ScoreWeights w{0.1 + d(rng), d(rng), 0, 0};
    std::vector<double> sr(4), sp(4);
    for (int k = 0; k < 4; ++k) sr[k] = d(rng), sp[k] = d(rng);
    auto fs = [&] {
      std::vector<double> s;
      for (int k = 0; k < 4; ++k) s.push_back(cube_score(sr[k], sp[k], st, w));
      return frame_score(s);
    };
    const double before = fs();
    sr[static_cast<std::size_t>(t % 4)] += d(rng);
    EXPECT_GE(fs(), before);
  }
}

// ---------------------------------------------------------------------------
// Pixel score

TEST(RobustScale, Examples) {
  EXPECT_EQ(robust_scale(3.0, 3.0, 2.0), 0.0);
  EXPECT_EQ(robust_scale(5.0, 3.0, 2.0), 1.0);
  const double v = robust_scale(1.0, 0.0, 0.0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(v, 1.0 / kEps);
}

TEST(PixelScore, MediansGiveZeroPatch) {
  std::mt19937_64 rng(10);
  const auto st = random_stats(rng);
  std::vector<float> er(2 * 16), ep(3 * 16);
  for (std::size_t c = 0; c < 2; ++c) std::fill_n(er.begin() + c * 16, 16, static_cast<float>(st.median_r[c]));
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(ep.begin() + c * 16, 16, static_cast<float>(st.median_p[c]));
  for (double v : pixel_score_patch(er, ep, st, {})) EXPECT_NEAR(v, 0.0, 1e-6);
}

TEST(PixelScore, FlowOnlyReduction) {
  std::mt19937_64 rng(11);
  const auto st = random_stats(rng);
  const auto e = random_errors(rng, 8);
  const auto p = pixel_score_patch(e.e_r, e.e_p, st, {0, 0, 7.0, 0});
  for (std::size_t i = 0; i < 64; ++i) {
    const double m = ((e.e_r[i] - st.median_r[0]) / st.iqr_r[0] + (e.e_r[64 + i] - st.median_r[1]) / st.iqr_r[1]) / 2;
    EXPECT_NEAR(p[i], 7.0 * m, 1e-10 * std::max(1.0, std::abs(p[i])));
  }
}

TEST(PixelScore, MatchesStraightLineRecomputation) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> d(0, 10);
  for (int t = 0; t < 20; ++t) {
    const auto st = random_stats(rng);
    const auto e = random_errors(rng);
    const ScoreWeights w{0, 0, d(rng), d(rng)};
    const auto p = pixel_score_patch(e.e_r, e.e_p, st, w);
    for (std::size_t i = 0; i < 1024; ++i) {
      const double expected = oracle::pixel_formula(e.e_r, e.e_p, i, 1024, st, w);
      ASSERT_NEAR(p[i], expected, 1e-10 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(PixelMap, SupportIsTheBoxUnionAndNonNegative) {
  std::mt19937_64 rng(13);
  const auto st = random_stats(rng);
  std::vector<PlacedPatch> patches;
  const BBox a{5, 5, 20, 30}, b{15, 25, 40, 50};
  for (const auto& box : {a, b}) {
    const auto e = random_errors(rng);
    patches.push_back({box, pixel_score_patch(e.e_r, e.e_p, st, {})});
  }
  const auto m = frame_pixel_map(64, 64, patches, 3.5);
  EXPECT_FLOAT_EQ(m.frame_score, 3.5f);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const auto i = static_cast<std::size_t>(y * 64 + x);
      const bool inside = (x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max) ||
                          (x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max);
      EXPECT_EQ(m.covered[i] != 0, inside);
      EXPECT_GE(m.values[i], 0.0f);
      if (!inside) {
        EXPECT_EQ(m.values[i], 0.0f);
      }
    }
}

TEST(PixelMap, ConstantPatchFillsBox) {
  std::vector<PlacedPatch> p{{BBox{10, 10, 26, 20}, std::vector<double>(1024, 2.0)}};
  const auto m = frame_pixel_map(32, 32, p, 0.0);
  std::size_t nonzero = 0;
  for (float v : m.values) nonzero += v != 0.0f;
  EXPECT_EQ(nonzero, 160u);
  EXPECT_FLOAT_EQ(m.values[15 * 32 + 12], 2.0f);
  const auto neg = frame_pixel_map(32, 32, {{BBox{0, 0, 8, 8}, std::vector<double>(1024, -1.0)}}, 0.0);
  for (float v : neg.values) EXPECT_EQ(v, 0.0f);
}

TEST(ScoreScenario, AssemblesFramesFromCubes) {
  std::mt19937_64 rng(14);
  const auto st = random_stats(rng);
  std::vector<CubeRecord> recs{{4, 0, BBox{0, 0, 10, 10}, 0, 0, 0}, {4, 1, BBox{20, 20, 30, 30}, 0, 0, 0},
                               {6, 0, BBox{1, 1, 11, 11}, 0, 0, 0}};
  std::vector<CubeErrors> errs;
  for (int i = 0; i < 3; ++i) errs.push_back(random_errors(rng));
  const ScoreWeights w;
  const auto s = score_scenario(8, 32, 32, recs, errs, st, w);
  ASSERT_EQ(s.frame_scores.size(), 8u);
  EXPECT_EQ(s.frame_scores[0], 0.0);
  EXPECT_EQ(s.frame_scores[5], 0.0);
  EXPECT_EQ(s.frame_scores[4], std::max(cube_score(errs[0].s_r, errs[0].s_p, st, w), cube_score(errs[1].s_r, errs[1].s_p, st, w)));
  EXPECT_EQ(s.frame_scores[6], cube_score(errs[2].s_r, errs[2].s_p, st, w));
  EXPECT_EQ(s.maps.size(), 8u);
  for (float v : s.maps[5].values) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(score_scenario(8, 32, 32, recs, {}, st, w), DimensionError);
}

TEST(ScoreWeights, NegativeRejected) { EXPECT_THROW((ScoreWeights{-1, 0, 0, 0}.validate()), ConfigError); }
