#pragma once

// Independent reference implementations shared by the unit tests and the acceptance binary.
// Each one computes its quantity a different way from the library (pairs instead of a sorted
// sweep, selection instead of sorting, pixel counting instead of interval arithmetic).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <vector>

#include "hfvad/scoring.hpp"

namespace hfvad::oracle {

using Labels = std::vector<std::uint8_t>;

/// P(pos > neg) + P(pos == neg) / 2 over all pairs.
inline double pairwise_auroc(const std::vector<double>& s, const Labels& l) {
  double num = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        ++pairs;
      }
  return num / static_cast<double>(pairs);
}

/// Tries every threshold (each score and +inf); picks the largest with TPR >= target.
inline double sweep_fpr(const std::vector<double>& s, const Labels& l, double target) {
  std::set<double> th(s.begin(), s.end());
  th.insert(std::numeric_limits<double>::infinity());
  std::size_t pos = 0, neg = 0;
  for (auto x : l) (x ? pos : neg)++;
  for (auto it = th.rbegin(); it != th.rend(); ++it) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= *it) (l[i] ? tp : fp)++;
    if (static_cast<double>(tp) >= target * static_cast<double>(pos))
      return neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0;
  }
  return 1.0;
}

/// Percentile with linear interpolation; order statistics picked by selection.
inline double selection_percentile(std::vector<double> v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(pos);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  const double lo = v[k];
  if (k + 1 >= v.size()) return lo;
  const double hi = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(k) + 1, v.end());
  return lo + (pos - static_cast<double>(k)) * (hi - lo);
}

/// IoU of two boxes by counting covered pixels of a canvas that contains both.
inline double pixel_count_iou(const BBox& a, const BBox& b) {
  const int x1 = std::max(a.x_max, b.x_max), y1 = std::max(a.y_max, b.y_max);
  long inter = 0, uni = 0;
  for (int y = std::min(a.y_min, b.y_min); y < y1; ++y)
    for (int x = std::min(a.x_min, b.x_min); x < x1; ++x) {
      const bool ia = x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max;
      const bool ib = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Weighted sum of the standardized cube errors, written out term by term.
inline double frame_formula(double s_r, double s_p, const scoring::TrainStats& st, const scoring::ScoreWeights& w) {
  return w.w_r * ((s_r - st.mu_r) / st.sigma_r) + w.w_p * ((s_p - st.mu_p) / st.sigma_p);
}

/// Pixel score at index i of an S x S patch: robust-scale each channel, average channels per
/// stream, weight the two streams.
inline double pixel_formula(const std::vector<float>& e_r, const std::vector<float>& e_p, std::size_t i, std::size_t area,
                            const scoring::TrainStats& st, const scoring::ScoreWeights& w) {
  double xr = 0, xp = 0;
  for (std::size_t c = 0; c < 2; ++c) xr += (double(e_r[c * area + i]) - st.median_r[c]) / st.iqr_r[c];
  for (std::size_t c = 0; c < 3; ++c) xp += (double(e_p[c * area + i]) - st.median_p[c]) / st.iqr_p[c];
  return w.w_rp * xr / 2.0 + w.w_pp * xp / 3.0;
}

}  // namespace hfvad::oracle
