#pragma once

// Detection metrics: frame-wise ROC/AUROC, FPR at a target TPR, pixel-wise FPR95 over the
// region covered by both ground-truth and predicted boxes, and box IoU. Plus the CSV and PGM
// writers used by reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hfvad/stc.hpp"

namespace hfvad::eval {

struct RocPoint {
  double threshold, tpr, fpr;
};

struct RocCurve {
  std::vector<RocPoint> points;  // thresholds descending; first (inf, 0, 0), last (min, 1, 1)
  double auroc = 0;
};

namespace detail {

inline void require_labels(std::size_t n_scores, std::size_t n_labels) {
  if (n_scores != n_labels) throw DimensionError("scores and labels differ in length");
}

/// Indices sorted by descending score. Ties keep input order; every consumer groups them.
template <class S>
std::vector<std::size_t> order_desc(const std::vector<S>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

/// ROC from every distinct score, treating score >= threshold as positive.
template <class S>
RocCurve roc_curve(const std::vector<S>& scores, const std::vector<std::uint8_t>& labels) {
  detail::require_labels(scores.size(), labels.size());
  const auto pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("ROC needs both positive and negative samples");
  for (const auto& s : scores)
    if (!std::isfinite(static_cast<double>(s))) throw NumericError("non-finite score");
  const auto idx = detail::order_desc(scores);
  RocCurve c;
  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const S v = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == v; ++i) (labels[idx[i]] ? tp : fp)++;
    c.points.push_back(
        {static_cast<double>(v), static_cast<double>(tp) / static_cast<double>(pos), static_cast<double>(fp) / static_cast<double>(neg)});
  }
  for (std::size_t k = 1; k < c.points.size(); ++k) {
    const auto& a = c.points[k - 1];
    const auto& b = c.points[k];
    c.auroc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2;
  }
  return c;
}

template <class S>
double auroc(const std::vector<S>& scores, const std::vector<std::uint8_t>& labels) {
  return roc_curve(scores, labels).auroc;
}

/// FPR at the highest threshold whose TPR reaches `target`.
template <class S>
double fpr_at_tpr(const std::vector<S>& scores, const std::vector<std::uint8_t>& labels, double target = 0.95) {
  detail::require_labels(scores.size(), labels.size());
  const auto pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0) throw MetricError("FPR at TPR needs positive samples");
  auto fpr = [&](std::size_t fp) { return neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0; };
  if (target <= 0) return 0.0;
  const auto idx = detail::order_desc(scores);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const S v = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == v; ++i) (labels[idx[i]] ? tp : fp)++;
    if (static_cast<double>(tp) >= target * static_cast<double>(pos)) return fpr(fp);
  }
  return fpr(fp);
}

/// Per-frame inputs of the pixel-wise metric.
struct PixelFrame {
  const stc::AnomalyMap* map = nullptr;
  const std::vector<std::uint8_t>* mask = nullptr;  // H x W ground-truth anomaly mask
  const std::vector<BBox>* gt_boxes = nullptr;
  const std::vector<BBox>* pred_boxes = nullptr;
};

/// Pixels inside both the ground-truth and the predicted box union, as (score, label) pairs.
inline void pool_overlap_pixels(const PixelFrame& f, std::vector<float>& scores, std::vector<std::uint8_t>& labels) {
  const auto h = f.map->height, w = f.map->width;
  if (f.mask->size() != h * w) throw DimensionError("anomaly mask and map differ in size");
  auto paint = [&](const std::vector<BBox>& boxes) {
    std::vector<std::uint8_t> m(h * w, 0);
    for (const auto& b0 : boxes) {
      const auto b = b0.clipped(static_cast<int>(w), static_cast<int>(h));
      if (!b.valid()) continue;
      for (int y = b.y_min; y < b.y_max; ++y)
        std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(b.x_min)),
                    b.width(), std::uint8_t{1});
    }
    return m;
  };
  const auto g = paint(*f.gt_boxes), p = paint(*f.pred_boxes);
  for (std::size_t i = 0; i < h * w; ++i)
    if (g[i] && p[i]) {
      scores.push_back(f.map->values[i]);
      labels.push_back((*f.mask)[i] ? 1 : 0);
    }
}

/// FPR95 over pixels pooled from every frame's overlap region.
inline double pixel_fpr95_overlap(const std::vector<PixelFrame>& frames, double target = 0.95) {
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  for (const auto& f : frames) pool_overlap_pixels(f, scores, labels);
  if (scores.empty()) throw MetricError("ground-truth and predicted boxes never overlap");
  return fpr_at_tpr(scores, labels, target);
}

struct IouTally {
  double sum = 0;
  std::size_t gt_boxes = 0;
  double mean() const { return gt_boxes ? sum / static_cast<double>(gt_boxes) : 0.0; }
};

/// Greedy one-to-one matching by IoU; unmatched ground-truth boxes count 0.
inline void tally_box_iou(const std::vector<BBox>& gt, const std::vector<BBox>& pred, IouTally& t) {
  for (auto [i, j] : stc::greedy_match(gt, pred, 0.0)) t.sum += iou(gt[i], pred[j]);
  t.gt_boxes += gt.size();
}

inline double mean_box_iou(const std::vector<BBox>& gt, const std::vector<BBox>& pred) {
  IouTally t;
  tally_box_iou(gt, pred, t);
  return t.mean();
}

// ---------------------------------------------------------------------------
// Report writers

/// Fixed-precision formatting so reruns produce identical bytes.
inline std::string fmt(double v, int digits = 6) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

inline std::string roc_csv(const RocCurve& c) {
  std::string out = "threshold,tpr,fpr\n";
  for (const auto& p : c.points) out += fmt(p.threshold) + "," + fmt(p.tpr) + "," + fmt(p.fpr) + "\n";
  return out;
}

/// Binary 8-bit PGM of a map, linearly scaled so `vmax` maps to 255.
inline std::string heatmap_pgm(const stc::AnomalyMap& m, double vmax) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  for (float v : m.values) {
    const double t = vmax > 0 ? std::clamp(static_cast<double>(v) / vmax, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  return out;
}

}  // namespace hfvad::eval
