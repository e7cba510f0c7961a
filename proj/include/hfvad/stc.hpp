#pragma once

// Object boxes and the per-object spatiotemporal cubes fed to the models.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "hfvad/common.hpp"
#include "hfvad/types.hpp"

namespace hfvad::stc {

/// Controlled degradation of ground-truth boxes standing in for an object detector.
struct DetectorStub {
  double miss_rate = 0.0;
  double jitter_sigma = 0.0;  // px, per corner
  double size_bias = 1.0;     // multiplicative, about the box centre
  double distance_miss_boost = 0.0;
  double small_area = 64.0;                // px^2; boxes below get the boost
  std::map<int, double> track_miss_rate;  // per-track override of miss_rate
  std::uint64_t seed = 0;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(miss_rate) || !prob(distance_miss_boost)) throw ConfigError("detector probabilities must lie in [0, 1]");
    for (const auto& [id, p] : track_miss_rate)
      if (!prob(p)) throw ConfigError("detector probabilities must lie in [0, 1]");
    if (jitter_sigma < 0) throw ConfigError("detector jitter must be non-negative");
    if (!(size_bias > 0)) throw ConfigError("detector size bias must be positive");
  }
};

/// Degrades one frame's ground-truth boxes. Each box draws from its own stream keyed by
/// (seed, frame, track), so the outcome does not depend on the other boxes in the frame.
inline std::vector<BBox> detect_boxes(const std::vector<BBox>& gt, const DetectorStub& stub, int frame, int frame_w,
                                      int frame_h) {
  stub.validate();
  std::vector<BBox> out;
  for (const auto& b : gt) {
    Rng rng(mix_seed(stub.seed, {static_cast<std::uint64_t>(frame), static_cast<std::uint64_t>(b.track_id + 1)}));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const auto it = stub.track_miss_rate.find(b.track_id);
    double miss = it != stub.track_miss_rate.end() ? it->second : stub.miss_rate;
    if (static_cast<double>(b.area()) < stub.small_area) miss += stub.distance_miss_boost;
    if (u01(rng) < std::min(miss, 1.0)) continue;
    double x0 = b.x_min, y0 = b.y_min, x1 = b.x_max, y1 = b.y_max;
    if (stub.size_bias != 1.0) {
      const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
      const double hw = 0.5 * (x1 - x0) * stub.size_bias, hh = 0.5 * (y1 - y0) * stub.size_bias;
      x0 = cx - hw;
      x1 = cx + hw;
      y0 = cy - hh;
      y1 = cy + hh;
    }
    if (stub.jitter_sigma > 0) {
      std::normal_distribution<double> n(0.0, stub.jitter_sigma);
      x0 += n(rng);
      y0 += n(rng);
      x1 += n(rng);
      y1 += n(rng);
    }
    BBox d = b;
    d.x_min = static_cast<int>(std::lround(std::min(x0, x1)));
    d.x_max = static_cast<int>(std::lround(std::max(x0, x1)));
    d.y_min = static_cast<int>(std::lround(std::min(y0, y1)));
    d.y_max = static_cast<int>(std::lround(std::max(y0, y1)));
    d.provenance = Provenance::detected;
    d = d.clipped(frame_w, frame_h);
    if (d.valid()) out.push_back(d);
  }
  return out;
}

/// Greedy one-to-one matching by descending IoU. Returns (index in a, index in b) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> greedy_match(const std::vector<BBox>& a,
                                                                    const std::vector<BBox>& b,
                                                                    double min_iou = 0.0) {
  struct Cand {
    double iou;
    std::size_t i, j;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double v = iou(a[i], b[j]);
      if (v > min_iou) cands.push_back({v, i, j});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.iou > y.iou; });
  std::vector<bool> used_a(a.size()), used_b(b.size());
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& c : cands) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = true;
    out.emplace_back(c.i, c.j);
  }
  return out;
}

/// Assigns track ids to per-frame detections by matching each frame against the previous one.
/// Unmatched detections start new tracks; a missed frame ends a track.
inline void associate_tracks(std::vector<std::vector<BBox>>& frames, double min_iou = 0.3) {
  int next_id = 0;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    auto& cur = frames[t];
    for (auto& b : cur) b.track_id = -1;
    if (t > 0)
      for (auto [i, j] : greedy_match(frames[t - 1], cur, min_iou)) cur[j].track_id = frames[t - 1][i].track_id;
    for (auto& b : cur)
      if (b.track_id < 0) b.track_id = next_id++;
  }
}

struct CubeSpec {
  int t_len = 4;          // past frames per cube
  std::size_t size = 32;  // crop side
  double margin = 0.0;    // fractional box enlargement on each side
  int min_side = 2;       // px; smaller clipped boxes are skipped
};

/// One object's window: frames t-t_len+1..t, the flows between consecutive frames ending with
/// the flow t -> t+1, and the frame t+1 to predict. All crops use the object's box at t+1.
struct STCube {
  int track_id = -1;
  int t = 0;  // last past frame; the cube predicts frame t+1
  BBox box_at_t, box_at_t1;
  std::vector<float> img;     // t_len x 3 x S x S
  std::vector<float> flow;    // (t_len-1) x 2 x S x S
  std::vector<float> target;  // 3 x S x S
};

inline const BBox* find_track(const std::vector<BBox>& boxes, int track_id) {
  for (const auto& b : boxes)
    if (b.track_id == track_id) return &b;
  return nullptr;
}

inline BBox with_margin(const BBox& b, double margin, int frame_w, int frame_h) {
  if (margin == 0.0) return b;
  BBox e = b;
  const auto mx = static_cast<int>(std::lround(margin * b.width())), my = static_cast<int>(std::lround(margin * b.height()));
  e.x_min -= mx;
  e.x_max += mx;
  e.y_min -= my;
  e.y_max += my;
  return e.clipped(frame_w, frame_h);
}

inline void append_crop(std::vector<float>& dst, const Image& src, const BBox& box, std::size_t s) {
  const auto crop = resample_region(src, box.x_min, box.y_min, box.width(), box.height(), s, s);
  dst.insert(dst.end(), crop.data.begin(), crop.data.end());
}

inline void append_flow_crop(std::vector<float>& dst, const FlowField& f, const BBox& box, std::size_t s) {
  Image img(2, f.height, f.width);
  std::copy(f.u.begin(), f.u.end(), img.plane(0));
  std::copy(f.v.begin(), f.v.end(), img.plane(1));
  auto crop = resample_region(img, box.x_min, box.y_min, box.width(), box.height(), s, s);
  const auto su = static_cast<float>(static_cast<double>(s) / box.width());
  const auto sv = static_cast<float>(static_cast<double>(s) / box.height());
  for (std::size_t i = 0; i < s * s; ++i) {
    crop.data[i] *= su;
    crop.data[s * s + i] *= sv;
  }
  dst.insert(dst.end(), crop.data.begin(), crop.data.end());
}

/// Cubes for every track present in all frames t-t_len+1..t+1. `skipped` counts tracks dropped
/// for degenerate boxes.
inline std::vector<STCube> extract_stc(const std::vector<Image>& frames, const std::vector<FlowField>& flows,
                                       const std::vector<std::vector<BBox>>& tracks, int t, const CubeSpec& spec,
                                       int* skipped = nullptr) {
  if (spec.t_len < 2) throw ConfigError("cube length must be at least 2");
  if (t < spec.t_len - 1 || t + 1 >= static_cast<int>(frames.size()))
    throw DimensionError("cube window out of range at frame " + std::to_string(t));
  if (tracks.size() != frames.size() || flows.size() + 1 != frames.size())
    throw DimensionError("frames, flows and boxes disagree in length");
  const int W = static_cast<int>(frames[0].width), H = static_cast<int>(frames[0].height);
  const int first = t - spec.t_len + 1;
  std::vector<STCube> out;
  for (const auto& b1 : tracks[static_cast<std::size_t>(t + 1)]) {
    bool present = true;
    for (int k = first; k <= t && present; ++k) present = find_track(tracks[static_cast<std::size_t>(k)], b1.track_id);
    if (!present) continue;
    const BBox crop = with_margin(b1, spec.margin, W, H);
    if (crop.width() < spec.min_side || crop.height() < spec.min_side) {
      if (skipped) ++*skipped;
      continue;
    }
    STCube c;
    c.track_id = b1.track_id;
    c.t = t;
    c.box_at_t = *find_track(tracks[static_cast<std::size_t>(t)], b1.track_id);
    c.box_at_t1 = b1;
    for (int k = first; k <= t; ++k) append_crop(c.img, frames[static_cast<std::size_t>(k)], crop, spec.size);
    for (int k = first + 1; k <= t; ++k) append_flow_crop(c.flow, flows[static_cast<std::size_t>(k)], crop, spec.size);
    append_crop(c.target, frames[static_cast<std::size_t>(t + 1)], crop, spec.size);
    out.push_back(std::move(c));
  }
  return out;
}

/// Dense per-frame score map; `covered` marks pixels written by at least one box.
struct AnomalyMap {
  std::size_t height = 0, width = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> covered;
  float frame_score = 0.0f;

  AnomalyMap() = default;
  AnomalyMap(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0.0f), covered(h * w, 0) {}
};

/// Resizes an S x S patch onto `box` and merges it into the map by per-pixel maximum.
inline void scatter_patch(AnomalyMap& map, const BBox& box, const std::vector<float>& patch, std::size_t s) {
  if (patch.size() != s * s) throw DimensionError("patch size mismatch");
  const BBox b = box.clipped(static_cast<int>(map.width), static_cast<int>(map.height));
  if (!b.valid()) return;
  Image src(1, s, s);
  src.data = patch;
  const auto bw = static_cast<std::size_t>(b.width()), bh = static_cast<std::size_t>(b.height());
  // Source region in patch coordinates covering the clipped part of the box.
  const double sx = static_cast<double>(s) / box.width(), sy = static_cast<double>(s) / box.height();
  const auto res = resample_region(src, (b.x_min - box.x_min) * sx, (b.y_min - box.y_min) * sy,
                                   static_cast<double>(bw) * sx, static_cast<double>(bh) * sy, bh, bw);
  for (std::size_t y = 0; y < bh; ++y)
    for (std::size_t x = 0; x < bw; ++x) {
      const std::size_t i = (static_cast<std::size_t>(b.y_min) + y) * map.width + static_cast<std::size_t>(b.x_min) + x;
      const float v = res.data[y * bw + x];
      map.values[i] = map.covered[i] ? std::max(map.values[i], v) : v;
      map.covered[i] = 1;
    }
}

}  // namespace hfvad::stc
