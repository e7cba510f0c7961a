#pragma once

// Plain value types shared across modules: images, flow fields and boxes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hfvad/common.hpp"
#include "hfvad/ops.hpp"

namespace hfvad {

/// Planar float image, channel-major (C,H,W); values in [0,1] for frames.
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  const float* plane(std::size_t c) const { return data.data() + c * height * width; }
  float* plane(std::size_t c) { return data.data() + c * height * width; }
  bool same_shape(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
};

/// Dense displacement field from frame t to t+1, in pixels/frame.
struct FlowField {
  std::size_t height = 0, width = 0;
  std::vector<float> u, v;

  FlowField() = default;
  FlowField(std::size_t h, std::size_t w) : height(h), width(w), u(h * w, 0.0f), v(h * w, 0.0f) {}
};

enum class Provenance { ground_truth, detected };

inline std::string to_string(Provenance p) { return p == Provenance::ground_truth ? "ground-truth" : "detected"; }

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "ground-truth") return Provenance::ground_truth;
  if (s == "detected") return Provenance::detected;
  throw ConfigError("unknown box provenance '" + s + "'");
}

/// Axis-aligned integer pixel box, half-open: covers x in [x_min, x_max), y in [y_min, y_max).
struct BBox {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  std::string cls = "vehicle";
  int track_id = -1;
  Provenance provenance = Provenance::ground_truth;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long area() const { return valid() ? static_cast<long>(width()) * height() : 0; }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool contains(int x, int y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }

  BBox clipped(int frame_w, int frame_h) const {
    BBox b = *this;
    b.x_min = std::clamp(b.x_min, 0, frame_w);
    b.x_max = std::clamp(b.x_max, 0, frame_w);
    b.y_min = std::clamp(b.y_min, 0, frame_h);
    b.y_max = std::clamp(b.y_max, 0, frame_h);
    return b;
  }

  bool same_geometry(const BBox& o) const {
    return x_min == o.x_min && y_min == o.y_min && x_max == o.x_max && y_max == o.y_max;
  }
};

inline long intersection_area(const BBox& a, const BBox& b) {
  const int w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const int h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return (w > 0 && h > 0) ? static_cast<long>(w) * h : 0;
}

inline double iou(const BBox& a, const BBox& b) {
  const long inter = intersection_area(a, b);
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Bilinear resampling of the region [x0, x0+w) x [y0, y0+h) of every channel into an
/// out_h x out_w image. Pixel-centre aligned: a region whose size equals the output size and
/// sits on integer coordinates is copied exactly.
inline Image resample_region(const Image& src, double x0, double y0, double w, double h, std::size_t out_h,
                             std::size_t out_w) {
  auto ty = ad::detail::resample_taps(src.height, out_h, y0, h);
  auto tx = ad::detail::resample_taps(src.width, out_w, x0, w);
  Image out(src.channels, out_h, out_w);
  for (std::size_t c = 0; c < src.channels; ++c) {
    const float* p = src.plane(c);
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      const auto fy = static_cast<float>(a.frac);
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        const auto fx = static_cast<float>(b.frac);
        const float top = p[a.i0 * src.width + b.i0] + fx * (p[a.i0 * src.width + b.i1] - p[a.i0 * src.width + b.i0]);
        const float bot = p[a.i1 * src.width + b.i0] + fx * (p[a.i1 * src.width + b.i1] - p[a.i1 * src.width + b.i0]);
        out.at(c, i, j) = top + fy * (bot - top);
      }
    }
  }
  return out;
}

}  // namespace hfvad
