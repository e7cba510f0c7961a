#pragma once

// Coarse-to-fine Horn-Schunck optical flow.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "hfvad/checkpoint.hpp"
#include "hfvad/common.hpp"
#include "hfvad/types.hpp"

namespace hfvad::flow {

struct FlowParams {
  int levels = 3;
  int iterations = 100;  // per pyramid level
  double smoothness = 0.1;
  double max_displacement = 8.0;  // pixels/frame; larger vectors are scaled down to this length
};

namespace detail {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<float> p;
  Plane() = default;
  Plane(std::size_t h_, std::size_t w_, float fill = 0.0f) : h(h_), w(w_), p(h_ * w_, fill) {}
  float at(long y, long x) const {  // replicate border
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return p[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  }
  float& operator()(std::size_t y, std::size_t x) { return p[y * w + x]; }
  float operator()(std::size_t y, std::size_t x) const { return p[y * w + x]; }
};

inline Plane luma(const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw DimensionError("flow expects 1- or 3-channel frames");
  Plane out(img.height, img.width);
  const std::size_t n = img.height * img.width;
  if (img.channels == 1) {
    std::copy_n(img.data.begin(), n, out.p.begin());
    return out;
  }
  const float *r = img.plane(0), *g = img.plane(1), *b = img.plane(2);
  for (std::size_t i = 0; i < n; ++i) out.p[i] = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
  return out;
}

/// 2x2 box average; an odd trailing row or column is folded into the last cell.
inline Plane downsample(const Plane& a) {
  Plane out(std::max<std::size_t>(1, a.h / 2), std::max<std::size_t>(1, a.w / 2));
  for (std::size_t y = 0; y < out.h; ++y)
    for (std::size_t x = 0; x < out.w; ++x) {
      const long y0 = static_cast<long>(2 * y), x0 = static_cast<long>(2 * x);
      out(y, x) = 0.25f * (a.at(y0, x0) + a.at(y0, x0 + 1) + a.at(y0 + 1, x0) + a.at(y0 + 1, x0 + 1));
    }
  return out;
}

/// Bilinear sample at continuous pixel coordinates (pixel centres on integers).
inline float sample(const Plane& a, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const auto wy = static_cast<float>(y - fy), wx = static_cast<float>(x - fx);
  const float top = a.at(y0, x0) + wx * (a.at(y0, x0 + 1) - a.at(y0, x0));
  const float bot = a.at(y0 + 1, x0) + wx * (a.at(y0 + 1, x0 + 1) - a.at(y0 + 1, x0));
  return top + wy * (bot - top);
}

/// Pixel-centre aligned bilinear resize.
inline Plane resize(const Plane& a, std::size_t h, std::size_t w, float gain = 1.0f) {
  Plane out(h, w);
  const double sy = static_cast<double>(a.h) / static_cast<double>(h);
  const double sx = static_cast<double>(a.w) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      out(y, x) = gain * sample(a, (static_cast<double>(y) + 0.5) * sy - 0.5, (static_cast<double>(x) + 0.5) * sx - 0.5);
  return out;
}

/// Weighted neighbourhood mean: 1/6 for edge neighbours, 1/12 for diagonals.
inline float neighbour_mean(const Plane& a, long y, long x) {
  return (a.at(y - 1, x) + a.at(y + 1, x) + a.at(y, x - 1) + a.at(y, x + 1)) / 6.0f +
         (a.at(y - 1, x - 1) + a.at(y - 1, x + 1) + a.at(y + 1, x - 1) + a.at(y + 1, x + 1)) / 12.0f;
}

/// Jacobi Horn-Schunck refinement of (u, v) at one pyramid level, linearised around the incoming flow.
inline void refine(const Plane& i1, const Plane& i2, Plane& u, Plane& v, const FlowParams& params) {
  const std::size_t h = i1.h, w = i1.w;
  Plane warped(h, w), ix(h, w), iy(h, w), it(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      warped(y, x) = sample(i2, static_cast<double>(y) + v(y, x), static_cast<double>(x) + u(y, x));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const long ly = static_cast<long>(y), lx = static_cast<long>(x);
      const float gx = 0.25f * (i1.at(ly, lx + 1) - i1.at(ly, lx - 1) + warped.at(ly, lx + 1) - warped.at(ly, lx - 1));
      const float gy = 0.25f * (i1.at(ly + 1, lx) - i1.at(ly - 1, lx) + warped.at(ly + 1, lx) - warped.at(ly - 1, lx));
      ix(y, x) = gx;
      iy(y, x) = gy;
      // Temporal residual at the linearisation point u0: I2(x + u) - I1(x) - grad . u0
      it(y, x) = warped(y, x) - i1(y, x) - gx * u(y, x) - gy * v(y, x);
    }
  }
  const auto alpha2 = static_cast<float>(params.smoothness * params.smoothness);
  Plane un(h, w), vn(h, w);
  for (int k = 0; k < params.iterations; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const long ly = static_cast<long>(y), lx = static_cast<long>(x);
        const float ub = neighbour_mean(u, ly, lx), vb = neighbour_mean(v, ly, lx);
        const float gx = ix(y, x), gy = iy(y, x);
        const float r = (gx * ub + gy * vb + it(y, x)) / (alpha2 + gx * gx + gy * gy);
        un(y, x) = ub - gx * r;
        vn(y, x) = vb - gy * r;
      }
    }
    std::swap(u.p, un.p);
    std::swap(v.p, vn.p);
  }
}

}  // namespace detail

/// Dense flow from `a` to `b`: b(x + u, y + v) ~ a(x, y).
inline FlowField estimate_flow(const Image& a, const Image& b, const FlowParams& params = {}) {
  if (!a.same_shape(b)) throw DimensionError("flow frames differ in shape");
  if (params.levels < 1 || params.iterations < 0 || params.smoothness <= 0 || params.max_displacement <= 0)
    throw ConfigError("invalid flow parameters");
  std::vector<detail::Plane> p1{detail::luma(a)}, p2{detail::luma(b)};
  for (int l = 1; l < params.levels && p1.back().h >= 8 && p1.back().w >= 8; ++l) {
    p1.push_back(detail::downsample(p1.back()));
    p2.push_back(detail::downsample(p2.back()));
  }
  detail::Plane u(p1.back().h, p1.back().w), v(p1.back().h, p1.back().w);
  for (std::size_t l = p1.size(); l-- > 0;) {
    const auto& i1 = p1[l];
    if (u.h != i1.h || u.w != i1.w) {
      const float gy = static_cast<float>(i1.h) / static_cast<float>(u.h);
      const float gx = static_cast<float>(i1.w) / static_cast<float>(u.w);
      u = detail::resize(u, i1.h, i1.w, gx);
      v = detail::resize(v, i1.h, i1.w, gy);
    }
    detail::refine(i1, p2[l], u, v, params);
  }
  FlowField out(a.height, a.width);
  const auto cap = static_cast<float>(params.max_displacement);
  for (std::size_t i = 0; i < out.u.size(); ++i) {
    float uu = u.p[i], vv = v.p[i];
    const float m = std::sqrt(uu * uu + vv * vv);
    if (m > cap) {
      uu *= cap / m;
      vv *= cap / m;
    }
    if (!std::isfinite(uu) || !std::isfinite(vv)) throw NumericError("non-finite optical flow");
    out.u[i] = uu;
    out.v[i] = vv;
  }
  return out;
}

inline std::vector<float> flow_magnitude_map(const FlowField& f) {
  std::vector<float> m(f.u.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::sqrt(f.u[i] * f.u[i] + f.v[i] * f.v[i]);
  return m;
}

/// Flow between every pair of consecutive frames.
inline std::vector<FlowField> estimate_sequence(const std::vector<Image>& frames, const FlowParams& params = {},
                                                unsigned jobs = 1) {
  if (frames.size() < 2) return {};
  std::vector<FlowField> out(frames.size() - 1);
  parallel_for(out.size(), jobs, [&](std::size_t t) { out[t] = estimate_flow(frames[t], frames[t + 1], params); });
  return out;
}

inline io::NamedTensor flows_to_tensor(const std::vector<FlowField>& flows, const std::string& name = "flows") {
  if (flows.empty()) throw DimensionError("no flows to store");
  const auto h = static_cast<std::uint32_t>(flows[0].height), w = static_cast<std::uint32_t>(flows[0].width);
  io::NamedTensor t{name, {static_cast<std::uint32_t>(flows.size()), 2, h, w}, {}};
  t.values.reserve(flows.size() * 2 * h * w);
  for (const auto& f : flows) {
    t.values.insert(t.values.end(), f.u.begin(), f.u.end());
    t.values.insert(t.values.end(), f.v.begin(), f.v.end());
  }
  return t;
}

inline std::vector<FlowField> flows_from_tensor(const io::NamedTensor& t) {
  if (t.shape.size() != 4 || t.shape[1] != 2) throw IoError("expected a (T,2,H,W) flow tensor");
  const std::size_t h = t.shape[2], w = t.shape[3], hw = h * w;
  std::vector<FlowField> out;
  for (std::size_t i = 0; i < t.shape[0]; ++i) {
    FlowField f(h, w);
    auto base = t.values.begin() + static_cast<std::ptrdiff_t>(2 * i * hw);
    std::copy_n(base, hw, f.u.begin());
    std::copy_n(base + static_cast<std::ptrdiff_t>(hw), hw, f.v.begin());
    out.push_back(std::move(f));
  }
  return out;
}

inline void save_flows(const std::filesystem::path& path, const std::vector<FlowField>& flows) {
  io::save(path, {flows_to_tensor(flows)});
}

inline std::vector<FlowField> load_flows(const std::filesystem::path& path, const std::string& name = "flows") {
  return flows_from_tensor(io::find(io::load(path), name));
}

}  // namespace hfvad::flow
