#pragma once

// Differentiable operations. Every op validates shapes, computes its value eagerly and
// registers a backward closure that accumulates into its operands' gradients.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "hfvad/tensor.hpp"

namespace hfvad::ad {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

/// Left-to-right sum. Eigen's vectorized reductions peel by pointer alignment, which would make
/// results depend on where the heap placed a buffer.
template <class T>
T ordered_sum(const T* p, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += p[i];
  return s;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape " + to_string(a) + " vs " + to_string(b));
}

template <class T>
using Ptr = std::shared_ptr<Node<T>>;

/// Applies a unary elementwise map with derivative expressed through input x and output y.
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, std::string_view op, F f, D dfdx) {
  std::vector<T> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(a.shape(), std::move(out), op, {a.node()}, [dfdx](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(x.value[i], self.value[i]);
  });
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

/// Unfolds one image (C,H,W) into a (C*kh*kw, out_h*out_w) column matrix.
template <class T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds a column matrix back into an image (C,H,W).
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline ConvGeometry conv_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                                  std::size_t stride, std::size_t pad, std::string_view op) {
  if (stride < 1) throw ConfigError(std::string(op) + ": stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError(std::string(op) + ": kernel larger than padded input");
  }
  if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0) {
    throw ConfigError(std::string(op) + ": output size is not an exact division (input " + std::to_string(h) + "x" +
                      std::to_string(w) + ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) + ", stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad) + ")");
  }
  return {c, h, w, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
}

/// Splits a shape around `axis` into (outer, extent, inner) for axis-wise reductions.
inline std::array<std::size_t, 3> split_axis(const Shape& shape, std::size_t axis, std::string_view op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(shape.size()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

/// 2-D cross-correlation. input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,H',W'].
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1, std::size_t pad = 0) {
  using namespace detail;
  require(input.rank() == 4, "conv2d: input must be [N,C,H,W], got " + to_string(input.shape()));
  require(kernel.rank() == 4, "conv2d: kernel must be [F,C,kh,kw], got " + to_string(kernel.shape()));
  require(input.dim(1) == kernel.dim(1), "conv2d: channel mismatch " + to_string(input.shape()) + " vs kernel " +
                                             to_string(kernel.shape()));
  const std::size_t n = input.dim(0), f = kernel.dim(0);
  const auto g = conv_geometry(input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), stride, pad,
                               "conv2d");
  const std::size_t in_size = g.channels * g.height * g.width, out_size = f * g.col_cols();
  std::vector<T> out(n * out_size);
  std::vector<T> col(g.col_rows() * g.col_cols());
  CMapRM<T> k(kernel.data().data(), f, g.col_rows());
  for (std::size_t s = 0; s < n; ++s) {
    im2col(input.data().data() + s * in_size, g, col.data());
    MapRM<T>(out.data() + s * out_size, f, g.col_cols()).noalias() =
        k * CMapRM<T>(col.data(), g.col_rows(), g.col_cols());
  }
  return make_result<T>({n, f, g.out_h, g.out_w}, std::move(out), "conv2d", {input.node(), kernel.node()},
                        [g, n, f, in_size, out_size](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          auto& w = *self.inputs[1];
                          std::vector<T> col(g.col_rows() * g.col_cols());
                          std::vector<T> dcol(x.requires_grad ? col.size() : 0);
                          CMapRM<T> k(w.value.data(), f, g.col_rows());
                          for (std::size_t s = 0; s < n; ++s) {
                            CMapRM<T> dy(self.grad.data() + s * out_size, f, g.col_cols());
                            if (w.requires_grad) {
                              im2col(x.value.data() + s * in_size, g, col.data());
                              MapRM<T>(w.grad_buffer().data(), f, g.col_rows()).noalias() +=
                                  dy * CMapRM<T>(col.data(), g.col_rows(), g.col_cols()).transpose();
                            }
                            if (x.requires_grad) {
                              MapRM<T>(dcol.data(), g.col_rows(), g.col_cols()).noalias() = k.transpose() * dy;
                              col2im(dcol.data(), g, x.grad_buffer().data() + s * in_size);
                            }
                          }
                        });
}

/// Adjoint of conv2d with the same kernel: input [N,F,H,W], kernel [F,C,kh,kw] -> [N,C,H',W'],
/// H' = (H-1)*stride - 2*pad + kh.
template <std::floating_point T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                           std::size_t pad = 0) {
  using namespace detail;
  require(input.rank() == 4, "conv2d_transpose: input must be [N,F,H,W], got " + to_string(input.shape()));
  require(kernel.rank() == 4, "conv2d_transpose: kernel must be [F,C,kh,kw], got " + to_string(kernel.shape()));
  require(input.dim(1) == kernel.dim(0), "conv2d_transpose: channel mismatch " + to_string(input.shape()) +
                                             " vs kernel " + to_string(kernel.shape()));
  if (stride < 1) throw ConfigError("conv2d_transpose: stride must be >= 1");
  const std::size_t n = input.dim(0), f = kernel.dim(0), c = kernel.dim(1);
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  const auto full_h = (input.dim(2) - 1) * stride + kh, full_w = (input.dim(3) - 1) * stride + kw;
  if (full_h <= 2 * pad || full_w <= 2 * pad) throw ConfigError("conv2d_transpose: padding consumes the output");
  const std::size_t out_h = full_h - 2 * pad, out_w = full_w - 2 * pad;
  // Geometry of the forward convolution this op is the adjoint of.
  const auto g = conv_geometry(c, out_h, out_w, kh, kw, stride, pad, "conv2d_transpose");
  require(g.out_h == input.dim(2) && g.out_w == input.dim(3), "conv2d_transpose: inconsistent geometry");
  const std::size_t in_size = f * g.col_cols(), out_size = c * out_h * out_w;
  std::vector<T> out(n * out_size, T(0));
  std::vector<T> col(g.col_rows() * g.col_cols());
  CMapRM<T> k(kernel.data().data(), f, g.col_rows());
  for (std::size_t s = 0; s < n; ++s) {
    MapRM<T>(col.data(), g.col_rows(), g.col_cols()).noalias() =
        k.transpose() * CMapRM<T>(input.data().data() + s * in_size, f, g.col_cols());
    col2im(col.data(), g, out.data() + s * out_size);
  }
  return make_result<T>({n, c, out_h, out_w}, std::move(out), "conv2d_transpose", {input.node(), kernel.node()},
                        [g, n, f, in_size, out_size](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          auto& w = *self.inputs[1];
                          std::vector<T> col(g.col_rows() * g.col_cols());
                          CMapRM<T> k(w.value.data(), f, g.col_rows());
                          for (std::size_t s = 0; s < n; ++s) {
                            im2col(self.grad.data() + s * out_size, g, col.data());
                            CMapRM<T> dcol(col.data(), g.col_rows(), g.col_cols());
                            if (x.requires_grad) {
                              MapRM<T>(x.grad_buffer().data() + s * in_size, f, g.col_cols()).noalias() += k * dcol;
                            }
                            if (w.requires_grad) {
                              MapRM<T>(w.grad_buffer().data(), f, g.col_rows()).noalias() +=
                                  CMapRM<T>(x.value.data() + s * in_size, f, g.col_cols()) * dcol.transpose();
                            }
                          }
                        });
}

/// Adds a per-channel bias: x [N,C,...], bias [C].
template <std::floating_point T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(x.rank() >= 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
                  "add_channel_bias: " + to_string(x.shape()) + " with bias " + to_string(bias.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) out[(s * c + ch) * inner + i] += b[ch];
  return make_result<T>(x.shape(), std::move(out), "add_channel_bias", {x.node(), bias.node()},
                        [n, c, inner](Node<T>& self) {
                          auto& xi = *self.inputs[0];
                          auto& bi = *self.inputs[1];
                          if (xi.requires_grad) {
                            auto& gx = xi.grad_buffer();
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                          }
                          if (bi.requires_grad) {
                            auto& gb = bi.grad_buffer();
                            for (std::size_t s = 0; s < n; ++s)
                              for (std::size_t ch = 0; ch < c; ++ch) {
                                T acc = 0;
                                for (std::size_t i = 0; i < inner; ++i) acc += self.grad[(s * c + ch) * inner + i];
                                gb[ch] += acc;
                              }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const T sign = k == 0 ? T(1) : T(-1);
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(a, "scale", [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(a, "relu", [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& a, T alpha = T(0.2)) {
  return detail::unary(
      a, "leaky_relu", [alpha](T x) { return x > 0 ? x : alpha * x; },
      [alpha](T x, T) { return x > 0 ? T(1) : alpha; });
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <std::floating_point T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// log(x + eps), elementwise.
template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a, T eps = T(0)) {
  return detail::unary(a, "log", [eps](T x) { return std::log(x + eps); }, [eps](T x, T) { return T(1) / (x + eps); });
}

/// Clamps to [lo, hi]; the gradient is zero where the bound is active.
template <std::floating_point T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary(
      a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <std::floating_point T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>({1}, {acc}, "reduce_sum", {a.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <std::floating_point T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_result<T>({1}, {acc * inv}, "reduce_mean", {a.node()}, [inv](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

/// Mean squared error over all elements.
template <std::floating_point T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mse");
  T acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.numel());
  return make_result<T>({1}, {acc * inv}, "mse", {a.node(), b.node()}, [inv](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    const T g0 = T(2) * inv * self.grad[0];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (x.value[i] - y.value[i]);
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (x.value[i] - y.value[i]);
    }
  });
}

/// KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over the batch (dim 0).
template <std::floating_point T>
Tensor<T> kl_diag_gaussian(const Tensor<T>& mu, const Tensor<T>& logvar) {
  detail::require_same_shape(mu.shape(), logvar.shape(), "kl_diag_gaussian");
  const T inv_batch = T(1) / static_cast<T>(mu.rank() ? mu.dim(0) : 1);
  T acc = 0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const T m = mu.data()[i], lv = logvar.data()[i];
    acc += T(0.5) * (m * m + std::exp(lv) - T(1) - lv);
  }
  return make_result<T>({1}, {acc * inv_batch}, "kl_diag_gaussian", {mu.node(), logvar.node()},
                        [inv_batch](Node<T>& self) {
                          auto& m = *self.inputs[0];
                          auto& lv = *self.inputs[1];
                          const T g0 = self.grad[0] * inv_batch;
                          if (m.requires_grad) {
                            auto& g = m.grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * m.value[i];
                          }
                          if (lv.requires_grad) {
                            auto& g = lv.grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += g0 * T(0.5) * (std::exp(lv.value[i]) - T(1));
                          }
                        });
}

/// KL(N(mu, exp(logvar)) || N(mu0, exp(logvar0))) for diagonal Gaussians, summed over latent
/// dims and averaged over the batch (dim 0).
template <std::floating_point T>
Tensor<T> kl_diag_gaussian(const Tensor<T>& mu, const Tensor<T>& logvar, const Tensor<T>& mu0,
                           const Tensor<T>& logvar0) {
  detail::require_same_shape(mu.shape(), logvar.shape(), "kl_diag_gaussian");
  detail::require_same_shape(mu.shape(), mu0.shape(), "kl_diag_gaussian");
  detail::require_same_shape(mu.shape(), logvar0.shape(), "kl_diag_gaussian");
  const T inv_batch = T(1) / static_cast<T>(mu.rank() ? mu.dim(0) : 1);
  T acc = 0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const T d = mu.data()[i] - mu0.data()[i];
    const T lv = logvar.data()[i], lv0 = logvar0.data()[i];
    acc += T(0.5) * (lv0 - lv + (std::exp(lv) + d * d) * std::exp(-lv0) - T(1));
  }
  return make_result<T>(
      {1}, {acc * inv_batch}, "kl_diag_gaussian2", {mu.node(), logvar.node(), mu0.node(), logvar0.node()},
      [inv_batch](Node<T>& self) {
        auto& m = *self.inputs[0];
        auto& lv = *self.inputs[1];
        auto& m0 = *self.inputs[2];
        auto& lv0 = *self.inputs[3];
        const T g0 = self.grad[0] * inv_batch;
        for (std::size_t i = 0; i < m.value.size(); ++i) {
          const T d = m.value[i] - m0.value[i];
          const T inv_var0 = std::exp(-lv0.value[i]);
          if (m.requires_grad) m.grad_buffer()[i] += g0 * d * inv_var0;
          if (m0.requires_grad) m0.grad_buffer()[i] -= g0 * d * inv_var0;
          if (lv.requires_grad) lv.grad_buffer()[i] += g0 * T(0.5) * (std::exp(lv.value[i]) * inv_var0 - T(1));
          if (lv0.requires_grad)
            lv0.grad_buffer()[i] += g0 * T(0.5) * (T(1) - (std::exp(lv.value[i]) + d * d) * inv_var0);
        }
      });
}

/// Mean over rows of the Shannon entropy -sum_i w_i log(w_i + eps). w is [R, S].
template <std::floating_point T>
Tensor<T> row_entropy_mean(const Tensor<T>& w, T eps = T(1e-12)) {
  detail::require(w.rank() == 2, "row_entropy_mean: expects [R,S], got " + to_string(w.shape()));
  const T inv_rows = T(1) / static_cast<T>(w.dim(0));
  T acc = 0;
  for (T p : w.data()) acc -= p * std::log(p + eps);
  return make_result<T>({1}, {acc * inv_rows}, "row_entropy_mean", {w.node()}, [inv_rows, eps](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& g = x.grad_buffer();
    const T g0 = self.grad[0] * inv_rows;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T p = x.value[i];
      g[i] -= g0 * (std::log(p + eps) + p / (p + eps));
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  return make_result<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), "reshape", {a.node()},
                        [](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        });
}

/// Concatenates along `axis`; all other extents must agree.
template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts[0].shape();
  auto [outer, ignored, inner] = detail::split_axis(shape, axis, "concat");
  (void)ignored;
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != shape[i]) {
        throw DimensionError("concat: " + to_string(s) + " incompatible with " + to_string(shape));
      }
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  shape[axis] = total;
  std::vector<T> out(numel(shape));
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset * inner));
    offset += extents[k];
    inputs.push_back(parts[k].node());
  }
  return make_result<T>(shape, std::move(out), "concat", std::move(inputs),
                        [outer = outer, inner = inner, total, extents](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                            auto& in = *self.inputs[k];
                            const std::size_t block = extents[k] * inner;
                            if (in.requires_grad) {
                              auto& g = in.grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < block; ++i)
                                  g[o * block + i] += self.grad[o * total * inner + off * inner + i];
                            }
                            off += extents[k];
                          }
                        });
}

/// Copies the index range [start, start+length) along `axis`.
template <std::floating_point T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  auto [outer, extent, inner] = detail::split_axis(a.shape(), axis, "slice");
  if (start + length > extent || length == 0) throw DimensionError("slice: range out of bounds");
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<T> out(numel(shape));
  const auto src = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  return make_result<T>(shape, std::move(out), "slice", {a.node()},
                        [outer = outer, extent = extent, inner = inner, start, length](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < length * inner; ++i)
                              g[(o * extent + start) * inner + i] += self.grad[o * length * inner + i];
                        });
}

/// Softmax along `axis`.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  auto [outer, extent, inner] = detail::split_axis(a.shape(), axis, "softmax");
  std::vector<T> out(a.numel());
  const auto x = a.data();
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o) {
      const T* xr = x.data() + o * extent;
      T* yr = out.data() + o * extent;
      const T mx = *std::max_element(xr, xr + extent);
      T sum = 0;
      for (std::size_t k = 0; k < extent; ++k) sum += (yr[k] = std::exp(xr[k] - mx));
      const T inv = T(1) / sum;
      for (std::size_t k = 0; k < extent; ++k) yr[k] *= inv;
    }
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < extent; ++k) mx = std::max(mx, x[base + k * inner]);
        T sum = 0;
        for (std::size_t k = 0; k < extent; ++k) sum += (out[base + k * inner] = std::exp(x[base + k * inner] - mx));
        for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] /= sum;
      }
    }
  }
  return make_result<T>(a.shape(), std::move(out), "softmax", {a.node()},
                        [outer = outer, extent = extent, inner = inner](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          if (inner == 1) {
                            using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
                            Eigen::Map<const Arr> y(self.value.data(), outer, extent);
                            Eigen::Map<const Arr> gy(self.grad.data(), outer, extent);
                            Eigen::Map<Arr> gx(g.data(), outer, extent);
                            const Arr prod = gy * y;
                            Eigen::Array<T, Eigen::Dynamic, 1> dot(outer);
                            for (std::size_t o = 0; o < outer; ++o)
                              dot[static_cast<Eigen::Index>(o)] = detail::ordered_sum(prod.data() + o * extent, extent);
                            gx += y * (gy.colwise() - dot);
                            return;
                          }
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const std::size_t base = o * extent * inner + i;
                              T dot = 0;
                              for (std::size_t k = 0; k < extent; ++k)
                                dot += self.grad[base + k * inner] * self.value[base + k * inner];
                              for (std::size_t k = 0; k < extent; ++k)
                                g[base + k * inner] += self.value[base + k * inner] * (self.grad[base + k * inner] - dot);
                            }
                        });
}

/// [M,K] x [K,N] -> [M,N].
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MapRM<T>(out.data(), m, n).noalias() = CMapRM<T>(a.data().data(), m, k) * CMapRM<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), "matmul", {a.node(), b.node()}, [m, k, n](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    CMapRM<T> dy(self.grad.data(), m, n);
    if (x.requires_grad)
      MapRM<T>(x.grad_buffer().data(), m, k).noalias() += dy * CMapRM<T>(y.value.data(), k, n).transpose();
    if (y.requires_grad)
      MapRM<T>(y.grad_buffer().data(), k, n).noalias() += CMapRM<T>(x.value.data(), m, k).transpose() * dy;
  });
}

template <std::floating_point T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  using namespace detail;
  require(a.rank() == 2, "transpose2d: expects rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  MapRM<T>(out.data(), n, m) = CMapRM<T>(a.data().data(), m, n).transpose();
  return make_result<T>({n, m}, std::move(out), "transpose2d", {a.node()}, [m, n](Node<T>& self) {
    MapRM<T>(self.inputs[0]->grad_buffer().data(), m, n) += CMapRM<T>(self.grad.data(), n, m).transpose();
  });
}

/// [N,C,H,W] -> [N*H*W, C]: one row per spatial location.
template <std::floating_point T>
Tensor<T> to_rows(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "to_rows: expects [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  const auto src = x.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(s * hw + p) * c + ch] = src[(s * c + ch) * hw + p];
  return make_result<T>({n * hw, c}, std::move(out), "to_rows", {x.node()}, [n, c, hw](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[(s * c + ch) * hw + p] += self.grad[(s * hw + p) * c + ch];
  });
}

/// Inverse of to_rows: [N*H*W, C] -> [N,C,H,W].
template <std::floating_point T>
Tensor<T> from_rows(const Tensor<T>& r, std::size_t n, std::size_t h, std::size_t w) {
  detail::require(r.rank() == 2 && r.dim(0) == n * h * w, "from_rows: " + to_string(r.shape()) + " vs N*H*W");
  const std::size_t c = r.dim(1), hw = h * w;
  std::vector<T> out(r.numel());
  const auto src = r.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(s * c + ch) * hw + p] = src[(s * hw + p) * c + ch];
  return make_result<T>({n, c, h, w}, std::move(out), "from_rows", {r.node()}, [n, c, hw](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[(s * hw + p) * c + ch] += self.grad[(s * c + ch) * hw + p];
  });
}

/// Divides each row of [R,D] by (its L2 norm + eps). Zero rows stay zero.
template <std::floating_point T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a, T eps = T(1e-8)) {
  detail::require(a.rank() == 2, "l2_normalize_rows: expects [R,D], got " + to_string(a.shape()));
  const std::size_t rows = a.dim(0), d = a.dim(1);
  std::vector<T> out(a.numel());
  std::vector<T> norms(rows);
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
    norms[r] = std::sqrt(ss);
    const T inv = T(1) / (norms[r] + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] * inv;
  }
  return make_result<T>(a.shape(), std::move(out), "l2_normalize_rows", {a.node()},
                        [rows, d, eps, norms = std::move(norms)](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          auto& g = in.grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T n = norms[r], denom = n + eps;
                            T dot = 0;
                            for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * in.value[r * d + j];
                            const T radial = n > 0 ? dot / (n * denom * denom) : T(0);
                            for (std::size_t j = 0; j < d; ++j)
                              g[r * d + j] += self.grad[r * d + j] / denom - in.value[r * d + j] * radial;
                          }
                        });
}

/// Hard shrinkage of simplex rows [R,S]: entries below `threshold` are zeroed and the row is
/// renormalized to sum 1. A row with every entry below threshold keeps its argmax with weight 1.
/// threshold == 0 is the identity.
template <std::floating_point T>
Tensor<T> shrink_renormalize(const Tensor<T>& w, T threshold) {
  detail::require(w.rank() == 2, "shrink_renormalize: expects [R,S], got " + to_string(w.shape()));
  if (threshold < 0) throw ConfigError("shrink_renormalize: negative threshold");
  const std::size_t rows = w.dim(0), s = w.dim(1);
  const auto x = w.data();
  if (threshold == 0) {
    return make_result<T>(w.shape(), std::vector<T>(x.begin(), x.end()), "shrink_renormalize", {w.node()},
                          [](Node<T>& self) {
                            auto& g = self.inputs[0]->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          });
  }
  std::vector<T> out(w.numel(), T(0));
  std::vector<T> sums(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data() + r * s;
    T* dst = out.data() + r * s;
    T sum = 0;
    for (std::size_t j = 0; j < s; ++j) {
      const T kept = row[j] >= threshold ? row[j] : T(0);
      dst[j] = kept;
      sum += kept;
    }
    if (sum <= 0) {
      const auto best = static_cast<std::size_t>(std::max_element(row, row + s) - row);
      dst[best] = T(1);
      continue;  // no gradient through a forced one-hot row
    }
    sums[r] = sum;
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < s; ++j) dst[j] *= inv;
  }
  return make_result<T>(w.shape(), std::move(out), "shrink_renormalize", {w.node()},
                        [rows, s, threshold, sums = std::move(sums)](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          auto& g = in.grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            if (sums[r] <= 0) continue;
                            const T* gy = self.grad.data() + r * s;
                            const T* y = self.value.data() + r * s;
                            const T* xr = in.value.data() + r * s;
                            T* gx = g.data() + r * s;
                            T dot = 0;
                            for (std::size_t j = 0; j < s; ++j) dot += gy[j] * y[j];
                            const T inv = T(1) / sums[r];
                            for (std::size_t j = 0; j < s; ++j)
                              gx[j] += xr[j] >= threshold ? (gy[j] - dot) * inv : T(0);
                          }
                        });
}

namespace detail {

/// Separable bilinear sampling with pixel-centre alignment: output pixel i samples source
/// coordinate (i + 0.5) * in/out - 0.5, clamped at the borders. Returns (index0, index1, frac).
struct ResampleTap {
  std::size_t i0, i1;
  double frac;
};

inline std::vector<ResampleTap> resample_taps(std::size_t in, std::size_t out, double origin = 0.0,
                                              double extent = -1.0) {
  if (extent < 0) extent = static_cast<double>(in);
  std::vector<ResampleTap> taps(out);
  const double step = extent / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = origin + (static_cast<double>(i) + 0.5) * step - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[i] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of [N,C,H,W] to [N,C,h,w].
template <std::floating_point T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t h, std::size_t w) {
  detail::require(x.rank() == 4, "bilinear_resize: expects [N,C,H,W], got " + to_string(x.shape()));
  if (h == 0 || w == 0) throw DimensionError("bilinear_resize: empty target");
  const std::size_t planes = x.dim(0) * x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  auto ty = detail::resample_taps(in_h, h);
  auto tx = detail::resample_taps(in_w, w);
  std::vector<T> out(planes * h * w);
  const auto src = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* plane = src.data() + p * in_h * in_w;
    for (std::size_t i = 0; i < h; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < w; ++j) {
        const auto& b = tx[j];
        const T fy = static_cast<T>(a.frac), fx = static_cast<T>(b.frac);
        const T top = plane[a.i0 * in_w + b.i0] + fx * (plane[a.i0 * in_w + b.i1] - plane[a.i0 * in_w + b.i0]);
        const T bot = plane[a.i1 * in_w + b.i0] + fx * (plane[a.i1 * in_w + b.i1] - plane[a.i1 * in_w + b.i0]);
        out[(p * h + i) * w + j] = top + fy * (bot - top);
      }
    }
  }
  return make_result<T>({x.dim(0), x.dim(1), h, w}, std::move(out), "bilinear_resize", {x.node()},
                        [planes, in_h, in_w, h, w, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t p = 0; p < planes; ++p) {
                            T* plane = g.data() + p * in_h * in_w;
                            for (std::size_t i = 0; i < h; ++i) {
                              const T fy = static_cast<T>(ty[i].frac);
                              for (std::size_t j = 0; j < w; ++j) {
                                const T fx = static_cast<T>(tx[j].frac);
                                const T d = self.grad[(p * h + i) * w + j];
                                plane[ty[i].i0 * in_w + tx[j].i0] += d * (1 - fy) * (1 - fx);
                                plane[ty[i].i0 * in_w + tx[j].i1] += d * (1 - fy) * fx;
                                plane[ty[i].i1 * in_w + tx[j].i0] += d * fy * (1 - fx);
                                plane[ty[i].i1 * in_w + tx[j].i1] += d * fy * fx;
                              }
                            }
                          }
                        });
}

}  // namespace hfvad::ad
