#pragma once

// Named parameter sets and small layer helpers shared by the two networks.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hfvad/checkpoint.hpp"
#include "hfvad/ops.hpp"
#include "hfvad/optim.hpp"

namespace hfvad::nn {

using ad::Shape;
using ad::Tensor;

/// Ordered, named trainable tensors. Initial values are drawn in double precision from a seeded
/// stream, so a model built at 32 and at 64 bits from the same seed holds the same weights.
template <std::floating_point T>
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor<T> add_uniform(const std::string& name, Shape shape, double bound) {
    std::uniform_real_distribution<double> d(-bound, bound);
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(d(rng_));
    return push(name, Tensor<T>(std::move(shape), std::move(v), true));
  }

  Tensor<T> add_zeros(const std::string& name, Shape shape) { return push(name, Tensor<T>::zeros(std::move(shape), true)); }

  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  std::vector<io::NamedTensor> export_tensors(const std::string& prefix) const {
    std::vector<io::NamedTensor> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      io::NamedTensor nt{prefix + names_[i], {}, {}};
      for (auto d : tensors_[i].shape()) nt.shape.push_back(static_cast<std::uint32_t>(d));
      for (T v : tensors_[i].data()) nt.values.push_back(static_cast<float>(v));
      out.push_back(std::move(nt));
    }
    return out;
  }

  void import_tensors(const std::vector<io::NamedTensor>& src, const std::string& prefix) {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto& nt = io::find(src, prefix + names_[i]);
      if (nt.values.size() != tensors_[i].numel())
        throw IoError("checkpoint tensor '" + nt.name + "' has the wrong size");
      auto dst = tensors_[i].mutable_data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(nt.values[k]);
    }
  }

  /// Copies values from a set with identical layout (possibly another precision).
  template <std::floating_point U>
  void copy_from(const ParamSet<U>& other) {
    if (other.names() != names_) throw DimensionError("parameter layouts differ");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      auto dst = tensors_[i].mutable_data();
      auto src = other.tensors()[i].data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }

 private:
  Tensor<T> push(const std::string& name, Tensor<T> t) {
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }

  std::mt19937_64 rng_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
};

/// Convolution with bias. `transpose` layers map `in` to `out` channels through conv2d_transpose.
template <std::floating_point T>
struct Conv {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;
  bool transpose = false;

  Conv() = default;
  Conv(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride_,
       std::size_t pad_, bool transpose_ = false)
      : stride(stride_), pad(pad_), transpose(transpose_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    weight = transpose ? ps.add_uniform(name + ".w", {in, out, k, k}, bound)
                       : ps.add_uniform(name + ".w", {out, in, k, k}, bound);
    bias = ps.add_zeros(name + ".b", {out});
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = transpose ? ad::conv2d_transpose(x, weight, stride, pad) : ad::conv2d(x, weight, stride, pad);
    return ad::add_channel_bias(y, bias);
  }
};

template <std::floating_point T>
Tensor<T> lrelu(const Tensor<T>& x) {
  return ad::leaky_relu(x, T(0.2));
}

/// Row-major float buffer of `n` equally sized samples stacked into [n, c, h, w].
template <std::floating_point T>
Tensor<T> stack(const std::vector<const std::vector<float>*>& samples, std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t per = c * h * w;
  std::vector<T> v;
  v.reserve(samples.size() * per);
  for (const auto* s : samples) {
    if (s->size() != per) throw DimensionError("sample size mismatch while batching");
    for (float x : *s) v.push_back(static_cast<T>(x));
  }
  return Tensor<T>({samples.size(), c, h, w}, std::move(v));
}

}  // namespace hfvad::nn
