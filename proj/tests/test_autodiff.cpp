#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "op_cases.hpp"
#include "hfvad/checkpoint.hpp"
#include "hfvad/ops.hpp"
#include "hfvad/optim.hpp"

using namespace hfvad;
using namespace hfvad::ad;
using hfvad::testing::grad_check;
using hfvad::testing::random_away_from_zero;
using hfvad::testing::random_tensor;

namespace {

// Direct six-nested-loop cross-correlation, independent of the im2col/GEMM path.
std::vector<double> naive_conv(const Tensord& x, const Tensord& k, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * f * oh * ow, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += x[((s * c + ch) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] *
                       k[((o * c + ch) * kh + i) * kw + j];
              }
          out[((s * f + o) * oh + y) * ow + xx] = acc;
        }
  return out;
}

template <class T>
double inner(const Tensor<T>& a, const Tensor<T>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

}  // namespace

TEST(Conv2d, OnesGiveNine) {
  auto x = Tensorf::full({1, 1, 3, 3}, 1.0f);
  auto k = Tensorf::full({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(x, k, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, CenterKernelIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<float>({2, 1, 5, 6}, rng);
  std::vector<float> kv(9, 0.0f);
  kv[4] = 1.0f;
  Tensorf k({1, 1, 3, 3}, kv);
  auto y = conv2d(x, k, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({2, 3, 8, 8}, rng);
  auto k = random_tensor<double>({4, 3, 3, 3}, rng);
  for (auto [stride, pad] : {std::pair{1u, 0u}, {1u, 1u}, {2u, 1u}}) {
    if ((8 + 2 * pad - 3) % stride) continue;
    auto y = conv2d(x, k, stride, pad);
    auto ref = naive_conv(x, k, stride, pad);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-6);
  }
}

TEST(Conv2d, Errors) {
  auto x = Tensorf::zeros({1, 2, 32, 32});
  EXPECT_THROW(conv2d(x, Tensorf::zeros({4, 3, 3, 3})), DimensionError);
  EXPECT_THROW(conv2d(x, Tensorf::zeros({4, 2, 3, 3}), 2, 1), ConfigError);  // 31/2 is not exact
  EXPECT_THROW(conv2d(x, Tensorf::zeros({4, 2, 3, 3}), 0, 1), ConfigError);
  EXPECT_THROW(conv2d(Tensorf::zeros({2, 32, 32}), Tensorf::zeros({4, 2, 3, 3})), DimensionError);
  EXPECT_THROW(conv2d(Tensorf::zeros({1, 2, 2, 2}), Tensorf::zeros({4, 2, 5, 5})), DimensionError);
}

TEST(Conv2dTranspose, ScalarKernelDoubles) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({1, 1, 4, 5}, rng);
  auto y = conv2d_transpose(x, Tensorf::full({1, 1, 1, 1}, 2.0f), 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y[i], 2 * x[i]);
}

TEST(Conv2dTranspose, ZeroInputGivesZero) {
  std::mt19937_64 rng(4);
  auto k = random_tensor<float>({3, 2, 4, 4}, rng);
  auto y = conv2d_transpose(Tensorf::zeros({2, 3, 8, 8}), k, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 16, 16}));
  for (auto v : y.data()) EXPECT_EQ(v, 0.0f);
}

// <conv2d(a,k), b> == <a, conv2d_transpose(b,k)> over random geometries.
TEST(Conv2dTranspose, AdjointIdentity) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> small(1, 3), size(4, 9), ks(1, 4);
  int checked = 0;
  for (int trial = 0; checked < 100 && trial < 1000; ++trial) {
    const std::size_t n = small(rng), c = small(rng), f = small(rng), kh = ks(rng), kw = ks(rng);
    const std::size_t h = size(rng), w = size(rng), stride = small(rng) % 2 + 1, pad = small(rng) - 1;
    if (kh > h + 2 * pad || kw > w + 2 * pad) continue;
    if ((h + 2 * pad - kh) % stride || (w + 2 * pad - kw) % stride) continue;
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
    auto a64 = random_tensor<double>({n, c, h, w}, rng);
    auto k64 = random_tensor<double>({f, c, kh, kw}, rng);
    auto b64 = random_tensor<double>({n, f, oh, ow}, rng);
    const double lhs = inner(conv2d(a64, k64, stride, pad), b64);
    const double rhs = inner(a64, conv2d_transpose(b64, k64, stride, pad));
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
    Tensorf a32(a64.shape(), std::vector<float>(a64.data().begin(), a64.data().end()));
    Tensorf k32(k64.shape(), std::vector<float>(k64.data().begin(), k64.data().end()));
    Tensorf b32(b64.shape(), std::vector<float>(b64.data().begin(), b64.data().end()));
    const double l32 = inner(conv2d(a32, k32, stride, pad), b32);
    const double r32 = inner(a32, conv2d_transpose(b32, k32, stride, pad));
    EXPECT_NEAR(l32, r32, 1e-4 * std::max(1.0, std::abs(l32)));
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(Elementwise, SoftmaxOfZerosIsUniform) {
  auto y = softmax(Tensorf::zeros({3}), 0);
  for (auto v : y.data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(Elementwise, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(6);
  auto x = random_tensor<double>({4, 5, 3}, rng, -4, 4);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto y = softmax(x, axis);
    auto [outer, extent, inner] = ad::detail::split_axis(x.shape(), axis, "test");
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < extent; ++k) s += y[(o * extent + k) * inner + i];
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
  EXPECT_THROW(softmax(x, 3), DimensionError);
}

TEST(Elementwise, MseOfSelfIsZero) {
  std::mt19937_64 rng(7);
  auto a = random_tensor<float>({3, 7}, rng);
  EXPECT_EQ(mse(a, a).item(), 0.0f);
  EXPECT_THROW(mse(a, Tensorf::zeros({7, 3})), DimensionError);
}

TEST(Elementwise, KlStandardNormalIsZero) {
  EXPECT_EQ(kl_diag_gaussian(Tensord::zeros({2, 8}), Tensord::zeros({2, 8})).item(), 0.0);
}

TEST(Elementwise, KlShiftedMeanIsHalfPerDim) {
  auto kl = kl_diag_gaussian(Tensord::full({1, 1}, 1.0), Tensord::zeros({1, 1}), Tensord::zeros({1, 1}),
                             Tensord::zeros({1, 1}));
  EXPECT_DOUBLE_EQ(kl.item(), 0.5);
}

TEST(Elementwise, ConcatAndSliceRoundTrip) {
  std::mt19937_64 rng(8);
  auto a = random_tensor<float>({2, 3, 4}, rng);
  auto b = random_tensor<float>({2, 5, 4}, rng);
  auto c = concat<float>({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 8, 4}));
  auto a2 = slice(c, 1, 0, 3), b2 = slice(c, 1, 3, 5);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a2[i], a[i]);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(b2[i], b[i]);
  EXPECT_THROW(concat<float>({a, Tensorf::zeros({3, 3, 4})}, 1), DimensionError);
  EXPECT_THROW(concat<float>({a, b}, 5), DimensionError);
}

TEST(Elementwise, BilinearResizeSameSizeIsIdentity) {
  std::mt19937_64 rng(9);
  auto a = random_tensor<float>({1, 2, 6, 7}, rng);
  auto b = bilinear_resize(a, 6, 7);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Elementwise, NonFiniteIsSurfaced) {
  EXPECT_THROW(ad::log(Tensorf::zeros({2})), NumericError);
  EXPECT_THROW(ad::exp(Tensorf::full({1}, 1000.0f)), NumericError);
}

TEST(Backward, SumGivesOnes) {
  auto w = Tensorf::full({3, 4}, 0.5f, true);
  reduce_sum(w).backward();
  for (auto g : w.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, MseScalarDerivative) {
  auto w = Tensorf::full({1}, 3.0f, true);
  mse(w, Tensorf::zeros({1})).backward();
  EXPECT_FLOAT_EQ(w.grad()[0], 6.0f);
}

TEST(Backward, LeafGradientsAccumulate) {
  auto w = Tensorf::full({2}, 1.0f, true);
  reduce_sum(add(w, w)).backward();
  EXPECT_EQ(w.grad()[0], 2.0f);
  reduce_sum(w).backward();
  EXPECT_EQ(w.grad()[0], 3.0f);
}

TEST(Backward, Errors) {
  auto w = Tensorf::full({2}, 1.0f, true);
  EXPECT_THROW(scale(w, 2.0f).backward(), DimensionError);
  EXPECT_THROW(reduce_sum(Tensorf::zeros({2})).backward(), Error);
  {
    NoGradGuard guard;
    EXPECT_THROW(reduce_sum(w).backward(), Error);
  }
}

TEST(Backward, ThreeLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>({2, 2, 8, 8}, rng);
  auto k1 = random_tensor<double>({4, 2, 3, 3}, rng, -0.5, 0.5, true);
  auto b1 = random_tensor<double>({4}, rng, -0.1, 0.1, true);
  auto k2 = random_tensor<double>({4, 4, 4, 4}, rng, -0.3, 0.3, true);
  auto k3 = random_tensor<double>({4, 2, 4, 4}, rng, -0.3, 0.3, true);
  auto target = random_tensor<double>({2, 2, 8, 8}, rng);
  std::vector<Tensord> leaves{k1, b1, k2, k3};
  auto res = grad_check(leaves, [&] {
    auto h1 = ad::tanh(add_channel_bias(conv2d(x, k1, 1, 1), b1));
    auto h2 = sigmoid(conv2d(h1, k2, 2, 1));
    return mse(conv2d_transpose(h2, k3, 2, 1), target);
  });
  EXPECT_LE(res.max_rel_error, 1e-4);
}

// Every differentiable op against central differences at 64-bit.
TEST(Backward, PerOpFiniteDifferences) {
  for (auto& c : hfvad::testing::op_cases()) {
    auto res = grad_check(c.leaves, [&] { return c.fn(c.leaves); }, 64, 1e-6);
    EXPECT_LE(res.max_rel_error, 1e-6) << c.name;
  }
}

TEST(Adam, ZeroGradientLeavesParamsAndMomentsUnchanged) {
  std::vector<Tensorf> params{Tensorf::full({3}, 2.0f, true)};
  AdamState<float> st;
  adam_step<float>(params, st, {});
  for (auto v : params[0].data()) EXPECT_EQ(v, 2.0f);
  for (auto v : st.m[0]) EXPECT_EQ(v, 0.0f);
  for (auto v : st.v[0]) EXPECT_EQ(v, 0.0f);
}

TEST(Adam, FirstStepClosedForm) {
  // Closed form of the first bias-corrected step: m_hat = g, v_hat = g^2, delta = lr*g/(|g|+eps).
  std::vector<double> p{1.0}, g{1.0}, m{0.0}, v{0.0};
  adam_update<double>(p, g, m, v, 1, {.lr = 0.1});
  EXPECT_NEAR(p[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-12);

  std::vector<double> p2{0.0, 0.0}, g2{-3.0, 0.25}, m2{0, 0}, v2{0, 0};
  adam_update<double>(p2, g2, m2, v2, 1, {.lr = 0.5, .beta1 = 0.0, .beta2 = 0.0, .eps = 1e-3});
  EXPECT_NEAR(p2[0], 0.5 * 3.0 / (3.0 + 1e-3), 1e-12);
  EXPECT_NEAR(p2[1], -0.5 * 0.25 / (0.25 + 1e-3), 1e-12);
}

TEST(Adam, DeterministicAndValidated) {
  auto run = [] {
    std::vector<float> p{0.3f, -0.2f}, g{0.7f, -1.1f}, m{0.1f, 0.0f}, v{0.2f, 0.5f};
    adam_update<float>(p, g, m, v, 3, {});
    return std::vector<float>{p[0], p[1], m[0], m[1], v[0], v[1]};
  };
  EXPECT_EQ(run(), run());
  std::vector<float> p{0}, g{0}, m{0}, v{0};
  EXPECT_THROW(adam_update<float>(p, g, m, v, 1, {.lr = 0.0}), ConfigError);
}

TEST(Checkpoint, BitExactRoundTrip) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> d(-1e6f, 1e6f);
  std::vector<io::NamedTensor> ts;
  for (int k = 0; k < 4; ++k) {
    io::NamedTensor t{"layer" + std::to_string(k) + "/wéight", {}, {}};
    for (int r = 0; r <= k; ++r) t.shape.push_back(static_cast<std::uint32_t>(r + 2));
    t.values.resize(t.numel());
    for (auto& v : t.values) v = d(rng);
    ts.push_back(t);
  }
  ts[0].values[0] = -0.0f;
  ts[0].values[1] = std::numeric_limits<float>::denorm_min();
  const auto bytes = io::encode(ts);
  EXPECT_EQ(bytes.substr(0, 4), "VADT");
  auto back = io::decode(bytes);
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t k = 0; k < ts.size(); ++k) {
    EXPECT_EQ(back[k].name, ts[k].name);
    EXPECT_EQ(back[k].shape, ts[k].shape);
    EXPECT_EQ(std::memcmp(back[k].values.data(), ts[k].values.data(), 4 * ts[k].values.size()), 0);
  }
  EXPECT_EQ(io::encode(back), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  EXPECT_THROW(io::decode("XXXX\x01\x00"), IoError);
  auto bytes = io::encode({{"a", {4}, {1, 2, 3, 4}}});
  EXPECT_THROW(io::decode(bytes.substr(0, bytes.size() - 2)), IoError);
}
