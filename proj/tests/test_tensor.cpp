#include <gtest/gtest.h>

#include <cmath>

#include "enteroseg/checkpoint.hpp"
#include "enteroseg/gradcheck.hpp"
#include "enteroseg/nn_ops.hpp"
#include "oracles.hpp"

using namespace enteroseg;
using oracle::random_tensor;

namespace {

Tensor<double> param(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  auto t = random_tensor<double>(std::move(s), seed, lo, hi);
  t.set_requires_grad(true);
  return t;
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor<double> project(const Tensor<double>& out, std::uint64_t seed) {
  return sum(mul(out, random_tensor<double>(out.shape(), seed)));
}

}  // namespace

TEST(Conv2d, ScalarKernelScales) {
  Tensor<float> in({1, 1, 3, 3}, 1.0f);
  Tensor<float> w({1, 1, 1, 1}, std::vector<float>{2.0f});
  Tensor<float> b({1}, std::vector<float>{0.0f});
  auto out = conv2d(in, w, b, 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  for (float v : out.values()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  auto in = random_tensor<float>({2, 1, 5, 4}, 3);
  std::vector<float> k(9, 0.0f);
  k[4] = 1.0f;
  auto out = conv2d(in, Tensor<float>({1, 1, 3, 3}, k), Tensor<float>({1}, 0.0f), 1, 1);
  ASSERT_EQ(out.shape(), in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) EXPECT_EQ(out[i], in[i]);
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
  for (int stride : {1, 2}) {
    for (int pad : {0, 1, 2}) {
      auto in = random_tensor<float>({1, 2, 5, 5}, 11 + stride + pad);
      auto w = random_tensor<float>({3, 2, 3, 3}, 21 + stride);
      auto b = random_tensor<float>({3}, 5);
      auto out = conv2d(in, w, b, stride, pad);
      auto ref = oracle::conv2d(in, w, b.vec(), stride, pad);
      ASSERT_EQ(out.numel(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
    }
  }
}

TEST(Conv2d, RejectsChannelMismatchWithDimensions) {
  Tensor<float> in({1, 2, 4, 4});
  Tensor<float> w({1, 3, 3, 3});
  try {
    conv2d(in, w, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[1,3,3,3]"), std::string::npos);
  }
  EXPECT_THROW(conv2d(Tensor<float>({1, 1, 2, 2}), Tensor<float>({1, 1, 5, 5}), 1, 0), ShapeError);
}

TEST(Pow, IdentityAndSquares) {
  auto x = random_tensor<double>({4}, 1);
  auto y = pow(x, 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], x[i]);
  auto sq = pow(Tensor<double>({2}, std::vector<double>{2, -3}), 2);
  EXPECT_EQ(sq[0], 4);
  EXPECT_EQ(sq[1], 9);
  EXPECT_THROW(pow(x, 0), Error);
}

TEST(Activation, KnownValues) {
  auto r = relu(Tensor<double>({3}, std::vector<double>{-1, 0, 2}));
  EXPECT_EQ(r[0], 0);
  EXPECT_EQ(r[1], 0);
  EXPECT_EQ(r[2], 2);
  EXPECT_EQ(sigmoid(Tensor<double>::scalar(0)).item(), 0.5);
  auto s = sigmoid(Tensor<double>({2}, std::vector<double>{-800, 800}));
  EXPECT_TRUE(all_finite(s));
  auto t = tanh(random_tensor<double>({16}, 4, -5, 5));
  for (double v : t.values()) EXPECT_LT(std::abs(v), 1.0);
}

TEST(Softmax, UniformAndStable) {
  auto p = softmax_channels(Tensor<double>({1, 4, 2, 2}, 0.3));
  for (double v : p.values()) EXPECT_NEAR(v, 0.25, 1e-15);
  Tensor<double> big({1, 2, 1, 1}, std::vector<double>{1000, 0});
  auto q = softmax_channels(big);
  EXPECT_NEAR(q[0], 1.0, 1e-12);
  EXPECT_NEAR(q[1], 0.0, 1e-12);
  EXPECT_TRUE(all_finite(q));
}

TEST(Softmax, ColumnsSumToOneAndShiftInvariant) {
  auto x = random_tensor<double>({2, 5, 3, 4}, 9, -10, 10);
  auto p = softmax_channels(x);
  auto shifted = x.detach();
  auto sv = shifted.mutable_values();
  const std::size_t hw = 12;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t px = 0; px < hw; ++px) {
      const double c = 0.37 * px - 3.0 * n;
      for (std::size_t k = 0; k < 5; ++k) sv[(n * 5 + k) * hw + px] += c;
    }
  auto ps = softmax_channels(shifted);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t px = 0; px < hw; ++px) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        const std::size_t i = (n * 5 + k) * hw + px;
        s += p[i];
        EXPECT_GE(p[i], 0.0);
        EXPECT_NEAR(p[i], ps[i], 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  EXPECT_THROW(softmax_channels(Tensor<double>({1, 1, 2, 2})), ShapeError);
}

TEST(Pool2d, HandCasesAndOracle) {
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(pool2d(x, PoolKind::max, 2, 2).item(), 4.0f);
  EXPECT_EQ(pool2d(x, PoolKind::avg, 2, 2).item(), 2.5f);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto in = random_tensor<float>({2, 3, 7, 6}, seed);
    for (auto [k, s] : {std::pair{2, 2}, std::pair{3, 2}, std::pair{3, 1}}) {
      auto mx = pool2d(in, PoolKind::max, k, s);
      auto av = pool2d(in, PoolKind::avg, k, s);
      auto rmx = oracle::pool2d(in, true, k, s);
      auto rav = oracle::pool2d(in, false, k, s);
      ASSERT_EQ(mx.numel(), rmx.size());
      for (std::size_t i = 0; i < rmx.size(); ++i) {
        EXPECT_EQ(mx[i], rmx[i]);
        EXPECT_EQ(av[i], rav[i]);
      }
    }
  }
}

TEST(Pool2d, MaxTieRoutesToFirstIndex) {
  auto x = Tensor<double>::parameter({1, 1, 2, 2}, {5, 5, 5, 5});
  backward(sum(pool2d(x, PoolKind::max, 2, 2)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(Pool2d, PaddedMaxHalvesEvenInput) {
  auto x = random_tensor<float>({1, 1, 8, 8}, 2);
  auto y = pool2d(x, PoolKind::max, 3, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
}

TEST(Upsample, HandEvaluatedCoordinates) {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{0, 1});
  auto y = upsample_bilinear(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const double expect[] = {0, 0.25, 0.75, 1};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(y[r * 4 + c], expect[c], 1e-15);
}

TEST(Upsample, ConstantFixedPointAndOracle) {
  auto c = upsample_bilinear(Tensor<double>({1, 2, 3, 3}, 1.5), 3);
  for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 1.5);
  for (int f : {2, 3, 4}) {
    auto in = random_tensor<double>({2, 2, 3, 5}, f);
    auto out = upsample_bilinear(in, f);
    auto ref = oracle::upsample(in, f);
    ASSERT_EQ(out.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(Upsample, ThenAveragePoolStaysClose) {
  auto in = random_tensor<double>({1, 1, 8, 8}, 17, 0.0, 1.0);
  auto back = pool2d(upsample_bilinear(in, 2), PoolKind::avg, 2, 2);
  // White noise: each value is pulled a quarter of the way towards its
  // neighbours, so the bound holds on average rather than per pixel.
  double mad = 0;
  for (std::size_t i = 0; i < in.numel(); ++i) mad += std::abs(back[i] - in[i]);
  EXPECT_LE(mad / in.numel(), 0.2);
  std::vector<double> ramp(64);
  for (int i = 0; i < 64; ++i) ramp[i] = 0.05 * (i % 8) + 0.03 * (i / 8);
  Tensor<double> smooth({1, 1, 8, 8}, ramp);
  auto back2 = pool2d(upsample_bilinear(smooth, 2), PoolKind::avg, 2, 2);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(back2[i], smooth[i], 0.2);
}

TEST(BatchNorm, TrainModeStandardizes) {
  BatchNormState<double> st(3);
  auto x = random_tensor<double>({4, 3, 5, 5}, 8, -3, 7);
  auto y = batch_norm(x, st, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    int m = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t p = 0; p < 25; ++p) {
        const double v = y[(n * 3 + c) * 25 + p];
        s += v;
        ss += v * v;
        ++m;
      }
    EXPECT_NEAR(s / m, 0.0, 1e-4);
    EXPECT_NEAR(ss / m, 1.0, 1e-4);
  }
  EXPECT_NE(st.running_mean[0], 0.0);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  BatchNormState<double> st(2);
  auto x = random_tensor<double>({1, 2, 3, 3}, 5);
  auto y = batch_norm(x, st, Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5 * std::abs(x[i]) + 1e-12);
}

TEST(BatchNorm, RejectsSingleElementChannelInTrain) {
  BatchNormState<double> st(1);
  EXPECT_THROW(batch_norm(Tensor<double>({1, 1, 1, 1}), st, Mode::train), NumericError);
  EXPECT_NO_THROW(batch_norm(Tensor<double>({1, 1, 1, 1}), st, Mode::eval));
}

TEST(Backward, SumOfSquares) {
  auto x = Tensor<double>::parameter({3}, {1, 2, 3});
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2);
  EXPECT_EQ(x.grad()[1], 4);
  EXPECT_EQ(x.grad()[2], 6);
}

TEST(Backward, AccumulatesAndResets) {
  auto x = param({1, 1, 4, 4}, 1);
  auto w = param({2, 1, 3, 3}, 2);
  auto loss = project(relu(conv2d(x, w, 1, 1)), 3);
  backward(loss);
  std::vector<double> once(w.grad().begin(), w.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(w.grad()[i], 2 * once[i]);
  w.zero_grad();
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RejectsDetachedAndNonScalar) {
  Tensor<double> c({1}, 2.0);
  EXPECT_THROW(backward(c), Error);
  auto x = Tensor<double>::parameter({2}, {1, 2});
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto x = Tensor<double>::parameter({1}, {3});
  auto y = mul(x, x);
  backward(add(y, y));  // d/dx 2x^2 = 4x
  EXPECT_EQ(x.grad()[0], 12);
}

// Gradient suite: every differentiable op against 64-bit central differences.
class GradCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradCheck, Conv2dReluSum) {
  const auto s = GetParam();
  auto x = param({2, 2, 5, 5}, s), w = param({3, 2, 3, 3}, s + 100), b = param({3}, s + 200);
  for (auto [st, pd] : {std::pair{1, 0}, std::pair{2, 1}}) {
    auto r = check_gradients([&] { return project(relu(conv2d(x, w, b, st, pd)), s); }, {x, w, b});
    EXPECT_TRUE(r.finite);
    EXPECT_LE(r.max_rel_error, 1e-4);
  }
}

TEST_P(GradCheck, Pow) {
  const auto s = GetParam();
  auto x = param({10}, s);
  for (int q : {2, 3, 5}) {
    auto r = check_gradients([&] { return project(pow(x, q), s); }, {x});
    EXPECT_LE(r.max_rel_error, 1e-6) << "q=" << q;
  }
}

TEST_P(GradCheck, Activations) {
  const auto s = GetParam();
  auto x = param({12}, s, -3, 3);
  for (auto kind : {Activation::sigmoid, Activation::tanh}) {
    auto r = check_gradients([&] { return project(activation(x, kind), s); }, {x});
    EXPECT_LE(r.max_rel_error, 1e-6);
  }
  // Keep relu inputs away from the kink.
  auto vals = x.mutable_values();
  for (auto& v : vals) if (std::abs(v) < 0.05) v = 0.5;
  auto r = check_gradients([&] { return project(relu(x), s); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST_P(GradCheck, SoftmaxAndPooling) {
  const auto s = GetParam();
  auto x = param({2, 3, 4, 4}, s, -2, 2);
  auto r = check_gradients([&] { return project(softmax_channels(x), s); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-4);
  r = check_gradients([&] { return project(pool2d(x, PoolKind::avg, 2, 2), s); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-4);
  // Random continuous values have no ties, so max-pool is differentiable.
  r = check_gradients([&] { return project(pool2d(x, PoolKind::max, 3, 2, 1), s); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-4);
  r = check_gradients([&] { return project(upsample_bilinear(x, 2), s); }, {x});
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST_P(GradCheck, BatchNormBothModes) {
  const auto s = GetParam();
  BatchNormState<double> st(3);
  Rng rng(s);
  for (std::size_t c = 0; c < 3; ++c) {
    st.scale.mutable_values()[c] = rng.uniform(0.5, 1.5);
    st.shift.mutable_values()[c] = rng.uniform(-0.5, 0.5);
  }
  auto x = param({2, 3, 3, 3}, s, -2, 2);
  for (auto mode : {Mode::train, Mode::eval}) {
    auto r = check_gradients([&] { return project(batch_norm(x, st, mode), s); },
                             {x, st.scale, st.shift});
    EXPECT_LE(r.max_rel_error, 1e-4);
  }
}

TEST_P(GradCheck, ConcatChannels) {
  const auto s = GetParam();
  auto a = param({2, 1, 3, 3}, s), b = param({2, 2, 3, 3}, s + 1);
  auto r = check_gradients([&] { return project(concat_channels<double>({a, b, a}), s); }, {a, b});
  EXPECT_LE(r.max_rel_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Range<std::uint64_t>(0, 10));

TEST(Determinism, ForwardIsBitIdentical) {
  auto x = random_tensor<float>({2, 3, 8, 8}, 1);
  auto w = random_tensor<float>({4, 3, 3, 3}, 2);
  auto a = softmax_channels(conv2d(x, w, 1, 1));
  auto b = softmax_channels(conv2d(x, w, 1, 1));
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Checkpoint, BitExactRoundTrip) {
  std::vector<NamedArray> arrays{
      {"enc.w", {2, 1, 3, 3}, random_tensor<float>({2, 1, 3, 3}, 4).vec()},
      {"bias", {2}, {-0.0f, std::numeric_limits<float>::denorm_min()}},
      {"scalar", {}, {3.25f}},
  };
  auto bytes = encode_checkpoint(arrays);
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ESEG");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 3);  // array count
  auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), arrays.size());
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    EXPECT_EQ(back[i].name, arrays[i].name);
    EXPECT_EQ(back[i].shape, arrays[i].shape);
    ASSERT_EQ(back[i].values.size(), arrays[i].values.size());
    EXPECT_EQ(std::memcmp(back[i].values.data(), arrays[i].values.data(),
                          arrays[i].values.size() * sizeof(float)), 0);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsCorruptStreams) {
  auto bytes = encode_checkpoint({{"a", {2}, {1, 2}}});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bytes.pop_back();
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}
