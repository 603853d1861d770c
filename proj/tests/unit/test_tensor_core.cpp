#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "mtgaze/errors.hpp"
#include "mtgaze/ops.hpp"
#include "mtgaze/tape.hpp"
#include "test_util.hpp"

using namespace mtgaze;
using testutil::max_abs_diff;
using testutil::randn;

TEST(Conv2d, ScalarProduct) {
  Tensor x({1, 1, 1, 1}, 3.0f), w({1, 1, 1, 1}, 2.0f);
  Tensor y = conv2d(x, w, nullptr, ConvSpec::standard(1, 1, 1, 1));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 6.0f);
}

TEST(Conv2d, SumOfOnes) {
  Tensor x({1, 1, 3, 3}, 1.0f), w({1, 1, 3, 3}, 1.0f);
  ConvSpec s = ConvSpec::standard(3, 3, 1, 1);
  s.pad_h = s.pad_w = 0;
  Tensor y = conv2d(x, w, nullptr, s);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0f);
}

TEST(Conv2d, DepthwiseMatchesReference) {
  std::mt19937_64 rng(11);
  auto spec = ConvSpec::depthwise_spec(5, 5, 8);
  spec.pad_h = spec.pad_w = 2;
  Tensor x = randn({2, 8, 14, 14}, rng), w = randn(spec.weight_shape(), rng);
  Tensor y = conv2d(x, w, nullptr, spec);
  Tensor r = testutil::naive_conv(x, w, nullptr, spec);
  ASSERT_EQ(y.shape(), r.shape());
  EXPECT_LE(max_abs_diff(y, r), 1e-5);
}

TEST(Conv2d, RandomizedAgainstReference) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    ConvSpec s;
    s.groups = testutil::uniform_int(rng, 1, 3);
    s.c_in = s.groups * testutil::uniform_int(rng, 1, 3);
    s.c_out = s.groups * testutil::uniform_int(rng, 1, 3);
    s.k_h = testutil::uniform_int(rng, 1, 5);
    s.k_w = testutil::uniform_int(rng, 1, 5);
    s.stride_h = testutil::uniform_int(rng, 1, 2);
    s.stride_w = testutil::uniform_int(rng, 1, 2);
    s.pad_h = testutil::uniform_int(rng, 0, s.k_h / 2);
    s.pad_w = testutil::uniform_int(rng, 0, s.k_w / 2);
    const auto h = testutil::uniform_int(rng, s.k_h, 11), w = testutil::uniform_int(rng, s.k_w, 11);
    Tensor x = randn({testutil::uniform_int(rng, 1, 2), s.c_in, h, w}, rng);
    Tensor wt = randn(s.weight_shape(), rng);
    Tensor b = randn({s.c_out}, rng);
    Tensor y = conv2d(x, wt, &b, s);
    Tensor r = testutil::naive_conv(x, wt, &b, s);
    ASSERT_EQ(y.shape(), r.shape()) << to_string(s);
    EXPECT_LE(max_abs_diff(y, r), 1e-5) << to_string(s);
  }
}

TEST(Conv2d, DepthwiseTouchesKKCWeights) {
  std::mt19937_64 rng(13);
  const auto spec = ConvSpec::depthwise_spec(3, 5, 6);
  Tensor x = randn({1, 6, 7, 9}, rng), w = randn(spec.weight_shape(), rng);
  GradTape tape;
  Tensor y = conv2d(x, w, nullptr, spec, &tape);
  Gradients g = backward(tape, sum(y, &tape));
  // sum over all outputs: every weight is read, and only k_h k_w C of them exist
  Tensor gw = g.of(w);
  EXPECT_EQ(gw.numel(), 3 * 5 * 6);
  int nonzero = 0;
  for (float v : gw.values()) nonzero += v != 0.0f;
  EXPECT_EQ(nonzero, 3 * 5 * 6);
  // channel c output only depends on channel c input
  Tensor x2 = x;
  for (std::int64_t h = 0; h < 7; ++h)
    for (std::int64_t ww = 0; ww < 9; ++ww) x2.at(0, 2, h, ww) += 1.0f;
  Tensor y2 = conv2d(x2, w, nullptr, spec);
  for (std::int64_t c = 0; c < 6; ++c) {
    bool changed = false;
    for (std::int64_t h = 0; h < y.dim(2); ++h)
      for (std::int64_t ww = 0; ww < y.dim(3); ++ww) changed |= y.at(0, c, h, ww) != y2.at(0, c, h, ww);
    EXPECT_EQ(changed, c == 2) << "channel " << c;
  }
}

TEST(Conv2d, RejectsMismatchedChannels) {
  Tensor x({1, 3, 5, 5}), w({4, 2, 3, 3});
  try {
    conv2d(x, w, nullptr, ConvSpec::standard(3, 3, 2, 4));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("C_in"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, RejectsNonPositiveExtent) {
  Tensor x({1, 1, 2, 2}), w({1, 1, 3, 3});
  ConvSpec s = ConvSpec::standard(3, 3, 1, 1);
  s.pad_h = s.pad_w = 0;
  EXPECT_THROW(conv2d(x, w, nullptr, s), ShapeError);
  s.stride_h = 0;
  EXPECT_THROW(conv2d(Tensor({1, 1, 5, 5}), w, nullptr, s), ValidationError);
}

TEST(Conv2d, RejectsBadGroups) {
  ConvSpec s = ConvSpec::standard(3, 3, 4, 6);
  s.groups = 4;
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Dense, IdentityAndPermutation) {
  Tensor x({1, 2}, std::vector<float>{1, 2});
  Tensor id({2, 2}, std::vector<float>{1, 0, 0, 1}), zero({2});
  Tensor y = dense(x, id, zero);
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 2.0f);
  Tensor p({2, 2}, std::vector<float>{0, 1, 1, 0});
  Tensor y2 = dense(Tensor({1, 2}, std::vector<float>{3, 4}), p, zero);
  EXPECT_EQ(y2[0], 4.0f);
  EXPECT_EQ(y2[1], 3.0f);
}

TEST(Dense, RandomizedAgainstDotLoop) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = testutil::uniform_int(rng, 1, 5), din = testutil::uniform_int(rng, 1, 40),
               dout = testutil::uniform_int(rng, 1, 20);
    Tensor x = randn({n, din}, rng), w = randn({dout, din}, rng), b = randn({dout}, rng);
    Tensor y = dense(x, w, b);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t o = 0; o < dout; ++o) {
        double acc = b[o];
        for (std::int64_t k = 0; k < din; ++k) acc += static_cast<double>(x[i * din + k]) * w[o * din + k];
        ASSERT_NEAR(y[i * dout + o], acc, 1e-5);
      }
  }
}

TEST(Dense, RejectsExtentMismatch) {
  EXPECT_THROW(dense(Tensor({2, 3}), Tensor({4, 5}), Tensor({4})), ShapeError);
}

TEST(Activations, Examples) {
  Tensor r = relu(Tensor({3}, std::vector<float>{-1, 0, 2}));
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 0.0f);
  EXPECT_EQ(r[2], 2.0f);
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0f))[0], 0.5f);
  EXPECT_EQ(hswish(Tensor::scalar(3.0f))[0], 3.0f);
  EXPECT_EQ(hswish(Tensor::scalar(-3.0f))[0], 0.0f);
  std::mt19937_64 rng(3);
  Tensor x = randn({50}, rng, 3.0f);
  Tensor h = hswish(x);
  for (int i = 0; i < 50; ++i) {
    const double v = x[i];
    EXPECT_NEAR(h[i], v * std::clamp(v + 3.0, 0.0, 6.0) / 6.0, 1e-6);
  }
}

TEST(Activations, PropagateNaN) {
  const Tensor n = Tensor::scalar(std::numeric_limits<float>::quiet_NaN());
  EXPECT_TRUE(std::isnan(relu(n)[0]));
  EXPECT_TRUE(std::isnan(hswish(n)[0]));
  EXPECT_TRUE(std::isnan(sigmoid(n)[0]));
}

TEST(BatchNorm, InferIdentity) {
  // y = x / sqrt(1 + eps): off by |x| * 5e-6, so inputs stay within [-2, 2]
  std::mt19937_64 rng(4);
  Tensor x = testutil::randu({2, 3, 4, 4}, rng, -2.0f, 2.0f);
  auto p = BatchNormParams::identity(3);
  EXPECT_LE(max_abs_diff(batchnorm(x, p, Mode::infer), x), 1e-5);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(5);
  Tensor x = randn({2, 3, 4, 4}, rng);
  auto p = BatchNormParams::identity(3);
  p.gamma.fill(0.0f);
  p.beta = Tensor({3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  Tensor y = batchnorm(x, p, Mode::infer);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t h = 0; h < 4; ++h) EXPECT_EQ(y.at(1, c, h, 2), p.beta[c]);
}

TEST(BatchNorm, TrainModeStatisticsAndRunningUpdate) {
  std::mt19937_64 rng(6);
  Tensor x = randn({4, 3, 5, 5}, rng, 2.0f);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] += 1.5f;
  auto p = BatchNormParams::identity(3);
  Tensor y = batchnorm(x, p, Mode::train);
  const double m = 4 * 25;
  for (std::int64_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0, xs = 0, xs2 = 0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t h = 0; h < 5; ++h)
        for (std::int64_t w = 0; w < 5; ++w) {
          s += y.at(n, c, h, w);
          s2 += static_cast<double>(y.at(n, c, h, w)) * y.at(n, c, h, w);
          xs += x.at(n, c, h, w);
          xs2 += static_cast<double>(x.at(n, c, h, w)) * x.at(n, c, h, w);
        }
    EXPECT_NEAR(s / m, 0.0, 1e-3);
    EXPECT_NEAR(s2 / m, 1.0, 1e-3);
    const double mean = xs / m, unbiased = (xs2 - m * mean * mean) / (m - 1);
    EXPECT_NEAR(p.running_mean[c], 0.1 * mean, 1e-5);
    // running variance folds in the unbiased batch estimate
    EXPECT_NEAR(p.running_var[c], 0.9 + 0.1 * unbiased, 1e-4);
  }
}

TEST(BatchNorm, RejectsChannelMismatch) {
  auto p = BatchNormParams::identity(2);
  EXPECT_THROW(batchnorm(Tensor({1, 3, 2, 2}), p, Mode::infer), ShapeError);
}

TEST(Pool, GlobalExamples) {
  Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(global_pool(x, PoolKind::avg)[0], 2.5f);
  EXPECT_EQ(global_pool(x, PoolKind::max)[0], 4.0f);
}

TEST(Pool, RandomizedAgainstLoop) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto kh = testutil::uniform_int(rng, 1, 4), kw = testutil::uniform_int(rng, 1, 4);
    const auto sh = testutil::uniform_int(rng, 1, 3), sw = testutil::uniform_int(rng, 1, 3);
    const auto H = testutil::uniform_int(rng, kh, 9), W = testutil::uniform_int(rng, kw, 9);
    Tensor x = randn({2, 3, H, W}, rng);
    for (PoolKind kind : {PoolKind::avg, PoolKind::max}) {
      Tensor y = pool2d(x, kind, kh, kw, sh, sw);
      const auto Ho = (H - kh) / sh + 1, Wo = (W - kw) / sw + 1;
      ASSERT_EQ(y.shape(), (Shape{2, 3, Ho, Wo}));
      for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t c = 0; c < 3; ++c)
          for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j) {
              double acc = kind == PoolKind::max ? -INFINITY : 0.0;
              for (std::int64_t a = 0; a < kh; ++a)
                for (std::int64_t b = 0; b < kw; ++b) {
                  const double v = x.at(n, c, i * sh + a, j * sw + b);
                  acc = kind == PoolKind::max ? std::max(acc, v) : acc + v;
                }
              if (kind == PoolKind::avg) acc /= static_cast<double>(kh * kw);
              if (kind == PoolKind::max) {
                ASSERT_EQ(y.at(n, c, i, j), static_cast<float>(acc));
              } else {
                ASSERT_NEAR(y.at(n, c, i, j), acc, 1e-5);
              }
            }
    }
  }
}

TEST(Pool, RejectsOversizedWindow) {
  EXPECT_THROW(pool2d(Tensor({1, 1, 3, 3}), PoolKind::avg, 4, 4, 1, 1), ShapeError);
}

TEST(Dropout, IdentityCases) {
  std::mt19937_64 rng(8);
  Tensor x = randn({100}, rng);
  EXPECT_TRUE(dropout(x, 0.0f, rng, Mode::train).same_values(x));
  EXPECT_TRUE(dropout(x, 0.7f, rng, Mode::infer).same_values(x));
}

TEST(Dropout, ZeroFractionAndScale) {
  std::mt19937_64 rng(9);
  Tensor x({100000}, 1.0f);
  Tensor y = dropout(x, 0.5f, rng, Mode::train);
  int zeros = 0;
  for (float v : y.values()) {
    if (v == 0.0f) {
      ++zeros;
    } else {
      ASSERT_EQ(v, 2.0f);
    }
  }
  EXPECT_NEAR(zeros / 1e5, 0.5, 0.01);
}

TEST(Dropout, RejectsBadProbability) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(dropout(Tensor({4}), 1.0f, rng, Mode::train), ValidationError);
  EXPECT_THROW(dropout(Tensor({4}), -0.1f, rng, Mode::train), ValidationError);
}

TEST(Backward, SumGivesOnes) {
  GradTape tape;
  Tensor x({2, 3, 4}, 0.3f);
  Tensor loss = sum(x, &tape);
  const Tensor g = backward(tape, loss).of(x);
  ASSERT_EQ(g.shape(), x.shape());
  for (float v : g.values()) EXPECT_EQ(v, 1.0f);
}

TEST(Backward, SquareGivesTwoX) {
  GradTape tape;
  Tensor x({3}, std::vector<float>{1, 2, 3});
  Tensor loss = sum(mul(x, x, &tape), &tape);
  Tensor g = backward(tape, loss).of(x);
  EXPECT_EQ(g[0], 2.0f);
  EXPECT_EQ(g[1], 4.0f);
  EXPECT_EQ(g[2], 6.0f);
}

TEST(Backward, RejectsLossNotOnTape) {
  GradTape tape;
  Tensor x({3}, 1.0f);
  Tensor loss = sum(x);
  EXPECT_THROW(backward(tape, loss), ValidationError);
}

TEST(Backward, RejectsNonScalarLoss) {
  GradTape tape;
  Tensor x({3}, 1.0f);
  Tensor y = relu(x, &tape);
  EXPECT_THROW(backward(tape, y), ShapeError);
}

TEST(Backward, Deterministic) {
  std::mt19937_64 rng(10);
  Tensor x = randn({2, 4, 6, 6}, rng), w = randn({6, 4, 3, 3}, rng);
  auto run = [&] {
    GradTape tape;
    Tensor y = hswish(conv2d(x, w, nullptr, ConvSpec::standard(3, 3, 4, 6), &tape), &tape);
    Tensor p = pool2d(y, PoolKind::max, 2, 2, 2, 2, &tape);
    Gradients g = backward(tape, mean(mul(p, p, &tape), &tape));
    return std::pair{g.of(x), g.of(w)};
  };
  auto a = run(), b = run();
  EXPECT_TRUE(a.first.same_values(b.first));
  EXPECT_TRUE(a.second.same_values(b.second));
}

TEST(Backward, ConvGradientsMatchFiniteDifferenceInDouble) {
  // independent of the library gradcheck: probes every weight entry of a tiny conv
  std::mt19937_64 rng(14);
  ConvSpec s = ConvSpec::standard(3, 2, 2, 3, 2);
  s.pad_h = 1;
  Tensor x = randn({2, 2, 5, 4}, rng), w = randn(s.weight_shape(), rng), b = randn({3}, rng);
  GradTape tape;
  Tensor y = conv2d(x, w, &b, s, &tape);
  Tensor gw = backward(tape, sum(mul(y, y, &tape), &tape)).of(w);
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    // d/dw sum(y^2) = 2 sum(y * dy/dw) where dy/dw is linear: evaluate with the double reference
    Tensor e(w.shape());
    e[i] = 1.0f;
    Tensor dy = testutil::naive_conv(x, e, nullptr, s);
    Tensor yr = testutil::naive_conv(x, w, &b, s);
    double expect = 0.0;
    for (std::int64_t k = 0; k < dy.numel(); ++k) expect += 2.0 * yr[k] * dy[k];
    EXPECT_NEAR(gw[i], expect, 1e-4 * std::max(1.0, std::abs(expect)));
  }
}

TEST(Tensor, RejectsBadReshape) {
  EXPECT_THROW(Tensor({2, 3}).reshaped({4, 2}), ShapeError);
}
