#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "capsroute/gradcheck.hpp"
#include "capsroute/nn.hpp"
#include "capsroute/ops.hpp"
#include "helpers.hpp"

using namespace capsroute;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST(Linear, IdentityAndZero) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor({2, 3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (int k = 0; k < 4; ++k) eye[k * 5] = 1;
  EXPECT_LE(max_abs_diff(linear(x, Tensor({4, 4}, eye), Tensor::zeros({4})), x), 0.0);

  const auto bias = Tensor::vector({1, -2});
  const auto y = linear(x, Tensor::zeros({4, 2}), bias);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 2}));
  for (std::size_t k = 0; k < y.numel(); ++k) EXPECT_EQ(y.values()[k], bias.values()[k % 2]);
}

TEST(Linear, MatchesLoop) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor({5, 3}, rng);
  const auto w = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4}, rng);
  const auto y = linear(x, w, b);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = b.values()[c];
      for (std::size_t k = 0; k < 3; ++k) acc += x.at({r, k}) * w.at({k, c});
      EXPECT_NEAR(y.at({r, c}), acc, 1e-12);
    }
  EXPECT_THROW(linear(x, random_tensor({4, 4}, rng), b), ShapeError);
}

TEST(LayerNorm, Examples) {
  const auto ones = Tensor::full({2}, 1.0);
  const auto zeros = Tensor::zeros({2});
  const auto y = layer_norm(Tensor::vector({1, 3}), ones, zeros);
  EXPECT_NEAR(y.values()[0], -1, 1e-4);
  EXPECT_NEAR(y.values()[1], 1, 1e-4);

  const auto shift = Tensor::vector({0.5, -0.25});
  const auto c = layer_norm(Tensor::vector({7, 7}), Tensor::vector({3, 4}), shift);
  EXPECT_EQ(c.values()[0], 0.5);
  EXPECT_EQ(c.values()[1], -0.25);

  EXPECT_THROW(layer_norm(Tensor::vector({1}), Tensor::vector({1}), Tensor::vector({0})), ContractError);
}

TEST(LayerNorm, RowStatistics) {
  std::mt19937_64 rng(3);
  const std::size_t m = 16;
  const auto y = layer_norm(random_tensor({8, m}, rng, 3.0, 2.0), Tensor::full({m}, 1.0), Tensor::zeros({m}));
  for (std::size_t r = 0; r < 8; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < m; ++c) mean += y.at({r, c});
    mean /= m;
    for (std::size_t c = 0; c < m; ++c) var += (y.at({r, c}) - mean) * (y.at({r, c}) - mean);
    var /= m;
    EXPECT_LE(std::abs(mean), 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(LayerNorm, Gradients) {
  std::mt19937_64 rng(4);
  const auto gain = random_tensor({5}, rng);
  const auto shift = random_tensor({5}, rng);
  const auto w = random_tensor({3, 5}, rng);
  std::function<Tensor(const Tensor&)> f = [&](const Tensor& x) { return sum_all(swish(layer_norm(x, gain, shift)) * w); };
  EXPECT_LE(grad_check(f, random_tensor({3, 5}, rng), 1e-5), 1e-6);
}

TEST(MaskToLogits, Examples) {
  const auto y = mask_to_logits(Tensor::vector({0.5, 1, 0, 0.8}));
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[1], kLogitMax);
  EXPECT_EQ(y.values()[2], -kLogitMax);
  EXPECT_NEAR(y.values()[3], std::log(4.0), 1e-12);
  EXPECT_THROW(mask_to_logits(Tensor::vector({1.5})), DomainError);
  EXPECT_THROW(mask_to_logits(Tensor::vector({-0.1})), DomainError);
}

TEST(MaskToLogits, InvertsLogisticOnClampedRange) {
  // In probability space across the whole clamp range.
  const double lo = 1 / (1 + std::exp(kLogitMax)), hi = 1 / (1 + std::exp(-kLogitMax));
  for (int k = 0; k <= 1000; ++k) {
    const double x = lo + (hi - lo) * k / 1000.0;
    const double back = logistic(mask_to_logits(Tensor::scalar(x))).item();
    EXPECT_NEAR(back, x, 1e-9) << x;
  }
  // In logit space where 1 - logistic(z) keeps enough digits.
  for (int k = -150; k <= 150; ++k) {
    const double z = k / 10.0;
    EXPECT_NEAR(mask_to_logits(logistic(Tensor::scalar(z))).item(), z, 1e-9) << z;
  }
}

TEST(ClampLogits, ClampsAndRejectsNan) {
  const auto y = clamp_logits(Tensor::vector({-100, 3, 100}));
  EXPECT_EQ(y.values()[0], -kLogitMax);
  EXPECT_EQ(y.values()[1], 3);
  EXPECT_EQ(y.values()[2], kLogitMax);
  EXPECT_THROW(clamp_logits(Tensor::vector({std::nan("")})), DomainError);
}

TEST(CrossEntropy, UniformPrediction) {
  const std::vector<int> labels{2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 5}), one_hot<double>(labels, 5)).item(), std::log(5.0), 1e-15);
}

TEST(CrossEntropy, MatchedTargetGivesEntropy) {
  std::mt19937_64 rng(5);
  const auto scores = random_tensor({3, 4}, rng);
  const auto p = softmax(scores, 1);
  double h = 0;
  for (double v : p.values()) h -= v * std::log(v);
  EXPECT_NEAR(cross_entropy(scores, p).item(), h / 3.0, 1e-12);
}

TEST(CrossEntropy, NonNegativeAndZeroAtClamp) {
  const std::vector<int> labels{0, 1};
  const auto t = one_hot<double>(labels, 2);
  EXPECT_GE(cross_entropy(Tensor({2, 2}, {0.3, -1, 2, 2.5}), t).item(), 0);
  const double saturated = cross_entropy(Tensor({2, 2}, {kLogitMax, -kLogitMax, -kLogitMax, kLogitMax}), t).item();
  EXPECT_GE(saturated, 0);
  EXPECT_LT(saturated, 1e-25);
}

TEST(CrossEntropy, Gradient) {
  std::mt19937_64 rng(6);
  const auto target = softmax(random_tensor({4, 3}, rng), 1);
  std::function<Tensor(const Tensor&)> f = [&](const Tensor& s) { return cross_entropy(s, target); };
  EXPECT_LE(grad_check(f, random_tensor({4, 3}, rng), 1e-5), 1e-6);
}

TEST(CrossEntropy, MalformedTargets) {
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 2}), Tensor({1, 2}, {0.7, 0.7})), ContractError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 2}), Tensor({1, 2}, {1.5, -0.5})), ContractError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 2}), Tensor::zeros({1, 3})), ShapeError);
}

TEST(Mixup, Endpoints) {
  std::mt19937_64 rng(7);
  const std::vector<Tensor> a{random_tensor({2, 3}, rng)}, b{random_tensor({2, 3}, rng)};
  const std::vector<int> la{0, 1}, lb{2, 2};
  const auto ta = one_hot<double>(la, 3), tb = one_hot<double>(lb, 3);
  const auto one = mixup<double>(a, ta, b, tb, {}, 0, 1.0);
  EXPECT_EQ(one.inputs[0].storage(), a[0].storage());
  EXPECT_EQ(one.target.storage(), ta.storage());

  const auto half = mixup<double>(a, ta, b, tb, {}, 0, 0.5);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_DOUBLE_EQ(half.inputs[0].values()[k], 0.5 * (a[0].values()[k] + b[0].values()[k]));
  }
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += half.target.at({r, c});
    EXPECT_EQ(s, 1.0);
  }
  EXPECT_THROW(mixup<double>(a, ta, std::vector<Tensor>{random_tensor({3, 3}, rng)}, tb, {}, 0, 0.5), ShapeError);
}

TEST(Mixup, DeterministicAndSimplexPreserving) {
  std::mt19937_64 rng(8);
  const std::vector<Tensor> a{random_tensor({4, 2}, rng)}, b{random_tensor({4, 2}, rng)};
  const auto ta = softmax(random_tensor({4, 5}, rng), 1), tb = softmax(random_tensor({4, 5}, rng), 1);
  const auto m1 = mixup<double>(a, ta, b, tb, {}, 42);
  const auto m2 = mixup<double>(a, ta, b, tb, {}, 42);
  EXPECT_EQ(m1.lambda, m2.lambda);
  EXPECT_EQ(m1.inputs[0].storage(), m2.inputs[0].storage());
  EXPECT_GE(m1.lambda, 0);
  EXPECT_LE(m1.lambda, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += m1.target.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Mixup, BetaMean) {
  std::mt19937_64 rng(9);
  double s = 0, s2 = 0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const double l = sample_beta(rng, {0.2, 0.2});
    ASSERT_GE(l, 0);
    ASSERT_LE(l, 1);
    s += l;
    s2 += l * l;
  }
  const double mean = s / n;
  EXPECT_NEAR(mean, 0.5, 0.01);
  // Var of Beta(a, a) is 1 / (4 (2a + 1)).
  EXPECT_NEAR(s2 / n - mean * mean, 1.0 / (4 * 1.4), 0.01);
}

TEST(Mixup, CapsulesMixAsMaskProbabilities) {
  const CapsuleBatch a{Tensor({1, 2}, {kLogitMax, 0}), Tensor::full({1, 2, 1, 1}, 2.0)};
  const CapsuleBatch b{Tensor({1, 2}, {-kLogitMax, 0}), Tensor::full({1, 2, 1, 1}, 4.0)};
  const auto m = mix_capsules(a, b, 0.5);
  EXPECT_NEAR(m.a_in.values()[0], 0.0, 1e-9);
  EXPECT_EQ(m.a_in.values()[1], 0.0);
  EXPECT_EQ(m.mu_in.values()[0], 3.0);
}

TEST(ChannelEmbedding, AddsTableRows) {
  const Tensor x({2, 2, 3}, {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3});
  const Tensor table({3, 3}, {10, 20, 30, 40, 50, 60, 70, 80, 90});
  const std::vector<std::size_t> ch{2, 0, 1, 1};
  const auto y = add_channel_embedding(x, table, ch);
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.at({0, 0, 1}), 80);
  EXPECT_EQ(y.at({0, 1, 2}), 31);
  EXPECT_EQ(y.at({1, 1, 0}), 43);
  const std::vector<std::size_t> bad{0, 0, 0, 3};
  EXPECT_THROW(add_channel_embedding(x, table, bad), ContractError);
}

TEST(ChannelEmbedding, ZeroTableIsIdentityAndDifferentiable) {
  std::mt19937_64 rng(10);
  const auto x = random_tensor({2, 3}, rng);
  const std::vector<std::size_t> ch{1, 0};
  EXPECT_EQ(add_channel_embedding(x, Tensor::zeros({2, 3}), ch).storage(), x.storage());
  const auto w = random_tensor({2, 3}, rng);
  std::function<Tensor(const Tensor&)> f = [&](const Tensor& t) { return sum_all(square(add_channel_embedding(x, t, ch)) * w); };
  EXPECT_LE(grad_check(f, random_tensor({2, 3}, rng), 1e-5), 1e-6);
}
