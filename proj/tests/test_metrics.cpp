#include <gtest/gtest.h>

#include "support.hpp"

using namespace dlab;
using namespace dlab::testing;

namespace {

// Dense-grid reference for one example along +epsilon: correct at both
// ends and wrong somewhere strictly inside.
bool grid_distorted(const FunctionClassifier& m, double x, double eps, double step = 1e-4) {
  const auto wrong = [&](double k) {
    const double p = std::clamp(x + k * eps, 0.0, 1.0);
    return m.predict(std::span<const double>(&p, 1)) != 0;
  };
  if (wrong(0.0) || wrong(1.0)) return false;
  for (double k = step; k < 1.0; k += step)
    if (wrong(k)) return true;
  return false;
}

}  // namespace

TEST(Distortion, IntervalFixtureIsDistorted) {
  // x = 0.2, eps = 0.5: wrong exactly for k in (0.3, 0.5)
  const auto m = interval_classifier(0.35, 0.45);
  const LabeledBatch b = scalar_batch({0.2});
  ASSERT_TRUE(grid_distorted(m, 0.2, 0.5));
  const DistortionEstimate d = estimate_distortion(m, b, 0.5, 100);
  ASSERT_TRUE(d.d.has_value());
  EXPECT_EQ(*d.d, 1.0);
  EXPECT_EQ(d.n_s_n, 1u);
  EXPECT_EQ(d.distorted, std::vector<std::size_t>{0});
}

TEST(Distortion, LinearFixtureIsClean) {
  const auto m = interval_classifier(2.0, 3.0);  // never wrong inside [0, 1]
  const LabeledBatch b = scalar_batch({0.2, 0.4, 0.6});
  EXPECT_FALSE(grid_distorted(m, 0.2, 0.5));
  const DistortionEstimate d = estimate_distortion(m, b, 0.5, 100);
  ASSERT_TRUE(d.d.has_value());
  EXPECT_EQ(*d.d, 0.0);
  EXPECT_EQ(d.n_s_n, 3u);
}

TEST(Distortion, LinearNetworkHasNoInteriorFlip) {
  // a linear classifier's decision regions are half-spaces: a segment with
  // both ends on the correct side stays there
  const ModelSpec spec{{6}, {Dense{6, 3}}, 3};
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Network net = random_network(spec, s);
    Rng rng(s);
    const LabeledBatch b = random_batch(spec, 30, rng);
    const DistortionEstimate d = estimate_distortion(net, b, 0.3, 50);
    EXPECT_EQ(d.n_s_d_and_s_n, 0u);
  }
}

TEST(Distortion, UndefinedWhenNothingQualifies) {
  const auto m = interval_classifier(-1.0, 2.0);  // always wrong
  const DistortionEstimate d = estimate_distortion(m, scalar_batch({0.2, 0.3}), 0.5, 10);
  EXPECT_FALSE(d.d.has_value());
  EXPECT_EQ(d.n_s_n, 0u);
}

TEST(Distortion, EndpointWrongExcluded) {
  const auto m = interval_classifier(0.65, 0.8);  // 0.2 + 0.5 = 0.7 is wrong
  const DistortionEstimate d = estimate_distortion(m, scalar_batch({0.2}), 0.5, 100);
  EXPECT_FALSE(d.d.has_value());
}

TEST(Distortion, ProbesStayInsideOpenSegment) {
  auto m = interval_classifier(2.0, 3.0);
  estimate_distortion(m, scalar_batch({0.2}), 0.5, 7);
  // gradient pass, endpoint, then 7 interior probes
  ASSERT_EQ(m.forward_inputs.size(), 8u);
  for (std::size_t j = 1; j <= 7; ++j) {
    const double p = m.forward_inputs[j][0];
    EXPECT_GT(p, 0.2);
    EXPECT_LT(p, 0.7);
    EXPECT_EQ(p, 0.2 + (static_cast<double>(j) / 8.0) * 0.5);
  }
}

TEST(Distortion, NestedGridsAreMonotone) {
  // n -> 2n + 1 refines j/(n+1) to j/(2n+2), which contains every old probe
  const ModelSpec spec = small_spec(1);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Network net = random_network(spec, s, 4.0);
    Rng rng(s);
    const LabeledBatch b = random_batch(spec, 40, rng);
    std::size_t prev = 0;
    for (std::size_t n = 1; n <= 63; n = 2 * n + 1) {
      const DistortionEstimate d = estimate_distortion(net, b, 0.4, n);
      EXPECT_GE(d.n_s_d_and_s_n, prev);
      prev = d.n_s_d_and_s_n;
    }
  }
}

TEST(Distortion, ChunkingDoesNotChangeResult) {
  const ModelSpec spec = small_spec(0);
  const Network net = random_network(spec, 3, 4.0);
  Rng rng(1);
  const LabeledBatch b = random_batch(spec, 50, rng);
  const auto a = estimate_distortion(net, b, 0.4, 30, 7);
  const auto c = estimate_distortion(net, b, 0.4, 30, 1000);
  EXPECT_EQ(a.n_s_n, c.n_s_n);
  EXPECT_EQ(a.distorted, c.distorted);
}

TEST(Distortion, ZeroSamplesRejected) {
  const auto m = interval_classifier(2.0, 3.0);
  EXPECT_THROW(estimate_distortion(m, scalar_batch({0.2}), 0.5, 0), ConfigError);
}

TEST(Gamma, AffineLossIsZero) {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> w(8);
    for (double& v : w) v = rng.uniform(-3.0, 3.0);
    const auto m = affine_loss_classifier(w, rng.uniform(-1.0, 1.0));
    DenseArray x(Shape{5, 8});
    for (double& v : x.values()) v = rng.uniform();
    const double eps = rng.uniform(1e-6, 0.5);
    const GammaStats g = gamma(m, LabeledBatch{x, std::vector<int>(5, 0)}, eps);
    for (double v : g.per_example_gamma) EXPECT_LE(std::abs(v), 1e-9);
  }
}

TEST(Gamma, ConcaveMatchesSymbolic) {
  // loss 1 - (x - x0)^2 and delta = eps * sgn(-2(x - x0)) give gamma = -eps^2
  const auto m = concave_classifier(0.5);
  for (double eps : {0.01, 0.1, 0.3}) {
    const GammaStats g = gamma(m, scalar_batch({0.2, 0.9, 0.45}), eps);
    for (double v : g.per_example_gamma) {
      EXPECT_LT(v, 0.0);
      EXPECT_NEAR(v, -eps * eps, 1e-12);
    }
    EXPECT_EQ(g.fraction_negative, 1.0);
  }
}

TEST(Gamma, ZeroRadius) {
  const ModelSpec spec = small_spec(2);
  const Network net = random_network(spec, 1);
  Rng rng(1);
  const GammaStats g = gamma(net, random_batch(spec, 4, rng), 0.0);
  for (double v : g.per_example_gamma) EXPECT_EQ(v, 0.0);
}

TEST(Gamma, MeanIsArithmeticMean) {
  const ModelSpec spec = small_spec(1);
  const Network net = random_network(spec, 9);
  Rng rng(3);
  const GammaStats g = gamma(net, random_batch(spec, 17, rng), 0.2);
  long double s = 0.0L;
  std::size_t neg = 0;
  for (double v : g.per_example_gamma) s += v, neg += v < 0.0;
  EXPECT_NEAR(g.mean_gamma, static_cast<double>(s / 17.0L), 1e-12);
  EXPECT_EQ(g.fraction_negative, static_cast<double>(neg) / 17.0);
}

TEST(RobustAccuracy, ConstantCorrectAndAlwaysWrong) {
  FunctionClassifier right;
  FunctionClassifier wrong;
  wrong.predict = [](FunctionClassifier::Row) { return 1; };
  const LabeledBatch b = scalar_batch({0.1, 0.5, 0.9});
  Rng rng(1);
  for (AttackKind k : {AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Fast}) {
    const AttackSpec a{k, 0.1, 0.025, 3, 2};
    EXPECT_EQ(robust_accuracy(right, b, a, false, rng).ratio, 1.0);
    EXPECT_EQ(robust_accuracy(wrong, b, a, false, rng).ratio, 0.0);
  }
}

TEST(RobustAccuracy, RestrictToCorrectEnumeration) {
  // wrong on clean inputs below 0.5; FGSM pushes everything up by 0.1
  FunctionClassifier m;
  m.predict = [](FunctionClassifier::Row x) { return x[0] < 0.5 || x[0] > 0.88 ? 1 : 0; };
  m.grad = [](FunctionClassifier::Row, int, std::span<double> g) { g[0] = 1.0; };
  std::vector<double> xs;
  for (int i = 0; i < 10; ++i) xs.push_back(0.05 + 0.1 * i);
  const LabeledBatch b = scalar_batch(xs);
  std::size_t clean_ok = 0, adv_ok = 0, adv_ok_all = 0;
  for (double x : xs) {
    const double a = std::clamp(x + 0.1, 0.0, 1.0);
    const bool c = !(x < 0.5 || x > 0.88), r = !(a < 0.5 || a > 0.88);
    clean_ok += c;
    adv_ok += c && r;
    adv_ok_all += r;
  }
  ASSERT_EQ(clean_ok, 4u);
  Rng rng(1);
  const RobustAccuracy all = robust_accuracy(m, b, {AttackKind::Fgsm, 0.1}, false, rng);
  const RobustAccuracy restricted = robust_accuracy(m, b, {AttackKind::Fgsm, 0.1}, true, rng);
  EXPECT_EQ(all.total, 10u);
  EXPECT_EQ(all.correct, adv_ok_all);
  EXPECT_EQ(restricted.total, clean_ok);
  EXPECT_EQ(restricted.correct, adv_ok);
}

TEST(RobustAccuracy, FgsmEqualsDirectFlipCount) {
  const ModelSpec spec = small_spec(4);
  const Network net = random_network(spec, 5);
  Rng data_rng(2);
  const LabeledBatch b = random_batch(spec, 100, data_rng);
  const auto adv = predictions(net.forward(fgsm(net, b, 0.1).adv_images));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < 100; ++i) ok += adv[i] == b.labels[i];
  Rng rng(1);
  const RobustAccuracy r = robust_accuracy(net, b, {AttackKind::Fgsm, 0.1}, false, rng, 100);
  EXPECT_EQ(r.correct, ok);
}

TEST(RobustAccuracy, EmptyRestrictedSetIsUndefined) {
  FunctionClassifier wrong;
  wrong.predict = [](FunctionClassifier::Row) { return 1; };
  Rng rng(1);
  EXPECT_FALSE(robust_accuracy(wrong, scalar_batch({0.5}), {AttackKind::Fgsm, 0.1}, true, rng).ratio);
}

TEST(Norms, PerturbationL1Mean) {
  DenseArray d(Shape{2, 3});
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = i % 2 ? 0.03 : -0.03;
  EXPECT_DOUBLE_EQ(perturbation_l1_mean(d), 0.03);
  EXPECT_EQ(perturbation_l1_mean(DenseArray(Shape{4})), 0.0);
  Rng rng(1);
  DenseArray r(Shape{50, 20});
  for (double& v : r.values()) v = rng.uniform(-1.0, 1.0);
  long double s = 0.0L;
  for (double v : r.values()) s += std::abs(static_cast<long double>(v));
  const long double ref = s / 1000.0L;
  EXPECT_LE(std::abs((perturbation_l1_mean(r) - ref) / ref), 1e-12L);
}

TEST(Norms, InputGradL2) {
  const auto m = affine_loss_classifier({3.0, 4.0}, 0.0);
  const LabeledBatch b{DenseArray(Shape{3, 2}), {0, 0, 0}};
  const GradNormStats s = input_grad_l2(m, b);
  EXPECT_DOUBLE_EQ(s.mean_l2, 5.0);
  EXPECT_DOUBLE_EQ(s.mean_l2_squared, 25.0);
  const auto zero = affine_loss_classifier({0.0, 0.0}, 1.0);
  EXPECT_EQ(input_grad_l2(zero, b).mean_l2, 0.0);
}

TEST(Norms, InputGradL2MatchesExtendedPrecision) {
  const ModelSpec spec = small_spec(1);
  const Network net = random_network(spec, 4);
  Rng rng(8);
  const LabeledBatch b = random_batch(spec, 9, rng);
  const InputGradient g = net.input_gradient(b.images, b.labels);
  long double sum = 0.0L, sum2 = 0.0L;
  for (std::size_t i = 0; i < 9; ++i) {
    long double sq = 0.0L;
    for (double v : g.grad.row(i)) sq += static_cast<long double>(v) * 9.0L * static_cast<long double>(v) * 9.0L;
    sum += std::sqrt(sq);
    sum2 += sq;
  }
  const GradNormStats s = input_grad_l2(net, b);
  EXPECT_LE(std::abs((s.mean_l2 - sum / 9.0L) / (sum / 9.0L)), 1e-12L);
  EXPECT_LE(std::abs((s.mean_l2_squared - sum2 / 9.0L) / (sum2 / 9.0L)), 1e-12L);
}
