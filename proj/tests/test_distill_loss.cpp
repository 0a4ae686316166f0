#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "weckd/distill_loss.hpp"
#include "weckd/errors.hpp"
#include "weckd/gradcheck.hpp"
#include "weckd/rng.hpp"

using namespace weckd;
using namespace weckd::distill;

namespace {

Tensor row(std::vector<double> v) {
  const std::size_t k = v.size();
  return Tensor({1, k}, std::move(v));
}

Tensor random_logits(Rng& rng, std::size_t B, std::size_t K, double scale) {
  Tensor t({B, K});
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

double entropy(const Tensor& p) {
  double h = 0.0;
  for (const double v : p.data()) h -= v > 0.0 ? v * std::log(v) : 0.0;
  return h;
}

}  // namespace

TEST(SoftmaxTemperature, Examples) {
  for (double T : {0.5, 1.0, 7.0}) {
    const Tensor p = softmax_temperature(row({0, 0}), T);
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
  }
  const Tensor p = softmax_temperature(row({1, 0}), 1.0);
  EXPECT_NEAR(p[0], 0.731059, 1e-6);
  EXPECT_NEAR(p[1], 0.268941, 1e-6);
  // At T = 1000 the first entry is sigmoid(0.01) ~ 0.5025; it reaches
  // within 1e-3 of uniform from T = 2500 on.
  const Tensor warm = softmax_temperature(row({10, 0}), 1000.0);
  EXPECT_NEAR(warm[0], 1.0 / (1.0 + std::exp(-0.01)), 1e-12);
  const Tensor hot = softmax_temperature(row({10, 0}), 1e4);
  EXPECT_NEAR(hot[0], 0.5, 1e-3);
}

TEST(SoftmaxTemperature, RowsSumToOneAndStable) {
  Rng rng(1);
  const Tensor z = random_logits(rng, 16, 7, 300.0);
  const Tensor p = softmax_temperature(z, 0.7);
  for (std::size_t b = 0; b < 16; ++b) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) s += p.at(b, k);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_TRUE(p.all_finite());
}

TEST(SoftmaxTemperature, NonPositiveTemperature) {
  EXPECT_THROW(softmax_temperature(row({1, 2}), 0.0), ContractError);
  EXPECT_THROW(softmax_temperature(row({1, 2}), -1.0), ContractError);
}

TEST(SoftmaxTemperature, EntropyIncreasesWithTemperature) {
  const Tensor z = row({2.0, -1.0, 0.5, 0.0});
  double prev = -1.0;
  for (double T : {1.0, 2.0, 3.0, 4.0, 5.0}) {
    const double h = entropy(softmax_temperature(z, T));
    EXPECT_GT(h, prev) << T;
    prev = h;
  }
}

TEST(CeLoss, Examples) {
  EXPECT_EQ(ce_loss(row({0, 1, 0}), row({0, 1, 0})), 0.0);
  EXPECT_NEAR(ce_loss(row({0.25, 0.25, 0.25, 0.25}), row({0, 0, 1, 0})), std::log(4.0), 1e-12);
  EXPECT_NEAR(ce_loss(row({0.7, 0.3}), row({1, 0})), 0.356675, 1e-6);
}

TEST(CeLoss, ClampsAndRejectsNonOneHot) {
  EXPECT_NEAR(ce_loss(row({1, 0}), row({0, 1})), -std::log(kLogClamp), 1e-9);
  EXPECT_THROW(ce_loss(row({0.5, 0.5}), row({0.5, 0.5})), ContractError);
}

TEST(KdLoss, Examples) {
  Rng rng(2);
  const Tensor z = random_logits(rng, 4, 5, 3.0);
  EXPECT_NEAR(kd_loss(z, z, 2.0), 0.0, 1e-12);
  const Tensor teacher = row({std::log(2.0), 0.0});  // probabilities 2/3, 1/3
  const double expected = (2.0 / 3.0) * std::log(4.0 / 3.0) + (1.0 / 3.0) * std::log(2.0 / 3.0);
  EXPECT_NEAR(kd_loss(row({0, 0}), teacher, 1.0), expected, 1e-12);
  EXPECT_NEAR(expected, 0.056633, 1e-6);
  const Tensor s = row({2.0, -1.0, 0.0}), t = row({-1.0, 1.5, 0.3});
  EXPECT_LT(kd_loss(s, t, 5.0), kd_loss(s, t, 1.0));
}

TEST(KdLoss, NonNegativeOverRandomPairs) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t B = 1 + rng.index(6), K = 2 + rng.index(8);
    const double scale = rng.uniform(0.01, 30.0);
    ASSERT_GE(kd_loss(random_logits(rng, B, K, scale), random_logits(rng, B, K, scale), rng.uniform(0.5, 10.0)), 0.0)
        << i;
  }
}

TEST(KdLoss, ShapeMismatchIsContractError) {
  EXPECT_THROW(kd_loss(row({1, 2, 3}), row({1, 2}), 1.0), ContractError);
}

TEST(HybridLoss, EndpointsAndPaperWeight) {
  Rng rng(4);
  const Tensor s = random_logits(rng, 3, 4, 2.0), t = random_logits(rng, 3, 4, 2.0);
  const Tensor y = one_hot(std::vector<int>{0, 3, 1}, 4);
  const HybridLoss ce_only = hybrid_loss(s, &t, y, 1.0, 3.0);
  EXPECT_EQ(ce_only.total, ce_only.ce_part);
  const HybridLoss kd_only = hybrid_loss(s, &t, y, 0.0, 3.0);
  EXPECT_EQ(kd_only.total, kd_only.kd_part);
  // ce 1.0, kd 0.5 at alpha 0.7365: 0.7365 + 0.2635 * 0.5.
  EXPECT_NEAR(0.7365 * 1.0 + (1.0 - 0.7365) * 0.5, 0.86825, 1e-12);
  EXPECT_EQ(hybrid_loss(s, nullptr, y, 1.0, 3.0).total, ce_only.ce_part);
  EXPECT_THROW(hybrid_loss(s, nullptr, y, 0.5, 3.0), ContractError);
  EXPECT_THROW(hybrid_loss(s, &t, y, 1.5, 3.0), ContractError);
}

TEST(HybridLoss, ExactlyLinearInAlpha) {
  Rng rng(5);
  const Tensor s = random_logits(rng, 5, 3, 2.0), t = random_logits(rng, 5, 3, 2.0);
  const Tensor y = one_hot(std::vector<int>{0, 1, 2, 2, 1}, 3);
  const double ce = ce_loss(softmax_temperature(s, 1.0), y), kd = kd_loss(s, t, 2.5);
  for (int k = 0; k <= 10; ++k) {
    const double alpha = k / 10.0;
    const HybridLoss h = hybrid_loss(s, &t, y, alpha, 2.5);
    EXPECT_EQ(h.total, alpha * ce + (1.0 - alpha) * kd) << alpha;
    EXPECT_EQ(h.ce_part, ce);
    EXPECT_EQ(h.kd_part, kd);
  }
}

TEST(HybridLossGrad, Examples) {
  const Tensor z = row({std::log(0.7), std::log(0.3)});
  const Tensor g = hybrid_loss_grad(z, nullptr, row({1, 0}), 1.0, 1.0);
  EXPECT_NEAR(g[0], -0.3, 1e-12);
  EXPECT_NEAR(g[1], 0.3, 1e-12);
  // Global minimum: student equals teacher and puts all mass on the label.
  const Tensor sharp = row({60.0, 0.0});
  const Tensor g0 = hybrid_loss_grad(sharp, &sharp, row({1, 0}), 0.4, 2.0);
  for (const double v : g0.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(HybridLossGrad, MatchesFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 1 + rng.index(4), K = 2 + rng.index(5);
    const Tensor s = random_logits(rng, B, K, 2.0), t = random_logits(rng, B, K, 2.0);
    std::vector<int> labels(B);
    for (auto& v : labels) v = static_cast<int>(rng.index(K));
    const Tensor y = one_hot(labels, K);
    const double alpha = rng.uniform(0.0, 1.0), T = rng.uniform(1.0, 5.0);
    const Tensor g = hybrid_loss_grad(s, &t, y, alpha, T);
    // Fourth-order central stencil: the loss is smooth in the logits, and a
    // plain two-point difference cannot resolve 1e-6 relative on gradients
    // near 1e-5 (its round-off is ~1e-11 absolute).
    const double eps = 1e-3;
    const auto L = [&](std::size_t i, double delta) {
      Tensor p = s;
      p[i] += delta;
      return hybrid_loss(p, &t, y, alpha, T).total;
    };
    for (std::size_t i = 0; i < s.numel(); ++i) {
      const double numeric = (-L(i, 2 * eps) + 8 * L(i, eps) - 8 * L(i, -eps) + L(i, -2 * eps)) / (12 * eps);
      EXPECT_LT(relative_error(g[i], numeric), 1e-6) << "trial " << trial << " coord " << i;
    }
  }
}

TEST(HybridLossGrad, TSquaredScalesDistillationTermOnly) {
  Rng rng(7);
  const Tensor s = random_logits(rng, 2, 3, 1.0), t = random_logits(rng, 2, 3, 1.0);
  const Tensor y = one_hot(std::vector<int>{1, 2}, 3);
  const Tensor plain = hybrid_loss_grad(s, &t, y, 0.0, 3.0, false);
  const Tensor squared = hybrid_loss_grad(s, &t, y, 0.0, 3.0, true);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(squared[i], 9.0 * plain[i], 1e-12);
}

TEST(AnnealTemperature, EndpointsMidpointAndLine) {
  EXPECT_EQ(anneal_temperature(0, 50, 5.0, 1.0).temperature, 5.0);
  EXPECT_EQ(anneal_temperature(50, 50, 5.0, 1.0).temperature, 1.0);
  EXPECT_EQ(anneal_temperature(25, 50, 5.0, 1.0).temperature, 3.0);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const double t_min = rng.uniform(1.0, 3.0), t_max = t_min + rng.uniform(0.0, 7.0);
    const int E = 1 + static_cast<int>(rng.index(80));
    double prev = t_max;
    for (int e = 0; e <= E; ++e) {
      const double T = anneal_temperature(e, E, t_max, t_min).temperature;
      EXPECT_NEAR(T, t_max - (t_max - t_min) * e / E, 1e-14);
      EXPECT_LE(T, prev);
      prev = T;
    }
    EXPECT_EQ(anneal_temperature(0, E, t_max, t_min).temperature, t_max);
    EXPECT_EQ(anneal_temperature(E, E, t_max, t_min).temperature, t_min);
  }
}

TEST(AnnealTemperature, PastScheduleClampsWithWarning) {
  const AnnealResult r = anneal_temperature(60, 50, 5.0, 1.0);
  EXPECT_EQ(r.temperature, 1.0);
  EXPECT_TRUE(r.warning);
  EXPECT_FALSE(anneal_temperature(10, 50, 5.0, 1.0).warning);
  EXPECT_THROW(anneal_temperature(-1, 50, 5.0, 1.0), ContractError);
  EXPECT_THROW(anneal_temperature(0, 0, 5.0, 1.0), ContractError);
}

TEST(DistillParams, Validation) {
  DistillParams p;
  EXPECT_NO_THROW(p.validate());
  p.alpha = 1.2;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.t_min = 0.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.t_max = 0.9 * p.t_min + 0.05;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.t_max = 11.0;
  EXPECT_THROW(p.validate(), ConfigError);
}
