// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kdlsq/lsq.hpp"
#include "kdlsq/ops.hpp"

using namespace kdlsq;

TEST(QuantLevels, Table) {
  EXPECT_EQ(quant_levels(8, true).qn, 127);
  EXPECT_EQ(quant_levels(8, true).qp, 127);
  EXPECT_EQ(quant_levels(8, false).qn, 0);
  EXPECT_EQ(quant_levels(8, false).qp, 255);
  EXPECT_EQ(quant_levels(2, true).qn, 1);
  EXPECT_EQ(quant_levels(2, true).qp, 1);
  EXPECT_EQ(quant_levels(4, true).qp, 7);
  EXPECT_EQ(quant_levels(32, false).qp, 4294967295LL);
}

TEST(QuantLevels, RejectsTooFewBits) {
  EXPECT_THROW(quant_levels(1, true), std::invalid_argument);
  EXPECT_THROW(quant_levels(0, false), std::invalid_argument);
  EXPECT_THROW(QuantSpec(33, true), std::invalid_argument);
}

TEST(RoundHalfEven, Ties) {
  EXPECT_EQ(round_half_even(0.5), 0.0);
  EXPECT_EQ(round_half_even(1.5), 2.0);
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(-0.5), -0.0);
  EXPECT_EQ(round_half_even(-1.5), -2.0);
  EXPECT_EQ(round_half_even(1.4999), 1.0);
  EXPECT_EQ(round_half_even(-2.6), -3.0);
}

TEST(QuantizeValue, Examples) {
  const QuantSpec s8(8, true), s2(2, true);
  EXPECT_EQ(quantize_value(0.0, 0.37, s8), 0.0);
  EXPECT_EQ(quantize_value(0.7, 0.5, s8), 0.5);
  EXPECT_EQ(quantize_value(100.0, 0.5, s2), 0.5);
  EXPECT_EQ(quantize_value(-100.0, 0.5, s2), -0.5);
  EXPECT_EQ(quantize_value(-3.0, 1.0, QuantSpec(8, false)), 0.0);  // unsigned clamps at zero
}

TEST(GradScale, Branches) {
  const QuantSpec s2(2, true);
  EXPECT_NEAR(grad_scale(0.3, 1.0, s2), -0.3, 1e-15);
  EXPECT_EQ(grad_scale(5.0, 1.0, s2), 1.0);
  EXPECT_EQ(grad_scale(-5.0, 1.0, s2), -1.0);
  // Boundary points take the saturated branch.
  EXPECT_EQ(grad_scale(1.0, 1.0, s2), 1.0);
  EXPECT_EQ(grad_scale(-1.0, 1.0, s2), -1.0);
  const QuantSpec u8(8, false);
  EXPECT_EQ(grad_scale(-2.0, 1.0, u8), 0.0);  // -Qn with Qn = 0
}

TEST(GradActivation, Mask) {
  const QuantSpec s2(2, true), s8(8, true);
  EXPECT_EQ(grad_activation(0.5, 1.0, s8), 1.0);
  EXPECT_EQ(grad_activation(10.0, 1.0, s2), 0.0);
  EXPECT_EQ(grad_activation(1.0, 1.0, s2), 0.0);   // exactly Qp
  EXPECT_EQ(grad_activation(-1.0, 1.0, s2), 0.0);  // exactly -Qn
}

TEST(GradWeight, AlwaysOne) {
  const QuantSpec s2(2, true);
  EXPECT_EQ(grad_weight(0.2, 1.0, s2), 1.0);
  EXPECT_EQ(grad_weight(50.0, 1.0, s2), 1.0);
}

TEST(ScaleFactor, FloorAndInit) {
  ScaleFactor s("x", SiteKind::kWeight);
  EXPECT_FALSE(s.initialized);
  EXPECT_TRUE(s.value.requires_grad());
  s.set(0.0);
  EXPECT_TRUE(s.initialized);
  EXPECT_EQ(s.get(), kMinScale);
  s.set(std::nan(""));
  EXPECT_EQ(s.get(), kMinScale);
  s.set(0.25);
  EXPECT_EQ(s.get(), 0.25);
  s.value[0] = -3.0;
  s.clamp_to_floor();
  EXPECT_EQ(s.get(), kMinScale);
}

namespace {

struct NodeOut {
  Tensor out;
  Tensor gv;
  double gs;
};

NodeOut run_node(const Tensor& v, double s, const QuantSpec& spec, SiteKind kind, const Tensor& upstream) {
  Tensor tv = v;
  Tensor ts = Tensor::scalar(s);
  tv.set_requires_grad(true);
  ts.set_requires_grad(true);
  Graph g;
  Var q = fake_quantize(g.parameter(tv), g.parameter(ts), spec, kind);
  // loss = sum(upstream * q) through a custom contraction node
  Var loss = g.record(Tensor::scalar(0.0), {q}, [upstream](BackwardContext& ctx) {
    auto gq = ctx.grad_input(0);
    for (std::size_t i = 0; i < gq.size(); ++i) gq[i] += ctx.grad_output()[0] * upstream[i];
  });
  g.backward(loss);
  return {q.value(), Tensor(tv.shape(), std::vector<double>(tv.grad().begin(), tv.grad().end())), ts.grad()[0]};
}

}  // namespace

TEST(FakeQuantize, NodeMatchesScalarRules) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int bits : {2, 4, 8}) {
    for (bool sgn : {true, false}) {
      const QuantSpec spec(bits, sgn);
      Tensor v({50});
      Tensor up({50});
      for (double& x : v.data()) x = n(rng);
      for (double& x : up.data()) x = n(rng);
      const double s = 0.3;
      for (SiteKind kind : {SiteKind::kWeight, SiteKind::kActivation}) {
        const NodeOut r = run_node(v, s, spec, kind, up);
        double gs = 0.0;
        for (std::size_t i = 0; i < 50; ++i) {
          EXPECT_EQ(r.out[i], quantize_value(v[i], s, spec));
          const double local = kind == SiteKind::kWeight ? grad_weight(v[i], s, spec) : grad_activation(v[i], s, spec);
          EXPECT_EQ(r.gv[i], up[i] * local);
          gs += up[i] * grad_scale(v[i], s, spec);
        }
        EXPECT_NEAR(r.gs, gs, 1e-12);
      }
    }
  }
}

TEST(FakeQuantize, NonPositiveScaleThrows) {
  Graph g;
  Var v = g.constant(Tensor({2}, 1.0));
  EXPECT_THROW(fake_quantize(v, g.constant(Tensor::scalar(0.0)), QuantSpec(8, true), SiteKind::kWeight),
               std::domain_error);
  EXPECT_THROW(fake_quantize(v, g.constant(Tensor::scalar(-1.0)), QuantSpec(8, true), SiteKind::kWeight),
               std::domain_error);
  EXPECT_THROW(fake_quantize(v, g.constant(Tensor({2}, 1.0)), QuantSpec(8, true), SiteKind::kWeight),
               DimensionError);
}

TEST(FakeQuantize, Invariants) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int bits : {2, 4, 6, 8}) {
    for (bool sgn : {true, false}) {
      const QuantSpec spec(bits, sgn);
      for (int t = 0; t < 500; ++t) {
        const double s = 0.05 + std::abs(n(rng));
        const double v = n(rng);
        const double q = quantize_value(v, s, spec);
        const double k = std::round(q / s);
        EXPECT_EQ(k * s, q);
        EXPECT_GE(k, -static_cast<double>(spec.qn));
        EXPECT_LE(k, static_cast<double>(spec.qp));
        EXPECT_EQ(quantize_value(q, s, spec), q);  // idempotent
        if (sgn) EXPECT_EQ(quantize_value(-v, s, spec), -q);
      }
    }
  }
}

TEST(FakeQuantize, TernaryHasThreeLevels) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor v({1000});
  for (double& x : v.data()) x = n(rng);
  Graph g;
  const Tensor q = fake_quantize(g.constant(v), g.constant(Tensor::scalar(0.7)), QuantSpec(2, true),
                                 SiteKind::kWeight)
                       .value();
  for (double x : q.data()) EXPECT_TRUE(x == 0.0 || x == 0.7 || x == -0.7);
}

TEST(RoundingSnapshot, ReplayIsSmoothSurrogate) {
  // Replaying a snapshot reproduces the quantized value at the captured
  // scale, and moves linearly with s elsewhere.
  const QuantSpec spec(4, true);
  Tensor v({4}, std::vector<double>{0.31, -0.77, 5.0, -9.0});
  const double s = 0.2;
  const RoundingSnapshot snap = capture_rounding(v, s, spec);
  EXPECT_EQ(snap.region[2], QuantRegion::kAbove);
  EXPECT_EQ(snap.region[3], QuantRegion::kBelow);
  Graph g;
  const Tensor at = fake_quantize(g.constant(v), g.constant(Tensor::scalar(s)), spec, SiteKind::kActivation, &snap)
                        .value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(at[i], quantize_value(v[i], s, spec), 1e-15);
  const double s2 = 0.2001;
  const Tensor moved =
      fake_quantize(g.constant(v), g.constant(Tensor::scalar(s2)), spec, SiteKind::kActivation, &snap).value();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR((moved[i] - at[i]) / (s2 - s), grad_scale(v[i], s, spec), 1e-9);
  }
}

TEST(RoundingSnapshot, SizeMismatchThrows) {
  const RoundingSnapshot snap = capture_rounding(Tensor({3}, 1.0), 1.0, QuantSpec(8, true));
  Graph g;
  EXPECT_THROW(fake_quantize(g.constant(Tensor({2}, 1.0)), g.constant(Tensor::scalar(1.0)), QuantSpec(8, true),
                             SiteKind::kWeight, &snap),
               DimensionError);
}
