// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "kdlsq/dataset.hpp"
#include "kdlsq/distill.hpp"
#include "kdlsq/scale_init.hpp"

using namespace kdlsq;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.vocab = 10;
  c.max_seq = 6;
  return c;
}

Batch batch_of(std::size_t b, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Example> ex(b);
  for (auto& e : ex) {
    for (std::size_t i = 0; i < n; ++i) {
      e.tokens.push_back(rng() % 10);
      e.segments.push_back(0);
    }
    e.label = static_cast<int>(rng() % 2);
  }
  return make_batch(ex);
}

double mse_ref(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

std::vector<double> log_softmax_row(const Tensor& logits, std::size_t row, std::size_t k) {
  double mx = logits[row * k];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[row * k + j]);
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[row * k + j] - mx);
  std::vector<double> out(k);
  for (std::size_t j = 0; j < k; ++j) out[j] = logits[row * k + j] - mx - std::log(z);
  return out;
}

struct Pair {
  ModelState teacher;
  ModelState student;
  Batch batch;
};

Pair quantized_pair() {
  Pair p{ModelState::random(small(), 1), {}, batch_of(4, 5, 2)};
  p.student = ModelState::random(small(), 1);
  p.student.set_bits(2, 2, 8);
  init_weight_scales(p.student, 0.05);
  calibrate_activations(p.student, p.batch, 0.05);
  return p;
}

}  // namespace

TEST(LossMode, ParseAndPrint) {
  for (LossMode m : {LossMode::kGtOnly, LossMode::kKdOnly, LossMode::kKdGt}) EXPECT_EQ(parse_loss_mode(to_string(m)), m);
  EXPECT_THROW(parse_loss_mode("kd"), std::invalid_argument);
}

TEST(Distill, IdenticalModelsHaveZeroTransformerLoss) {
  ModelState m = ModelState::random(small(), 3);
  const Batch batch = batch_of(3, 5, 4);
  Graph g;
  ForwardOptions t;
  t.mode = ForwardMode::kTeacher;
  const ForwardTrace a = forward_model(g, m, batch, t);
  const ForwardTrace b = forward_model(g, m, batch, t);
  const TotalLoss l = loss_total(b, a, batch.labels, LossMode::kKdOnly);
  EXPECT_EQ(l.breakdown.hidden, 0.0);
  EXPECT_EQ(l.breakdown.att, 0.0);
  EXPECT_EQ(l.breakdown.trm, 0.0);
  // The soft cross-entropy of a distribution with itself is its entropy.
  double entropy = 0.0;
  for (std::size_t r = 0; r < batch.size; ++r) {
    const auto lp = log_softmax_row(a.logits.value(), r, 2);
    for (double x : lp) entropy -= std::exp(x) * x;
  }
  EXPECT_NEAR(l.breakdown.pre, entropy / static_cast<double>(batch.size), 1e-12);
}

TEST(Distill, ComponentsMatchReference) {
  Pair p = quantized_pair();
  Graph g;
  ForwardOptions t;
  t.mode = ForwardMode::kTeacher;
  const ForwardTrace tt = forward_model(g, p.teacher, p.batch, t);
  const ForwardTrace st = forward_model(g, p.student, p.batch, ForwardOptions{});
  const LossBreakdown b = loss_total(st, tt, p.batch.labels, LossMode::kKdGt).breakdown;

  double hidden = 0.0, att = 0.0;
  for (std::size_t l = 0; l < tt.hidden.size(); ++l) hidden += mse_ref(st.hidden[l].value(), tt.hidden[l].value());
  for (std::size_t l = 0; l < tt.scores.size(); ++l) att += mse_ref(st.scores[l].value(), tt.scores[l].value());
  double pre = 0.0, gt = 0.0;
  for (std::size_t r = 0; r < p.batch.size; ++r) {
    const auto ls = log_softmax_row(st.logits.value(), r, 2);
    const auto lt = log_softmax_row(tt.logits.value(), r, 2);
    for (std::size_t j = 0; j < 2; ++j) pre -= std::exp(lt[j]) * ls[j];
    gt -= ls[static_cast<std::size_t>(p.batch.labels[r])];
  }
  pre /= static_cast<double>(p.batch.size);
  gt /= static_cast<double>(p.batch.size);

  EXPECT_GT(hidden, 0.0);
  EXPECT_GT(att, 0.0);
  EXPECT_NEAR(b.hidden, hidden, 1e-12);
  EXPECT_NEAR(b.att, att, 1e-12);
  EXPECT_NEAR(b.pre, pre, 1e-12);
  EXPECT_NEAR(b.gt, gt, 1e-12);
  EXPECT_NEAR(b.trm, b.hidden + b.att, 1e-12);
  EXPECT_NEAR(b.kd, b.pre + b.trm, 1e-12);
  EXPECT_NEAR(b.total, b.kd + b.gt, 1e-12);
}

TEST(Distill, ModeSelectsTotal) {
  Pair p = quantized_pair();
  Graph g;
  ForwardOptions t;
  t.mode = ForwardMode::kTeacher;
  const ForwardTrace tt = forward_model(g, p.teacher, p.batch, t);
  const ForwardTrace st = forward_model(g, p.student, p.batch, ForwardOptions{});
  const auto gt = loss_total(st, tt, p.batch.labels, LossMode::kGtOnly).breakdown;
  const auto kd = loss_total(st, tt, p.batch.labels, LossMode::kKdOnly).breakdown;
  const auto both = loss_total(st, tt, p.batch.labels, LossMode::kKdGt).breakdown;
  EXPECT_EQ(gt.total, gt.gt);
  EXPECT_EQ(kd.total, kd.kd);
  EXPECT_EQ(both.total, both.kd + both.gt);
  // Every component is reported whatever the mode.
  EXPECT_EQ(gt.kd, kd.kd);
  EXPECT_EQ(kd.gt, gt.gt);
}

TEST(Distill, GroundTruthOnlyReportsZeroDistillation) {
  ModelState m = ModelState::random(small(), 5);
  const Batch batch = batch_of(2, 4, 6);
  Graph g;
  const ForwardTrace tr = forward_model(g, m, batch, ForwardOptions{});
  const LossBreakdown b = loss_ground_truth(tr, batch.labels).breakdown;
  EXPECT_EQ(b.kd, 0.0);
  EXPECT_EQ(b.trm, 0.0);
  EXPECT_EQ(b.total, b.gt);
  EXPECT_GT(b.gt, 0.0);
}

TEST(Distill, GradientsReachOnlyTheStudent) {
  Pair p = quantized_pair();
  p.teacher.set_trainable(false);
  p.student.set_trainable(true);
  Graph g;
  ForwardOptions t;
  t.mode = ForwardMode::kTeacher;
  ForwardTrace tt;
  {
    NoGradGuard guard(g);
    tt = forward_model(g, p.teacher, p.batch, t);
  }
  const ForwardTrace st = forward_model(g, p.student, p.batch, ForwardOptions{});
  g.backward(loss_total(st, tt, p.batch.labels, LossMode::kKdOnly).total);
  double student_norm = 0.0;
  for (const auto& [name, tensor] : p.student.named_parameters())
    for (double x : tensor->grad()) student_norm += x * x;
  EXPECT_GT(student_norm, 0.0);
  for (const auto& [name, tensor] : p.teacher.named_parameters()) EXPECT_FALSE(tensor->requires_grad()) << name;
}

TEST(Distill, MismatchedDepthThrows) {
  ModelState a = ModelState::random(small(), 7);
  ModelConfig c1 = small();
  c1.layers = 1;
  ModelState b = ModelState::random(c1, 7);
  const Batch batch = batch_of(1, 3, 8);
  Graph g;
  ForwardOptions t;
  t.mode = ForwardMode::kTeacher;
  const ForwardTrace ta = forward_model(g, a, batch, t);
  const ForwardTrace tb = forward_model(g, b, batch, t);
  EXPECT_THROW(loss_kd(tb, ta), DimensionError);
}
