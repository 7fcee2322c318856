// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/gradcheck.hpp"

#include <algorithm>
#include <functional>
#include <cmath>
#include <random>
#include <stdexcept>

#include "kdlsq/scale_init.hpp"

namespace kdlsq {

namespace {

Batch random_batch(const GradcheckOptions& o, std::mt19937_64& rng) {
  Batch b;
  b.size = o.batch;
  b.seq_len = o.seq_len;
  std::uniform_int_distribution<std::size_t> tok(0, o.model.vocab - 1);
  std::uniform_int_distribution<int> label(0, static_cast<int>(o.model.num_classes) - 1);
  for (std::size_t i = 0; i < o.batch; ++i) {
    for (std::size_t t = 0; t < o.seq_len; ++t) {
      b.tokens.push_back(tok(rng));
      b.segments.push_back(t < o.seq_len / 2 ? 0 : std::min<std::size_t>(1, o.model.segments - 1));
    }
    b.labels.push_back(label(rng));
  }
  return b;
}

// Loss of `student` against a constant teacher trace. When `with_grad` is
// set, gradients are accumulated into the student's trainable tensors.
double loss_at(ModelState& student, const ForwardTrace& teacher, const Batch& batch, LossMode mode,
               RoundingFreeze* freeze, bool with_grad) {
  Graph graph;
  ForwardOptions opt;
  opt.mode = ForwardMode::kStudent;
  opt.freeze = freeze;
  graph.set_grad_enabled(with_grad);
  const ForwardTrace s = forward_model(graph, student, batch, opt);
  const ForwardTrace t = detach_trace(teacher, graph);
  const TotalLoss loss = loss_total(s, t, batch.labels, mode);
  if (with_grad) graph.backward(loss.total);
  return loss.breakdown.total;
}

TensorCheck check_tensor(const std::string& name, Tensor& t, const std::function<double()>& f, double h,
                         bool positive) {
  std::vector<double> analytic(t.grad().begin(), t.grad().end());
  std::vector<double> numeric(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double x0 = t[i];
    // Scale-factors must stay positive on both sides of the stencil.
    const double step = positive ? std::min(h, 0.5 * x0) : h;
    t[i] = x0 + step;
    const double up = f();
    t[i] = x0 - step;
    const double down = f();
    t[i] = x0;
    numeric[i] = (up - down) / (2.0 * step);
  }
  TensorCheck c;
  c.name = name;
  c.numel = t.size();
  double na = 0.0;
  for (double a : analytic) na += a * a;
  c.analytic_norm = std::sqrt(na);
  c.rel_error = relative_error(analytic, numeric);
  return c;
}

}  // namespace

double relative_error(const std::vector<double>& a, const std::vector<double>& f) {
  if (a.size() != f.size()) throw DimensionError("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - f[i]) * (a[i] - f[i]);
    na += a[i] * a[i];
    nf += f[i] * f[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nf));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

GradcheckReport run_gradcheck(const GradcheckOptions& o) {
  o.model.validate();
  if (o.seq_len > o.model.max_seq) throw std::invalid_argument("gradcheck: seq_len exceeds max_seq");
  if (!(o.step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");

  std::mt19937_64 rng(o.seed);
  const Batch batch = random_batch(o, rng);

  ModelConfig fp = o.model;
  fp.set_bits(kFullPrecisionBits, kFullPrecisionBits, kFullPrecisionBits);
  ModelState teacher = ModelState::random(fp, o.seed);
  Graph teacher_graph;
  ForwardTrace teacher_trace;
  {
    NoGradGuard guard(teacher_graph);
    ForwardOptions topt;
    topt.mode = ForwardMode::kTeacher;
    teacher_trace = forward_model(teacher_graph, teacher, batch, topt);
  }

  GradcheckReport report;
  auto add = [&](TensorCheck c) {
    c.passed = c.rel_error <= o.tolerance;
    report.passed = report.passed && c.passed;
    report.max_rel_error = std::max(report.max_rel_error, c.rel_error);
    report.tensors.push_back(std::move(c));
  };

  if (o.check_weights) {
    ModelState student = ModelState::random(fp, o.seed + 1);
    student.set_trainable(true);
    student.zero_grad();
    loss_at(student, teacher_trace, batch, o.mode, nullptr, true);
    auto f = [&] { return loss_at(student, teacher_trace, batch, o.mode, nullptr, false); };
    for (auto& [name, t] : student.named_parameters()) add(check_tensor(name, *t, f, o.step, false));
  }

  if (o.check_scales) {
    ModelConfig qc = o.model;
    qc.set_bits(o.bits_w, o.bits_e, o.bits_a);
    ModelState student = ModelState::random(fp, o.seed + 1);
    student.set_bits(o.bits_w, o.bits_e, o.bits_a);
    init_weight_scales(student, kDefaultTruncationRatio);
    calibrate_activations(student, batch, kDefaultTruncationRatio);
    student.set_trainable(true);
    student.zero_grad();

    RoundingFreeze freeze;
    loss_at(student, teacher_trace, batch, o.mode, &freeze, false);
    freeze.replay = true;
    loss_at(student, teacher_trace, batch, o.mode, &freeze, true);
    auto f = [&] { return loss_at(student, teacher_trace, batch, o.mode, &freeze, false); };
    for (ScaleFactor& sf : student.scales()) {
      const bool enabled = sf.kind == SiteKind::kActivation ? qc.bits_a < kFullPrecisionBits
                           : sf.site_id == kEmbeddingSiteId  ? qc.bits_e < kFullPrecisionBits
                                                             : qc.bits_w < kFullPrecisionBits;
      if (!enabled) continue;
      add(check_tensor("scale:" + sf.site_id, sf.value, f, o.step, true));
    }
  }
  return report;
}

}  // namespace kdlsq
