// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/distill.hpp"

#include <stdexcept>
#include <string>

#include "kdlsq/ops.hpp"

namespace kdlsq {
namespace {

Var sum_of_mse(const std::vector<Var>& s, const std::vector<Var>& t, const char* what) {
  if (s.size() != t.size() || s.empty()) {
    throw DimensionError(std::string(what) + ": student has " + std::to_string(s.size()) + " entries, teacher " +
                         std::to_string(t.size()));
  }
  Var acc = mse(s[0], t[0]);
  for (std::size_t l = 1; l < s.size(); ++l) acc = add(acc, mse(s[l], t[l]));
  return acc;
}

}  // namespace

LossMode parse_loss_mode(std::string_view text) {
  if (text == "gt-only") return LossMode::kGtOnly;
  if (text == "kd-only") return LossMode::kKdOnly;
  if (text == "kd+gt") return LossMode::kKdGt;
  throw std::invalid_argument("unknown loss mode '" + std::string(text) + "' (expected gt-only, kd-only, kd+gt)");
}

std::string_view to_string(LossMode mode) {
  switch (mode) {
    case LossMode::kGtOnly: return "gt-only";
    case LossMode::kKdOnly: return "kd-only";
    case LossMode::kKdGt: return "kd+gt";
  }
  return "?";
}

Var loss_hidden(const ForwardTrace& student, const ForwardTrace& teacher) {
  return sum_of_mse(student.hidden, teacher.hidden, "loss_hidden");
}

Var loss_att(const ForwardTrace& student, const ForwardTrace& teacher) {
  return sum_of_mse(student.scores, teacher.scores, "loss_att");
}

KdTerms loss_kd(const ForwardTrace& student, const ForwardTrace& teacher) {
  KdTerms t;
  t.hidden = loss_hidden(student, teacher);
  t.att = loss_att(student, teacher);
  t.trm = add(t.hidden, t.att);
  t.pre = soft_cross_entropy(student.logits, teacher.logits);
  t.kd = add(t.pre, t.trm);
  return t;
}

TotalLoss loss_total(const ForwardTrace& student, const ForwardTrace& teacher, std::span<const int> labels,
                     LossMode mode) {
  const KdTerms kd = loss_kd(student, teacher);
  const Var gt = cross_entropy(student.logits, labels);
  TotalLoss out;
  switch (mode) {
    case LossMode::kGtOnly: out.total = gt; break;
    case LossMode::kKdOnly: out.total = kd.kd; break;
    case LossMode::kKdGt: out.total = add(kd.kd, gt); break;
  }
  LossBreakdown& b = out.breakdown;
  b.hidden = kd.hidden.value().item();
  b.att = kd.att.value().item();
  b.trm = kd.trm.value().item();
  b.pre = kd.pre.value().item();
  b.kd = kd.kd.value().item();
  b.gt = gt.value().item();
  b.total = out.total.value().item();
  return out;
}

TotalLoss loss_ground_truth(const ForwardTrace& student, std::span<const int> labels) {
  TotalLoss out;
  out.total = cross_entropy(student.logits, labels);
  out.breakdown.gt = out.total.value().item();
  out.breakdown.total = out.breakdown.gt;
  return out;
}

}  // namespace kdlsq
