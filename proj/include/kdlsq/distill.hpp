// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string_view>

#include "kdlsq/transformer.hpp"

namespace kdlsq {

/// Which terms make up the training objective.
enum class LossMode {
  kGtOnly,  // ground truth only ("LSQ")
  kKdOnly,  // distillation only ("LSQ+KD")
  kKdGt,    // distillation plus ground truth ("LSQ+KD+Lgt")
};

/// Accepts "gt-only", "kd-only", "kd+gt"; throws std::invalid_argument otherwise.
LossMode parse_loss_mode(std::string_view text);
std::string_view to_string(LossMode mode);

/// Scalar values of every loss component for one step.
struct LossBreakdown {
  double hidden = 0.0;
  double att = 0.0;
  double trm = 0.0;  // hidden + att
  double pre = 0.0;
  double kd = 0.0;  // pre + trm
  double gt = 0.0;
  double total = 0.0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Sum over every hidden state (embedding output and each layer output) of
/// the MSE between student and teacher.
Var loss_hidden(const ForwardTrace& student, const ForwardTrace& teacher);
/// Sum over layers of the MSE between attention score tensors.
Var loss_att(const ForwardTrace& student, const ForwardTrace& teacher);

struct KdTerms {
  Var hidden;
  Var att;
  Var trm;
  Var pre;
  Var kd;
};

KdTerms loss_kd(const ForwardTrace& student, const ForwardTrace& teacher);

struct TotalLoss {
  Var total;
  LossBreakdown breakdown;
};

/// Every component is evaluated regardless of mode; `mode` only selects what
/// goes into `total`.
TotalLoss loss_total(const ForwardTrace& student, const ForwardTrace& teacher, std::span<const int> labels,
                     LossMode mode);

/// Ground-truth-only objective when no teacher exists (teacher training).
/// Distillation components are reported as zero.
TotalLoss loss_ground_truth(const ForwardTrace& student, std::span<const int> labels);

}  // namespace kdlsq
