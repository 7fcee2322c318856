// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kdlsq/distill.hpp"
#include "kdlsq/transformer.hpp"

namespace kdlsq {

struct GradcheckOptions {
  ModelConfig model;  // defaults: L=2, d=32
  int bits_w = 4;     // bits used for the scale-factor check
  int bits_e = 4;
  int bits_a = 8;
  LossMode mode = LossMode::kKdGt;
  std::size_t batch = 4;
  std::size_t seq_len = 7;
  double step = 1e-3;
  double tolerance = 1e-3;
  std::uint64_t seed = 7;
  bool check_weights = true;
  bool check_scales = true;
};

struct TensorCheck {
  std::string name;
  std::size_t numel = 0;
  double analytic_norm = 0.0;
  double rel_error = 0.0;  // ||a - f|| / max(||a||, ||f||), 0 when both vanish
  bool passed = false;
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares backpropagated gradients of the total loss against central
/// differences, with dropout off and a fixed random teacher trace.
///
/// Model weights are checked with quantization disabled, where the loss is
/// smooth. Scale-factors are checked at the configured bits with every
/// quantizer replaying a recorded rounding snapshot: the replayed surrogate
/// equals the quantized forward at the base point and its exact derivative
/// with respect to s is the straight-through scale rule.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

/// Relative error between two gradient vectors.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

}  // namespace kdlsq
