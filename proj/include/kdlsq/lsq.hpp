// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kdlsq/graph.hpp"

namespace kdlsq {

/// Smallest value a scale-factor may take.
inline constexpr double kMinScale = 1e-8;

enum class SiteKind { kWeight, kActivation };

struct QuantLevels {
  std::int64_t qn = 0;
  std::int64_t qp = 0;
};

/// Integer level magnitudes for a bit width. Signed tensors get the
/// symmetric range Qn = Qp = 2^(b-1) - 1; unsigned tensors get Qn = 0,
/// Qp = 2^b - 1. Throws std::invalid_argument when bits < 2 or bits > 32.
QuantLevels quant_levels(int bits, bool is_signed);

struct QuantSpec {
  QuantSpec(int bits, bool is_signed);

  int bits;
  bool is_signed;
  std::int64_t qn;
  std::int64_t qp;
};

/// A learnable positive step attached to one quantization site.
struct ScaleFactor {
  ScaleFactor(std::string site_id, SiteKind kind);

  double get() const { return value.item(); }
  /// Sets the value, flooring it at kMinScale, and marks the site initialized.
  void set(double s);
  /// Re-applies the positivity floor after an optimizer update.
  void clamp_to_floor();

  std::string site_id;
  SiteKind kind;
  Tensor value;  // shape [1], requires grad
  bool initialized = false;
};

/// Round half to even.
double round_half_even(double x);

// Scalar forms of the quantizer and of its three gradient rules.

/// round(clamp(v / s, -Qn, Qp)) * s.
double quantize_value(double v, double s, const QuantSpec& spec);
/// d v_hat / d s: -v/s + round(v/s) strictly inside (-Qn, Qp), -Qn below, Qp above.
double grad_scale(double v, double s, const QuantSpec& spec);
/// Straight-through mask for activations: 1 strictly inside (-Qn, Qp), else 0.
double grad_activation(double x, double s, const QuantSpec& spec);
/// Weights pass gradients through unchanged, clipped or not.
double grad_weight(double w, double s, const QuantSpec& spec);

/// Where v/s falls relative to the clipping range. Points exactly on a
/// boundary count as saturated.
enum class QuantRegion : std::int8_t { kBelow = -1, kInside = 0, kAbove = 1 };
QuantRegion quant_region(double v, double s, const QuantSpec& spec);

/// Region and rounding residual round(v/s) - v/s for every element of a
/// tensor at a fixed scale. Replaying a snapshot turns the quantizer into the
/// smooth surrogate v + s * residual whose exact derivatives are the
/// straight-through rules; finite-difference checks of the scale gradient use
/// it.
struct RoundingSnapshot {
  std::vector<QuantRegion> region;
  std::vector<double> residual;
};

RoundingSnapshot capture_rounding(const Tensor& v, double s, const QuantSpec& spec);

/// Fake quantization node. Forward is quantize_value element-wise; backward
/// sends grad_scale terms (summed) to `s` and, to `v`, either the activation
/// mask or the weight pass-through depending on `kind`. With `frozen`, the
/// forward uses the snapshot's regions and residuals instead of rounding.
/// Throws std::domain_error when s is not positive.
Var fake_quantize(Var v, Var s, const QuantSpec& spec, SiteKind kind, const RoundingSnapshot* frozen = nullptr);

}  // namespace kdlsq
