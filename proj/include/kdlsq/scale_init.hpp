// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdlsq/lsq.hpp"
#include "kdlsq/transformer.hpp"

namespace kdlsq {

/// Default truncation ratio: 95% of each tensor survives clipping.
inline constexpr double kDefaultTruncationRatio = 0.05;

/// Truncation-based scale-factor initialization.
///
/// Sorts the values ascending, drops round(gamma * n / 2) elements from each
/// tail, and returns the larger magnitude of the two surviving boundary
/// values (zero-based indices k and n - k - 1), floored at kMinScale. At
/// least a fraction 1 - gamma of the elements satisfy |x| <= s_init.
///
/// Throws std::invalid_argument for an empty input or gamma outside [0, 0.5).
double init_scale_factor(std::span<const double> values, double gamma);
double init_scale_factor(const Tensor& m, double gamma);

/// Fraction of elements with |x| <= s.
double retention(std::span<const double> values, double s);

struct CalibrationRecord {
  std::string site_id;
  SiteKind kind = SiteKind::kWeight;
  Tensor snapshot;
  double s_init = 0.0;
};

/// Initializes every weight site from the current weight values.
std::vector<CalibrationRecord> init_weight_scales(ModelState& model, double gamma);

/// Runs one full-precision forward pass on `batch`, captures the input of
/// every activation site and initializes its scale-factor. Returns site id ->
/// s_init. Throws std::logic_error when a site received no activation.
std::map<std::string, double> calibrate_activations(ModelState& model, const Batch& batch, double gamma,
                                                    std::vector<CalibrationRecord>* records = nullptr);

/// Fixed-constant initialization used as the baseline in the init comparison.
void init_scales_constant(ModelState& model, double weight_value, double activation_value);

}  // namespace kdlsq
