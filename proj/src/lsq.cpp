// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/lsq.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kdlsq {

QuantLevels quant_levels(int bits, bool is_signed) {
  if (bits < 2 || bits > 32) {
    throw std::invalid_argument("quant_levels: bits must lie in [2, 32], got " + std::to_string(bits));
  }
  if (is_signed) {
    const std::int64_t q = (std::int64_t{1} << (bits - 1)) - 1;
    return {q, q};
  }
  return {0, (std::int64_t{1} << bits) - 1};
}

QuantSpec::QuantSpec(int bits_, bool is_signed_) : bits(bits_), is_signed(is_signed_) {
  const QuantLevels l = quant_levels(bits, is_signed);
  qn = l.qn;
  qp = l.qp;
}

ScaleFactor::ScaleFactor(std::string id, SiteKind k) : site_id(std::move(id)), kind(k), value(Tensor::scalar(1.0)) {
  value.set_requires_grad(true);
}

void ScaleFactor::set(double s) {
  value[0] = std::isfinite(s) ? std::max(s, kMinScale) : kMinScale;
  initialized = true;
}

void ScaleFactor::clamp_to_floor() {
  if (!(value[0] >= kMinScale)) value[0] = kMinScale;
}

double round_half_even(double x) {
  if (std::abs(x - std::trunc(x)) == 0.5) return 2.0 * std::round(x / 2.0);
  return std::round(x);
}

QuantRegion quant_region(double v, double s, const QuantSpec& spec) {
  const double z = v / s;
  if (z <= -static_cast<double>(spec.qn)) return QuantRegion::kBelow;
  if (z >= static_cast<double>(spec.qp)) return QuantRegion::kAbove;
  return QuantRegion::kInside;
}

double quantize_value(double v, double s, const QuantSpec& spec) {
  switch (quant_region(v, s, spec)) {
    case QuantRegion::kBelow:
      return -static_cast<double>(spec.qn) * s;
    case QuantRegion::kAbove:
      return static_cast<double>(spec.qp) * s;
    case QuantRegion::kInside:
      break;
  }
  return round_half_even(v / s) * s;
}

double grad_scale(double v, double s, const QuantSpec& spec) {
  switch (quant_region(v, s, spec)) {
    case QuantRegion::kBelow:
      return -static_cast<double>(spec.qn);
    case QuantRegion::kAbove:
      return static_cast<double>(spec.qp);
    case QuantRegion::kInside:
      break;
  }
  const double z = v / s;
  return -z + round_half_even(z);
}

double grad_activation(double x, double s, const QuantSpec& spec) {
  return quant_region(x, s, spec) == QuantRegion::kInside ? 1.0 : 0.0;
}

double grad_weight(double, double, const QuantSpec&) { return 1.0; }

RoundingSnapshot capture_rounding(const Tensor& v, double s, const QuantSpec& spec) {
  RoundingSnapshot snap;
  snap.region.reserve(v.size());
  snap.residual.reserve(v.size());
  for (double x : v.data()) {
    const QuantRegion r = quant_region(x, s, spec);
    snap.region.push_back(r);
    const double z = x / s;
    snap.residual.push_back(r == QuantRegion::kInside ? round_half_even(z) - z : 0.0);
  }
  return snap;
}

Var fake_quantize(Var v, Var s, const QuantSpec& spec, SiteKind kind, const RoundingSnapshot* frozen) {
  if (s.value().size() != 1) throw DimensionError("fake_quantize: scale must be a scalar");
  const double sv = s.value()[0];
  if (!(sv > 0.0)) {
    throw std::domain_error("fake_quantize: scale-factor must be positive, got " + std::to_string(sv));
  }
  const auto in = v.value().data();
  if (frozen && (frozen->region.size() != in.size() || frozen->residual.size() != in.size())) {
    throw DimensionError("fake_quantize: rounding snapshot does not match input size");
  }
  const double qn = static_cast<double>(spec.qn);
  const double qp = static_cast<double>(spec.qp);

  Tensor out(v.shape(), 0.0);
  auto o = out.data();
  // Per-element d v_hat / d s, and whether the element is inside the range.
  std::vector<double> dscale(in.size());
  std::vector<unsigned char> inside(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const QuantRegion r = frozen ? frozen->region[i] : quant_region(in[i], sv, spec);
    inside[i] = r == QuantRegion::kInside;
    switch (r) {
      case QuantRegion::kBelow:
        o[i] = -qn * sv;
        dscale[i] = -qn;
        break;
      case QuantRegion::kAbove:
        o[i] = qp * sv;
        dscale[i] = qp;
        break;
      case QuantRegion::kInside: {
        if (frozen) {
          o[i] = in[i] + sv * frozen->residual[i];
          dscale[i] = frozen->residual[i];
        } else {
          const double z = in[i] / sv;
          const double q = round_half_even(z);
          o[i] = q * sv;
          dscale[i] = q - z;
        }
        break;
      }
    }
  }

  return v.graph().record(
      std::move(out), {v, s},
      [kind, dscale = std::move(dscale), inside = std::move(inside)](BackwardContext& ctx) {
        const auto g = ctx.grad_output();
        if (auto gv = ctx.grad_input(0); !gv.empty()) {
          if (kind == SiteKind::kWeight) {
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) {
              if (inside[i]) gv[i] += g[i];
            }
          }
        }
        if (auto gs = ctx.grad_input(1); !gs.empty()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * dscale[i];
          gs[0] += acc;
        }
      });
}

}  // namespace kdlsq
