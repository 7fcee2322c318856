// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/scale_init.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kdlsq {
namespace {

bool retains(std::span<const double> values, double s, double gamma) {
  const double n = static_cast<double>(values.size());
  return retention(values, s) * n + 1e-9 * n >= (1.0 - gamma) * n;
}

}  // namespace

double init_scale_factor(std::span<const double> values, double gamma) {
  if (values.empty()) throw std::invalid_argument("init_scale_factor: empty tensor");
  if (!(gamma >= 0.0 && gamma < 0.5)) {
    throw std::invalid_argument("init_scale_factor: truncation ratio must lie in [0, 0.5), got " +
                                std::to_string(gamma));
  }
  const std::size_t n = values.size();
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto boundary = [&](std::size_t cut) {
    const std::size_t k = std::min(cut, n - 1);
    return std::max(std::abs(sorted[k]), std::abs(sorted[n - 1 - k]));
  };
  // round() can overshoot gamma * n / 2 and clip more than a gamma fraction;
  // back off one element per tail until the retention bound holds again.
  auto cut = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(n) / 2.0));
  double s = boundary(cut);
  while (cut > 0 && !retains(values, s, gamma)) s = boundary(--cut);
  return std::max(s, kMinScale);
}

double init_scale_factor(const Tensor& m, double gamma) { return init_scale_factor(m.data(), gamma); }

double retention(std::span<const double> values, double s) {
  if (values.empty()) return 1.0;
  const auto kept = std::count_if(values.begin(), values.end(), [s](double x) { return std::abs(x) <= s; });
  return static_cast<double>(kept) / static_cast<double>(values.size());
}

std::vector<CalibrationRecord> init_weight_scales(ModelState& model, double gamma) {
  std::vector<CalibrationRecord> records;
  for (ScaleFactor& site : model.scales()) {
    if (site.kind != SiteKind::kWeight) continue;
    const Tensor* w = model.weight_of(site.site_id);
    site.set(init_scale_factor(*w, gamma));
    records.push_back({site.site_id, SiteKind::kWeight, Tensor(w->shape(), w->values()), site.get()});
  }
  return records;
}

std::map<std::string, double> calibrate_activations(ModelState& model, const Batch& batch, double gamma,
                                                    std::vector<CalibrationRecord>* records) {
  ActivationCapture capture;
  {
    Graph graph;
    NoGradGuard no_grad(graph);
    ForwardOptions options;
    options.capture = &capture;
    forward_model(graph, model, batch, options);
  }
  std::map<std::string, double> result;
  for (ScaleFactor& site : model.scales()) {
    if (site.kind != SiteKind::kActivation) continue;
    auto it = capture.find(site.site_id);
    if (it == capture.end() || it->second.empty()) {
      throw std::logic_error("calibration: no activation captured for site '" + site.site_id + "'");
    }
    site.set(init_scale_factor(it->second, gamma));
    result.emplace(site.site_id, site.get());
    if (records) records->push_back({site.site_id, SiteKind::kActivation, std::move(it->second), site.get()});
  }
  return result;
}

void init_scales_constant(ModelState& model, double weight_value, double activation_value) {
  for (ScaleFactor& site : model.scales()) {
    site.set(site.kind == SiteKind::kWeight ? weight_value : activation_value);
  }
}

}  // namespace kdlsq
