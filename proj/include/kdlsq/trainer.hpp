// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "kdlsq/dataset.hpp"
#include "kdlsq/distill.hpp"
#include "kdlsq/scale_init.hpp"
#include "kdlsq/transformer.hpp"

namespace kdlsq {

enum class ScaleInitMethod {
  kTruncation,  // percentile truncation on weights and calibration activations
  kConstant,    // fixed values for every weight / activation site
};

struct TrainConfig {
  int epochs = 3;
  std::size_t batch_size = 32;
  double lr_weights = 1e-3;
  double lr_scale_w = 1e-3;
  double lr_scale_a = 2e-2;
  LossMode mode = LossMode::kKdGt;
  std::uint64_t seed = 0;
  double gamma = kDefaultTruncationRatio;
  double dropout = 0.1;
  int bits_w = 8;
  int bits_e = 8;
  int bits_a = 8;
  ScaleInitMethod init = ScaleInitMethod::kTruncation;
  double const_weight_scale = 4.0;
  double const_activation_scale = 16.0;
  /// Evaluate on the test split every this many steps (0: only at the end).
  std::size_t eval_every = 0;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

/// lr0 * (1 - step / total_steps). Throws std::out_of_range when step > total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, double lr0);

enum class GroupKind { kWeights, kWeightScales, kActivationScales };

struct ParamGroup {
  GroupKind kind;
  std::vector<Tensor*> members;
  double base_lr = 0.0;
  double lr = 0.0;
};

/// Splits the student's trainable values into model weights, weight
/// scale-factors and activation scale-factors. Scale-factors of sites whose
/// class runs at full precision are frozen and belong to no group.
std::vector<ParamGroup> make_param_groups(ModelState& student, const TrainConfig& config);

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8). Each group
/// uses its own current learning rate; members of scale groups are floored at
/// kMinScale after the update.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Throws std::logic_error when a member has no gradient buffer.
  void step(std::span<ParamGroup> groups);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
  std::unordered_map<const Tensor*, Moments> moments_;
};

struct StepRecord {
  std::size_t step = 0;
  int epoch = 0;
  double lr_weights = 0.0;
  double lr_scale_w = 0.0;
  double lr_scale_a = 0.0;
  LossBreakdown loss;
  std::optional<double> eval_accuracy;
};

struct TrainResult {
  ModelState model;
  std::vector<StepRecord> steps;
  double final_accuracy = 0.0;
  std::vector<CalibrationRecord> calibration;
};

/// Raised when a step produces a NaN or infinite loss.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Distillation-aware quantization training. The student starts as a copy
/// of `teacher` with the configured W-E-A bits; its scale-factors are
/// initialized (weights from the pretrained values, activations from one
/// calibration batch), then every batch of every epoch computes the selected
/// loss against the frozen teacher, back-propagates, and updates weights and
/// scale-factors with per-group linearly decaying learning rates.
TrainResult train(const ModelState& teacher, const Dataset& data, const TrainConfig& config);

/// Trains a full-precision model from random initialization on the
/// ground-truth loss alone. Bits and mode in `config` are ignored.
TrainResult train_teacher(const ModelConfig& model_config, const Dataset& data, const TrainConfig& config);

/// Classification accuracy on `examples` with dropout off.
double evaluate(ModelState& model, std::span<const Example> examples, std::size_t batch_size = 64,
                ForwardMode mode = ForwardMode::kStudent);

/// Training order for one epoch: a permutation of [0, n) determined by seed and epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

}  // namespace kdlsq
