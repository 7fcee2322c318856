// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kdlsq/metrics.hpp"
#include "kdlsq/synthetic.hpp"
#include "kdlsq/trainer.hpp"
#include "kdlsq/transformer.hpp"

namespace kdlsq {

enum class ExperimentKind { kSingle, kBitSweep, kAblation, kInitCompare };

/// Which bit class a sweep varies.
enum class SweepAxis {
  kWeights,      // W-E over the sweep values, activations fixed
  kActivations,  // activations over the sweep values, W-E fixed
};

ExperimentKind parse_experiment_kind(std::string_view text);
std::string_view to_string(ExperimentKind kind);
SweepAxis parse_sweep_axis(std::string_view text);
std::string_view to_string(SweepAxis axis);

struct ExperimentSpec {
  std::string name = "experiment";
  ModelConfig model;
  TrainConfig train;          // student runs; bits/mode/init are overridden per run by the kind
  TrainConfig teacher_train;  // teacher runs when no checkpoint is given
  SyntheticTask task;
  ExperimentKind kind = ExperimentKind::kSingle;
  std::size_t repetitions = 5;
  std::uint64_t base_seed = 0;  // repetition r uses seed base_seed + r
  SweepAxis sweep_axis = SweepAxis::kWeights;
  std::vector<int> sweep_bits{2, 4, 6, 8};
  int sweep_fixed_activation_bits = 8;
  int sweep_fixed_weight_bits = 4;
  /// Shared teacher; when absent a teacher is trained per seed.
  std::optional<std::filesystem::path> teacher_checkpoint;

  void validate() const;
};

/// Loads an ExperimentSpec from JSON. Keys: name, kind, repetitions, base_seed, model,
/// train, teacher_train, task, sweep{axis, bits, fixed_activation_bits,
/// fixed_weight_bits}, teacher_checkpoint. Missing keys keep defaults.
ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
/// Applies the keys present in `j` on top of `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// One planned student run.
struct RunPlan {
  std::string run_id;
  std::string label;  // report row label
  TrainConfig train;
};

/// Expands the matrix for one seed: single gives 1 run, bit-sweep one per
/// sweep value, ablation the three loss modes, init-compare the two inits.
std::vector<RunPlan> plan_runs(const ExperimentSpec& spec, std::uint64_t seed);

struct ReportRow {
  std::string label;
  std::string bits;
  std::size_t runs = 0;    // finished runs aggregated
  std::size_t failed = 0;  // runs aborted with a non-finite loss
  double mean_accuracy = 0.0;
  double stddev_accuracy = 0.0;  // sample standard deviation, 0 for a single run
};

struct FailedRun {
  std::string run_id;
  std::string label;
  std::string bits;
  std::string error;
};

struct ExperimentReport {
  std::string name;
  ExperimentKind kind = ExperimentKind::kSingle;
  std::vector<double> teacher_accuracy;  // one entry per seed
  std::vector<RunSummary> runs;          // finished runs only
  std::vector<std::string> run_labels;   // parallel to `runs`
  std::vector<FailedRun> failures;
  std::vector<ReportRow> rows;

  bool all_finite() const noexcept { return failures.empty(); }
};

/// Groups runs by (label, bits) in first-appearance order and computes the
/// accuracy mean and sample standard deviation of each group.
std::vector<ReportRow> aggregate_runs(std::span<const RunSummary> runs, std::span<const std::string> labels,
                                      std::span<const FailedRun> failures = {});

/// Runs the full matrix and writes, under `out_dir`: teacher checkpoints (when
/// trained here), runs/<id>/{metrics.jsonl, student.json}, summary.csv,
/// report.csv and report.md. A run whose loss becomes non-finite is recorded
/// as failed and the experiment continues. Throws std::runtime_error when
/// the teacher checkpoint is missing.
ExperimentReport run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir);

/// Markdown table with one row per report row.
std::string format_report(const ExperimentReport& report);

}  // namespace kdlsq
