// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kdlsq/distill.hpp"
#include "kdlsq/trainer.hpp"

namespace kdlsq {

/// One row of the summary CSV.
struct RunSummary {
  std::string run_id;
  std::string bits;  // "W-E-A"
  LossMode mode = LossMode::kKdGt;
  std::uint64_t seed = 0;
  double final_accuracy = 0.0;
  LossBreakdown final_loss;
  double size_bytes = 0.0;
  double ratio = 1.0;

  friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

nlohmann::json loss_to_json(const LossBreakdown& loss);
LossBreakdown loss_from_json(const nlohmann::json& j);
nlohmann::json step_to_json(const StepRecord& rec);
StepRecord step_from_json(const nlohmann::json& j);

/// Column names of the summary CSV, in order.
std::vector<std::string> summary_columns();
std::string summary_csv_header();
/// Doubles are printed with 17 significant digits so rows parse back exactly.
std::string summary_csv_row(const RunSummary& run);
RunSummary parse_summary_csv_row(const std::string& line);

/// Writes `steps` as JSON lines and `runs` as a CSV summary (header always
/// present). Both files are rewritten from scratch, so emitting twice gives
/// identical bytes. Throws std::runtime_error when a file cannot be written.
void emit_metrics(std::span<const StepRecord> steps, std::span<const RunSummary> runs,
                  const std::filesystem::path& jsonl_path, const std::filesystem::path& csv_path);

void write_steps_jsonl(std::span<const StepRecord> steps, const std::filesystem::path& path);
std::vector<StepRecord> read_steps_jsonl(const std::filesystem::path& path);
void write_summary_csv(std::span<const RunSummary> runs, const std::filesystem::path& path);
std::vector<RunSummary> read_summary_csv(const std::filesystem::path& path);

}  // namespace kdlsq
