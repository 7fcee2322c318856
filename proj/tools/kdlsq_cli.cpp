// SPDX-License-Identifier: Apache-2.0
// Command-line front end: teacher training, quantization runs, experiment
// matrices, gradient checking and model-size accounting.
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kdlsq/checkpoint.hpp"
#include "kdlsq/experiment.hpp"
#include "kdlsq/gradcheck.hpp"
#include "kdlsq/metrics.hpp"
#include "kdlsq/model_size.hpp"
#include "kdlsq/synthetic.hpp"
#include "kdlsq/trainer.hpp"

namespace fs = std::filesystem;
using namespace kdlsq;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string bits;
  std::string mode;
  std::string init;
  int epochs = 0;
  std::size_t batch_size = 0;
  double lr_weights = 0.0;
  std::size_t eval_every = 0;
  std::string teacher;
  std::size_t repetitions = 0;
};

void add_run_flags(CLI::App* cmd, Common& c, bool quantized) {
  cmd->add_option("--config", c.config, "JSON experiment file (model, task, train, teacher_train)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Run seed")->required();
  cmd->add_option("--out-dir", c.out_dir, "Output directory")->required();
  cmd->add_option("--epochs", c.epochs, "Override epochs");
  cmd->add_option("--batch-size", c.batch_size, "Override batch size");
  cmd->add_option("--lr-weights", c.lr_weights, "Override the model-weight learning rate");
  cmd->add_option("--eval-every", c.eval_every, "Evaluate every N steps");
  if (quantized) {
    cmd->add_option("--bits", c.bits, "W-E-A bit widths, e.g. 2-2-8");
    cmd->add_option("--mode", c.mode, "gt-only | kd-only | kd+gt");
    cmd->add_option("--init", c.init, "truncation | constant");
    cmd->add_option("--teacher", c.teacher, "Teacher checkpoint (JSON)")->check(CLI::ExistingFile);
  }
}

ExperimentSpec load_spec(const Common& c) {
  ExperimentSpec spec;
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw std::runtime_error("cannot read " + c.config);
    spec = experiment_spec_from_json(nlohmann::json::parse(in));
  }
  auto apply = [&](TrainConfig& t) {
    if (c.epochs > 0) t.epochs = c.epochs;
    if (c.batch_size > 0) t.batch_size = c.batch_size;
    if (c.lr_weights > 0.0) t.lr_weights = c.lr_weights;
    if (c.eval_every > 0) t.eval_every = c.eval_every;
    t.seed = c.seed;
  };
  apply(spec.train);
  apply(spec.teacher_train);
  if (!c.bits.empty()) std::tie(spec.train.bits_w, spec.train.bits_e, spec.train.bits_a) = parse_bits(c.bits);
  if (!c.mode.empty()) spec.train.mode = parse_loss_mode(c.mode);
  if (!c.init.empty()) {
    spec.train = train_config_from_json(nlohmann::json{{"init", c.init}}, spec.train);
  }
  if (!c.teacher.empty()) spec.teacher_checkpoint = c.teacher;
  if (c.repetitions > 0) spec.repetitions = c.repetitions;
  spec.base_seed = c.seed;
  return spec;
}

RunSummary summarize(const std::string& run_id, const TrainConfig& t, const ModelConfig& base,
                     const TrainResult& res) {
  ModelConfig mc = base;
  mc.set_bits(t.bits_w, t.bits_e, t.bits_a);
  const ModelSize size = quantized_model_size(mc);
  RunSummary s;
  s.run_id = run_id;
  s.bits = mc.bits_label();
  s.mode = t.mode;
  s.seed = t.seed;
  s.final_accuracy = res.final_accuracy;
  if (!res.steps.empty()) s.final_loss = res.steps.back().loss;
  s.size_bytes = size.bytes;
  s.ratio = size.ratio;
  return s;
}

int cmd_train_teacher(const Common& c) {
  const ExperimentSpec spec = load_spec(c);
  const Dataset data = gen_synthetic_task(spec.task);
  const TrainResult res = train_teacher(spec.model, data, spec.teacher_train);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  save_checkpoint(res.model, out / "teacher.json");
  TrainConfig t = spec.teacher_train;
  t.bits_w = t.bits_e = t.bits_a = kFullPrecisionBits;
  t.mode = LossMode::kGtOnly;
  const RunSummary rows[] = {summarize("teacher_s" + std::to_string(c.seed), t, spec.model, res)};
  emit_metrics(res.steps, rows, out / "metrics.jsonl", out / "summary.csv");
  std::printf("teacher accuracy %.4f -> %s\n", res.final_accuracy, (out / "teacher.json").c_str());
  return 0;
}

int cmd_train(const Common& c) {
  const ExperimentSpec spec = load_spec(c);
  if (!spec.teacher_checkpoint) throw std::runtime_error("train: --teacher (or teacher_checkpoint) is required");
  const ModelState teacher = load_checkpoint(*spec.teacher_checkpoint);
  const Dataset data = gen_synthetic_task(spec.task);
  const TrainResult res = train(teacher, data, spec.train);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  save_checkpoint(res.model, out / "student.json");
  const RunSummary rows[] = {summarize(spec.name + "_s" + std::to_string(c.seed), spec.train, teacher.config(), res)};
  emit_metrics(res.steps, rows, out / "metrics.jsonl", out / "summary.csv");
  std::printf("%s %s accuracy %.4f\n", rows[0].bits.c_str(), std::string(to_string(spec.train.mode)).c_str(),
              res.final_accuracy);
  return 0;
}

int cmd_experiment(const Common& c, ExperimentKind kind, const std::string& axis) {
  ExperimentSpec spec = load_spec(c);
  spec.kind = kind;
  if (!axis.empty()) spec.sweep_axis = parse_sweep_axis(axis);
  const ExperimentReport report = run_experiment(spec, c.out_dir);
  std::cout << format_report(report);
  return report.all_finite() ? 0 : 1;
}

int cmd_eval(const std::string& checkpoint, const std::string& config, bool teacher_mode) {
  ModelState model = load_checkpoint(checkpoint);
  SyntheticTask task;
  if (!config.empty()) {
    std::ifstream in(config);
    if (!in) throw std::runtime_error("cannot read " + config);
    task = experiment_spec_from_json(nlohmann::json::parse(in)).task;
  }
  const Dataset data = gen_synthetic_task(task);
  const double acc =
      evaluate(model, data.test, 64, teacher_mode ? ForwardMode::kTeacher : ForwardMode::kStudent);
  std::printf("%s accuracy %.4f on %zu test examples\n", model.config().bits_label().c_str(), acc, data.test.size());
  return 0;
}

int cmd_gradcheck(GradcheckOptions o, const std::string& bits) {
  if (!bits.empty()) std::tie(o.bits_w, o.bits_e, o.bits_a) = parse_bits(bits);
  const GradcheckReport r = run_gradcheck(o);
  for (const TensorCheck& t : r.tensors) {
    std::printf("%-4s %-36s n=%-6zu |g|=%.3e rel=%.3e\n", t.passed ? "ok" : "FAIL", t.name.c_str(), t.numel,
                t.analytic_norm, t.rel_error);
  }
  std::printf("max relative error %.3e (tolerance %.1e): %s\n", r.max_rel_error, o.tolerance,
              r.passed ? "PASS" : "FAIL");
  return r.passed ? 0 : 1;
}

int cmd_size(const std::string& config, ModelConfig mc, const std::string& bits) {
  if (!config.empty()) {
    std::ifstream in(config);
    if (!in) throw std::runtime_error("cannot read " + config);
    mc = experiment_spec_from_json(nlohmann::json::parse(in)).model;
  }
  if (!bits.empty()) {
    const auto [w, e, a] = parse_bits(bits);
    mc.set_bits(w, e, a);
  }
  const ModelSize s = quantized_model_size(mc);
  std::printf("bits %s: %.0f bytes (%.2f MiB), full precision %.2f MiB, ratio x%.2f, %zu scale-factors\n",
              mc.bits_label().c_str(), s.bytes, s.mib(), s.fp_mib(), s.ratio, s.scale_factors);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distillation-aware learned-step-size quantization on a small Transformer"};
  app.require_subcommand(1);

  Common common;
  std::string axis = "weights";

  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train a full-precision teacher on the synthetic task");
  add_run_flags(teacher_cmd, common, false);

  auto* train_cmd = app.add_subcommand("train", "Quantize a teacher into a student");
  add_run_flags(train_cmd, common, true);

  auto* sweep_cmd = app.add_subcommand("sweep", "Bit-width sweep over seeds");
  add_run_flags(sweep_cmd, common, true);
  sweep_cmd->add_option("--axis", axis, "weights (W-E vary, A fixed) | activations (A varies, W-E fixed)")
      ->check(CLI::IsMember({"weights", "activations"}));
  auto* ablation_cmd = app.add_subcommand("ablation", "Loss-mode ablation over seeds");
  add_run_flags(ablation_cmd, common, true);
  auto* init_cmd = app.add_subcommand("init-compare", "Truncation vs constant scale-factor initialization");
  add_run_flags(init_cmd, common, true);
  for (auto* cmd : {sweep_cmd, ablation_cmd, init_cmd}) {
    cmd->add_option("--repetitions", common.repetitions, "Number of seeds (consecutive from --seed)");
  }

  std::string eval_checkpoint, eval_config;
  bool eval_teacher = false;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on the synthetic test split");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint (JSON)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", eval_config, "JSON file with the task section")->check(CLI::ExistingFile);
  eval_cmd->add_flag("--full-precision", eval_teacher, "Ignore quantization (teacher mode)");

  GradcheckOptions gc;
  std::string gc_bits;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the training gradients");
  gc_cmd->add_option("--bits", gc_bits, "W-E-A bits for the scale-factor check");
  gc_cmd->add_option("--seed", gc.seed, "Seed");
  gc_cmd->add_option("--step", gc.step, "Central-difference step");
  gc_cmd->add_option("--tolerance", gc.tolerance, "Relative error tolerance");

  ModelConfig size_cfg;
  std::string size_config, size_bits;
  auto* size_cmd = app.add_subcommand("size", "Model size and compression ratio");
  size_cmd->add_option("--config", size_config, "JSON file with a model section")->check(CLI::ExistingFile);
  size_cmd->add_option("--bits", size_bits, "W-E-A bits");
  size_cmd->add_option("--layers", size_cfg.layers);
  size_cmd->add_option("--hidden", size_cfg.hidden);
  size_cmd->add_option("--heads", size_cfg.heads);
  size_cmd->add_option("--ffn", size_cfg.ffn);
  size_cmd->add_option("--vocab", size_cfg.vocab);
  size_cmd->add_option("--max-seq", size_cfg.max_seq);
  size_cmd->add_option("--classes", size_cfg.num_classes);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*teacher_cmd) return cmd_train_teacher(common);
    if (*train_cmd) return cmd_train(common);
    if (*sweep_cmd) return cmd_experiment(common, ExperimentKind::kBitSweep, axis);
    if (*ablation_cmd) return cmd_experiment(common, ExperimentKind::kAblation, "");
    if (*init_cmd) return cmd_experiment(common, ExperimentKind::kInitCompare, "");
    if (*eval_cmd) return cmd_eval(eval_checkpoint, eval_config, eval_teacher);
    if (*gc_cmd) return cmd_gradcheck(gc, gc_bits);
    if (*size_cmd) return cmd_size(size_config, size_cfg, size_bits);
  } catch (const NonFiniteLossError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
