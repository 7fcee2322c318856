// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "kdlsq/checkpoint.hpp"
#include "kdlsq/model_size.hpp"

namespace kdlsq {

namespace {

std::string mode_label(LossMode m) {
  switch (m) {
    case LossMode::kGtOnly: return "LSQ";
    case LossMode::kKdOnly: return "LSQ+KD";
    case LossMode::kKdGt: return "LSQ+KD+Lgt";
  }
  return "?";
}

std::string bits_of(const TrainConfig& c) {
  return std::to_string(c.bits_w) + "-" + std::to_string(c.bits_e) + "-" + std::to_string(c.bits_a);
}

std::string init_slug(ScaleInitMethod m) { return m == ScaleInitMethod::kTruncation ? "trunc" : "const"; }

std::string mode_slug(LossMode m) {
  switch (m) {
    case LossMode::kGtOnly: return "gt";
    case LossMode::kKdOnly: return "kd";
    case LossMode::kKdGt: return "kdgt";
  }
  return "?";
}

RunPlan make_plan(const ExperimentSpec& spec, TrainConfig cfg, std::string label) {
  RunPlan p;
  p.run_id = spec.name + "_" + bits_of(cfg) + "_" + mode_slug(cfg.mode) + "_" + init_slug(cfg.init) + "_s" +
             std::to_string(cfg.seed);
  p.label = std::move(label);
  p.train = std::move(cfg);
  return p;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string fmt(double x, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

}  // namespace

ExperimentKind parse_experiment_kind(std::string_view t) {
  if (t == "single") return ExperimentKind::kSingle;
  if (t == "bit-sweep") return ExperimentKind::kBitSweep;
  if (t == "ablation") return ExperimentKind::kAblation;
  if (t == "init-compare") return ExperimentKind::kInitCompare;
  throw std::invalid_argument("unknown experiment kind '" + std::string(t) + "'");
}

std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kSingle: return "single";
    case ExperimentKind::kBitSweep: return "bit-sweep";
    case ExperimentKind::kAblation: return "ablation";
    case ExperimentKind::kInitCompare: return "init-compare";
  }
  return "?";
}

SweepAxis parse_sweep_axis(std::string_view t) {
  if (t == "weights") return SweepAxis::kWeights;
  if (t == "activations") return SweepAxis::kActivations;
  throw std::invalid_argument("unknown sweep axis '" + std::string(t) + "'");
}

std::string_view to_string(SweepAxis a) { return a == SweepAxis::kWeights ? "weights" : "activations"; }

void ExperimentSpec::validate() const {
  if (repetitions < 1) throw std::invalid_argument("repetitions must be >= 1");
  if (name.empty() || name.find_first_of(",/\\\n\"") != std::string::npos) {
    throw std::invalid_argument("experiment name must be non-empty without separators");
  }
  model.validate();
  task.validate();
  train.validate();
  if (kind == ExperimentKind::kBitSweep) {
    if (sweep_bits.empty()) throw std::invalid_argument("bit sweep needs at least one value");
    for (int b : sweep_bits) {
      if (b != 2 && b != 4 && b != 6 && b != 8) throw std::invalid_argument("sweep bits must lie in {2, 4, 6, 8}");
    }
  }
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_weights", c.lr_weights},
          {"lr_scale_w", c.lr_scale_w},
          {"lr_scale_a", c.lr_scale_a},
          {"mode", std::string(to_string(c.mode))},
          {"seed", c.seed},
          {"gamma", c.gamma},
          {"dropout", c.dropout},
          {"bits", bits_of(c)},
          {"init", c.init == ScaleInitMethod::kTruncation ? "truncation" : "constant"},
          {"const_weight_scale", c.const_weight_scale},
          {"const_activation_scale", c.const_activation_scale},
          {"eval_every", c.eval_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_weights = j.value("lr_weights", c.lr_weights);
  c.lr_scale_w = j.value("lr_scale_w", c.lr_scale_w);
  c.lr_scale_a = j.value("lr_scale_a", c.lr_scale_a);
  if (j.contains("mode")) c.mode = parse_loss_mode(j.at("mode").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.gamma = j.value("gamma", c.gamma);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("bits")) std::tie(c.bits_w, c.bits_e, c.bits_a) = parse_bits(j.at("bits").get<std::string>());
  if (j.contains("init")) {
    const auto s = j.at("init").get<std::string>();
    if (s == "truncation") {
      c.init = ScaleInitMethod::kTruncation;
    } else if (s == "constant") {
      c.init = ScaleInitMethod::kConstant;
    } else {
      throw std::invalid_argument("unknown init method '" + s + "'");
    }
  }
  c.const_weight_scale = j.value("const_weight_scale", c.const_weight_scale);
  c.const_activation_scale = j.value("const_activation_scale", c.const_activation_scale);
  c.eval_every = j.value("eval_every", c.eval_every);
  return c;
}

ExperimentSpec experiment_spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  s.name = j.value("name", s.name);
  if (j.contains("kind")) s.kind = parse_experiment_kind(j.at("kind").get<std::string>());
  s.repetitions = j.value("repetitions", s.repetitions);
  s.base_seed = j.value("base_seed", s.base_seed);
  if (j.contains("model")) s.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) s.train = train_config_from_json(j.at("train"));
  if (j.contains("teacher_train")) s.teacher_train = train_config_from_json(j.at("teacher_train"));
  if (j.contains("task")) s.task = synthetic_task_from_json(j.at("task"));
  if (j.contains("sweep")) {
    const auto& sw = j.at("sweep");
    if (sw.contains("axis")) s.sweep_axis = parse_sweep_axis(sw.at("axis").get<std::string>());
    s.sweep_bits = sw.value("bits", s.sweep_bits);
    s.sweep_fixed_activation_bits = sw.value("fixed_activation_bits", s.sweep_fixed_activation_bits);
    s.sweep_fixed_weight_bits = sw.value("fixed_weight_bits", s.sweep_fixed_weight_bits);
  }
  if (j.contains("teacher_checkpoint") && !j.at("teacher_checkpoint").is_null()) {
    s.teacher_checkpoint = j.at("teacher_checkpoint").get<std::string>();
  }
  return s;
}

std::vector<RunPlan> plan_runs(const ExperimentSpec& spec, std::uint64_t seed) {
  TrainConfig base = spec.train;
  base.seed = seed;
  std::vector<RunPlan> out;
  switch (spec.kind) {
    case ExperimentKind::kSingle:
      out.push_back(make_plan(spec, base, mode_label(base.mode)));
      break;
    case ExperimentKind::kBitSweep:
      for (int b : spec.sweep_bits) {
        TrainConfig c = base;
        if (spec.sweep_axis == SweepAxis::kWeights) {
          c.bits_w = c.bits_e = b;
          c.bits_a = spec.sweep_fixed_activation_bits;
        } else {
          c.bits_w = c.bits_e = spec.sweep_fixed_weight_bits;
          c.bits_a = b;
        }
        out.push_back(make_plan(spec, c, mode_label(c.mode)));
      }
      break;
    case ExperimentKind::kAblation:
      for (LossMode m : {LossMode::kGtOnly, LossMode::kKdOnly, LossMode::kKdGt}) {
        TrainConfig c = base;
        c.mode = m;
        out.push_back(make_plan(spec, c, mode_label(m)));
      }
      break;
    case ExperimentKind::kInitCompare:
      for (ScaleInitMethod m : {ScaleInitMethod::kTruncation, ScaleInitMethod::kConstant}) {
        TrainConfig c = base;
        c.init = m;
        out.push_back(make_plan(spec, c, m == ScaleInitMethod::kTruncation ? "truncation init" : "constant init"));
      }
      break;
  }
  return out;
}

std::vector<ReportRow> aggregate_runs(std::span<const RunSummary> runs, std::span<const std::string> labels,
                                      std::span<const FailedRun> failures) {
  if (labels.size() != runs.size()) throw std::invalid_argument("aggregate_runs: one label per run required");
  std::vector<ReportRow> rows;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::vector<std::vector<double>> accs;
  auto row_for = [&](const std::string& label, const std::string& bits) -> std::size_t {
    auto [it, fresh] = index.try_emplace({label, bits}, rows.size());
    if (fresh) {
      rows.push_back(ReportRow{label, bits});
      accs.emplace_back();
    }
    return it->second;
  };
  for (std::size_t i = 0; i < runs.size(); ++i) accs[row_for(labels[i], runs[i].bits)].push_back(runs[i].final_accuracy);
  for (const FailedRun& f : failures) ++rows[row_for(f.label, f.bits)].failed;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& a = accs[r];
    rows[r].runs = a.size();
    if (a.empty()) continue;
    double mean = 0.0;
    for (double x : a) mean += x;
    mean /= static_cast<double>(a.size());
    double ss = 0.0;
    for (double x : a) ss += (x - mean) * (x - mean);
    rows[r].mean_accuracy = mean;
    rows[r].stddev_accuracy = a.size() > 1 ? std::sqrt(ss / static_cast<double>(a.size() - 1)) : 0.0;
  }
  return rows;
}

std::string format_report(const ExperimentReport& r) {
  std::ostringstream o;
  o << "# " << r.name << " (" << to_string(r.kind) << ")\n\n";
  if (!r.teacher_accuracy.empty()) {
    double mean = 0.0;
    for (double a : r.teacher_accuracy) mean += a;
    mean /= static_cast<double>(r.teacher_accuracy.size());
    o << "Teacher (32-32-32) mean accuracy: " << fmt(100.0 * mean, 2) << "% over " << r.teacher_accuracy.size()
      << " seed(s)\n\n";
  }
  o << "| Method | W-E-A | Runs | Failed | Accuracy mean (%) | Accuracy std (%) |\n";
  o << "|---|---|---|---|---|---|\n";
  for (const ReportRow& row : r.rows) {
    o << "| " << row.label << " | " << row.bits << " | " << row.runs << " | " << row.failed << " | "
      << fmt(100.0 * row.mean_accuracy, 2) << " | " << fmt(100.0 * row.stddev_accuracy, 2) << " |\n";
  }
  for (const FailedRun& f : r.failures) o << "\nFailed: " << f.run_id << ": " << f.error << "\n";
  return o.str();
}

ExperimentReport run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "runs");
  const Dataset data = gen_synthetic_task(spec.task);

  std::optional<ModelState> shared_teacher;
  if (spec.teacher_checkpoint) {
    if (!std::filesystem::exists(*spec.teacher_checkpoint)) {
      throw std::runtime_error("teacher checkpoint not found: " + spec.teacher_checkpoint->string());
    }
    shared_teacher = load_checkpoint(*spec.teacher_checkpoint);
  }

  ExperimentReport report;
  report.name = spec.name;
  report.kind = spec.kind;

  for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
    const std::uint64_t seed = spec.base_seed + rep;
    ModelState teacher;
    if (shared_teacher) {
      teacher = *shared_teacher;
    } else {
      TrainConfig tc = spec.teacher_train;
      tc.seed = seed;
      TrainResult tr = train_teacher(spec.model, data, tc);
      save_checkpoint(tr.model, out_dir / ("teacher_s" + std::to_string(seed) + ".json"));
      write_steps_jsonl(tr.steps, out_dir / ("teacher_s" + std::to_string(seed) + ".jsonl"));
      teacher = std::move(tr.model);
    }
    report.teacher_accuracy.push_back(evaluate(teacher, data.test, spec.train.batch_size, ForwardMode::kTeacher));

    for (const RunPlan& plan : plan_runs(spec, seed)) {
      const std::filesystem::path dir = out_dir / "runs" / plan.run_id;
      std::filesystem::create_directories(dir);
      try {
        TrainResult res = train(teacher, data, plan.train);
        ModelConfig mc = teacher.config();
        mc.set_bits(plan.train.bits_w, plan.train.bits_e, plan.train.bits_a);
        const ModelSize size = quantized_model_size(mc);
        RunSummary s;
        s.run_id = plan.run_id;
        s.bits = bits_of(plan.train);
        s.mode = plan.train.mode;
        s.seed = seed;
        s.final_accuracy = res.final_accuracy;
        s.final_loss = res.steps.empty() ? LossBreakdown{} : res.steps.back().loss;
        s.size_bytes = size.bytes;
        s.ratio = size.ratio;
        const RunSummary one[] = {s};
        emit_metrics(res.steps, one, dir / "metrics.jsonl", dir / "summary.csv");
        save_checkpoint(res.model, dir / "student.json");
        report.runs.push_back(std::move(s));
        report.run_labels.push_back(plan.label);
      } catch (const NonFiniteLossError& e) {
        report.failures.push_back({plan.run_id, plan.label, bits_of(plan.train), e.what()});
        write_text(dir / "FAILED", std::string(e.what()) + "\n");
      }
    }
  }

  report.rows = aggregate_runs(report.runs, report.run_labels, report.failures);
  write_summary_csv(report.runs, out_dir / "summary.csv");
  std::ostringstream csv;
  csv << "label,bits,runs,failed,mean_accuracy,stddev_accuracy\n";
  for (const ReportRow& row : report.rows) {
    char buf[64];
    csv << row.label << ',' << row.bits << ',' << row.runs << ',' << row.failed << ',';
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", row.mean_accuracy, row.stddev_accuracy);
    csv << buf << '\n';
  }
  write_text(out_dir / "report.csv", csv.str());
  write_text(out_dir / "report.md", format_report(report));
  return report;
}

}  // namespace kdlsq
