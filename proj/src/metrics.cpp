// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kdlsq {

namespace {

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::runtime_error("summary csv: bad number '" + s + "'");
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

nlohmann::json loss_to_json(const LossBreakdown& l) {
  return {{"hidden", l.hidden}, {"att", l.att}, {"trm", l.trm}, {"pre", l.pre},
          {"kd", l.kd},         {"gt", l.gt},   {"total", l.total}};
}

LossBreakdown loss_from_json(const nlohmann::json& j) {
  LossBreakdown l;
  l.hidden = j.at("hidden").get<double>();
  l.att = j.at("att").get<double>();
  l.trm = j.at("trm").get<double>();
  l.pre = j.at("pre").get<double>();
  l.kd = j.at("kd").get<double>();
  l.gt = j.at("gt").get<double>();
  l.total = j.at("total").get<double>();
  return l;
}

nlohmann::json step_to_json(const StepRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"epoch", r.epoch},
                      {"lr", {{"weights", r.lr_weights}, {"scale_w", r.lr_scale_w}, {"scale_a", r.lr_scale_a}}},
                      {"loss", loss_to_json(r.loss)}};
  if (r.eval_accuracy) j["eval_accuracy"] = *r.eval_accuracy;
  return j;
}

StepRecord step_from_json(const nlohmann::json& j) {
  StepRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.epoch = j.at("epoch").get<int>();
  r.lr_weights = j.at("lr").at("weights").get<double>();
  r.lr_scale_w = j.at("lr").at("scale_w").get<double>();
  r.lr_scale_a = j.at("lr").at("scale_a").get<double>();
  r.loss = loss_from_json(j.at("loss"));
  if (j.contains("eval_accuracy")) r.eval_accuracy = j.at("eval_accuracy").get<double>();
  return r;
}

std::vector<std::string> summary_columns() {
  return {"run_id", "bits",     "mode",      "seed", "final_accuracy", "loss_hidden", "loss_att", "loss_trm",
          "loss_pre", "loss_kd", "loss_gt", "loss_total", "size_bytes", "ratio"};
}

std::string summary_csv_header() {
  std::string out;
  for (const auto& c : summary_columns()) {
    if (!out.empty()) out += ',';
    out += c;
  }
  return out;
}

std::string summary_csv_row(const RunSummary& r) {
  if (r.run_id.find_first_of(",\n\"") != std::string::npos) {
    throw std::invalid_argument("summary csv: run id must not contain commas, quotes or newlines");
  }
  std::ostringstream o;
  const LossBreakdown& l = r.final_loss;
  o << r.run_id << ',' << r.bits << ',' << to_string(r.mode) << ',' << r.seed << ',' << fmt_double(r.final_accuracy)
    << ',' << fmt_double(l.hidden) << ',' << fmt_double(l.att) << ',' << fmt_double(l.trm) << ','
    << fmt_double(l.pre) << ',' << fmt_double(l.kd) << ',' << fmt_double(l.gt) << ',' << fmt_double(l.total) << ','
    << fmt_double(r.size_bytes) << ',' << fmt_double(r.ratio);
  return o.str();
}

RunSummary parse_summary_csv_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
  if (f.size() != summary_columns().size()) {
    throw std::runtime_error("summary csv: expected " + std::to_string(summary_columns().size()) + " fields, got " +
                             std::to_string(f.size()));
  }
  RunSummary r;
  r.run_id = f[0];
  r.bits = f[1];
  r.mode = parse_loss_mode(f[2]);
  r.seed = std::stoull(f[3]);
  r.final_accuracy = parse_double(f[4]);
  r.final_loss = {parse_double(f[5]), parse_double(f[6]), parse_double(f[7]), parse_double(f[8]),
                  parse_double(f[9]), parse_double(f[10]), parse_double(f[11])};
  r.size_bytes = parse_double(f[12]);
  r.ratio = parse_double(f[13]);
  return r;
}

void write_steps_jsonl(std::span<const StepRecord> steps, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  for (const StepRecord& r : steps) out << step_to_json(r).dump() << '\n';
  finish(out, path);
}

std::vector<StepRecord> read_steps_jsonl(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::vector<StepRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(step_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

void write_summary_csv(std::span<const RunSummary> runs, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << summary_csv_header() << '\n';
  for (const RunSummary& r : runs) out << summary_csv_row(r) << '\n';
  finish(out, path);
}

std::vector<RunSummary> read_summary_csv(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != summary_csv_header()) {
    throw std::runtime_error("summary csv: missing or unexpected header in " + path.string());
  }
  std::vector<RunSummary> out;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_summary_csv_row(line));
  }
  return out;
}

void emit_metrics(std::span<const StepRecord> steps, std::span<const RunSummary> runs,
                  const std::filesystem::path& jsonl_path, const std::filesystem::path& csv_path) {
  write_steps_jsonl(steps, jsonl_path);
  write_summary_csv(runs, csv_path);
}

}  // namespace kdlsq
