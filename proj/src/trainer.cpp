// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "kdlsq/ops.hpp"

namespace kdlsq {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348u;
constexpr std::uint64_t kDropoutStream = 0xD409u;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

bool is_scale_group(GroupKind k) { return k != GroupKind::kWeights; }

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Shared epoch loop. With `teacher == nullptr` the objective is the
// ground-truth loss alone.
void run_epochs(ModelState& student, ModelState* teacher, const Dataset& data, const TrainConfig& cfg,
                std::vector<ParamGroup>& groups, TrainResult& result) {
  const std::size_t per_epoch = steps_per_epoch(data.train.size(), cfg.batch_size);
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::mt19937_64 dropout_rng = stream_rng(cfg.seed, kDropoutStream);
  Adam adam;
  std::size_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(data.train.size(), cfg.seed, epoch);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const Batch batch = make_batch(data.train, std::span(order).subspan(begin, end - begin));

      for (ParamGroup& g : groups) g.lr = lr_schedule(step, total, g.base_lr);

      Graph graph;
      TotalLoss loss;
      {
        ForwardOptions sopt;
        sopt.mode = ForwardMode::kStudent;
        sopt.dropout = cfg.dropout;
        sopt.rng = &dropout_rng;
        const ForwardTrace s = forward_model(graph, student, batch, sopt);
        if (teacher) {
          ForwardTrace t;
          {
            NoGradGuard guard(graph);
            ForwardOptions topt;
            topt.mode = ForwardMode::kTeacher;
            t = forward_model(graph, *teacher, batch, topt);
          }
          loss = loss_total(s, t, batch.labels, cfg.mode);
        } else {
          loss = loss_ground_truth(s, batch.labels);
        }
      }
      if (!std::isfinite(loss.breakdown.total)) {
        std::ostringstream msg;
        msg << "training diverged at step " << step << ": total loss " << loss.breakdown.total;
        throw NonFiniteLossError(msg.str());
      }

      student.zero_grad();
      if (graph.needs_grad(loss.total)) {
        graph.backward(loss.total);
        adam.step(groups);
      }

      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      for (const ParamGroup& g : groups) {
        switch (g.kind) {
          case GroupKind::kWeights: rec.lr_weights = g.lr; break;
          case GroupKind::kWeightScales: rec.lr_scale_w = g.lr; break;
          case GroupKind::kActivationScales: rec.lr_scale_a = g.lr; break;
        }
      }
      rec.loss = loss.breakdown;
      ++step;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != total) {
        rec.eval_accuracy = evaluate(student, data.test, cfg.batch_size);
      }
      result.steps.push_back(std::move(rec));
    }
  }
  student.zero_grad();
  result.final_accuracy = evaluate(student, data.test, cfg.batch_size);
  if (!result.steps.empty()) result.steps.back().eval_accuracy = result.final_accuracy;
}

void check_dataset(const Dataset& data, const ModelConfig& mc) {
  if (data.train.empty()) throw std::invalid_argument("train: empty training split");
  if (data.test.empty()) throw std::invalid_argument("train: empty test split");
  if (data.seq_len > mc.max_seq) {
    throw std::invalid_argument("train: sequence length " + std::to_string(data.seq_len) +
                                " exceeds the model's position table (" + std::to_string(mc.max_seq) + ")");
  }
  if (data.vocab > mc.vocab) throw std::invalid_argument("train: dataset vocabulary exceeds the model's");
  if (data.num_classes != mc.num_classes) throw std::invalid_argument("train: class count mismatch");
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  for (double lr : {lr_weights, lr_scale_w, lr_scale_a}) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rates must be finite and >= 0");
  }
  if (!(gamma >= 0.0 && gamma < 0.5)) throw std::invalid_argument("gamma must lie in [0, 0.5)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (!(const_weight_scale > 0.0) || !(const_activation_scale > 0.0)) {
    throw std::invalid_argument("constant scale-factors must be positive");
  }
  ModelConfig probe;
  probe.set_bits(bits_w, bits_e, bits_a);
  probe.validate();
}

double lr_schedule(std::size_t step, std::size_t total_steps, double lr0) {
  if (step > total_steps) {
    throw std::out_of_range("lr_schedule: step " + std::to_string(step) + " exceeds total " +
                            std::to_string(total_steps));
  }
  if (total_steps == 0) return lr0;
  return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

std::vector<ParamGroup> make_param_groups(ModelState& student, const TrainConfig& cfg) {
  ParamGroup weights{GroupKind::kWeights, {}, cfg.lr_weights, cfg.lr_weights};
  ParamGroup wscales{GroupKind::kWeightScales, {}, cfg.lr_scale_w, cfg.lr_scale_w};
  ParamGroup ascales{GroupKind::kActivationScales, {}, cfg.lr_scale_a, cfg.lr_scale_a};
  for (auto& [name, t] : student.named_parameters()) {
    t->set_requires_grad(true);
    weights.members.push_back(t);
  }
  for (ScaleFactor& sf : student.scales()) {
    bool enabled = false;
    if (sf.kind == SiteKind::kActivation) {
      enabled = cfg.bits_a < kFullPrecisionBits;
    } else if (sf.site_id == kEmbeddingSiteId) {
      enabled = cfg.bits_e < kFullPrecisionBits;
    } else {
      enabled = cfg.bits_w < kFullPrecisionBits;
    }
    sf.value.set_requires_grad(enabled);
    if (!enabled) continue;
    (sf.kind == SiteKind::kActivation ? ascales : wscales).members.push_back(&sf.value);
  }
  std::vector<ParamGroup> out;
  out.push_back(std::move(weights));
  if (!wscales.members.empty()) out.push_back(std::move(wscales));
  if (!ascales.members.empty()) out.push_back(std::move(ascales));
  return out;
}

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::span<ParamGroup> groups) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (ParamGroup& group : groups) {
    for (Tensor* p : group.members) {
      if (!p->requires_grad()) throw std::logic_error("Adam: parameter without gradient buffer");
      const auto g = p->grad().data();
      auto w = p->data();
      Moments& mo = moments_[p];
      if (mo.m.size() != w.size()) {
        mo.m.assign(w.size(), 0.0);
        mo.v.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g[i];
        mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = mo.m[i] / bc1;
        const double vhat = mo.v[i] / bc2;
        w[i] -= group.lr * mhat / (std::sqrt(vhat) + eps_);
      }
      if (is_scale_group(group.kind)) {
        for (double& x : w) {
          if (!(x >= kMinScale)) x = kMinScale;
        }
      }
    }
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng = stream_rng(seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
  // Fisher-Yates with an explicit bounded draw keeps the order identical
  // across standard library implementations.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

double evaluate(ModelState& model, std::span<const Example> examples, std::size_t batch_size, ForwardMode mode) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be >= 1");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const std::size_t end = std::min(examples.size(), begin + batch_size);
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const Batch batch = make_batch(examples, idx);
    Graph graph;
    NoGradGuard guard(graph);
    ForwardOptions opt;
    opt.mode = mode;
    const ForwardTrace tr = forward_model(graph, model, batch, opt);
    const Tensor& logits = tr.logits.value();
    const std::size_t classes = logits.dim(1);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto row = logits.data().subspan(b * classes, classes);
      if (argmax_row(row) == batch.labels[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

TrainResult train(const ModelState& teacher, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  check_dataset(data, teacher.config());

  TrainResult result;
  ModelState frozen = teacher;
  frozen.set_trainable(false);
  result.model = teacher;
  ModelState& student = result.model;
  student.set_bits(cfg.bits_w, cfg.bits_e, cfg.bits_a);

  if (cfg.init == ScaleInitMethod::kTruncation) {
    // The calibration batch is the first batch of the first epoch's order.
    const std::vector<std::size_t> order = epoch_order(data.train.size(), cfg.seed, 0);
    const std::size_t n = std::min(cfg.batch_size, order.size());
    const Batch calib = make_batch(data.train, std::span(order).first(n));
    result.calibration = init_weight_scales(student, cfg.gamma);
    calibrate_activations(student, calib, cfg.gamma, &result.calibration);
  } else {
    init_scales_constant(student, cfg.const_weight_scale, cfg.const_activation_scale);
  }

  std::vector<ParamGroup> groups = make_param_groups(student, cfg);
  run_epochs(student, &frozen, data, cfg, groups, result);
  return result;
}

TrainResult train_teacher(const ModelConfig& model_config, const Dataset& data, const TrainConfig& config) {
  TrainConfig cfg = config;
  cfg.bits_w = cfg.bits_e = cfg.bits_a = kFullPrecisionBits;
  cfg.mode = LossMode::kGtOnly;
  cfg.validate();
  ModelConfig mc = model_config;
  mc.set_bits(kFullPrecisionBits, kFullPrecisionBits, kFullPrecisionBits);
  mc.validate();
  check_dataset(data, mc);

  TrainResult result;
  result.model = ModelState::random(mc, cfg.seed);
  std::vector<ParamGroup> groups = make_param_groups(result.model, cfg);
  run_epochs(result.model, nullptr, data, cfg, groups, result);
  return result;
}

}  // namespace kdlsq
