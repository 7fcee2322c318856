// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/synthetic.hpp"

#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

namespace kdlsq {

void SyntheticTask::validate() const {
  if (rule != kMajorityTokenRule) throw std::invalid_argument("synthetic task: unknown rule '" + rule + "'");
  if (num_classes != 2) throw std::invalid_argument("synthetic task: the majority rule has exactly 2 classes");
  if (vocab < 2 || vocab % 2 != 0) throw std::invalid_argument("synthetic task: vocab must be even and >= 2");
  if (seq_len == 0 || seq_len % 2 == 0) {
    throw std::invalid_argument("synthetic task: seq_len must be odd so that no sequence is a tie");
  }
  if (train_size == 0 || test_size == 0) throw std::invalid_argument("synthetic task: empty split");
  // Each class holds half of the vocab^seq_len sequences; demand a wide margin
  // so rejection sampling for unique sequences terminates quickly.
  const double per_class = 0.5 * std::pow(static_cast<double>(vocab), static_cast<double>(seq_len));
  const double needed = static_cast<double>((train_size + test_size + 1) / 2);
  if (needed * 4.0 > per_class) {
    throw std::invalid_argument("synthetic task: too many examples for the number of distinct sequences");
  }
}

nlohmann::json synthetic_task_to_json(const SyntheticTask& t) {
  return {{"vocab", t.vocab},           {"seq_len", t.seq_len},       {"num_classes", t.num_classes},
          {"rule", t.rule},             {"train_size", t.train_size}, {"test_size", t.test_size},
          {"seed", t.seed}};
}

SyntheticTask synthetic_task_from_json(const nlohmann::json& j) {
  SyntheticTask t;
  t.vocab = j.value("vocab", t.vocab);
  t.seq_len = j.value("seq_len", t.seq_len);
  t.num_classes = j.value("num_classes", t.num_classes);
  t.rule = j.value("rule", t.rule);
  t.train_size = j.value("train_size", t.train_size);
  t.test_size = j.value("test_size", t.test_size);
  t.seed = j.value("seed", t.seed);
  return t;
}

int majority_label(std::span<const std::size_t> tokens, std::size_t vocab) {
  const std::size_t half = vocab / 2;
  long balance = 0;
  for (std::size_t t : tokens) {
    if (t >= vocab) throw std::out_of_range("majority_label: token outside vocabulary");
    balance += t >= half ? 1 : -1;
  }
  return balance > 0 ? 1 : 0;
}

Dataset gen_synthetic_task(const SyntheticTask& task) {
  task.validate();
  Dataset data;
  data.vocab = task.vocab;
  data.seq_len = task.seq_len;
  data.num_classes = task.num_classes;

  std::mt19937_64 rng(task.seed);
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::size_t> segments(task.seq_len);
  for (std::size_t i = 0; i < task.seq_len; ++i) segments[i] = i < task.seq_len / 2 ? 0 : 1;

  auto fill = [&](std::vector<Example>& split, std::size_t count) {
    split.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const int want = static_cast<int>(i % 2);
      std::vector<std::size_t> tokens(task.seq_len);
      for (;;) {
        for (auto& t : tokens) t = static_cast<std::size_t>(rng() % task.vocab);
        if (majority_label(tokens, task.vocab) != want) continue;
        if (seen.insert(tokens).second) break;
      }
      split.push_back(Example{std::move(tokens), segments, want});
    }
  };
  fill(data.train, task.train_size);
  fill(data.test, task.test_size);
  return data;
}

}  // namespace kdlsq
