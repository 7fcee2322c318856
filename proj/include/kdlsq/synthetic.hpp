// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "json.hpp"
#include "kdlsq/dataset.hpp"

namespace kdlsq {

inline constexpr const char* kMajorityTokenRule = "majority-token-class";

struct SyntheticTask {
  std::size_t vocab = 16;
  std::size_t seq_len = 9;
  std::size_t num_classes = 2;
  std::string rule = kMajorityTokenRule;
  std::size_t train_size = 4096;
  std::size_t test_size = 512;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on an unknown rule or unusable sizes.
  void validate() const;
};

nlohmann::json synthetic_task_to_json(const SyntheticTask& task);
/// Missing keys keep their defaults.
SyntheticTask synthetic_task_from_json(const nlohmann::json& j);

/// Label under the majority rule: 1 iff tokens in [vocab/2, vocab) outnumber
/// tokens in [0, vocab/2).
int majority_label(std::span<const std::size_t> tokens, std::size_t vocab);

/// Deterministic dataset for `task`. Tokens are drawn uniformly; each split
/// alternates the requested class and rejects draws with the other label,
/// so both splits are balanced exactly (odd totals differ by one). Every
/// sequence is unique across both splits. Segment ids are 0 for the first
/// half of the positions and 1 for the rest.
///
/// Throws std::invalid_argument for an even seq_len (ties would make the
/// label ambiguous), an odd or too small vocabulary, or more examples than
/// distinct sequences can supply.
Dataset gen_synthetic_task(const SyntheticTask& task);

}  // namespace kdlsq
