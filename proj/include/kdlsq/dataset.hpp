// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kdlsq/transformer.hpp"

namespace kdlsq {

struct Example {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> segments;
  int label = 0;
};

struct Dataset {
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  std::size_t num_classes = 0;
  std::vector<Example> train;
  std::vector<Example> test;
};

/// Gathers the examples at `indices` into a fixed-length batch. Throws
/// DimensionError when sequence lengths differ.
Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices);
Batch make_batch(std::span<const Example> examples);

}  // namespace kdlsq
