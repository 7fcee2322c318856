// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/dataset.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

namespace kdlsq {

Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no examples selected");
  Batch b;
  b.size = indices.size();
  b.seq_len = examples[indices.front()].tokens.size();
  b.tokens.reserve(b.size * b.seq_len);
  b.segments.reserve(b.size * b.seq_len);
  b.labels.reserve(b.size);
  for (std::size_t i : indices) {
    if (i >= examples.size()) throw std::out_of_range("make_batch: index " + std::to_string(i) + " out of range");
    const Example& e = examples[i];
    if (e.tokens.size() != b.seq_len || e.segments.size() != b.seq_len) {
      throw DimensionError("make_batch: examples have different sequence lengths");
    }
    b.tokens.insert(b.tokens.end(), e.tokens.begin(), e.tokens.end());
    b.segments.insert(b.segments.end(), e.segments.begin(), e.segments.end());
    b.labels.push_back(e.label);
  }
  return b;
}

Batch make_batch(std::span<const Example> examples) {
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(examples, idx);
}

}  // namespace kdlsq
