// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/model_size.hpp"

namespace kdlsq {

ModelSize quantized_model_size(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.hidden;
  const std::size_t word = c.vocab * d;
  const std::size_t layer_matrices = 4 * d * d + 2 * d * c.ffn;
  const std::size_t layer_exempt = c.ffn + d   // FFN biases
                                   + 4 * d;     // two layer norms
  const std::size_t exempt = c.segments * d + c.max_seq * d + c.layers * layer_exempt +
                             d * c.num_classes + c.num_classes;

  ModelSize s;
  s.quantized_params = word + c.layers * layer_matrices;
  s.exempt_params = exempt;
  s.fp_bytes = 4.0 * static_cast<double>(s.quantized_params + exempt);

  const double word_bytes = static_cast<double>(word) * c.bits_e / 8.0;
  const double matrix_bytes = static_cast<double>(c.layers * layer_matrices) * c.bits_w / 8.0;
  if (c.bits_e < kFullPrecisionBits) s.scale_factors += 1;
  if (c.bits_w < kFullPrecisionBits) s.scale_factors += c.layers * kWeightSitesPerLayer;
  if (c.bits_a < kFullPrecisionBits) s.scale_factors += c.layers * kActivationSitesPerLayer;

  s.bytes = word_bytes + matrix_bytes + 4.0 * static_cast<double>(exempt + s.scale_factors);
  s.ratio = s.fp_bytes / s.bytes;
  return s;
}

}  // namespace kdlsq
