// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "kdlsq/transformer.hpp"

namespace kdlsq {

inline constexpr double kBytesPerMiB = 1024.0 * 1024.0;

struct ModelSize {
  double bytes = 0.0;     // storage at the configured bits, scale-factors included
  double fp_bytes = 0.0;  // every parameter at 4 bytes
  double ratio = 1.0;     // fp_bytes / bytes
  std::size_t quantized_params = 0;  // values covered by weight sites
  std::size_t exempt_params = 0;     // everything else
  std::size_t scale_factors = 0;     // enabled sites, 4 bytes each

  double mib() const { return bytes / kBytesPerMiB; }
  double fp_mib() const { return fp_bytes / kBytesPerMiB; }
};

/// Parameter-only storage estimate. Weight-site tensors take bits_w / 8
/// bytes per value (the word embedding bits_e / 8); every other parameter
/// takes 4 bytes; each enabled quantization site adds one 4-byte
/// scale-factor. At 32-32-32 no site is enabled, so the ratio is exactly 1.
ModelSize quantized_model_size(const ModelConfig& config);

}  // namespace kdlsq
