// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "kdlsq/graph.hpp"

namespace kdlsq {

inline constexpr double kLayerNormEps = 1e-12;

// Differentiable operations on graph values. Every op records its own
// backward rule; shapes are validated eagerly and mismatches raise
// DimensionError.

Var add(Var a, Var b);
/// x[..., j] + bias[j].
Var add_bias(Var x, Var bias);
Var scale(Var x, double factor);
Var sum(Var x);

/// Matrix product over the last two axes. `b` is either a plain matrix
/// [k, n] shared across every leading index of `a`, or has the same leading
/// dimensions as `a` (batched product).
Var matmul(Var a, Var b);

Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<std::size_t> perm);
/// Columns [begin, end) of the last axis.
Var slice_last(Var x, std::size_t begin, std::size_t end);
/// Concatenation along the last axis; all leading dimensions must agree.
Var concat_last(std::span<const Var> parts);

Var softmax(Var x, std::size_t axis);
/// Tanh-approximated GeLU.
Var gelu(Var x);
/// Normalizes each row over the last axis (population variance), then
/// applies the per-column gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps);

/// Row lookup: output shape is `prefix` + [table.dim(1)] where prefix
/// multiplies out to ids.size().
Var embedding(Var table, std::span<const std::size_t> ids, const Shape& prefix);
Var mean_axis(Var x, std::size_t axis);
/// Inverted dropout. A rate of zero returns `x` unchanged.
Var dropout(Var x, double rate, std::mt19937_64& rng);

Var mse(Var a, Var b);
/// Batch mean of -sum_i softmax(teacher)_i * log softmax(student)_i.
Var soft_cross_entropy(Var student_logits, Var teacher_logits);
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace kdlsq
