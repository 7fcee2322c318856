// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace kdlsq {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Row-major kernels; all accumulate into C.
// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// For every flat index of the permuted tensor, the flat index in the source.
std::vector<std::size_t> permute_gather(const Shape& src, const std::vector<std::size_t>& perm) {
  const std::size_t r = src.size();
  const auto src_strides = strides_of(src);
  Shape dst(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    dst[i] = src[perm[i]];
    step[i] = src_strides[perm[i]];
  }
  const std::size_t n = shape_numel(src);
  std::vector<std::size_t> gather(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    gather[flat] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < dst[ax]) {
        offset += step[ax];
        break;
      }
      offset -= step[ax] * (dst[ax] - 1);
      idx[ax] = 0;
    }
  }
  return gather;
}

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const double u = c * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Row-wise log-softmax of a [rows, k] block.
std::vector<double> log_softmax_rows(std::span<const double> x, std::size_t rows, std::size_t k) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = row[j] - lz;
  }
  return out;
}

std::pair<std::size_t, std::size_t> rows_and_classes(const Shape& shape, const char* op) {
  if (shape.size() != 2) {
    throw DimensionError(std::string(op) + ": expected [batch, classes], got " + shape_str(shape));
  }
  return {shape[0], shape[1]};
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.set_requires_grad(false);
  const auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.graph().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      auto gi = ctx.grad_input(k);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  const Shape& xs = x.shape();
  if (xs.empty() || bias.shape() != Shape{xs.back()}) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(xs));
  }
  const std::size_t cols = xs.back();
  Tensor out(xs, x.value().values());
  const auto bv = bias.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % cols];
  return x.graph().record(std::move(out), {x, bias}, [cols](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    if (auto gx = ctx.grad_input(0); !gx.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (auto gb = ctx.grad_input(1); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out(x.shape(), x.value().values());
  for (double& v : out.data()) v *= factor;
  return x.graph().record(std::move(out), {x}, [factor](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.graph().record(Tensor::scalar(total), {x}, [](BackwardContext& ctx) {
    const double g = ctx.grad_output()[0];
    for (double& gi : ctx.grad_input(0)) gi += g;
  });
}

Var matmul(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t kb = bs[bs.size() - 2];
  const std::size_t n = bs.back();
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  const bool shared_b = bs.size() == 2;
  if (!shared_b && !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) {
    throw DimensionError("matmul: batch dimensions differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape, 0.0);
  const double* ap = a.value().data().data();
  const double* bp = b.value().data().data();
  double* cp = out.data().data();
  if (shared_b) {
    gemm_nn(batch * m, k, n, ap, bp, cp);
  } else {
    for (std::size_t t = 0; t < batch; ++t) gemm_nn(m, k, n, ap + t * m * k, bp + t * k * n, cp + t * m * n);
  }

  return a.graph().record(std::move(out), {a, b}, [=](BackwardContext& ctx) {
    const double* g = ctx.grad_output().data();
    const double* av = ctx.input(0).data().data();
    const double* bv = ctx.input(1).data().data();
    auto ga = ctx.grad_input(0);
    auto gb = ctx.grad_input(1);
    if (shared_b) {
      if (!ga.empty()) gemm_nt(batch * m, n, k, g, bv, ga.data());
      if (!gb.empty()) gemm_tn(batch * m, k, n, av, g, gb.data());
      return;
    }
    for (std::size_t t = 0; t < batch; ++t) {
      if (!ga.empty()) gemm_nt(m, n, k, g + t * m * n, bv + t * k * n, ga.data() + t * m * k);
      if (!gb.empty()) gemm_tn(m, k, n, av + t * m * k, g + t * m * n, gb.data() + t * k * n);
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.graph().record(std::move(out), {x}, [](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

Var permute(Var x, std::vector<std::size_t> perm) {
  const Shape& xs = x.shape();
  std::vector<bool> seen(xs.size(), false);
  if (perm.size() != xs.size()) throw DimensionError("permute: rank mismatch for " + shape_str(xs));
  for (std::size_t p : perm) {
    if (p >= xs.size() || seen[p]) throw DimensionError("permute: invalid axis permutation");
    seen[p] = true;
  }
  Shape out_shape(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out_shape[i] = xs[perm[i]];
  auto gather = permute_gather(xs, perm);
  Tensor out(out_shape, 0.0);
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[gather[i]];
  return x.graph().record(std::move(out), {x}, [gather = std::move(gather)](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[gather[i]] += g[i];
  });
}

Var slice_last(Var x, std::size_t begin, std::size_t end) {
  const Shape& xs = x.shape();
  if (xs.empty() || begin >= end || end > xs.back()) {
    throw DimensionError("slice_last: invalid range for " + shape_str(xs));
  }
  const std::size_t cols = xs.back();
  const std::size_t width = end - begin;
  const std::size_t rows = x.value().size() / cols;
  Shape out_shape = xs;
  out_shape.back() = width;
  Tensor out(out_shape, 0.0);
  const auto src = x.value().data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), width,
                dst.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return x.graph().record(std::move(out), {x}, [=](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < width; ++j) gx[r * cols + begin + j] += g[r * width + j];
    }
  });
}

Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw DimensionError("concat_last: scalar input");
  const std::size_t rows = parts.front().value().size() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw DimensionError("concat_last: leading dimensions differ: " + shape_str(s) + " vs " + shape_str(first));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor out(out_shape, 0.0);
  auto dst = out.data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < widths[k]; ++j) dst[r * total + offset + j] = src[r * widths[k] + j];
    }
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().graph().record(std::move(out), std::move(inputs), [=](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto gk = ctx.grad_input(k);
      if (!gk.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) gk[r * widths[k] + j] += g[r * total + off + j];
        }
      }
      off += widths[k];
    }
  });
}

Var softmax(Var x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor out(x.shape(), 0.0);
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t c = 0; c < s.inner; ++c) {
      const std::size_t base = a * s.len * s.inner + c;
      double mx = in[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, in[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(in[base + i * s.inner] - mx);
        o[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) o[base + i * s.inner] /= z;
    }
  }
  return x.graph().record(std::move(out), {x}, [s](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    const auto y = ctx.output().data();
    auto gx = ctx.grad_input(0);
    for (std::size_t a = 0; a < s.outer; ++a) {
      for (std::size_t c = 0; c < s.inner; ++c) {
        const std::size_t base = a * s.len * s.inner + c;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t j = base + i * s.inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

Var gelu(Var x) {
  Tensor out(x.shape(), x.value().values());
  for (double& v : out.data()) v = gelu_value(v);
  return x.graph().record(std::move(out), {x}, [](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    const auto in = ctx.input(0).data();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * gelu_derivative(in[i]);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t cols = xs.back();
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols}) {
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(cols) + "]");
  }
  const std::size_t rows = x.value().size() / cols;
  const auto in = x.value().data();
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  Tensor out(xs, 0.0);
  auto o = out.data();
  std::vector<double> xhat(in.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += row[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t i = r * cols + j;
      xhat[i] = (row[j] - mean) * rstd[r];
      o[i] = xhat[i] * gv[j] + bv[j];
    }
  }
  return x.graph().record(
      std::move(out), {x, gain, bias},
      [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](BackwardContext& ctx) {
        const auto g = ctx.grad_output();
        const auto gv = ctx.input(1).data();
        auto gx = ctx.grad_input(0);
        auto ggain = ctx.grad_input(1);
        auto gbias = ctx.grad_input(2);
        const double inv_cols = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t i = r * cols + j;
            const double d = g[i] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[i];
            if (!ggain.empty()) ggain[j] += g[i] * xhat[i];
            if (!gbias.empty()) gbias[j] += g[i];
          }
          if (gx.empty()) continue;
          mean_d *= inv_cols;
          mean_dx *= inv_cols;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t i = r * cols + j;
            gx[i] += rstd[r] * (g[i] * gv[j] - mean_d - xhat[i] * mean_dx);
          }
        }
      });
}

Var embedding(Var table, std::span<const std::size_t> ids, const Shape& prefix) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(ts));
  if (shape_numel(prefix) != ids.size()) {
    throw DimensionError("embedding: prefix " + shape_str(prefix) + " does not match id count");
  }
  const std::size_t rows = ts[0];
  const std::size_t width = ts[1];
  for (std::size_t id : ids) {
    if (id >= rows) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " out of range [0, " +
                              std::to_string(rows) + ")");
    }
  }
  Shape out_shape = prefix;
  out_shape.push_back(width);
  Tensor out(out_shape, 0.0);
  const auto src = table.value().data();
  auto dst = out.data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[t] * width), width,
                dst.begin() + static_cast<std::ptrdiff_t>(t * width));
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return table.graph().record(std::move(out), {table}, [width, saved = std::move(saved)](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gt = ctx.grad_input(0);
    for (std::size_t t = 0; t < saved.size(); ++t) {
      for (std::size_t j = 0; j < width; ++j) gt[saved[t] * width + j] += g[t * width + j];
    }
  });
}

Var mean_axis(Var x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape, 0.0);
  const auto in = x.value().data();
  auto o = out.data();
  const double inv = 1.0 / static_cast<double>(s.len);
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t i = 0; i < s.len; ++i) {
      for (std::size_t c = 0; c < s.inner; ++c) o[a * s.inner + c] += in[(a * s.len + i) * s.inner + c];
    }
  }
  for (double& v : o) v *= inv;
  return x.graph().record(std::move(out), {x}, [s, inv](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t a = 0; a < s.outer; ++a) {
      for (std::size_t i = 0; i < s.len; ++i) {
        for (std::size_t c = 0; c < s.inner; ++c) gx[(a * s.len + i) * s.inner + c] += g[a * s.inner + c] * inv;
      }
    }
  });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.value().size());
  for (double& m : mask) m = keep(rng) ? keep_scale : 0.0;
  Tensor out(x.shape(), x.value().values());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mask[i];
  return x.graph().record(std::move(out), {x}, [mask = std::move(mask)](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var mse(Var a, Var b) {
  require_same_shape(a, b, "mse");
  const auto av = a.value().data();
  const auto bv = b.value().data();
  const double n = static_cast<double>(av.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  return a.graph().record(Tensor::scalar(acc / n), {a, b}, [n](BackwardContext& ctx) {
    const double g = ctx.grad_output()[0];
    const auto av = ctx.input(0).data();
    const auto bv = ctx.input(1).data();
    auto ga = ctx.grad_input(0);
    auto gb = ctx.grad_input(1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = 2.0 * (av[i] - bv[i]) / n * g;
      if (!ga.empty()) ga[i] += d;
      if (!gb.empty()) gb[i] -= d;
    }
  });
}

Var soft_cross_entropy(Var student_logits, Var teacher_logits) {
  require_same_shape(student_logits, teacher_logits, "soft_cross_entropy");
  const auto [rows, k] = rows_and_classes(student_logits.shape(), "soft_cross_entropy");
  const auto log_q = log_softmax_rows(student_logits.value().data(), rows, k);
  const auto log_p = log_softmax_rows(teacher_logits.value().data(), rows, k);
  double acc = 0.0;
  for (std::size_t i = 0; i < log_q.size(); ++i) acc -= std::exp(log_p[i]) * log_q[i];
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return student_logits.graph().record(
      Tensor::scalar(acc * inv_rows), {student_logits, teacher_logits},
      [rows, k, inv_rows, log_q, log_p](BackwardContext& ctx) {
        const double g = ctx.grad_output()[0] * inv_rows;
        auto gs = ctx.grad_input(0);
        auto gt = ctx.grad_input(1);
        for (std::size_t r = 0; r < rows; ++r) {
          double expected_log_q = 0.0;
          for (std::size_t j = 0; j < k; ++j) expected_log_q += std::exp(log_p[r * k + j]) * log_q[r * k + j];
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t i = r * k + j;
            const double p = std::exp(log_p[i]);
            if (!gs.empty()) gs[i] += g * (std::exp(log_q[i]) - p);
            if (!gt.empty()) gt[i] -= g * p * (log_q[i] - expected_log_q);
          }
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const auto [rows, k] = rows_and_classes(logits.shape(), "cross_entropy");
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(k) + ")");
    }
  }
  auto log_q = log_softmax_rows(logits.value().data(), rows, k);
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) acc -= log_q[r * k + static_cast<std::size_t>(labels[r])];
  const double inv_rows = 1.0 / static_cast<double>(rows);
  std::vector<int> saved(labels.begin(), labels.end());
  return logits.graph().record(
      Tensor::scalar(acc * inv_rows), {logits},
      [rows, k, inv_rows, log_q = std::move(log_q), saved = std::move(saved)](BackwardContext& ctx) {
        const double g = ctx.grad_output()[0] * inv_rows;
        auto gl = ctx.grad_input(0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const double target = static_cast<std::size_t>(saved[r]) == j ? 1.0 : 0.0;
            gl[r * k + j] += g * (std::exp(log_q[r * k + j]) - target);
          }
        }
      });
}

}  // namespace kdlsq
