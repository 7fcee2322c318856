// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "kdlsq/tensor.hpp"

namespace kdlsq {

class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the
/// owning graph is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Graph& graph() const;
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

/// View handed to a backward rule: the output gradient and the inputs it may
/// accumulate into.
class BackwardContext {
 public:
  std::span<const double> grad_output() const noexcept { return grad_output_; }
  const Tensor& output() const;
  const Tensor& input(std::size_t k) const;
  bool needs_grad(std::size_t k) const;
  /// Accumulation buffer for input k, zero-initialised on first use. Empty
  /// when that input does not need a gradient.
  std::span<double> grad_input(std::size_t k);

 private:
  friend class Graph;
  BackwardContext(Graph& graph, std::size_t node, std::span<const double> grad_output)
      : graph_(graph), node_(node), grad_output_(grad_output) {}

  Graph& graph_;
  std::size_t node_;
  std::span<const double> grad_output_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Tape of recorded operations for one forward/backward pass.
///
/// Nodes are appended in execution order, which is a topological order;
/// backward walks them in reverse, visiting each reachable node once. A graph
/// supports a single backward call.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf bound to an external tensor. The value is copied at record time;
  /// gradients accumulate into `param.grad()` when it requires grad.
  Var parameter(Tensor& param);
  Var constant(Tensor value);

  /// Custom-gradient extension point: records `value` as a function of
  /// `inputs` whose vector-Jacobian product is computed by `backward`.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  void backward(Var loss);

  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool needs_grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class Var;
  friend class BackwardContext;

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

/// Disables gradient recording on a graph for the guard's lifetime.
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph& graph) : graph_(graph), previous_(graph.grad_enabled()) {
    graph_.set_grad_enabled(false);
  }
  ~NoGradGuard() { graph_.set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph& graph_;
  bool previous_;
};

}  // namespace kdlsq
