// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/graph.hpp"

#include <algorithm>
#include <stdexcept>

namespace kdlsq {

const Tensor& Var::value() const {
  if (!graph_) throw std::logic_error("use of an unbound Var");
  return graph_->node(*this).value;
}

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("use of an unbound Var");
  return *graph_;
}

const Tensor& BackwardContext::output() const { return graph_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t k) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(k)].value;
}

bool BackwardContext::needs_grad(std::size_t k) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(k)].needs_grad;
}

std::span<double> BackwardContext::grad_input(std::size_t k) {
  const std::size_t in = graph_.nodes_[node_].inputs.at(k);
  if (!graph_.nodes_[in].needs_grad) return {};
  auto& g = graph_.grads_[in];
  if (g.empty()) g.assign(graph_.nodes_[in].value.size(), 0.0);
  return g;
}

const Graph::Node& Graph::node(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw std::logic_error("Var does not belong to this graph");
  }
  return nodes_[v.id_];
}

bool Graph::needs_grad(Var v) const { return node(v).needs_grad; }

Var Graph::parameter(Tensor& param) {
  Node n;
  n.value = Tensor(param.shape(), param.values());
  n.needs_grad = grad_enabled_ && param.requires_grad();
  if (n.needs_grad) n.param = &param;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  value.set_requires_grad(false);
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  bool any = false;
  for (const Var& v : inputs) {
    const Node& in = node(v);
    any = any || in.needs_grad;
    n.inputs.push_back(v.id_);
  }
  n.needs_grad = grad_enabled_ && any;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + shape_str(root.value.shape()));
  }
  if (backward_done_) {
    throw std::logic_error("backward called twice on the same graph; run a new forward pass");
  }
  backward_done_ = true;
  if (!root.needs_grad) return;

  grads_.assign(nodes_.size(), {});
  grads_[loss.id_] = {1.0};
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || grads_[id].empty()) continue;
    if (n.param) {
      auto dst = n.param->grad();
      const auto& src = grads_[id];
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
    if (n.backward) {
      BackwardContext ctx(*this, id, grads_[id]);
      n.backward(ctx);
    }
    grads_[id].clear();
    grads_[id].shrink_to_fit();
  }
  grads_.clear();
}

}  // namespace kdlsq
