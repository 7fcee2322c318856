// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "kdlsq/graph.hpp"
#include "kdlsq/ops.hpp"

using namespace kdlsq;

TEST(Graph, SumGivesOnes) {
  Tensor w({2, 3}, 0.7);
  w.set_requires_grad(true);
  Graph g;
  g.backward(sum(g.parameter(w)));
  for (double x : w.grad()) EXPECT_EQ(x, 1.0);
}

TEST(Graph, MseAgainstZero) {
  Tensor w = Tensor::scalar(2.0);
  w.set_requires_grad(true);
  Graph g;
  Var loss = mse(g.parameter(w), g.constant(Tensor::scalar(0.0)));
  EXPECT_EQ(loss.value()[0], 4.0);
  g.backward(loss);
  EXPECT_EQ(w.grad()[0], 4.0);
}

TEST(Graph, BackwardRejectsNonScalar) {
  Tensor w({2}, 1.0);
  w.set_requires_grad(true);
  Graph g;
  Var x = g.parameter(w);
  EXPECT_THROW(g.backward(x), DimensionError);
}

TEST(Graph, BackwardTwiceThrows) {
  Tensor w({2}, 1.0);
  w.set_requires_grad(true);
  Graph g;
  Var loss = sum(g.parameter(w));
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), std::logic_error);
}

TEST(Graph, SharedInputAccumulates) {
  // loss = sum(x + x) -> d/dx = 2.
  Tensor w({3}, 1.0);
  w.set_requires_grad(true);
  Graph g;
  Var x = g.parameter(w);
  g.backward(sum(add(x, x)));
  for (double v : w.grad()) EXPECT_EQ(v, 2.0);
}

TEST(Graph, GradsAccumulateAcrossGraphsUntilZeroed) {
  Tensor w({1}, 1.0);
  w.set_requires_grad(true);
  for (int i = 0; i < 2; ++i) {
    Graph g;
    g.backward(sum(g.parameter(w)));
  }
  EXPECT_EQ(w.grad()[0], 2.0);
  w.zero_grad();
  EXPECT_EQ(w.grad()[0], 0.0);
}

TEST(Graph, ParameterValueIsCopiedAtRecordTime) {
  Tensor w({1}, 3.0);
  Graph g;
  Var x = g.parameter(w);
  w[0] = 10.0;
  EXPECT_EQ(x.value()[0], 3.0);
}

TEST(Graph, FrozenLeafGetsNoGradient) {
  Tensor w({2}, 1.0);
  Tensor frozen({2}, 2.0);
  w.set_requires_grad(true);
  Graph g;
  Var loss = sum(add(g.parameter(w), g.parameter(frozen)));
  g.backward(loss);
  EXPECT_FALSE(frozen.requires_grad());
  EXPECT_EQ(w.grad()[0], 1.0);
}

TEST(Graph, NoGradGuardStopsRecordingGradients) {
  Tensor w({2}, 1.0);
  w.set_requires_grad(true);
  Graph g;
  Var x = g.parameter(w);
  Var y;
  {
    NoGradGuard guard(g);
    EXPECT_FALSE(g.grad_enabled());
    y = scale(x, 3.0);
  }
  EXPECT_TRUE(g.grad_enabled());
  EXPECT_FALSE(g.needs_grad(y));
  EXPECT_TRUE(g.needs_grad(x));
}

TEST(Graph, CustomNodeRuleIsApplied) {
  // A node whose registered backward multiplies by 7 regardless of forward.
  Tensor w({2}, std::vector<double>{1.0, -2.0});
  w.set_requires_grad(true);
  Graph g;
  Var x = g.parameter(w);
  Var y = g.record(Tensor(x.value()), {x}, [](BackwardContext& ctx) {
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 7.0 * ctx.grad_output()[i];
  });
  g.backward(sum(y));
  EXPECT_EQ(w.grad()[0], 7.0);
  EXPECT_EQ(w.grad()[1], 7.0);
}

TEST(Graph, EachNodeVisitedOnce) {
  int calls = 0;
  Tensor w({1}, 1.0);
  w.set_requires_grad(true);
  Graph g;
  Var x = g.parameter(w);
  Var y = g.record(Tensor(x.value()), {x}, [&calls](BackwardContext& ctx) {
    ++calls;
    ctx.grad_input(0)[0] += ctx.grad_output()[0];
  });
  // y feeds two consumers; its rule must still run exactly once.
  g.backward(sum(add(y, y)));
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(w.grad()[0], 2.0);
}

TEST(Graph, UnreachableNodesAreSkipped) {
  int calls = 0;
  Tensor w({1}, 1.0);
  w.set_requires_grad(true);
  Graph g;
  Var x = g.parameter(w);
  g.record(Tensor(x.value()), {x}, [&calls](BackwardContext&) { ++calls; });
  g.backward(sum(x));
  EXPECT_EQ(calls, 0);
}

TEST(Graph, InvalidVarThrows) {
  Var v;
  EXPECT_FALSE(v.valid());
  EXPECT_THROW(v.value(), std::logic_error);
}
