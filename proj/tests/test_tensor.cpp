// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "kdlsq/tensor.hpp"

using namespace kdlsq;

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  for (double x : t.data()) EXPECT_EQ(x, 1.5);
  EXPECT_FALSE(t.requires_grad());
}

TEST(Tensor, ValueConstructorRejectsWrongLength) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_NO_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
}

TEST(Tensor, DimOutOfRangeThrows) {
  Tensor t({4});
  EXPECT_THROW(t.dim(1), DimensionError);
}

TEST(Tensor, ScalarItem) {
  EXPECT_EQ(Tensor::scalar(3.25).item(), 3.25);
  EXPECT_THROW(Tensor({2}).item(), DimensionError);
}

TEST(Tensor, GradBufferPresentIffRequiresGrad) {
  Tensor t({3}, 2.0);
  EXPECT_THROW(t.grad(), std::logic_error);
  t.set_requires_grad(true);
  ASSERT_EQ(t.grad().size(), t.size());
  for (double g : t.grad()) EXPECT_EQ(g, 0.0);
  t.grad()[1] = 5.0;
  t.zero_grad();
  EXPECT_EQ(t.grad()[1], 0.0);
  t.set_requires_grad(false);
  EXPECT_FALSE(t.requires_grad());
}

TEST(Tensor, CopyIsDeep) {
  Tensor a({2}, 1.0);
  a.set_requires_grad(true);
  Tensor b = a;
  b[0] = 9.0;
  b.grad()[0] = 4.0;
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a.grad()[0], 0.0);
}

TEST(Tensor, FiniteCheck) {
  Tensor t({2}, 0.0);
  EXPECT_TRUE(t.all_finite());
  EXPECT_NO_THROW(t.check_finite("t"));
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.check_finite("t"), std::domain_error);
  t[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(t.check_finite("t"), std::domain_error);
}

TEST(Tensor, ReshapedKeepsDataDropsGrad) {
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  t.set_requires_grad(true);
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.values(), t.values());
  EXPECT_FALSE(r.requires_grad());
  EXPECT_THROW(t.reshaped({4}), DimensionError);
}

TEST(Tensor, ShapeHelpers) {
  EXPECT_EQ(shape_numel({}), 1u);
  EXPECT_EQ(shape_numel({2, 0, 3}), 0u);
  EXPECT_EQ(shape_str({2, 3}), "[2x3]");
}
