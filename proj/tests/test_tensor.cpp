#include <gtest/gtest.h>

#include <vector>

#include "distill_seg/ops.hpp"
#include "distill_seg/tensor.hpp"

using namespace distill_seg;

TEST(Tensor, FactoriesAndShape) {
  auto t = Tensor::full({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3);
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);
  EXPECT_EQ(Tensor::scalar(2.0f).item(), 2.0f);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ValidationError);
  EXPECT_THROW(Tensor::zeros({0, 3}), ValidationError);
  EXPECT_THROW(t.item(), ValidationError);
}

TEST(Tensor, CopiesAliasCloneDoesNot) {
  auto a = Tensor::zeros({3});
  Tensor alias = a;
  auto copy = a.clone();
  alias.data()[0] = 7.0f;
  EXPECT_EQ(a.data()[0], 7.0f);
  EXPECT_EQ(copy.data()[0], 0.0f);
}

TEST(Backward, ScaleThenSum) {
  auto x = Tensor::from({2}, {0.5f, -1.0f}, true);
  backward(sum(scale(x, 3.0f)));
  EXPECT_EQ(x.grad()[0], 3.0f);
  EXPECT_EQ(x.grad()[1], 3.0f);
}

TEST(Backward, ReluSum) {
  auto x = Tensor::from({2}, {-1.0f, 2.0f}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0f);
  EXPECT_EQ(x.grad()[1], 1.0f);
}

TEST(Backward, NonScalarRejected) {
  auto x = Tensor::from({2}, {1.0f, 2.0f}, true);
  EXPECT_THROW(backward(scale(x, 2.0f)), ValidationError);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  auto x = Tensor::from({1}, {2.0f}, true);
  backward(sum(scale(x, 2.0f)));
  backward(sum(scale(x, 2.0f)));
  EXPECT_EQ(x.grad()[0], 4.0f);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0f);
}

TEST(Backward, SharedSubexpressionCountsTwice) {
  auto x = Tensor::from({1}, {3.0f}, true);
  auto y = scale(x, 2.0f);
  backward(sum(add(y, y)));
  EXPECT_EQ(x.grad()[0], 4.0f);
}

TEST(Backward, VectorJacobianSeed) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  auto y = scale(x, 2.0f);
  const std::vector<float> seed{1.0f, 0.0f, -1.0f};
  backward(y, std::span<const float>(seed));
  EXPECT_EQ(x.grad()[0], 2.0f);
  EXPECT_EQ(x.grad()[1], 0.0f);
  EXPECT_EQ(x.grad()[2], -2.0f);
  const std::vector<float> bad{1.0f};
  EXPECT_THROW(backward(y, std::span<const float>(bad)), ValidationError);
}

TEST(NoGrad, GuardStopsRecording) {
  auto x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    auto y = scale(x, 2.0f);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_FALSE(grad_enabled());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(scale(x, 2.0f).requires_grad());
}

TEST(Reshape, KeepsValuesAndRoutesGradient) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto y = x.reshape({3, 2});
  EXPECT_EQ(y.dim(0), 3);
  EXPECT_EQ(y.data()[5], 6.0f);
  const std::vector<float> seed{0, 0, 0, 0, 1, 0};
  backward(y, std::span<const float>(seed));
  EXPECT_EQ(x.grad()[4], 1.0f);
  EXPECT_THROW(x.reshape({4, 2}), ValidationError);
}

TEST(Tensor, DoublePrecisionVariant) {
  auto x = DoubleTensor::from({2}, {0.1, 0.2}, true);
  backward(sum(scale(x, 1.0 / 3.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0 / 3.0);
}
