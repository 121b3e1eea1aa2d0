#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "distill_seg/adam.hpp"
#include "distill_seg/checkpoint.hpp"
#include "distill_seg/losses.hpp"
#include "distill_seg/models.hpp"
#include "distill_seg/rng.hpp"

using namespace distill_seg;

TEST(SegModel, OutputShapeMatchesInput) {
  SegModel m({1, 4, 2, 4}, 0);
  auto y = m.forward(Tensor::zeros({2, 1, 16, 12}));
  EXPECT_EQ(y.shape(), (Shape{2, 4, 16, 12}));
  EXPECT_EQ(m.required_divisor(), 4);
}

TEST(SegModel, RejectsIndivisibleExtentsAndWrongChannels) {
  SegModel m({1, 4, 2, 3}, 0);
  try {
    m.forward(Tensor::zeros({1, 1, 16, 10}));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(m.forward(Tensor::zeros({1, 2, 16, 16})), ValidationError);
  EXPECT_THROW(SegModel({1, 4, 0, 3}, 0), ValidationError);
  EXPECT_THROW(SegModel({1, 4, 2, 1}, 0), ValidationError);
}

TEST(SegModel, InitIsDeterministicPerSeed) {
  SegModel a({1, 4, 2, 3}, 11), b({1, 4, 2, 3}, 11), c({1, 4, 2, 3}, 12);
  EXPECT_EQ(a.params().checksum(), b.params().checksum());
  EXPECT_NE(a.params().checksum(), c.params().checksum());
}

TEST(SegModel, ParameterNamesUniqueAndBiasesZero) {
  SegModel m({1, 4, 2, 3}, 3);
  std::set<std::string> names;
  for (const auto& p : m.params().entries()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    if (p.value.rank() == 1) {
      for (float v : p.value.data()) EXPECT_EQ(v, 0.0f);
    }
  }
  EXPECT_TRUE(m.params().find("head.weight"));
}

TEST(SegModel, ArchHashTracksConfig) {
  EXPECT_EQ(SegModelConfig({1, 8, 2, 4}).arch_hash(), SegModelConfig({1, 8, 2, 4}).arch_hash());
  EXPECT_NE(SegModelConfig({1, 8, 2, 4}).arch_hash(), SegModelConfig({1, 8, 3, 4}).arch_hash());
  EXPECT_NE(SegModelConfig({1, 8, 2, 4}).arch_hash(), QualityModelConfig({4, 8}).arch_hash());
}

TEST(SegModel, CheckpointMissingOrMisshapenParameterRejected) {
  SegModel m({1, 4, 1, 3}, 0);
  auto ckpt = make_checkpoint(m, 0, 0);
  auto missing = ckpt;
  missing.tensors.pop_back();
  EXPECT_THROW(init_from_checkpoint(m, missing), ValidationError);
  auto bent = ckpt;
  bent.tensors[0].shape[0] += 1;
  EXPECT_THROW(init_from_checkpoint(m, bent), ValidationError);
}

TEST(SegModel, TrainStepReducesLossOnFixedBatch) {
  SegModel m({1, 4, 1, 2}, 1);
  std::vector<float> img(64);
  MaskBatch mask{1, 8, 8, std::vector<std::uint8_t>(64, 0)};
  for (int i = 0; i < 64; ++i) {
    const bool fg = (i % 8) >= 4;
    img[i] = fg ? 1.0f : -1.0f;
    mask.labels[i] = fg;
  }
  auto x = Tensor::from({1, 1, 8, 8}, img);
  float first = 0, last = 0;
  Adam opt(m.params().tensors(), {1e-2f});
  for (int step = 0; step < 30; ++step) {
    opt.zero_grad();
    auto loss = cross_entropy(m.forward(x), mask);
    if (step == 0) first = loss.item();
    last = loss.item();
    backward(loss);
    opt.step();
  }
  EXPECT_LT(last, 0.5f * first);
}

TEST(QualityModel, OutputShapeAndInputChecks) {
  QualityModel q({4, 4}, 0);
  EXPECT_EQ(q.forward(Tensor::zeros({3, 5, 8, 8})).shape(), (Shape{3, 1}));
  EXPECT_THROW(q.forward(Tensor::zeros({1, 4, 8, 8})), ValidationError);
  EXPECT_THROW(q.forward(Tensor::zeros({1, 5, 6, 8})), ValidationError);
  EXPECT_THROW(QualityModel({1, 4}, 0), ValidationError);
}

TEST(SegModel, ReferenceShapesAndDivisibility) {
  SegModel m({1, 8, 2, 4}, 0);
  EXPECT_EQ(m.forward(Tensor::zeros({1, 1, 32, 32})).shape(), (Shape{1, 4, 32, 32}));
  EXPECT_NO_THROW(SegModel({1, 4, 3, 4}, 0).forward(Tensor::zeros({1, 1, 32, 32})));
  EXPECT_THROW(SegModel({1, 2, 6, 4}, 0).forward(Tensor::zeros({1, 1, 32, 32})), ValidationError);
}

TEST(SegModel, LoadedStudentReproducesTeacherLogits) {
  SegModel teacher({1, 4, 2, 3}, 1), student({1, 4, 2, 3}, 2);
  const auto ckpt = Checkpoint::decode(make_checkpoint(teacher, 0, 1).encode());
  init_from_checkpoint(student, ckpt);
  std::vector<float> img(2 * 16 * 16);
  RngStream rs(8, 8);
  for (auto& v : img) v = static_cast<float>(rs.normal());
  const auto x = Tensor::from({2, 1, 16, 16}, img);
  const auto a = teacher.forward(x), b = student.forward(x);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  // one optimizer step moves the student away from the teacher
  Adam opt(student.params().tensors(), {1e-3f});
  backward(cross_entropy(student.forward(x), MaskBatch{2, 16, 16, std::vector<std::uint8_t>(512, 1)}));
  opt.step();
  EXPECT_NE(student.params().checksum(), teacher.params().checksum());
}

TEST(SegModel, TeacherAndStudentShareParameterLayout) {
  SegModel a({1, 8, 2, 4}, 0), b({1, 8, 2, 4}, 99);
  ASSERT_EQ(a.params().entries().size(), b.params().entries().size());
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    EXPECT_EQ(a.params().entries()[i].name, b.params().entries()[i].name);
    EXPECT_EQ(a.params().entries()[i].value.shape(), b.params().entries()[i].value.shape());
  }
}

TEST(QualityModel, ReferenceShapeFiniteAndDeterministic) {
  QualityModel a({4, 8}, 5), b({4, 8}, 5);
  const auto y = a.forward(Tensor::zeros({2, 5, 32, 32}));
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  for (float v : y.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(a.params().checksum(), b.params().checksum());
  EXPECT_THROW(a.forward(Tensor::zeros({2, 4, 32, 32})), ValidationError);
}
