#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "distill_seg/metrics.hpp"
#include "distill_seg/rng.hpp"

using namespace distill_seg;

TEST(Confusion, CountsByGroundTruthAndPrediction) {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> gt{0, 0, 1, 1, 2, 2}, pred{0, 1, 1, 1, 0, 2};
  cm.accumulate(pred, gt);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_EQ(cm.at(2, 0), 1u);
  EXPECT_EQ(cm.total(), 6u);
  EXPECT_EQ(cm.false_positive(0), 1u);
  EXPECT_EQ(cm.false_negative(0), 1u);
}

TEST(Confusion, Rejections) {
  ConfusionMatrix cm(2);
  const std::vector<std::uint8_t> a{0, 1}, b{0}, bad{0, 2};
  EXPECT_THROW(cm.accumulate(a, b), ValidationError);
  EXPECT_THROW(cm.accumulate(bad, a), ValidationError);
  ConfusionMatrix other(3);
  EXPECT_THROW(cm += other, ValidationError);
}

TEST(Metrics, HandComputedIouAndDice) {
  ConfusionMatrix cm(2);
  // class 1: tp 2, fp 1, fn 1 -> IoU 0.5, Dice 2/3
  const std::vector<std::uint8_t> gt{1, 1, 1, 0, 0, 0}, pred{1, 1, 0, 1, 0, 0};
  cm.accumulate(pred, gt);
  const auto iou = iou_per_class(cm), dice = dice_per_class(cm);
  EXPECT_DOUBLE_EQ(*iou[1], 0.5);
  EXPECT_DOUBLE_EQ(*dice[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*mean_iou(cm), 0.5);
  EXPECT_DOUBLE_EQ(*mean_iou(cm, false), 0.5);
}

TEST(Metrics, PerfectPredictionScoresOne) {
  ConfusionMatrix cm(4);
  const std::vector<std::uint8_t> m{0, 1, 2, 3, 3, 2};
  cm.accumulate(m, m);
  EXPECT_DOUBLE_EQ(*mean_iou(cm), 1.0);
  EXPECT_DOUBLE_EQ(*mean_dice(cm), 1.0);
}

TEST(Metrics, AbsentClassIsExcludedNotZero) {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> m{0, 0, 1, 1};
  cm.accumulate(m, m);
  const auto iou = iou_per_class(cm);
  EXPECT_FALSE(iou[2].has_value());
  EXPECT_DOUBLE_EQ(*mean_iou(cm), 1.0);
  EXPECT_FALSE(mean_iou(ConfusionMatrix(3)).has_value());
}

TEST(Metrics, DiceIouIdentityOnRandomMatrices) {
  RngStream rs(3, 3);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionMatrix cm(5);
    for (int g = 0; g < 5; ++g)
      for (int p = 0; p < 5; ++p) cm.at(g, p) = rs.below(1000);
    const auto iou = iou_per_class(cm), dice = dice_per_class(cm);
    for (int k = 0; k < 5; ++k) {
      ASSERT_TRUE(iou[k] && dice[k]);
      EXPECT_NEAR(*dice[k], 2.0 * *iou[k] / (1.0 + *iou[k]), 1e-9);
    }
  }
}

TEST(Metrics, BackgroundToggle) {
  ConfusionMatrix cm(2);
  const std::vector<std::uint8_t> gt{0, 0, 0, 1}, pred{0, 0, 1, 1};
  cm.accumulate(pred, gt);
  EXPECT_DOUBLE_EQ(*mean_iou(cm, false), 0.5);
  EXPECT_DOUBLE_EQ(*mean_iou(cm, true), (2.0 / 3.0 + 0.5) / 2.0);
}

TEST(MetricsReport, JsonRoundTrip) {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> gt{0, 1, 1, 0}, pred{0, 1, 0, 0};
  cm.accumulate(pred, gt);
  auto r = MetricsReport::from(cm);
  r.config_hash = "abc";
  r.stage = "evaluate";
  const auto j = r.to_json();
  for (const char* key : {"per_class_iou", "per_class_dice", "mean_iou", "mean_dice", "pixels_evaluated", "config_hash"})
    EXPECT_TRUE(j.contains(key)) << key;
  const auto back = MetricsReport::from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.pixels_evaluated, 4u);
  EXPECT_TRUE(j["per_class_iou"][2].is_null());
}
