#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "distill_seg/error.hpp"

namespace distill_seg {

// K x K counts; rows are ground-truth classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0)
      : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 0) fail_validation("confusion matrix needs K >= 0");
  }

  int num_classes() const noexcept { return k_; }

  std::uint64_t at(int gt, int pred) const { return counts_.at(index(gt, pred)); }
  std::uint64_t& at(int gt, int pred) { return counts_.at(index(gt, pred)); }

  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size())
      fail_validation("confusion matrix: prediction has ", pred.size(),
                      " pixels but ground truth has ", gt.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] >= k_ || gt[i] >= k_)
        fail_validation("confusion matrix: label out of range [0,", k_, ") at pixel ", i);
      ++counts_[index(gt[i], pred[i])];
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) fail_validation("cannot merge confusion matrices of different K");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t true_positive(int k) const { return at(k, k); }
  std::uint64_t false_positive(int k) const {
    std::uint64_t s = 0;
    for (int g = 0; g < k_; ++g)
      if (g != k) s += at(g, k);
    return s;
  }
  std::uint64_t false_negative(int k) const {
    std::uint64_t s = 0;
    for (int p = 0; p < k_; ++p)
      if (p != k) s += at(k, p);
    return s;
  }

 private:
  std::size_t index(int gt, int pred) const {
    return static_cast<std::size_t>(gt) * static_cast<std::size_t>(k_) + static_cast<std::size_t>(pred);
  }

  int k_;
  std::vector<std::uint64_t> counts_;
};

// Per-class scores; nullopt marks a class absent from both prediction and
// ground truth, which is excluded from means.
using ClassScores = std::vector<std::optional<double>>;

inline ClassScores iou_per_class(const ConfusionMatrix& cm) {
  ClassScores out(static_cast<std::size_t>(cm.num_classes()));
  for (int k = 0; k < cm.num_classes(); ++k) {
    const auto tp = cm.true_positive(k);
    const auto denom = tp + cm.false_positive(k) + cm.false_negative(k);
    if (denom > 0) out[k] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

inline ClassScores dice_per_class(const ConfusionMatrix& cm) {
  ClassScores out(static_cast<std::size_t>(cm.num_classes()));
  for (int k = 0; k < cm.num_classes(); ++k) {
    const auto tp = cm.true_positive(k);
    const auto denom = 2 * tp + cm.false_positive(k) + cm.false_negative(k);
    if (denom > 0) out[k] = 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

// Mean over defined classes; nullopt when no class is evaluable.
inline std::optional<double> mean_defined(const ClassScores& scores, bool include_background = true) {
  double total = 0.0;
  int n = 0;
  for (std::size_t k = include_background ? 0 : 1; k < scores.size(); ++k)
    if (scores[k]) {
      total += *scores[k];
      ++n;
    }
  if (n == 0) return std::nullopt;
  return total / n;
}

inline std::optional<double> mean_iou(const ConfusionMatrix& cm, bool include_background = true) {
  return mean_defined(iou_per_class(cm), include_background);
}

inline std::optional<double> mean_dice(const ConfusionMatrix& cm, bool include_background = true) {
  return mean_defined(dice_per_class(cm), include_background);
}

struct MetricsReport {
  ClassScores per_class_iou;
  ClassScores per_class_dice;
  std::optional<double> mean_iou;
  std::optional<double> mean_dice;
  std::uint64_t pixels_evaluated = 0;
  bool include_background = true;
  std::string config_hash;
  std::string stage;

  static MetricsReport from(const ConfusionMatrix& cm, bool include_background = true) {
    MetricsReport r;
    r.per_class_iou = iou_per_class(cm);
    r.per_class_dice = dice_per_class(cm);
    r.mean_iou = mean_defined(r.per_class_iou, include_background);
    r.mean_dice = mean_defined(r.per_class_dice, include_background);
    r.pixels_evaluated = cm.total();
    r.include_background = include_background;
    return r;
  }

  double miou() const {
    if (!mean_iou) fail_runtime("metrics report has no evaluable classes");
    return *mean_iou;
  }
  double mdice() const {
    if (!mean_dice) fail_runtime("metrics report has no evaluable classes");
    return *mean_dice;
  }

  nlohmann::json to_json() const {
    auto scores = [](const ClassScores& s) {
      auto arr = nlohmann::json::array();
      for (const auto& v : s) arr.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
      return arr;
    };
    auto opt = [](const std::optional<double>& v) {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    return {{"per_class_iou", scores(per_class_iou)},
            {"per_class_dice", scores(per_class_dice)},
            {"mean_iou", opt(mean_iou)},
            {"mean_dice", opt(mean_dice)},
            {"pixels_evaluated", pixels_evaluated},
            {"include_background", include_background},
            {"config_hash", config_hash},
            {"stage", stage}};
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    auto scores = [](const nlohmann::json& arr) {
      ClassScores s;
      for (const auto& v : arr) s.push_back(v.is_null() ? std::nullopt : std::optional(v.get<double>()));
      return s;
    };
    auto opt = [](const nlohmann::json& v) {
      return v.is_null() ? std::nullopt : std::optional(v.get<double>());
    };
    MetricsReport r;
    r.per_class_iou = scores(j.at("per_class_iou"));
    r.per_class_dice = scores(j.at("per_class_dice"));
    r.mean_iou = opt(j.at("mean_iou"));
    r.mean_dice = opt(j.at("mean_dice"));
    r.pixels_evaluated = j.at("pixels_evaluated").get<std::uint64_t>();
    r.include_background = j.value("include_background", true);
    r.config_hash = j.value("config_hash", "");
    r.stage = j.value("stage", "");
    return r;
  }
};

}  // namespace distill_seg
