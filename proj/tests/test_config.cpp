#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "distill_seg/config.hpp"

using namespace distill_seg;

namespace {

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsAreValidAndRoundTrip) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  const auto back = ExperimentConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_DOUBLE_EQ(c.alpha, 0.1);
  EXPECT_EQ(c.n_labeled, 23);
}

TEST(Config, PartialObjectKeepsDefaults) {
  const auto c = ExperimentConfig::from_json({{"alpha", 0.3}, {"n_labeled", 8}});
  EXPECT_DOUBLE_EQ(c.alpha, 0.3);
  EXPECT_EQ(c.n_labeled, 8);
  EXPECT_DOUBLE_EQ(c.tau, ExperimentConfig{}.tau);
}

TEST(Config, HashChangesWithAnyField) {
  ExperimentConfig a, b;
  b.tau = 2.0;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.use_qc = false;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash(), ExperimentConfig{}.hash());
  EXPECT_EQ(a.hash().size(), 16u);
}

TEST(Config, UnknownKeyAndWrongTypeNamed) {
  EXPECT_NE(error_of([] { ExperimentConfig::from_json({{"alhpa", 0.1}}); }).find("alhpa"), std::string::npos);
  EXPECT_NE(error_of([] { ExperimentConfig::from_json({{"use_kd", 1}}); }).find("use_kd"), std::string::npos);
  EXPECT_THROW(ExperimentConfig::from_json({{"n_labeled", 2.5}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json(nlohmann::json::array()), ValidationError);
  EXPECT_NO_THROW(ExperimentConfig::from_json({{"alpha", 0}}));  // integer for a float field is fine
}

TEST(Config, ValidationRanges) {
  EXPECT_THROW(ExperimentConfig::from_json({{"alpha", 1.5}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"tau", 0.0}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"qc_threshold", -0.1}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"crop", 30}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"crop", 128}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"n_labeled", 33}}), ValidationError);
  EXPECT_THROW(ExperimentConfig::from_json({{"lr", 0.0}}), ValidationError);
}

TEST(Config, DerivedSettings) {
  ExperimentConfig c;
  EXPECT_EQ(c.student_epochs(), c.epochs_student_init);
  c.use_teacher_ckpt = false;
  EXPECT_EQ(c.student_epochs(), c.epochs_student);
  c.use_kd = false;
  EXPECT_EQ(c.effective_alpha(), 0.0);
  EXPECT_NE(c.volume_seed(0), c.volume_seed(1));
}

TEST(Config, LoadFileErrorsNameThePath) {
  const auto dir = std::filesystem::temp_directory_path() / "distill_seg_config";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  EXPECT_NE(error_of([&] { load_config(dir / "nope.json"); }).find("nope.json"), std::string::npos);
  io::write_text(dir / "bad.json", "{ not json");
  EXPECT_NE(error_of([&] { load_config(dir / "bad.json"); }).find("bad.json"), std::string::npos);
  io::write_text(dir / "range.json", R"({"alpha": 2})");
  const auto msg = error_of([&] { load_config(dir / "range.json"); });
  EXPECT_NE(msg.find("range.json"), std::string::npos);
  EXPECT_NE(msg.find("alpha"), std::string::npos);
  io::write_text(dir / "ok.json", R"({"tau": 2.0})");
  EXPECT_DOUBLE_EQ(load_config(dir / "ok.json").tau, 2.0);
  std::filesystem::remove_all(dir);
}
