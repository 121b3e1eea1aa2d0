#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "distill_seg/report.hpp"

using namespace distill_seg;
namespace fs = std::filesystem;

namespace {

// Two-class report whose foreground IoU is tp / (tp + 10).
MetricsReport report_with(std::uint64_t tp) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 1000;
  cm.at(1, 1) = tp;
  cm.at(1, 0) = 10;
  return MetricsReport::from(cm, false);
}

void write_json(const fs::path& p, const nlohmann::json& j) { io::write_text(p, j.dump()); }

void fake_run(const fs::path& root, int n_labeled, std::uint64_t seed, std::uint64_t teacher_tp,
              std::uint64_t student_tp, bool with_ablation) {
  ExperimentConfig c;
  c.n_labeled = n_labeled;
  c.data_seed = seed;
  const auto dir = root / c.hash();
  fs::create_directories(dir / "metrics");
  write_json(dir / "config.json", c.to_json());
  write_json(dir / "metrics" / "teacher.json", report_with(teacher_tp).to_json());
  write_json(dir / "metrics" / "student.json", report_with(student_tp).to_json());
  if (with_ablation) {
    AblationTable t;
    t.rows.push_back({"Fully supervised", false, false, false, report_with(teacher_tp), {}});
    t.rows.push_back({"Pseudo-Labeling", false, false, false, report_with(10), {}});
    t.rows.push_back({"Proposed", true, true, true, report_with(student_tp), {}});
    write_json(dir / "ablation.json", t.to_json());
  }
}

class ReportTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / "distill_seg_report";
    fs::remove_all(root);
    fake_run(root, 2, 0, 10, 30, false);   // IoU 0.5 vs 0.75
    fake_run(root, 2, 1, 30, 90, false);   // 0.75 vs 0.9
    fake_run(root, 8, 0, 90, 90, true);
    fake_run(root, 8, 1, 90, 190, true);
    fs::create_directories(root / "stray");  // no config.json: ignored
  }
  void TearDown() override { fs::remove_all(root); }
  fs::path root;
};

}  // namespace

TEST_F(ReportTest, ScanFindsRunsWithConfig) {
  const auto runs = scan_runs(root);
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) {
    EXPECT_TRUE(r.teacher && r.student);
    EXPECT_EQ(r.ablation.has_value(), r.config.n_labeled == 8);
  }
  EXPECT_THROW(scan_runs(root / "missing"), ValidationError);
}

TEST_F(ReportTest, SweepAveragesSeedsPerLevel) {
  const auto rows = labeled_sweep(scan_runs(root));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].n_labeled, 2);
  EXPECT_EQ(rows[0].seeds, 2);
  EXPECT_NEAR(rows[0].baseline_miou, (0.5 + 0.75) / 2, 1e-12);
  EXPECT_NEAR(rows[0].proposed_miou, (0.75 + 0.9) / 2, 1e-12);
  EXPECT_NEAR(rows[1].proposed_miou, (0.9 + 0.95) / 2, 1e-12);
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "n_labeled,seeds,baseline_miou,baseline_mdice,proposed_miou,proposed_mdice");
  EXPECT_NE(sweep_text(rows).find("0.6250"), std::string::npos);
}

TEST_F(ReportTest, AblationDeltasAgainstPseudoLabeling) {
  const auto rows = ablation_summary(scan_runs(root));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_FALSE(rows[0].delta_miou);
  EXPECT_FALSE(rows[1].delta_miou);
  ASSERT_TRUE(rows[2].delta_miou);
  EXPECT_NEAR(*rows[2].delta_miou, (0.9 + 0.95) / 2 - 0.5, 1e-12);
  EXPECT_EQ(rows[2].seeds, 2);
  EXPECT_NE(ablation_text(rows).find("(+0.4250)"), std::string::npos) << ablation_text(rows);
  EXPECT_NE(ablation_csv(rows).find("\"Proposed\",1,1,1,2,"), std::string::npos);
}
