#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;
};

Result cli(const std::string& args) {
  const std::string cmd = std::string(DISTILL_SEG_CLI) + " " + args + " 2>&1";
  Result r{-1, ""};
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.output += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace

TEST(Cli, MissingConfigIsAValidationError) {
  const auto r = cli("train-teacher --config /nonexistent/cfg.json --out /tmp/distill_seg_cli");
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("/nonexistent/cfg.json"), std::string::npos) << r.output;
}

TEST(Cli, UnknownSubcommandAndBadValuesExitOne) {
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("").code, 1);
  const auto r = cli("train-student --alpha 2 --out /tmp/distill_seg_cli");
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("alpha"), std::string::npos) << r.output;
}

TEST(Cli, HelpSucceeds) {
  const auto r = cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("train-teacher"), std::string::npos);
}

TEST(Cli, GradCheckPasses) {
  const auto r = cli("grad-check --instances 2");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("conv_relu_pool_loss"), std::string::npos) << r.output;
}

TEST(Cli, ReportOnEmptyRootFailsCleanly) {
  const fs::path root = fs::temp_directory_path() / "distill_seg_cli_empty";
  fs::remove_all(root);
  EXPECT_EQ(cli("report --out " + root.string()).code, 1);
}
