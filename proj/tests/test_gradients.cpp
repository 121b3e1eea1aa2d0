#include <gtest/gtest.h>

#include <string>

#include "distill_seg/gradcheck.hpp"

using namespace distill_seg;

namespace {

std::vector<std::string> case_names() {
  std::vector<std::string> names;
  for (const auto& c : gradcheck::all_cases()) names.push_back(c.name);
  return names;
}

const gradcheck::Case& find_case(const std::string& name) {
  static const auto cases = gradcheck::all_cases();
  for (const auto& c : cases)
    if (c.name == name) return c;
  throw std::out_of_range(name);
}

}  // namespace

class FiniteDifference : public ::testing::TestWithParam<std::string> {};

TEST_P(FiniteDifference, AnalyticMatchesCentralDifferences) {
  const auto r = gradcheck::run(find_case(GetParam()), 10);
  EXPECT_GT(r.entries, 0u);
  EXPECT_LT(r.max_rel_err, 1e-3) << r.name;
  EXPECT_TRUE(r.ok);
}

INSTANTIATE_TEST_SUITE_P(AllCases, FiniteDifference, ::testing::ValuesIn(case_names()),
                         [](const auto& info) { return info.param; });

// The checker itself must notice a wrong gradient.
TEST(GradCheck, DetectsABrokenBackward) {
  gradcheck::Case broken{"broken", [](std::uint64_t) {
    return gradcheck::Instance{
        {DoubleTensor::from({2}, {0.3, -0.7}, true)}, [](const std::vector<DoubleTensor>& l) {
          // forward is 2x, backward claims 3x
          std::vector<double> v{2 * l[0].data()[0], 2 * l[0].data()[1]};
          return detail::make_result<double>({2}, std::move(v), {&l[0]}, [](detail::Node<double>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3 * self.grad[i];
          });
        }};
  }};
  const auto r = gradcheck::run(broken, 10);
  EXPECT_FALSE(r.ok);
  EXPECT_NEAR(r.max_rel_err, 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, RelativeErrorUsesFloor) {
  EXPECT_DOUBLE_EQ(gradcheck::relative_error(0.0, 1e-9, 1e-6), 1e-3);
  EXPECT_DOUBLE_EQ(gradcheck::relative_error(2.0, 1.0, 1e-6), 0.5);
}
