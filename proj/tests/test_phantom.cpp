#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <vector>

#include "distill_seg/dataset.hpp"
#include "distill_seg/phantom.hpp"

using namespace distill_seg;

namespace {

PhantomParams small(double sigma = 0.05) { return {4, {16, 64, 64}, sigma, 4}; }

// Voxels of `label` reachable from its first voxel through 6-neighbours.
std::size_t connected_size(const MaskVolume& m, std::uint8_t label) {
  const auto& e = m.extents;
  const auto first = std::find(m.labels.begin(), m.labels.end(), label);
  if (first == m.labels.end()) return 0;
  std::vector<char> seen(m.labels.size(), 0);
  std::queue<std::size_t> q;
  q.push(static_cast<std::size_t>(first - m.labels.begin()));
  seen[q.front()] = 1;
  std::size_t n = 0;
  while (!q.empty()) {
    const std::size_t i = q.front();
    q.pop();
    ++n;
    const std::int64_t z = i / (e.h * e.w), y = (i / e.w) % e.h, x = i % e.w;
    const std::int64_t nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x}, {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
    for (const auto& p : nb) {
      if (p[0] < 0 || p[0] >= e.d || p[1] < 0 || p[1] >= e.h || p[2] < 0 || p[2] >= e.w) continue;
      const std::size_t j = static_cast<std::size_t>((p[0] * e.h + p[1]) * e.w + p[2]);
      if (!seen[j] && m.labels[j] == label) {
        seen[j] = 1;
        q.push(j);
      }
    }
  }
  return n;
}

}  // namespace

TEST(Phantom, SameSeedIsBitwiseIdentical) {
  const auto a = generate_phantom(42, small()), b = generate_phantom(42, small());
  EXPECT_EQ(a.volume.intensities, b.volume.intensities);
  EXPECT_EQ(a.mask.labels, b.mask.labels);
  EXPECT_EQ(a.volume.provenance, b.volume.provenance);
  const auto c = generate_phantom(43, small());
  EXPECT_NE(a.volume.intensities, c.volume.intensities);
}

TEST(Phantom, IntensitiesInUnitRangeAndLabelsInRange) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = generate_phantom(seed, {5, {12, 40, 48}, 0.3, 6});
    for (float v : p.volume.intensities) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (auto l : p.mask.labels) ASSERT_LT(l, 5);
  }
}

TEST(Phantom, NoiseFreeOrgansHaveCanonicalIntensity) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto p = generate_phantom(seed, small(0.0));
    const auto levels = organ_intensities(p.volume);
    ASSERT_EQ(levels.size(), 3u);
    for (std::size_t i = 0; i < p.mask.labels.size(); ++i)
      if (p.mask.labels[i] > 0) {
        ASSERT_EQ(p.volume.intensities[i], levels[p.mask.labels[i] - 1]);
      }
  }
}

TEST(Phantom, OrganFractionsWithinRegressionBand) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = generate_phantom(seed, small(0.0));
    // body voxels: everything brighter than the background level
    std::size_t body = 0;
    std::vector<std::size_t> counts(4, 0);
    const float bg = *std::min_element(p.volume.intensities.begin(), p.volume.intensities.end());
    for (std::size_t i = 0; i < p.mask.labels.size(); ++i) {
      if (p.volume.intensities[i] > bg) ++body;
      ++counts[p.mask.labels[i]];
    }
    for (int k = 1; k < 4; ++k) {
      const double frac = double(counts[k]) / double(body);
      EXPECT_GT(frac, 0.005) << "seed " << seed << " class " << k;
      EXPECT_LT(frac, 0.15) << "seed " << seed << " class " << k;
    }
  }
}

TEST(Phantom, OrgansAreConnected) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = generate_phantom(seed, small());
    for (std::uint8_t k = 1; k < 4; ++k) {
      const auto total = static_cast<std::size_t>(std::count(p.mask.labels.begin(), p.mask.labels.end(), k));
      ASSERT_GT(total, 0u);
      EXPECT_EQ(connected_size(p.mask, k), total) << "seed " << seed << " class " << int(k);
    }
  }
}

TEST(Phantom, OrgansInDepthOrder) {
  const auto p = generate_phantom(5, small(0.0));
  double prev = -1;
  for (const auto& o : p.volume.provenance.at("organs")) {
    const double cx = o.at("center")[2].get<double>();
    EXPECT_GT(cx, prev);
    prev = cx;
  }
}

TEST(Phantom, Rejections) {
  EXPECT_THROW(generate_phantom(0, {1, {16, 64, 64}, 0.05, 0}), ValidationError);
  EXPECT_THROW(generate_phantom(0, {4, {4, 64, 64}, 0.05, 0}), ValidationError);
  EXPECT_THROW(generate_phantom(0, {40, {8, 8, 8}, 0.05, 0}), ValidationError);
}

TEST(Split, ReferenceCounts) {
  const auto s = make_split({40, 23, 8, -1}, 0);
  EXPECT_EQ(s.all_labeled().size(), 23u);
  EXPECT_EQ(s.validation.size(), 8u);
  EXPECT_EQ(s.calibration.size(), 6u);  // a quarter of 23, rounded
  EXPECT_EQ(s.unlabeled.size(), 9u);
  std::set<int> all;
  for (const auto* l : {&s.labeled, &s.calibration, &s.unlabeled, &s.validation})
    for (int id : *l) EXPECT_TRUE(all.insert(id).second) << "duplicate id " << id;
  EXPECT_EQ(all.size(), 40u);
}

TEST(Split, SeedsPermuteButKeepLengths) {
  const auto a = make_split({40, 12, 8, -1}, 0), b = make_split({40, 12, 8, -1}, 1);
  EXPECT_EQ(a.labeled.size(), b.labeled.size());
  EXPECT_EQ(a.unlabeled.size(), b.unlabeled.size());
  EXPECT_NE(a.labeled, b.labeled);
  EXPECT_EQ(make_split({40, 12, 8, -1}, 0).labeled, a.labeled);
}

TEST(Split, AllLabeledLeavesNothingUnlabeled) {
  const auto s = make_split({20, 12, 8, -1}, 3);
  EXPECT_TRUE(s.unlabeled.empty());
  EXPECT_THROW(make_split({20, 13, 8, -1}, 3), ValidationError);
}

TEST(Standardize, ZeroMeanUnitStd) {
  const auto p = generate_phantom(1, small());
  std::vector<float> out(64 * 64);
  standardize_slice(p.volume.slice(8), out);
  double mean = 0, sq = 0;
  for (float v : out) mean += v;
  mean /= out.size();
  for (float v : out) sq += (v - mean) * (v - mean);
  EXPECT_LT(std::abs(mean), 1e-4);
  EXPECT_LT(std::abs(std::sqrt(sq / out.size()) - 1.0), 1e-3);
}

TEST(Standardize, UniformSliceStaysFinite) {
  std::vector<float> in(16, 0.3f), out(16);
  standardize_slice(in, out);
  for (float v : out) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 0.0f, 1e-3f);
  }
}

class BatcherTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::vector<Phantom> ph;
    for (std::uint64_t s = 0; s < 2; ++s) ph.push_back(generate_phantom(s, {2, {8, 24, 24}, 0.05, 1}));
    store = VolumeStore(std::move(ph));
    for (const auto& id : store.slices_of(std::vector<int>{0, 1}))
      slices.push_back({id, store.image(id), store.mask(id)});
  }
  VolumeStore store;
  std::vector<TrainingSlice> slices;
};

TEST_F(BatcherTest, FullCropWithoutAugmentVisitsEachSliceOnce) {
  SliceBatcher b(slices, 24, 24, {24, 5, false, 4}, 9);
  std::multiset<std::pair<int, int>> seen;
  std::size_t batches = 0;
  while (auto batch = b.next()) {
    ++batches;
    for (const auto& id : batch->ids) seen.insert({id.volume, id.z});
    EXPECT_EQ(batch->images.dim(2), 24);
  }
  EXPECT_EQ(seen.size(), slices.size());
  const std::set<std::pair<int, int>> distinct(seen.begin(), seen.end());
  EXPECT_EQ(distinct.size(), slices.size());
  EXPECT_EQ(batches, (slices.size() + 4) / 5);
}

TEST_F(BatcherTest, SameSeedSameStream) {
  SliceBatcher a(slices, 24, 24, {8, 4, true, 4}, 3), b(slices, 24, 24, {8, 4, true, 4}, 3);
  while (true) {
    auto x = a.next(), y = b.next();
    ASSERT_EQ(x.has_value(), y.has_value());
    if (!x) break;
    EXPECT_TRUE(std::equal(x->images.data().begin(), x->images.data().end(), y->images.data().begin()));
    EXPECT_EQ(x->masks.labels, y->masks.labels);
  }
}

TEST_F(BatcherTest, CropDivisibilityRejectedWithFactor) {
  try {
    SliceBatcher b(slices, 24, 24, {6, 4, true, 4}, 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(SliceBatcher(slices, 24, 24, {32, 4, true, 1}, 0), ValidationError);
}
