#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distill_seg/error.hpp"
#include "distill_seg/losses.hpp"
#include "distill_seg/phantom.hpp"
#include "distill_seg/rng.hpp"
#include "distill_seg/tensor.hpp"

namespace distill_seg {

// Volume-id lists of one experiment. `labeled` and `calibration` together
// form the annotated training volumes; calibration volumes additionally feed
// the quality-classifier dataset. All four lists are pairwise disjoint.
struct DatasetSplit {
  std::vector<int> labeled;
  std::vector<int> calibration;
  std::vector<int> unlabeled;
  std::vector<int> validation;

  std::vector<int> all_labeled() const {
    std::vector<int> out = labeled;
    out.insert(out.end(), calibration.begin(), calibration.end());
    return out;
  }
};

struct SplitSpec {
  int n_volumes = 40;
  int n_labeled = 23;     // includes the calibration subset
  int n_validation = 8;   // 23:8 is the 75:25 train/validation ratio
  int n_calibration = -1; // -1: a quarter of the labeled volumes, at least one

  int calibration_count() const {
    if (n_calibration >= 0) return n_calibration;
    return n_labeled == 0 ? 0 : std::max(1, static_cast<int>(std::lround(0.25 * n_labeled)));
  }
};

// Seeded permutation of volume ids: the first n_validation go to
// validation, the next n_labeled are labeled (the last few of those being
// calibration), the rest unlabeled. Validation is therefore identical for
// every n_labeled under the same seed, and labeled sets are nested.
inline DatasetSplit make_split(const SplitSpec& spec, std::uint64_t seed) {
  const int n_cal = spec.calibration_count();
  if (spec.n_volumes <= 0) fail_validation("split: n_volumes must be positive");
  if (spec.n_labeled < 1) fail_validation("split: need at least one labeled volume");
  if (spec.n_validation < 0) fail_validation("split: n_validation must be non-negative");
  if (n_cal > spec.n_labeled)
    fail_validation("split: calibration subset (", n_cal, ") larger than labeled set (",
                    spec.n_labeled, ")");
  if (spec.n_labeled + spec.n_validation > spec.n_volumes)
    fail_validation("split: ", spec.n_labeled, " labeled + ", spec.n_validation,
                    " validation volumes exceed the ", spec.n_volumes, " available");
  std::vector<int> ids(static_cast<std::size_t>(spec.n_volumes));
  std::iota(ids.begin(), ids.end(), 0);
  RngStream rng(seed, 0x5A17);
  rng.shuffle(ids);
  DatasetSplit split;
  auto it = ids.begin();
  split.validation.assign(it, it + spec.n_validation);
  it += spec.n_validation;
  split.labeled.assign(it, it + (spec.n_labeled - n_cal));
  it += spec.n_labeled - n_cal;
  split.calibration.assign(it, it + n_cal);
  it += n_cal;
  split.unlabeled.assign(it, ids.end());
  return split;
}

struct SliceId {
  int volume = 0;
  int z = 0;

  auto operator<=>(const SliceId&) const = default;
  std::string str() const { return "v" + std::to_string(volume) + "/z" + std::to_string(z); }
};

// (x - mean) / (std + 1e-6) over one slice; population std.
inline void standardize_slice(std::span<const float> in, std::span<float> out) {
  double mean = 0.0;
  for (float v : in) mean += v;
  mean /= static_cast<double>(in.size());
  double var = 0.0;
  for (float v : in) var += (v - mean) * (v - mean);
  const double denom = std::sqrt(var / static_cast<double>(in.size())) + 1e-6;
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = static_cast<float>((in[i] - mean) / denom);
}

// Phantom volumes of one experiment with per-slice standardized copies.
class VolumeStore {
 public:
  VolumeStore() = default;
  explicit VolumeStore(std::vector<Phantom> phantoms) : phantoms_(std::move(phantoms)) {
    for (const auto& p : phantoms_) {
      const auto& e = p.volume.extents;
      std::vector<float> std_vol(e.voxels());
      for (std::int64_t z = 0; z < e.d; ++z)
        standardize_slice(p.volume.slice(z),
                          std::span(std_vol).subspan(static_cast<std::size_t>(z) * e.slice_pixels(),
                                                     e.slice_pixels()));
      standardized_.push_back(std::move(std_vol));
    }
  }

  std::size_t size() const noexcept { return phantoms_.size(); }
  const Phantom& phantom(int id) const { return phantoms_.at(static_cast<std::size_t>(id)); }
  const Extents& extents() const { return phantoms_.front().volume.extents; }

  std::span<const float> image(SliceId s) const {
    const auto& e = phantom(s.volume).volume.extents;
    return std::span(standardized_.at(static_cast<std::size_t>(s.volume)))
        .subspan(static_cast<std::size_t>(s.z) * e.slice_pixels(), e.slice_pixels());
  }
  std::span<const std::uint8_t> mask(SliceId s) const { return phantom(s.volume).mask.slice(s.z); }

  std::vector<SliceId> slices_of(std::span<const int> volumes, bool skip_empty = false) const {
    std::vector<SliceId> out;
    for (int v : volumes)
      for (int z = 0; z < phantom(v).volume.extents.d; ++z) {
        SliceId s{v, z};
        if (skip_empty) {
          auto m = mask(s);
          if (std::all_of(m.begin(), m.end(), [](std::uint8_t l) { return l == 0; })) continue;
        }
        out.push_back(s);
      }
    return out;
  }

 private:
  std::vector<Phantom> phantoms_;
  std::vector<std::vector<float>> standardized_;
};

enum class SliceSource { GroundTruth, Teacher };

// One training example: a standardized image slice and the mask it is
// trained against (ground truth or a teacher pseudo-label).
struct TrainingSlice {
  SliceId id;
  std::span<const float> image;
  std::span<const std::uint8_t> mask;
  SliceSource source = SliceSource::GroundTruth;
};

struct Batch {
  Tensor images;  // [N, 1, c, c]
  MaskBatch masks;
  std::vector<SliceId> ids;
};

struct BatchOptions {
  std::int64_t crop = 32;
  std::int64_t batch = 16;
  bool augment = true;
  std::int64_t divisor = 1;  // the model's required spatial divisor
};

// Single pass over a slice list in seeded order, emitting batches of random
// (augment) or centered crops with optional horizontal flips. The final
// batch may be short; every slice appears exactly once per pass.
class SliceBatcher {
 public:
  SliceBatcher(std::span<const TrainingSlice> slices, std::int64_t height, std::int64_t width,
               BatchOptions options, std::uint64_t seed)
      : slices_(slices), h_(height), w_(width), opt_(options), rng_(seed, 0xBA7C) {
    if (opt_.crop < 1 || opt_.crop > h_ || opt_.crop > w_)
      fail_validation("crop ", opt_.crop, " must lie in [1, min(H, W) = ", std::min(h_, w_), "]");
    if (opt_.divisor > 1 && opt_.crop % opt_.divisor != 0)
      fail_validation("crop ", opt_.crop, " must be divisible by ", opt_.divisor,
                      " (2^depth of the model)");
    if (opt_.batch < 1) fail_validation("batch size must be positive");
    order_.resize(slices_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
  }

  std::size_t batches_remaining() const {
    const auto left = order_.size() - next_;
    return (left + static_cast<std::size_t>(opt_.batch) - 1) / static_cast<std::size_t>(opt_.batch);
  }

  std::optional<Batch> next() {
    if (next_ >= order_.size()) return std::nullopt;
    const std::size_t n = std::min(order_.size() - next_, static_cast<std::size_t>(opt_.batch));
    const std::size_t c = static_cast<std::size_t>(opt_.crop);
    std::vector<float> images(n * c * c);
    Batch b;
    b.masks.n = static_cast<std::int64_t>(n);
    b.masks.h = b.masks.w = opt_.crop;
    b.masks.labels.resize(n * c * c);
    for (std::size_t i = 0; i < n; ++i) {
      const TrainingSlice& s = slices_[order_[next_ + i]];
      std::int64_t oy = (h_ - opt_.crop) / 2, ox = (w_ - opt_.crop) / 2;
      bool flip = false;
      if (opt_.augment) {
        oy = static_cast<std::int64_t>(rng_.below(static_cast<std::uint64_t>(h_ - opt_.crop + 1)));
        ox = static_cast<std::int64_t>(rng_.below(static_cast<std::uint64_t>(w_ - opt_.crop + 1)));
        flip = rng_.coin();
      }
      for (std::size_t y = 0; y < c; ++y)
        for (std::size_t x = 0; x < c; ++x) {
          const std::size_t sx = flip ? c - 1 - x : x;
          const std::size_t src = (static_cast<std::size_t>(oy) + y) * static_cast<std::size_t>(w_) +
                                  static_cast<std::size_t>(ox) + sx;
          images[(i * c + y) * c + x] = s.image[src];
          b.masks.labels[(i * c + y) * c + x] = s.mask[src];
        }
      b.ids.push_back(s.id);
    }
    next_ += n;
    b.images = Tensor::from({static_cast<std::int64_t>(n), 1, opt_.crop, opt_.crop}, std::move(images));
    return b;
  }

 private:
  std::span<const TrainingSlice> slices_;
  std::int64_t h_, w_;
  BatchOptions opt_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t next_ = 0;
};

// Full standardized slices stacked as [N, 1, H, W] for inference.
inline Tensor stack_images(const VolumeStore& store, std::span<const SliceId> ids) {
  const auto& e = store.extents();
  const std::size_t P = e.slice_pixels();
  std::vector<float> data(ids.size() * P);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto img = store.image(ids[i]);
    std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(i * P));
  }
  return Tensor::from({static_cast<std::int64_t>(ids.size()), 1, e.h, e.w}, std::move(data));
}

}  // namespace distill_seg
