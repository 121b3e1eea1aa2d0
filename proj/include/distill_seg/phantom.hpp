#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "distill_seg/error.hpp"
#include "distill_seg/rng.hpp"

namespace distill_seg {

struct Extents {
  std::int64_t d = 16, h = 64, w = 64;

  std::size_t voxels() const noexcept { return static_cast<std::size_t>(d * h * w); }
  std::size_t slice_pixels() const noexcept { return static_cast<std::size_t>(h * w); }
  bool operator==(const Extents&) const = default;
};

struct Volume {
  Extents extents;
  std::vector<float> intensities;  // row-major [D, H, W], values in [0, 1]
  std::uint64_t seed = 0;
  nlohmann::json provenance;

  std::span<const float> slice(std::int64_t z) const {
    return std::span(intensities).subspan(static_cast<std::size_t>(z) * extents.slice_pixels(),
                                          extents.slice_pixels());
  }
};

struct MaskVolume {
  Extents extents;
  std::vector<std::uint8_t> labels;  // 0 = background, 1..K-1 = organs

  std::span<const std::uint8_t> slice(std::int64_t z) const {
    return std::span(labels).subspan(static_cast<std::size_t>(z) * extents.slice_pixels(),
                                     extents.slice_pixels());
  }
};

struct PhantomParams {
  int num_classes = 4;
  Extents extents{};
  double noise_sigma = 0.05;
  int distractors = 4;
};

struct Phantom {
  Volume volume;
  MaskVolume mask;
};

namespace detail {

struct Ellipsoid {
  double cz, cy, cx, rz, ry, rx;

  double level(double z, double y, double x) const {
    const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
    return a * a + b * b + c * c;
  }
  bool contains(double z, double y, double x) const { return level(z, y, x) <= 1.0; }

  // Conservative disjointness via bounding boxes.
  bool box_overlaps(const Ellipsoid& o) const {
    return std::abs(cz - o.cz) < rz + o.rz && std::abs(cy - o.cy) < ry + o.ry &&
           std::abs(cx - o.cx) < rx + o.rx;
  }
};

inline constexpr std::array<double, 6> kOrganBaseIntensity{0.58, 0.76, 0.94, 0.67, 0.85, 0.50};

}  // namespace detail

// Synthetic "fish" volume: a bright elliptical body spanning the volume,
// K-1 ellipsoidal organs in a fixed head-to-tail order (advancing along the
// depth axis and the long in-plane axis), organ-bright distractor blobs that
// stay unlabeled, and clamped Gaussian noise. The mask labels the noise-free
// geometry; each organ is its ellipsoid clipped to the body.
inline Phantom generate_phantom(std::uint64_t seed, const PhantomParams& params) {
  const int K = params.num_classes;
  const Extents ext = params.extents;
  if (K < 2) fail_validation("phantom: need K >= 2 classes, got ", K);
  if (K > 255) fail_validation("phantom: at most 255 classes fit a u8 mask");
  if (ext.d < 8 || ext.h < 8 || ext.w < 8)
    fail_validation("phantom: extents must each be >= 8, got ", ext.d, "x", ext.h, "x", ext.w);
  if (params.noise_sigma < 0) fail_validation("phantom: noise_sigma must be >= 0");
  const int organs = K - 1;
  const double D = double(ext.d), H = double(ext.h), W = double(ext.w);
  const double slot = 0.6 * W / organs;
  if (slot * 0.3 < 2.0 || 0.11 * H < 2.0)
    fail_validation("phantom: ", organs, " organs do not fit in extents ", ext.d, "x", ext.h, "x",
                    ext.w, " (need organ radius >= 2 voxels)");

  RngStream geo(seed, 1);
  const detail::Ellipsoid body{D * (0.5 + geo.uniform(-0.03, 0.03)), H * (0.5 + geo.uniform(-0.04, 0.04)),
                               W * (0.5 + geo.uniform(-0.03, 0.03)), D * geo.uniform(0.46, 0.52),
                               H * geo.uniform(0.27, 0.33), W * geo.uniform(0.41, 0.46)};
  const double body_level = geo.uniform(0.34, 0.44);
  const double background_level = geo.uniform(0.04, 0.12);
  const double bias_amp = geo.uniform(0.0, 0.05);
  const double bias_phase = geo.uniform(0.0, 6.283185307179586);

  std::vector<detail::Ellipsoid> organ_shapes;
  std::vector<double> organ_levels;
  for (int k = 1; k <= organs; ++k) {
    const double t = (k - 0.5) / organs;
    const double cx = 0.2 * W + slot * (k - 0.5) + slot * geo.uniform(-0.1, 0.1);
    const double rx = slot * geo.uniform(0.34, 0.42);
    const double cz = D * (0.25 + 0.5 * t + geo.uniform(-0.06, 0.06));
    const double rz = D * geo.uniform(0.20, 0.28);
    const double cy = H * (0.5 + geo.uniform(-0.08, 0.08));
    const double ry = H * geo.uniform(0.11, 0.16);
    organ_shapes.push_back({cz, cy, cx, std::max(rz, 1.0), ry, rx});
    const double base = detail::kOrganBaseIntensity[(k - 1) % detail::kOrganBaseIntensity.size()];
    organ_levels.push_back(std::clamp(base + geo.uniform(-0.03, 0.03), 0.0, 1.0));
  }

  std::vector<detail::Ellipsoid> blobs;
  std::vector<double> blob_levels;
  for (int i = 0; i < params.distractors; ++i) {
    for (int attempt = 0; attempt < 32; ++attempt) {
      const double rr = geo.uniform(1.5, 3.0);
      detail::Ellipsoid b{geo.uniform(0.2, 0.8) * D, body.cy + body.ry * geo.uniform(-0.6, 0.6),
                          body.cx + body.rx * geo.uniform(-0.75, 0.75), geo.uniform(1.0, 2.5), rr,
                          rr * geo.uniform(0.8, 1.3)};
      const double level = geo.uniform(0.55, 0.95);
      const bool clear = std::none_of(organ_shapes.begin(), organ_shapes.end(),
                                      [&](const auto& o) { return o.box_overlaps(b); });
      if (clear) {
        blobs.push_back(b);
        blob_levels.push_back(level);
        break;
      }
    }
  }

  Phantom out;
  out.volume.extents = out.mask.extents = ext;
  out.volume.seed = seed;
  out.volume.intensities.assign(ext.voxels(), 0.0f);
  out.mask.labels.assign(ext.voxels(), 0);
  const CounterRng noise(seed, 2);
  for (std::int64_t z = 0; z < ext.d; ++z)
    for (std::int64_t y = 0; y < ext.h; ++y)
      for (std::int64_t x = 0; x < ext.w; ++x) {
        const double pz = z + 0.5, py = y + 0.5, px = x + 0.5;
        const std::size_t idx = static_cast<std::size_t>((z * ext.h + y) * ext.w + x);
        double v = background_level;
        std::uint8_t label = 0;
        if (body.contains(pz, py, px)) {
          v = body_level + bias_amp * std::sin(6.283185307179586 * px / W + bias_phase) *
                               std::cos(3.141592653589793 * py / H);
          for (std::size_t b = 0; b < blobs.size(); ++b)
            if (blobs[b].contains(pz, py, px)) v = blob_levels[b];
          for (int k = 0; k < organs; ++k)
            if (organ_shapes[k].contains(pz, py, px)) {
              label = static_cast<std::uint8_t>(k + 1);
              v = organ_levels[k];
            }
        }
        if (params.noise_sigma > 0) v += params.noise_sigma * noise.normal(idx);
        out.volume.intensities[idx] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        out.mask.labels[idx] = label;
      }

  auto organ_json = nlohmann::json::array();
  for (int k = 0; k < organs; ++k) {
    const auto& e = organ_shapes[k];
    organ_json.push_back({{"class", k + 1},
                          {"center", {e.cz, e.cy, e.cx}},
                          {"radii", {e.rz, e.ry, e.rx}},
                          {"intensity", static_cast<float>(organ_levels[k])}});
  }
  out.volume.provenance = {{"generator", "phantom/v1"},
                           {"seed", seed},
                           {"num_classes", K},
                           {"extents", {ext.d, ext.h, ext.w}},
                           {"noise_sigma", params.noise_sigma},
                           {"distractors", blobs.size()},
                           {"organs", organ_json}};
  return out;
}

// Canonical (noise-free) intensity of each organ class, index k-1.
inline std::vector<float> organ_intensities(const Volume& v) {
  std::vector<float> out;
  for (const auto& o : v.provenance.at("organs")) out.push_back(o.at("intensity").get<float>());
  return out;
}

}  // namespace distill_seg
