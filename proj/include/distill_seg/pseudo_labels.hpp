#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "distill_seg/binary_io.hpp"
#include "distill_seg/dataset.hpp"
#include "distill_seg/error.hpp"
#include "distill_seg/volume_io.hpp"

namespace distill_seg {

struct PseudoLabel {
  SliceId id;
  std::vector<std::uint8_t> mask;  // argmax of the teacher's full-slice logits
  std::optional<float> score;      // QC probability that the mask is good
  std::optional<bool> accepted;
};

// Teacher predictions on unlabeled slices. Teacher logits are never stored:
// students recompute them on their own crops, so only the flag is recorded.
struct PseudoLabelSet {
  static constexpr int kVersion = 1;

  std::string teacher_checkpoint;  // content hash of the producing checkpoint
  std::int64_t height = 0, width = 0;
  bool recompute_logits = true;
  std::optional<double> threshold;  // set once filtered
  std::string config_hash;
  std::string stage = "pseudo-label";
  std::vector<PseudoLabel> entries;

  bool scored() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.score.has_value(); });
  }
  std::size_t accepted_count() const {
    return static_cast<std::size_t>(std::count_if(
        entries.begin(), entries.end(), [](const auto& e) { return e.accepted.value_or(false); }));
  }
  double acceptance_rate() const {
    return entries.empty() ? 0.0 : double(accepted_count()) / double(entries.size());
  }

  io::Bytes encode() const;
  static PseudoLabelSet decode(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static PseudoLabelSet load(const std::filesystem::path& path) {
    try {
      return decode(io::read_file(path));
    } catch (const ValidationError& e) {
      fail_validation(path.string(), ": ", e.what());
    }
  }
};

// Sets accepted = score >= threshold on every entry.
inline void apply_threshold(PseudoLabelSet& pls, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    fail_validation("filter threshold must lie in [0, 1], got ", threshold);
  for (const auto& e : pls.entries)
    if (!e.score) fail_validation("pseudo-label ", e.id.str(), " has no quality score");
  for (auto& e : pls.entries) e.accepted = double(*e.score) >= threshold;
  pls.threshold = threshold;
  pls.stage = "filter";
}

// Manifest, separator, then one single-slice mask record (.msk layout) per
// entry in manifest order.
inline io::Bytes PseudoLabelSet::encode() const {
  nlohmann::json m;
  m["version"] = kVersion;
  m["teacher_checkpoint"] = teacher_checkpoint;
  m["height"] = height;
  m["width"] = width;
  m["teacher_logits"] = recompute_logits ? "recompute" : "stored";
  m["threshold"] = threshold ? nlohmann::json(*threshold) : nlohmann::json(nullptr);
  m["config_hash"] = config_hash;
  m["stage"] = stage;
  auto list = nlohmann::json::array();
  for (const auto& e : entries)
    list.push_back({{"volume", e.id.volume},
                    {"z", e.id.z},
                    {"score", e.score ? nlohmann::json(*e.score) : nlohmann::json(nullptr)},
                    {"accepted", e.accepted ? nlohmann::json(*e.accepted) : nlohmann::json(nullptr)}});
  m["entries"] = std::move(list);
  const std::string text = m.dump(1);
  io::Bytes out(text.begin(), text.end());
  out.insert(out.end(), io::kManifestSeparator.begin(), io::kManifestSeparator.end());
  for (const auto& e : entries) {
    if (e.mask.size() != static_cast<std::size_t>(height * width))
      fail_validation("pseudo-label ", e.id.str(), " mask has ", e.mask.size(), " pixels, expected ",
                      height * width);
    const auto rec = io::encode_mask({{1, height, width}, e.mask});
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

inline PseudoLabelSet PseudoLabelSet::decode(std::span<const std::uint8_t> bytes) {
  auto [text, blob] = io::split_manifest(bytes, "pseudo-label set");
  const std::size_t blob_start = bytes.size() - blob.size();
  PseudoLabelSet pls;
  try {
    const auto m = nlohmann::json::parse(text);
    if (m.at("version").get<int>() != kVersion)
      fail_validation("unsupported pseudo-label set version ", m.at("version").dump());
    pls.teacher_checkpoint = m.at("teacher_checkpoint").get<std::string>();
    pls.height = m.at("height").get<std::int64_t>();
    pls.width = m.at("width").get<std::int64_t>();
    pls.recompute_logits = m.at("teacher_logits").get<std::string>() == "recompute";
    if (!m.at("threshold").is_null()) pls.threshold = m.at("threshold").get<double>();
    pls.config_hash = m.value("config_hash", "");
    pls.stage = m.value("stage", "");
    std::size_t offset = 0;
    for (const auto& j : m.at("entries")) {
      PseudoLabel e;
      e.id = {j.at("volume").get<int>(), j.at("z").get<int>()};
      if (!j.at("score").is_null()) e.score = j.at("score").get<float>();
      if (!j.at("accepted").is_null()) e.accepted = j.at("accepted").get<bool>();
      MaskVolume rec;
      try {
        offset += io::decode_mask_record(blob.subspan(offset), rec);
      } catch (const ValidationError& err) {
        fail_validation("mask of ", e.id.str(), " at offset ", blob_start + offset, ": ", err.what());
      }
      if (rec.extents != Extents{1, pls.height, pls.width})
        fail_validation("mask of ", e.id.str(), " has extents ", rec.extents.d, "x", rec.extents.h,
                        "x", rec.extents.w, ", expected 1x", pls.height, "x", pls.width);
      e.mask = std::move(rec.labels);
      pls.entries.push_back(std::move(e));
    }
    if (offset != blob.size())
      fail_validation("payload length mismatch: ", blob.size() - offset, " trailing bytes at offset ",
                      blob_start + offset);
  } catch (const nlohmann::json::exception& e) {
    fail_validation("malformed pseudo-label manifest: ", e.what());
  }
  return pls;
}

}  // namespace distill_seg
