#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "distill_seg/binary_io.hpp"
#include "distill_seg/error.hpp"
#include "distill_seg/models.hpp"

namespace distill_seg {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Parameter snapshot plus provenance. On disk: a JSON manifest, the
// "\n---\n" separator, then all tensors as little-endian float32 in
// manifest order.
struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string arch_hash;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string stage;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  // Hash of the serialized bytes; identifies exactly this set of weights.
  std::string content_hash() const;
  io::Bytes encode() const;
  static Checkpoint decode(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static Checkpoint load(const std::filesystem::path& path) {
    try {
      return decode(io::read_file(path));
    } catch (const ValidationError& e) {
      fail_validation(path.string(), ": ", e.what());
    }
  }
};

inline Checkpoint make_checkpoint(const ParamSet& params, std::string arch_hash, std::int64_t step,
                                  std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.arch_hash = std::move(arch_hash);
  ckpt.step = step;
  ckpt.seed = seed;
  for (const auto& p : params.entries()) {
    auto v = p.value.data();
    ckpt.tensors.push_back({p.name, p.value.shape(), std::vector<float>(v.begin(), v.end())});
  }
  return ckpt;
}

template <typename Model>
Checkpoint make_checkpoint(const Model& model, std::int64_t step, std::uint64_t seed) {
  return make_checkpoint(model.params(), model.arch_hash(), step, seed);
}

inline io::Bytes Checkpoint::encode() const {
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["arch_hash"] = arch_hash;
  manifest["step"] = step;
  manifest["seed"] = seed;
  manifest["config_hash"] = config_hash;
  manifest["stage"] = stage;
  auto entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += 4 * t.values.size();
  }
  manifest["tensors"] = entries;
  const std::string text = manifest.dump(2);
  io::Bytes out(text.begin(), text.end());
  out.insert(out.end(), io::kManifestSeparator.begin(), io::kManifestSeparator.end());
  for (const auto& t : tensors) io::put_f32s(out, t.values);
  return out;
}

inline Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
  auto [text, blob] = io::split_manifest(bytes, "checkpoint");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail_validation("checkpoint manifest is not valid JSON: ", e.what());
  }
  Checkpoint ckpt;
  try {
    if (manifest.at("version").get<int>() != kVersion)
      fail_validation("unsupported checkpoint version ", manifest.at("version").dump());
    ckpt.arch_hash = manifest.at("arch_hash").get<std::string>();
    ckpt.step = manifest.at("step").get<std::int64_t>();
    ckpt.seed = manifest.at("seed").get<std::uint64_t>();
    ckpt.config_hash = manifest.value("config_hash", "");
    ckpt.stage = manifest.value("stage", "");
    std::uint64_t expected_offset = 0;
    for (const auto& entry : manifest.at("tensors")) {
      CheckpointTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (offset != expected_offset)
        fail_validation("tensor ", t.name, " declares offset ", offset, " but expected ",
                        expected_offset);
      for (auto e : t.shape)
        if (e <= 0) fail_validation("tensor ", t.name, " has non-positive extent");
      const auto count = static_cast<std::uint64_t>(numel_of(t.shape));
      if (offset + 4 * count > blob.size())
        fail_validation("tensor ", t.name, " ", shape_str(t.shape), " at offset ", offset,
                        " overruns payload of ", blob.size(), " bytes");
      t.values.resize(count);
      for (std::uint64_t i = 0; i < count; ++i) t.values[i] = io::get_f32(blob.data() + offset + 4 * i);
      expected_offset = offset + 4 * count;
      ckpt.tensors.push_back(std::move(t));
    }
    if (expected_offset != blob.size())
      fail_validation("payload holds ", blob.size(), " bytes but manifest describes ",
                      expected_offset);
  } catch (const nlohmann::json::exception& e) {
    fail_validation("malformed checkpoint manifest: ", e.what());
  }
  return ckpt;
}

inline std::string Checkpoint::content_hash() const {
  const auto bytes = encode();
  return hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

// Copies checkpoint values into the model's parameters. Optimizer state is
// not part of a checkpoint, so a fresh optimizer must follow.
inline void load_params(ParamSet& params, const std::string& model_arch_hash, const Checkpoint& ckpt) {
  if (ckpt.arch_hash != model_arch_hash)
    fail_validation("checkpoint architecture hash ", ckpt.arch_hash,
                    " does not match model architecture hash ", model_arch_hash);
  for (auto& p : params.entries()) {
    const CheckpointTensor* t = ckpt.find(p.name);
    if (!t) fail_validation("checkpoint is missing parameter ", p.name);
    if (t->shape != p.value.shape())
      fail_validation("parameter ", p.name, " has shape ", shape_str(p.value.shape()),
                      " but checkpoint stores ", shape_str(t->shape));
  }
  for (auto& p : params.entries()) {
    const CheckpointTensor* t = ckpt.find(p.name);
    std::copy(t->values.begin(), t->values.end(), p.value.data().begin());
    p.value.zero_grad();
  }
}

template <typename Model>
void init_from_checkpoint(Model& model, const Checkpoint& ckpt) {
  load_params(model.params(), model.arch_hash(), ckpt);
}

}  // namespace distill_seg
