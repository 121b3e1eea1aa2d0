#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "distill_seg/binary_io.hpp"
#include "distill_seg/dataset.hpp"
#include "distill_seg/error.hpp"
#include "distill_seg/models.hpp"
#include "distill_seg/phantom.hpp"
#include "distill_seg/rng.hpp"

namespace distill_seg {

// Everything that determines one pipeline run. Serialized as a flat JSON
// object, one key per field; the hash of that object names the run.
struct ExperimentConfig {
  // seeds
  std::uint64_t data_seed = 0;   // phantom generation and the split
  std::uint64_t model_seed = 0;  // weight init
  std::uint64_t train_seed = 0;  // batch order, crops, QC corruptions

  // data
  int n_volumes = 40;
  int n_labeled = 23;
  int n_validation = 8;
  int n_calibration = -1;  // -1: a quarter of n_labeled, at least one
  int num_classes = 4;
  std::int64_t volume_depth = 16;
  std::int64_t volume_height = 64;
  std::int64_t volume_width = 64;
  double noise_sigma = 0.05;
  int distractors = 4;
  bool skip_empty_slices = false;

  // models
  std::int64_t channels_base = 8;
  std::int64_t model_depth = 2;
  std::int64_t qc_width = 8;

  // optimisation
  double lr = 3e-4;
  double qc_lr = 1e-3;
  std::int64_t crop = 32;
  std::int64_t batch = 16;
  int epochs_teacher = 15;
  int epochs_student = 15;
  int epochs_student_init = 5;  // student epochs when starting from the teacher
  int epochs_qc = 10;
  int min_steps_per_epoch = 100;  // desk-scale epochs repeat passes up to this many steps

  // distillation
  double alpha = 0.1;
  double tau = 4.0;

  // quality classifier
  double qc_threshold = 0.5;      // acceptance threshold on the QC score
  double qc_oracle_miou = 0.7;    // slice mIoU at which a mask counts as good
  int qc_corruptions = 3;         // corrupted ground-truth masks per calibration slice
  double qc_holdout = 0.25;       // fraction of calibration slices held out

  // evaluation
  bool include_background = true;

  // ablation flags
  bool use_kd = true;
  bool use_teacher_ckpt = true;
  bool use_qc = true;

  // Effective loss weight: KD off means alpha = 0 and no teacher forward.
  double effective_alpha() const { return use_kd ? alpha : 0.0; }
  int student_epochs() const { return use_teacher_ckpt ? epochs_student_init : epochs_student; }

  SegModelConfig seg_model() const {
    return {1, channels_base, model_depth, static_cast<std::int64_t>(num_classes)};
  }
  QualityModelConfig quality_model() const {
    return {static_cast<std::int64_t>(num_classes), qc_width};
  }
  PhantomParams phantom() const {
    return {num_classes, {volume_depth, volume_height, volume_width}, noise_sigma, distractors};
  }
  SplitSpec split_spec() const { return {n_volumes, n_labeled, n_validation, n_calibration}; }
  std::uint64_t volume_seed(int id) const {
    return CounterRng(data_seed, 0xDA7A).bits(static_cast<std::uint64_t>(id));
  }

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

#define DISTILL_SEG_CONFIG_FIELDS(X)                                                             \
  X(data_seed) X(model_seed) X(train_seed) X(n_volumes) X(n_labeled) X(n_validation)             \
  X(n_calibration) X(num_classes) X(volume_depth) X(volume_height) X(volume_width)               \
  X(noise_sigma) X(distractors) X(skip_empty_slices) X(channels_base) X(model_depth) X(qc_width) \
  X(lr) X(qc_lr) X(crop) X(batch) X(epochs_teacher) X(epochs_student) X(epochs_student_init)     \
  X(epochs_qc) X(min_steps_per_epoch) X(alpha) X(tau) X(qc_threshold) X(qc_oracle_miou)          \
  X(qc_corruptions) X(qc_holdout) X(include_background) X(use_kd) X(use_teacher_ckpt) X(use_qc)

inline nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
#define X(f) j[#f] = f;
  DISTILL_SEG_CONFIG_FIELDS(X)
#undef X
  return j;
}

// Missing keys keep their defaults; unknown keys and wrong types are errors.
inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail_validation("config must be a JSON object");
  ExperimentConfig c;
  const nlohmann::json known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (key == "config_hash" || key == "stage") continue;  // provenance written into run dirs
    if (!known.contains(key)) fail_validation("config: unknown key '", key, "'");
    const auto& ref = known[key];
    const bool ok = ref.is_boolean()  ? value.is_boolean()
                    : ref.is_number_float() ? value.is_number()
                    : ref.is_number_unsigned() ? value.is_number_unsigned()
                                           : value.is_number_integer();
    if (!ok) fail_validation("config: key '", key, "' has the wrong type (", value.type_name(), ")");
  }
#define X(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
  DISTILL_SEG_CONFIG_FIELDS(X)
#undef X
  c.validate();
  return c;
}

#undef DISTILL_SEG_CONFIG_FIELDS

inline void ExperimentConfig::validate() const {
  if (alpha < 0 || alpha > 1) fail_validation("config: alpha must lie in [0, 1], got ", alpha);
  if (!(tau > 0)) fail_validation("config: tau must be positive, got ", tau);
  if (!(lr > 0) || !(qc_lr > 0)) fail_validation("config: learning rates must be positive");
  if (qc_threshold < 0 || qc_threshold > 1)
    fail_validation("config: qc_threshold must lie in [0, 1], got ", qc_threshold);
  if (qc_holdout <= 0 || qc_holdout >= 1)
    fail_validation("config: qc_holdout must lie in (0, 1), got ", qc_holdout);
  if (epochs_teacher < 0 || epochs_student < 0 || epochs_student_init < 0 || epochs_qc < 0)
    fail_validation("config: epoch counts must be non-negative");
  if (min_steps_per_epoch < 0) fail_validation("config: min_steps_per_epoch must be >= 0");
  if (qc_corruptions < 0) fail_validation("config: qc_corruptions must be >= 0");
  if (batch < 1) fail_validation("config: batch must be positive");
  const std::int64_t div = std::int64_t{1} << model_depth;
  if (model_depth < 1 || model_depth > 6) fail_validation("config: model_depth must lie in [1, 6]");
  if (crop % div != 0)
    fail_validation("config: crop ", crop, " must be divisible by 2^model_depth = ", div);
  if (volume_height % div != 0 || volume_width % div != 0 || volume_height % 4 != 0 ||
      volume_width % 4 != 0)
    fail_validation("config: slice extents ", volume_height, "x", volume_width,
                    " must be divisible by ", std::max<std::int64_t>(div, 4));
  if (crop < 1 || crop > volume_height || crop > volume_width)
    fail_validation("config: crop ", crop, " must fit the ", volume_height, "x", volume_width,
                    " slices");
  (void)make_split(split_spec(), data_seed);  // feasibility of the counts
}

inline std::string ExperimentConfig::hash() const {
  return hex64(fnv1a(to_json().dump()));
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail_validation("config file not found: ", path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail_validation("config file ", path.string(), " is not valid JSON: ", e.what());
  }
  try {
    return ExperimentConfig::from_json(j);
  } catch (const ValidationError& e) {
    fail_validation(path.string(), ": ", e.what());
  }
}

}  // namespace distill_seg
