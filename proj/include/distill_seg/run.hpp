#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "distill_seg/binary_io.hpp"
#include "distill_seg/checkpoint.hpp"
#include "distill_seg/config.hpp"
#include "distill_seg/pipeline.hpp"
#include "distill_seg/pseudo_labels.hpp"
#include "distill_seg/volume_io.hpp"

namespace distill_seg {

struct RunOptions {
  std::set<std::string> force;  // stages to recompute even if outputs exist
  bool echo = true;             // mirror the log to stderr
};

// One pipeline run rooted at <root>/<config-hash>. Each stage either
// verifies and reuses its persisted outputs or computes and writes them,
// running missing prerequisites first. Every artifact records the config
// hash and the stage that produced it.
class Run {
 public:
  Run(ExperimentConfig cfg, const std::filesystem::path& root, RunOptions options = {})
      : cfg_(std::move(cfg)), hash_(cfg_.hash()), dir_(root / hash_), opt_(std::move(options)) {
    cfg_.validate();
    std::filesystem::create_directories(dir_);
    write_config();
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const std::string& config_hash() const noexcept { return hash_; }
  const std::filesystem::path& dir() const noexcept { return dir_; }

  void log(const std::string& msg) const {
    std::lock_guard lock(log_mutex_);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    std::ofstream(dir_ / "log.txt", std::ios::app) << stamp << " " << msg << "\n";
    if (opt_.echo) std::cerr << msg << std::endl;
  }
  LogFn logger() const {
    return [this](const std::string& m) { log(m); };
  }

  // ------------------------------------------------------------ gen-data

  const ExperimentData& data() {
    if (data_) return *data_;
    const auto manifest_path = dir_ / "data" / "dataset.json";
    if (!forced("gen-data") && std::filesystem::exists(manifest_path)) {
      data_ = load_data(manifest_path);
      log("gen-data: verified " + std::to_string(data_->store.size()) + " volumes in " +
          (dir_ / "data").string());
    } else {
      auto data = make_experiment_data(cfg_);
      write_data(data);
      data_ = load_data(manifest_path);
      log("gen-data: wrote " + std::to_string(data_->store.size()) + " volumes to " + (dir_ / "data").string());
    }
    return *data_;
  }

  // ------------------------------------------------------------ teacher

  struct Teacher {
    SegModel model;
    Checkpoint checkpoint;
    std::string checkpoint_hash;
    MetricsReport metrics;
    TrainingCurve curve;
  };

  const Teacher& teacher() {
    if (teacher_) return *teacher_;
    const auto& d = data();
    const auto ckpt_path = dir_ / "teacher.ckpt", metrics_path = dir_ / "metrics" / "teacher.json";
    if (!forced("train-teacher") && std::filesystem::exists(ckpt_path) && std::filesystem::exists(metrics_path)) {
      auto ckpt = Checkpoint::load(ckpt_path);
      check_provenance(ckpt_path, ckpt.config_hash, ckpt.stage, "train-teacher");
      SegModel model(cfg_.seg_model(), seeds::teacher_init(cfg_));
      init_from_checkpoint(model, ckpt);
      const auto j = read_json(metrics_path, "train-teacher");
      auto hash = ckpt.content_hash();
      teacher_.emplace(Teacher{std::move(model), std::move(ckpt), std::move(hash),
                               MetricsReport::from_json(j), TrainingCurve::from_json(j.at("curve"))});
      log("train-teacher: verified " + ckpt_path.string());
      return *teacher_;
    }
    auto result = train_teacher(cfg_, d, logger());
    auto ckpt = make_checkpoint(result.model, result.curve.epochs.back().steps, seeds::teacher_init(cfg_));
    stamp(ckpt, "train-teacher");
    ckpt.save(ckpt_path);
    auto metrics = evaluate_model(result.model, d.store, d.split.validation, cfg_.include_background);
    stamp(metrics, "train-teacher");
    write_json(metrics_path, with_curve(metrics.to_json(), result.curve));
    auto hash = ckpt.content_hash();
    log("train-teacher: validation mIoU " + std::to_string(metrics.miou()) + ", checkpoint " + hash);
    teacher_.emplace(Teacher{std::move(result.model), std::move(ckpt), std::move(hash), std::move(metrics),
                             std::move(result.curve)});
    return *teacher_;
  }

  // ------------------------------------------------------------ pseudo-label

  const PseudoLabelSet& pseudo_labels() {
    if (pseudo_) return *pseudo_;
    const auto& d = data();
    const auto& t = teacher();
    const auto path = dir_ / "pseudo.pls";
    if (!forced("pseudo-label") && std::filesystem::exists(path)) {
      auto pls = PseudoLabelSet::load(path);
      check_provenance(path, pls.config_hash, pls.stage, "pseudo-label");
      if (pls.teacher_checkpoint != t.checkpoint_hash)
        fail_validation(path.string(), " was produced by teacher ", pls.teacher_checkpoint,
                        " but the run's teacher is ", t.checkpoint_hash, "; rerun with --force");
      pseudo_ = std::move(pls);
      log("pseudo-label: verified " + path.string());
      return *pseudo_;
    }
    auto pls = generate_pseudo_labels(t.model, t.checkpoint_hash, d.store, d.split.unlabeled);
    pls.config_hash = hash_;
    pls.stage = "pseudo-label";
    pls.save(path);
    log("pseudo-label: " + std::to_string(pls.entries.size()) + " slices from " +
        std::to_string(d.split.unlabeled.size()) + " unlabeled volumes");
    pseudo_ = std::move(pls);
    return *pseudo_;
  }

  // ------------------------------------------------------------ train-qc

  struct Quality {
    QualityModel model;
    nlohmann::json report;
  };

  const Quality& quality_classifier() {
    if (quality_) return *quality_;
    const auto& d = data();
    const auto& t = teacher();
    const auto ckpt_path = dir_ / "qc.ckpt", metrics_path = dir_ / "metrics" / "qc.json";
    if (!forced("train-qc") && std::filesystem::exists(ckpt_path) && std::filesystem::exists(metrics_path)) {
      auto ckpt = Checkpoint::load(ckpt_path);
      check_provenance(ckpt_path, ckpt.config_hash, ckpt.stage, "train-qc");
      QualityModel model(cfg_.quality_model(), seeds::qc_init(cfg_));
      init_from_checkpoint(model, ckpt);
      quality_.emplace(Quality{std::move(model), read_json(metrics_path, "train-qc")});
      log("train-qc: verified " + ckpt_path.string());
      return *quality_;
    }
    const auto ds = make_qc_dataset(t.model, d.store, d.split.calibration, cfg_, logger());
    auto result = train_quality_classifier(ds, d.store, cfg_, logger());
    auto ckpt = make_checkpoint(result.model, 0, seeds::qc_init(cfg_));
    stamp(ckpt, "train-qc");
    ckpt.save(ckpt_path);
    nlohmann::json report = ds.summary();
    report["train_accuracy"] = result.train_accuracy;
    report["held_out_accuracy"] = result.held_out_accuracy;
    report["epoch_loss"] = result.epoch_loss;
    report["teacher_checkpoint"] = t.checkpoint_hash;
    report["config_hash"] = hash_;
    report["stage"] = "train-qc";
    write_json(metrics_path, report);
    log("train-qc: held-out accuracy " + std::to_string(result.held_out_accuracy) + " on " +
        std::to_string(ds.held_out.size()) + " masks");
    quality_.emplace(Quality{std::move(result.model), std::move(report)});
    return *quality_;
  }

  // ------------------------------------------------------------ filter

  const PseudoLabelSet& filtered() {
    if (filtered_) return *filtered_;
    const auto& d = data();
    const auto& pls = pseudo_labels();
    const auto path = dir_ / "filtered.pls";
    if (!forced("filter") && std::filesystem::exists(path)) {
      auto f = PseudoLabelSet::load(path);
      check_provenance(path, f.config_hash, f.stage, "filter");
      if (f.teacher_checkpoint != pls.teacher_checkpoint || f.entries.size() != pls.entries.size())
        fail_validation(path.string(), " does not match pseudo.pls; rerun with --force");
      filtered_ = std::move(f);
      log("filter: verified " + path.string());
      return *filtered_;
    }
    const auto& qc = quality_classifier();
    auto f = filter_pseudo_labels(qc.model, d.store, pls, cfg_.qc_threshold);
    f.config_hash = hash_;
    f.stage = "filter";
    f.save(path);
    log("filter: accepted " + std::to_string(f.accepted_count()) + "/" + std::to_string(f.entries.size()) +
        " pseudo-labels at threshold " + std::to_string(cfg_.qc_threshold));
    filtered_ = std::move(f);
    return *filtered_;
  }

  // ------------------------------------------------------------ train-student

  struct Student {
    MetricsReport metrics;
    TrainingCurve curve;
    std::string checkpoint_hash;
  };

  // The run's own student (flags from the config).
  Student student() { return student_variant(cfg_, "student", "train-student"); }

  // A student trained with the run's data, teacher and pseudo-labels but the
  // given flags. Artifacts: <slug>.ckpt (or ablation/<slug>.ckpt) and
  // metrics/<slug>.json.
  Student student_variant(const ExperimentConfig& variant, const std::string& slug, const std::string& stage) {
    const bool own = slug == "student";
    const auto ckpt_path = own ? dir_ / "student.ckpt" : dir_ / "ablation" / (slug + ".ckpt");
    const auto metrics_path = dir_ / "metrics" / (slug + ".json");
    const auto& d = data();
    const auto& t = teacher();
    if (!forced(stage) && std::filesystem::exists(ckpt_path) && std::filesystem::exists(metrics_path)) {
      auto ckpt = Checkpoint::load(ckpt_path);
      check_provenance(ckpt_path, ckpt.config_hash, ckpt.stage, stage);
      const auto j = read_json(metrics_path, stage);
      if (j.value("teacher_checkpoint", "") != t.checkpoint_hash)
        fail_validation(metrics_path.string(), " was trained from another teacher; rerun with --force");
      log(stage + ": verified " + ckpt_path.string());
      return {MetricsReport::from_json(j), TrainingCurve::from_json(j.at("curve")), ckpt.content_hash()};
    }
    const PseudoLabelSet& pls = variant.use_qc ? filtered() : pseudo_labels();
    const auto combined = make_combined_dataset(d.store, d.split.all_labeled(), pls, variant.use_qc,
                                                variant.skip_empty_slices);
    auto result = train_student(variant, t.model, t.checkpoint, combined, d, slug, logger());
    auto ckpt = make_checkpoint(result.model, result.curve.epochs.back().steps, seeds::student_init(variant));
    stamp(ckpt, stage);
    ckpt.save(ckpt_path);
    auto metrics = evaluate_model(result.model, d.store, d.split.validation, cfg_.include_background);
    stamp(metrics, stage);
    auto j = with_curve(metrics.to_json(), result.curve);
    j["teacher_checkpoint"] = t.checkpoint_hash;
    j["use_kd"] = variant.use_kd;
    j["use_teacher_ckpt"] = variant.use_teacher_ckpt;
    j["use_qc"] = variant.use_qc;
    j["labeled_slices"] = combined.labeled_count;
    j["pseudo_slices"] = combined.pseudo_count;
    write_json(metrics_path, j);
    log(slug + ": validation mIoU " + std::to_string(metrics.miou()));
    return {std::move(metrics), std::move(result.curve), ckpt.content_hash()};
  }

  // ------------------------------------------------------------ evaluate

  // Re-evaluates the persisted teacher and student checkpoints on the
  // validation volumes.
  nlohmann::json evaluate() {
    const auto& d = data();
    const auto& t = teacher();
    student();
    SegModel model(cfg_.seg_model(), 0);
    init_from_checkpoint(model, Checkpoint::load(dir_ / "student.ckpt"));
    auto teacher_report = evaluate_model(t.model, d.store, d.split.validation, cfg_.include_background);
    auto student_report = evaluate_model(model, d.store, d.split.validation, cfg_.include_background);
    stamp(teacher_report, "evaluate");
    stamp(student_report, "evaluate");
    nlohmann::json j{{"config_hash", hash_},
                     {"stage", "evaluate"},
                     {"teacher", teacher_report.to_json()},
                     {"student", student_report.to_json()}};
    const auto path = dir_ / "metrics" / "evaluate.json";
    if (!forced("evaluate") && std::filesystem::exists(path)) {
      if (read_json(path, "evaluate") != j)
        fail_runtime(path.string(), " differs from a fresh evaluation of the stored checkpoints");
      log("evaluate: verified " + path.string());
    } else {
      write_json(path, j);
    }
    log("evaluate: teacher mIoU " + std::to_string(teacher_report.miou()) + ", student mIoU " +
        std::to_string(student_report.miou()));
    return j;
  }

  // ------------------------------------------------------------ ablate

  AblationTable ablation() {
    const auto path = dir_ / "ablation.json";
    if (!forced("ablate") && std::filesystem::exists(path)) {
      const auto j = read_json(path, "ablate");
      log("ablate: verified " + path.string());
      return AblationTable::from_json(j);
    }
    const auto& t = teacher();
    pseudo_labels();
    filtered();
    AblationTable table;
    table.config_hash = hash_;
    table.rows.push_back({"Fully supervised", false, false, false, t.metrics, t.curve});
    std::vector<std::optional<Student>> students(kStudentVariants.size());
    parallel_for(kStudentVariants.size(), [&](std::size_t i) {
      const auto& v = kStudentVariants[i];
      const auto variant = with_variant(cfg_, v);
      const bool own = variant.use_kd == cfg_.use_kd && variant.use_teacher_ckpt == cfg_.use_teacher_ckpt &&
                       variant.use_qc == cfg_.use_qc;
      students[i] = own ? student_variant(variant, "student", "train-student")
                        : student_variant(variant, v.slug, "ablate");
    });
    for (std::size_t i = 0; i < kStudentVariants.size(); ++i) {
      const auto& v = kStudentVariants[i];
      table.rows.push_back({v.name, v.use_kd, v.use_teacher_ckpt, v.use_qc, students[i]->metrics,
                            students[i]->curve});
    }
    write_json(path, table.to_json());
    log("ablate: wrote " + path.string());
    return table;
  }

 private:
  bool forced(const std::string& stage) const { return opt_.force.count(stage) > 0; }

  void write_config() const {
    auto j = cfg_.to_json();
    j["config_hash"] = hash_;
    j["stage"] = "config";
    const auto path = dir_ / "config.json";
    if (std::filesystem::exists(path)) {
      const auto existing = ExperimentConfig::from_json(nlohmann::json::parse(io::read_text(path)));
      if (existing.hash() != hash_)
        fail_validation(path.string(), " holds config ", existing.hash(), ", not ", hash_);
      return;
    }
    io::write_text(path, j.dump(2) + "\n");
  }

  void check_provenance(const std::filesystem::path& path, const std::string& config_hash,
                        const std::string& stage, const std::string& expected_stage) const {
    if (config_hash != hash_)
      fail_validation(path.string(), " belongs to config ", config_hash.empty() ? "<none>" : config_hash,
                      ", not ", hash_, "; rerun with --force");
    if (stage != expected_stage)
      fail_validation(path.string(), " was written by stage '", stage, "', expected '", expected_stage, "'");
  }

  nlohmann::json read_json(const std::filesystem::path& path, const std::string& stage) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(path));
    } catch (const nlohmann::json::exception& e) {
      fail_validation(path.string(), ": ", e.what());
    }
    check_provenance(path, j.value("config_hash", ""), j.value("stage", ""), stage);
    return j;
  }

  static void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    io::write_text(path, j.dump(2) + "\n");
  }

  static nlohmann::json with_curve(nlohmann::json j, const TrainingCurve& curve) {
    j["curve"] = curve.to_json();
    return j;
  }

  template <typename T>
  void stamp(T& artifact, const std::string& stage) const {
    artifact.config_hash = hash_;
    artifact.stage = stage;
  }

  void write_data(const ExperimentData& data) const {
    const auto root = dir_ / "data";
    auto volumes = nlohmann::json::array();
    for (std::size_t id = 0; id < data.store.size(); ++id) {
      const auto& p = data.store.phantom(static_cast<int>(id));
      const auto vol = io::encode_volume(p.volume), msk = io::encode_mask(p.mask);
      io::write_file(root / (std::to_string(id) + ".vol"), vol);
      io::write_file(root / (std::to_string(id) + ".msk"), msk);
      auto h = [](const io::Bytes& b) {
        return hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(b.data()), b.size())));
      };
      volumes.push_back({{"id", id},
                         {"seed", p.volume.seed},
                         {"volume_hash", h(vol)},
                         {"mask_hash", h(msk)},
                         {"provenance", p.volume.provenance}});
    }
    const auto& s = data.split;
    nlohmann::json manifest{{"config_hash", hash_},
                            {"stage", "gen-data"},
                            {"split",
                             {{"labeled", s.labeled},
                              {"calibration", s.calibration},
                              {"unlabeled", s.unlabeled},
                              {"validation", s.validation}}},
                            {"volumes", volumes}};
    write_json(root / "dataset.json", manifest);
  }

  ExperimentData load_data(const std::filesystem::path& manifest_path) const {
    const auto j = read_json(manifest_path, "gen-data");
    const auto root = manifest_path.parent_path();
    std::vector<Phantom> phantoms;
    for (const auto& v : j.at("volumes")) {
      const auto id = std::to_string(v.at("id").get<int>());
      const auto vol_bytes = io::read_file(root / (id + ".vol"));
      const auto msk_bytes = io::read_file(root / (id + ".msk"));
      auto h = [](const io::Bytes& b) {
        return hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(b.data()), b.size())));
      };
      if (h(vol_bytes) != v.at("volume_hash") || h(msk_bytes) != v.at("mask_hash"))
        fail_validation("data volume ", id, " in ", root.string(), " does not match its recorded hash");
      Phantom p;
      p.volume = io::load_volume(root / (id + ".vol"));
      p.mask = io::load_mask(root / (id + ".msk"));
      p.volume.seed = v.at("seed").get<std::uint64_t>();
      p.volume.provenance = v.at("provenance");
      phantoms.push_back(std::move(p));
    }
    if (phantoms.size() != static_cast<std::size_t>(cfg_.n_volumes))
      fail_validation(manifest_path.string(), " lists ", phantoms.size(), " volumes, config expects ",
                      cfg_.n_volumes);
    DatasetSplit split;
    const auto& s = j.at("split");
    s.at("labeled").get_to(split.labeled);
    s.at("calibration").get_to(split.calibration);
    s.at("unlabeled").get_to(split.unlabeled);
    s.at("validation").get_to(split.validation);
    return {VolumeStore(std::move(phantoms)), std::move(split)};
  }

  ExperimentConfig cfg_;
  std::string hash_;
  std::filesystem::path dir_;
  RunOptions opt_;
  mutable std::mutex log_mutex_;
  std::optional<ExperimentData> data_;
  std::optional<Teacher> teacher_;
  std::optional<PseudoLabelSet> pseudo_;
  std::optional<Quality> quality_;
  std::optional<PseudoLabelSet> filtered_;
};

}  // namespace distill_seg
