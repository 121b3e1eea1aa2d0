#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "distill_seg/adam.hpp"
#include "distill_seg/checkpoint.hpp"
#include "distill_seg/config.hpp"
#include "distill_seg/dataset.hpp"
#include "distill_seg/inference.hpp"
#include "distill_seg/losses.hpp"
#include "distill_seg/metrics.hpp"
#include "distill_seg/models.hpp"
#include "distill_seg/phantom.hpp"
#include "distill_seg/pseudo_labels.hpp"

namespace distill_seg {

using LogFn = std::function<void(const std::string&)>;

inline void log_to(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

// Derived seeds, one per consumer, so stages never share a random stream.
namespace seeds {
inline std::uint64_t teacher_init(const ExperimentConfig& c) { return CounterRng(c.model_seed, 0x7EAC).bits(0); }
inline std::uint64_t student_init(const ExperimentConfig& c) { return CounterRng(c.model_seed, 0x57D0).bits(0); }
inline std::uint64_t qc_init(const ExperimentConfig& c) { return CounterRng(c.model_seed, 0x0C0C).bits(0); }
inline std::uint64_t teacher_batches(const ExperimentConfig& c) { return CounterRng(c.train_seed, 0x7EAC).bits(1); }
inline std::uint64_t student_batches(const ExperimentConfig& c) { return CounterRng(c.train_seed, 0x57D0).bits(1); }
inline std::uint64_t qc_data(const ExperimentConfig& c) { return CounterRng(c.train_seed, 0x0C0C).bits(1); }
inline std::uint64_t qc_batches(const ExperimentConfig& c) { return CounterRng(c.train_seed, 0x0C0C).bits(2); }
}  // namespace seeds

// ---------------------------------------------------------------- data

struct ExperimentData {
  VolumeStore store;
  DatasetSplit split;
};

inline std::vector<Phantom> generate_dataset(const ExperimentConfig& cfg) {
  std::vector<Phantom> out;
  out.reserve(static_cast<std::size_t>(cfg.n_volumes));
  for (int id = 0; id < cfg.n_volumes; ++id) out.push_back(generate_phantom(cfg.volume_seed(id), cfg.phantom()));
  return out;
}

inline ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  return {VolumeStore(generate_dataset(cfg)), make_split(cfg.split_spec(), cfg.data_seed)};
}

inline std::vector<TrainingSlice> ground_truth_slices(const VolumeStore& store, std::span<const int> volumes,
                                                      bool skip_empty) {
  std::vector<TrainingSlice> out;
  for (const auto& id : store.slices_of(volumes, skip_empty))
    out.push_back({id, store.image(id), store.mask(id), SliceSource::GroundTruth});
  return out;
}

// ---------------------------------------------------------------- training loop

struct EpochRecord {
  int epoch = 0;  // 0 = before any update
  std::int64_t steps = 0;
  std::optional<double> loss;
  std::optional<double> val_miou;
};

struct TrainingCurve {
  std::vector<EpochRecord> epochs;

  std::optional<double> final_miou() const {
    return epochs.empty() ? std::nullopt : epochs.back().val_miou;
  }

  // First epoch whose validation mIoU reaches `target`.
  std::optional<int> epochs_to_reach(double target) const {
    for (const auto& e : epochs)
      if (e.val_miou && *e.val_miou >= target) return e.epoch;
    return std::nullopt;
  }

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& e : epochs)
      arr.push_back({{"epoch", e.epoch},
                     {"steps", e.steps},
                     {"loss", e.loss ? nlohmann::json(*e.loss) : nlohmann::json(nullptr)},
                     {"val_miou", e.val_miou ? nlohmann::json(*e.val_miou) : nlohmann::json(nullptr)}});
    return arr;
  }

  static TrainingCurve from_json(const nlohmann::json& j) {
    TrainingCurve c;
    for (const auto& e : j) {
      EpochRecord r;
      r.epoch = e.at("epoch").get<int>();
      r.steps = e.at("steps").get<std::int64_t>();
      if (!e.at("loss").is_null()) r.loss = e.at("loss").get<double>();
      if (!e.at("val_miou").is_null()) r.val_miou = e.at("val_miou").get<double>();
      c.epochs.push_back(r);
    }
    return c;
  }
};

struct SegTrainOptions {
  std::string stage = "train";
  int epochs = 15;
  int min_steps_per_epoch = 0;
  float lr = 3e-4f;
  BatchOptions batches;
  std::uint64_t seed = 0;
  float alpha = 0.0f;            // KD weight; 0 skips the teacher entirely
  float tau = 4.0f;
  const SegModel* teacher = nullptr;
  bool include_background = true;
};

inline MetricsReport evaluate_model(const SegModel& model, const VolumeStore& store,
                                    std::span<const int> volumes, bool include_background = true) {
  if (volumes.empty()) fail_validation("evaluate: empty volume list");
  return MetricsReport::from(evaluate_volumes(model, store, volumes), include_background);
}

// Adam on (1-alpha) CE + alpha KD over random crops. An epoch is one full
// pass over the slices, extended with further reshuffled passes until at
// least min_steps_per_epoch updates were made. Validation mIoU is recorded
// before training and after every epoch when `validation` is non-empty.
inline TrainingCurve train_segmentation(SegModel& model, std::span<const TrainingSlice> slices,
                                        const VolumeStore& store, std::span<const int> validation,
                                        const SegTrainOptions& opt, const LogFn& log = {}) {
  if (slices.empty() && opt.epochs > 0) fail_validation(opt.stage, ": no training slices");
  if (opt.alpha > 0 && !opt.teacher) fail_validation(opt.stage, ": KD weight set but no teacher given");
  if (opt.teacher && opt.teacher->arch_hash() != model.arch_hash())
    fail_validation(opt.stage, ": teacher architecture ", opt.teacher->arch_hash(),
                    " differs from student architecture ", model.arch_hash());
  const LossWeights weights(opt.alpha);
  const bool use_kd = opt.alpha > 0;
  Adam adam(model.params().tensors(), {opt.lr});
  TrainingCurve curve;
  auto validate = [&]() -> std::optional<double> {
    if (validation.empty()) return std::nullopt;
    return evaluate_model(model, store, validation, opt.include_background).mean_iou;
  };
  curve.epochs.push_back({0, 0, std::nullopt, validate()});
  const auto& ext = store.extents();
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::int64_t epoch_steps = 0;
    for (std::uint64_t pass = 0;; ++pass) {
      SliceBatcher batcher(slices, ext.h, ext.w, opt.batches,
                           CounterRng(opt.seed, static_cast<std::uint64_t>(epoch)).bits(pass));
      bool stop = false;
      while (auto batch = batcher.next()) {
        adam.zero_grad();
        const Tensor logits = model.forward(batch->images);
        Tensor loss = cross_entropy(logits, batch->masks);
        if (use_kd) {
          Tensor teacher_logits;
          {
            NoGradGuard frozen;
            teacher_logits = opt.teacher->forward(batch->images);
          }
          loss = student_loss(loss, kd_loss(logits, teacher_logits, opt.tau), weights);
        }
        const float value = loss.item();
        if (!std::isfinite(value)) throw TrainingDiverged(opt.stage, static_cast<long>(step));
        backward(loss);
        adam.step();
        loss_sum += value;
        ++step;
        ++epoch_steps;
        if (pass > 0 && epoch_steps >= opt.min_steps_per_epoch) {
          stop = true;
          break;
        }
      }
      if (stop || epoch_steps >= opt.min_steps_per_epoch) break;
    }
    EpochRecord rec{epoch, step, loss_sum / double(epoch_steps), validate()};
    curve.epochs.push_back(rec);
    log_to(log, detail::concat(opt.stage, " epoch ", epoch, "/", opt.epochs, " steps ", epoch_steps,
                               " loss ", *rec.loss,
                               rec.val_miou ? detail::concat(" val mIoU ", *rec.val_miou) : ""));
  }
  return curve;
}

inline SegTrainOptions segmentation_options(const ExperimentConfig& cfg, std::int64_t divisor) {
  SegTrainOptions o;
  o.min_steps_per_epoch = cfg.min_steps_per_epoch;
  o.lr = static_cast<float>(cfg.lr);
  o.batches = {cfg.crop, cfg.batch, true, divisor};
  o.tau = static_cast<float>(cfg.tau);
  o.include_background = cfg.include_background;
  return o;
}

struct SegResult {
  SegModel model;
  TrainingCurve curve;
};

// Teacher: cross-entropy on the annotated volumes only (labeled and
// calibration); the last epoch is kept.
inline SegResult train_teacher(const ExperimentConfig& cfg, const ExperimentData& data,
                               const LogFn& log = {}) {
  const auto volumes = data.split.all_labeled();
  if (volumes.empty()) fail_validation("train-teacher: labeled split is empty");
  SegModel model(cfg.seg_model(), seeds::teacher_init(cfg));
  const auto slices = ground_truth_slices(data.store, volumes, cfg.skip_empty_slices);
  auto opt = segmentation_options(cfg, model.required_divisor());
  opt.stage = "teacher";
  opt.epochs = cfg.epochs_teacher;
  opt.seed = seeds::teacher_batches(cfg);
  log_to(log, detail::concat("teacher: ", volumes.size(), " labeled volumes, ", slices.size(), " slices"));
  auto curve = train_segmentation(model, slices, data.store, data.split.validation, opt, log);
  return {std::move(model), std::move(curve)};
}

// ---------------------------------------------------------------- pseudo-labels

// Full-slice argmax masks of the frozen teacher on every slice of `volumes`.
inline PseudoLabelSet generate_pseudo_labels(const SegModel& teacher, const std::string& teacher_checkpoint,
                                             const VolumeStore& store, std::span<const int> volumes) {
  PseudoLabelSet pls;
  pls.teacher_checkpoint = teacher_checkpoint;
  pls.stage = "pseudo-label";
  if (volumes.empty()) return pls;
  const auto& ext = store.extents();
  const auto div = teacher.required_divisor();
  if (ext.h % div != 0 || ext.w % div != 0)
    fail_validation("pseudo-label: slice extents ", ext.h, "x", ext.w, " not divisible by ", div);
  pls.height = ext.h;
  pls.width = ext.w;
  const auto ids = store.slices_of(volumes);
  auto masks = predict_masks(teacher, store, ids);
  for (std::size_t i = 0; i < ids.size(); ++i) pls.entries.push_back({ids[i], std::move(masks[i]), {}, {}});
  return pls;
}

// ---------------------------------------------------------------- quality classifier data

// Mean IoU of one predicted slice against its ground truth; classes absent
// from both are skipped. A slice with nothing to score counts as perfect.
inline double slice_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                         int num_classes, bool include_background = true) {
  ConfusionMatrix cm(num_classes);
  cm.accumulate(pred, gt);
  return mean_iou(cm, include_background).value_or(1.0);
}

// The oracle standing in for manual good/bad annotation.
inline bool oracle_is_good(double miou, double theta) { return miou >= theta; }

namespace detail {

inline std::vector<std::uint8_t> dilate_class(std::vector<std::uint8_t> m, std::int64_t h, std::int64_t w,
                                              std::uint8_t k, int iterations) {
  for (int it = 0; it < iterations; ++it) {
    auto next = m;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto i = static_cast<std::size_t>(y * w + x);
        if (m[i] == k) continue;
        const bool touch = (y > 0 && m[i - w] == k) || (y + 1 < h && m[i + w] == k) ||
                           (x > 0 && m[i - 1] == k) || (x + 1 < w && m[i + 1] == k);
        if (touch) next[i] = k;
      }
    m.swap(next);
  }
  return m;
}

inline std::vector<std::uint8_t> erode_class(std::vector<std::uint8_t> m, std::int64_t h, std::int64_t w,
                                             std::uint8_t k, int iterations) {
  for (int it = 0; it < iterations; ++it) {
    auto next = m;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto i = static_cast<std::size_t>(y * w + x);
        if (m[i] != k) continue;
        const bool edge = y == 0 || y + 1 == h || x == 0 || x + 1 == w || m[i - w] != k ||
                          m[i + w] != k || m[i - 1] != k || m[i + 1] != k;
        if (edge) next[i] = 0;
      }
    m.swap(next);
  }
  return m;
}

}  // namespace detail

enum class Corruption { Dilate, Erode, Drop, Swap, Shift, Spurious };

inline const char* corruption_name(Corruption c) {
  switch (c) {
    case Corruption::Dilate: return "dilate";
    case Corruption::Erode: return "erode";
    case Corruption::Drop: return "drop";
    case Corruption::Swap: return "swap";
    case Corruption::Shift: return "shift";
    case Corruption::Spurious: return "spurious";
  }
  return "?";
}

// Damages one organ of a ground-truth slice mask with a random edit of
// random strength; slices without organs get a spurious organ blob.
inline std::vector<std::uint8_t> corrupt_mask(std::span<const std::uint8_t> gt, std::int64_t h, std::int64_t w,
                                              int num_classes, RngStream& rng, Corruption* applied = nullptr) {
  std::vector<std::uint8_t> m(gt.begin(), gt.end());
  std::set<std::uint8_t> present;
  for (auto l : m)
    if (l != 0) present.insert(l);
  Corruption kind = Corruption::Spurious;
  if (!present.empty()) kind = static_cast<Corruption>(rng.below(5));
  if (kind == Corruption::Swap && num_classes < 3) kind = Corruption::Drop;
  std::uint8_t k = 0;
  if (!present.empty()) {
    auto it = present.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng.below(present.size())));
    k = *it;
  }
  switch (kind) {
    case Corruption::Dilate:
      m = detail::dilate_class(std::move(m), h, w, k, 1 + static_cast<int>(rng.below(4)));
      break;
    case Corruption::Erode:
      m = detail::erode_class(std::move(m), h, w, k, 1 + static_cast<int>(rng.below(3)));
      break;
    case Corruption::Drop:
      for (auto& l : m)
        if (l == k) l = 0;
      break;
    case Corruption::Swap: {
      std::uint8_t j = k;
      while (j == k) j = static_cast<std::uint8_t>(1 + rng.below(static_cast<std::uint64_t>(num_classes - 1)));
      for (auto& l : m)
        if (l == k) l = j;
      break;
    }
    case Corruption::Shift: {
      auto mag = [&] {
        const auto d = static_cast<std::int64_t>(2 + rng.below(5));
        return rng.coin() ? d : -d;
      };
      const std::int64_t dy = mag(), dx = mag();
      std::vector<std::uint8_t> out = m;
      for (auto& l : out)
        if (l == k) l = 0;
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t ty = y + dy, tx = x + dx;
          if (m[static_cast<std::size_t>(y * w + x)] == k && ty >= 0 && ty < h && tx >= 0 && tx < w)
            out[static_cast<std::size_t>(ty * w + tx)] = k;
        }
      m = std::move(out);
      break;
    }
    case Corruption::Spurious: {
      const auto label = static_cast<std::uint8_t>(1 + rng.below(static_cast<std::uint64_t>(num_classes - 1)));
      const double cy = rng.uniform(0.2, 0.8) * double(h), cx = rng.uniform(0.2, 0.8) * double(w);
      const double ry = rng.uniform(2.0, 6.0), rx = rng.uniform(2.0, 6.0);
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const double a = (double(y) + 0.5 - cy) / ry, b = (double(x) + 0.5 - cx) / rx;
          if (a * a + b * b <= 1.0) m[static_cast<std::size_t>(y * w + x)] = label;
        }
      break;
    }
  }
  if (applied) *applied = kind;
  return m;
}

struct QcExample {
  SliceId id;
  std::vector<std::uint8_t> mask;
  double oracle_miou = 0.0;
  bool good = false;
  std::string origin;  // "teacher" or a corruption name
};

struct QcDataset {
  std::vector<QcExample> train;     // balanced by resampling
  std::vector<QcExample> held_out;  // untouched
  std::array<int, 10> teacher_histogram{};  // teacher-output slice mIoU in tenths
  std::size_t teacher_good = 0, teacher_total = 0;
  std::size_t resampled = 0;

  static double good_fraction(const std::vector<QcExample>& v) {
    if (v.empty()) return 0.0;
    return double(std::count_if(v.begin(), v.end(), [](const auto& e) { return e.good; })) / double(v.size());
  }

  nlohmann::json summary() const {
    return {{"train_examples", train.size()},
            {"held_out_examples", held_out.size()},
            {"train_good_fraction", good_fraction(train)},
            {"held_out_good_fraction", good_fraction(held_out)},
            {"teacher_good", teacher_good},
            {"teacher_total", teacher_total},
            {"teacher_miou_histogram", teacher_histogram},
            {"resampled", resampled}};
  }
};

inline std::string histogram_str(const std::array<int, 10>& h) {
  std::string out;
  for (std::size_t b = 0; b < h.size(); ++b)
    out += detail::concat(b ? " " : "", "[", b / 10.0, ",", (b + 1) / 10.0, "):", h[b]);
  return out;
}

// Labels with the given oracle rule without any balancing: the teacher's
// mask for every slice. Exposed for inspection and tests.
inline std::vector<QcExample> label_teacher_outputs(const SegModel& teacher, const VolumeStore& store,
                                                    std::span<const SliceId> ids, double theta,
                                                    bool include_background = true) {
  auto masks = predict_masks(teacher, store, ids);
  std::vector<QcExample> out;
  const int K = static_cast<int>(teacher.config().num_classes);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double miou = slice_miou(masks[i], store.mask(ids[i]), K, include_background);
    out.push_back({ids[i], std::move(masks[i]), miou, oracle_is_good(miou, theta), "teacher"});
  }
  return out;
}

// Teacher outputs on calibration slices plus corrupted ground-truth masks,
// all labeled good iff slice mIoU >= theta. Slices (with every example
// derived from them) are split into train and held-out parts; only the
// train part is resampled until each class makes up at least 30%.
inline QcDataset make_qc_dataset(const SegModel& teacher, const VolumeStore& store,
                                 std::span<const int> calibration, const ExperimentConfig& cfg,
                                 const LogFn& log = {}) {
  if (calibration.empty()) fail_validation("qc dataset: calibration split is empty");
  const double theta = cfg.qc_oracle_miou;
  const int K = cfg.num_classes;
  const auto& ext = store.extents();
  auto ids = store.slices_of(calibration);
  RngStream rng(seeds::qc_data(cfg), 0);
  rng.shuffle(ids);
  const std::size_t n_hold =
      ids.size() < 2 ? 0
                     : std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(cfg.qc_holdout * double(ids.size()))),
                                               1, ids.size() - 1);

  QcDataset ds;
  auto teacher_examples = label_teacher_outputs(teacher, store, ids, theta, cfg.include_background);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& bucket = i < n_hold ? ds.held_out : ds.train;
    QcExample& te = teacher_examples[i];
    ds.teacher_histogram[static_cast<std::size_t>(std::clamp(int(te.oracle_miou * 10.0), 0, 9))]++;
    ds.teacher_good += te.good;
    ++ds.teacher_total;
    const auto gt = store.mask(ids[i]);
    bucket.push_back(std::move(te));
    for (int c = 0; c < cfg.qc_corruptions; ++c) {
      Corruption kind{};
      auto m = corrupt_mask(gt, ext.h, ext.w, K, rng, &kind);
      const double miou = slice_miou(m, gt, K, cfg.include_background);
      bucket.push_back({ids[i], std::move(m), miou, oracle_is_good(miou, theta), corruption_name(kind)});
    }
  }

  const auto n_good = static_cast<std::size_t>(
      std::count_if(ds.train.begin(), ds.train.end(), [](const auto& e) { return e.good; }));
  if (n_good == 0 || n_good == ds.train.size())
    fail_validation("qc dataset: every training example is labeled ", n_good ? "good" : "bad",
                    " at oracle threshold ", theta, "; teacher slice-mIoU histogram ",
                    histogram_str(ds.teacher_histogram));
  const bool good_minor = 2 * n_good < ds.train.size();
  const std::size_t minority = good_minor ? n_good : ds.train.size() - n_good;
  const std::size_t majority = ds.train.size() - minority;
  if (double(minority) < 0.3 * double(ds.train.size())) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      if (ds.train[i].good == good_minor) pool.push_back(i);
    const auto target = static_cast<std::size_t>(std::ceil(0.3 / 0.7 * double(majority)));
    for (std::size_t added = minority; added < target; ++added) {
      ds.train.push_back(ds.train[pool[rng.below(pool.size())]]);
      ++ds.resampled;
    }
  }
  log_to(log, detail::concat("qc dataset: ", ds.train.size(), " train (", ds.resampled, " resampled, good ",
                             QcDataset::good_fraction(ds.train), "), ", ds.held_out.size(),
                             " held out; teacher good ", ds.teacher_good, "/", ds.teacher_total));
  return ds;
}

// ---------------------------------------------------------------- quality classifier

struct QcInput {
  std::span<const float> image;
  std::span<const std::uint8_t> mask;
  bool flip = false;
};

// [N, 1+K, H, W]: standardized image then one binary channel per class.
inline Tensor quality_inputs(std::span<const QcInput> items, std::int64_t h, std::int64_t w, int num_classes) {
  const std::size_t P = static_cast<std::size_t>(h * w), C = static_cast<std::size_t>(1 + num_classes);
  std::vector<float> data(items.size() * C * P, 0.0f);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.image.size() != P || it.mask.size() != P)
      fail_validation("quality input ", i, ": expected ", P, " pixels");
    float* base = data.data() + i * C * P;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto dst = static_cast<std::size_t>(y * w + x);
        const auto src = static_cast<std::size_t>(y * w + (it.flip ? w - 1 - x : x));
        const auto label = it.mask[src];
        if (label >= num_classes) fail_validation("quality input ", i, ": label ", int(label), " >= K");
        base[dst] = it.image[src];
        base[(1 + label) * P + dst] = 1.0f;
      }
  }
  return Tensor::from({static_cast<std::int64_t>(items.size()), static_cast<std::int64_t>(C), h, w},
                      std::move(data));
}

// sigmoid(QC logit) per item, batched over worker threads, in input order.
inline std::vector<float> quality_scores(const QualityModel& qc, std::span<const QcInput> items,
                                         std::int64_t h, std::int64_t w, std::size_t chunk = 32) {
  std::vector<float> out(items.size());
  const std::size_t chunks = (items.size() + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(items.size(), lo + chunk);
    NoGradGuard guard;
    const Tensor logits = qc.forward(
        quality_inputs(items.subspan(lo, hi - lo), h, w, static_cast<int>(qc.config().num_classes)));
    for (std::size_t i = lo; i < hi; ++i) out[i] = sigmoid(logits.data()[i - lo]);
  });
  return out;
}

inline double qc_accuracy(const QualityModel& qc, const VolumeStore& store, const std::vector<QcExample>& examples) {
  if (examples.empty()) return 0.0;
  std::vector<QcInput> items;
  for (const auto& e : examples) items.push_back({store.image(e.id), e.mask, false});
  const auto scores = quality_scores(qc, items, store.extents().h, store.extents().w);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) correct += (scores[i] >= 0.5f) == examples[i].good;
  return double(correct) / double(examples.size());
}

struct QcResult {
  QualityModel model;
  double train_accuracy = 0.0;
  double held_out_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Binary cross-entropy on full slices with random horizontal flips.
inline QcResult train_quality_classifier(const QcDataset& ds, const VolumeStore& store,
                                         const ExperimentConfig& cfg, const LogFn& log = {}) {
  const auto n_good = std::count_if(ds.train.begin(), ds.train.end(), [](const auto& e) { return e.good; });
  if (n_good == 0 || n_good == static_cast<std::ptrdiff_t>(ds.train.size()))
    fail_validation("train-qc: training set needs both good and bad examples");
  QualityModel model(cfg.quality_model(), seeds::qc_init(cfg));
  Adam adam(model.params().tensors(), {static_cast<float>(cfg.qc_lr)});
  const auto& ext = store.extents();
  const auto B = static_cast<std::size_t>(cfg.batch);
  QcResult result{std::move(model), 0.0, 0.0, {}};
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs_qc; ++epoch) {
    double loss_sum = 0.0;
    std::int64_t epoch_steps = 0;
    for (std::uint64_t pass = 0;; ++pass) {
      RngStream rng(seeds::qc_batches(cfg), static_cast<std::uint64_t>(epoch) * 1000 + pass);
      std::vector<std::size_t> order(ds.train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(order);
      bool stop = false;
      for (std::size_t lo = 0; lo < order.size(); lo += B) {
        const std::size_t hi = std::min(order.size(), lo + B);
        std::vector<QcInput> items;
        std::vector<float> targets;
        for (std::size_t i = lo; i < hi; ++i) {
          const auto& e = ds.train[order[i]];
          items.push_back({store.image(e.id), e.mask, rng.coin()});
          targets.push_back(e.good ? 1.0f : 0.0f);
        }
        adam.zero_grad();
        Tensor loss = bce_with_logits(result.model.forward(quality_inputs(items, ext.h, ext.w, cfg.num_classes)),
                                      targets);
        const float value = loss.item();
        if (!std::isfinite(value)) throw TrainingDiverged("train-qc", static_cast<long>(step));
        backward(loss);
        adam.step();
        loss_sum += value;
        ++step;
        ++epoch_steps;
        if (pass > 0 && epoch_steps >= cfg.min_steps_per_epoch) {
          stop = true;
          break;
        }
      }
      if (stop || epoch_steps >= cfg.min_steps_per_epoch) break;
    }
    result.epoch_loss.push_back(loss_sum / double(epoch_steps));
    log_to(log, detail::concat("qc epoch ", epoch, "/", cfg.epochs_qc, " steps ", epoch_steps, " loss ",
                               result.epoch_loss.back()));
  }
  result.train_accuracy = qc_accuracy(result.model, store, ds.train);
  result.held_out_accuracy = qc_accuracy(result.model, store, ds.held_out);
  log_to(log, detail::concat("qc accuracy: train ", result.train_accuracy, ", held out ",
                             result.held_out_accuracy));
  return result;
}

// Fills every entry's score with the QC probability that its mask is good.
inline void score_pseudo_labels(const QualityModel& qc, const VolumeStore& store, PseudoLabelSet& pls) {
  std::vector<QcInput> items;
  for (const auto& e : pls.entries) items.push_back({store.image(e.id), e.mask, false});
  const auto scores = quality_scores(qc, items, pls.height, pls.width);
  for (std::size_t i = 0; i < scores.size(); ++i) pls.entries[i].score = scores[i];
}

// Scores (if needed) and thresholds a copy of the set.
inline PseudoLabelSet filter_pseudo_labels(const QualityModel& qc, const VolumeStore& store,
                                           PseudoLabelSet pls, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    fail_validation("filter threshold must lie in [0, 1], got ", threshold);
  if (!pls.scored()) score_pseudo_labels(qc, store, pls);
  apply_threshold(pls, threshold);
  return pls;
}

// ---------------------------------------------------------------- student

// Ground-truth slices of the annotated volumes plus pseudo-labeled slices:
// every entry when `accepted_only` is false, else only accepted ones. The
// pseudo-label masks are referenced, so `pls` must outlive the dataset.
struct CombinedDataset {
  std::vector<TrainingSlice> slices;
  std::size_t labeled_count = 0;
  std::size_t pseudo_count = 0;
  std::string teacher_checkpoint;
};

inline CombinedDataset make_combined_dataset(const VolumeStore& store, std::span<const int> labeled_volumes,
                                             const PseudoLabelSet& pls, bool accepted_only,
                                             bool skip_empty = false) {
  CombinedDataset ds;
  ds.teacher_checkpoint = pls.teacher_checkpoint;
  ds.slices = ground_truth_slices(store, labeled_volumes, skip_empty);
  ds.labeled_count = ds.slices.size();
  std::set<SliceId> seen;
  for (const auto& s : ds.slices) seen.insert(s.id);
  for (const auto& e : pls.entries) {
    if (accepted_only) {
      if (!e.accepted) fail_validation("combined dataset: pseudo-label ", e.id.str(), " was never filtered");
      if (!*e.accepted) continue;
    }
    if (skip_empty && std::all_of(e.mask.begin(), e.mask.end(), [](auto l) { return l == 0; })) continue;
    if (!seen.insert(e.id).second) fail_validation("combined dataset: slice ", e.id.str(), " appears twice");
    ds.slices.push_back({e.id, store.image(e.id), e.mask, SliceSource::Teacher});
    ++ds.pseudo_count;
  }
  return ds;
}

// Student on the combined data: CE on its labels plus (when enabled) KD
// toward the frozen teacher recomputed on the same crops. Starts from the
// teacher checkpoint or a fresh initialization.
inline SegResult train_student(const ExperimentConfig& cfg, const SegModel& teacher,
                               const Checkpoint& teacher_ckpt, const CombinedDataset& combined,
                               const ExperimentData& data, const std::string& stage = "student",
                               const LogFn& log = {}) {
  if (combined.slices.empty()) fail_validation(stage, ": combined dataset is empty");
  SegModel student(cfg.seg_model(), seeds::student_init(cfg));
  if (teacher_ckpt.arch_hash != student.arch_hash())
    fail_validation(stage, ": teacher checkpoint architecture ", teacher_ckpt.arch_hash,
                    " does not match student architecture ", student.arch_hash());
  if (cfg.use_teacher_ckpt) init_from_checkpoint(student, teacher_ckpt);
  auto opt = segmentation_options(cfg, student.required_divisor());
  opt.stage = stage;
  opt.epochs = cfg.student_epochs();
  opt.seed = seeds::student_batches(cfg);
  opt.alpha = static_cast<float>(cfg.effective_alpha());
  opt.teacher = opt.alpha > 0 ? &teacher : nullptr;
  log_to(log, detail::concat(stage, ": ", combined.labeled_count, " labeled + ", combined.pseudo_count,
                             " pseudo-labeled slices, alpha ", opt.alpha, ", tau ", opt.tau,
                             cfg.use_teacher_ckpt ? ", teacher init" : ", fresh init"));
  auto curve = train_segmentation(student, combined.slices, data.store, data.split.validation, opt, log);
  return {std::move(student), std::move(curve)};
}

// ---------------------------------------------------------------- ablation

struct AblationVariant {
  const char* name;
  const char* slug;
  bool use_kd, use_teacher_ckpt, use_qc;
};

// Student rows; "Fully supervised" is the teacher itself.
inline constexpr std::array<AblationVariant, 5> kStudentVariants{{
    {"Pseudo-Labeling", "pseudo-labeling", false, false, false},
    {"Knowledge Distillation", "knowledge-distillation", true, false, false},
    {"Teacher Checkpoint", "teacher-checkpoint", false, true, false},
    {"Quality Classifier", "quality-classifier", false, false, true},
    {"Proposed", "proposed", true, true, true},
}};

inline ExperimentConfig with_variant(ExperimentConfig cfg, const AblationVariant& v) {
  cfg.use_kd = v.use_kd;
  cfg.use_teacher_ckpt = v.use_teacher_ckpt;
  cfg.use_qc = v.use_qc;
  return cfg;
}

struct AblationRow {
  std::string name;
  bool use_kd = false, use_teacher_ckpt = false, use_qc = false;
  MetricsReport metrics;
  TrainingCurve curve;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string config_hash;

  const AblationRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    fail_validation("ablation table has no row '", name, "'");
  }

  nlohmann::json to_json() const {
    const double base_miou = row("Pseudo-Labeling").metrics.miou();
    const double base_dice = row("Pseudo-Labeling").metrics.mdice();
    auto arr = nlohmann::json::array();
    for (const auto& r : rows) {
      const bool baseline = r.name == "Fully supervised" || r.name == "Pseudo-Labeling";
      arr.push_back({{"name", r.name},
                     {"use_kd", r.use_kd},
                     {"use_teacher_ckpt", r.use_teacher_ckpt},
                     {"use_qc", r.use_qc},
                     {"mean_iou", r.metrics.miou()},
                     {"mean_dice", r.metrics.mdice()},
                     {"delta_mean_iou", baseline ? nlohmann::json(nullptr) : nlohmann::json(r.metrics.miou() - base_miou)},
                     {"delta_mean_dice", baseline ? nlohmann::json(nullptr) : nlohmann::json(r.metrics.mdice() - base_dice)},
                     {"metrics", r.metrics.to_json()},
                     {"curve", r.curve.to_json()}});
    }
    return {{"config_hash", config_hash}, {"stage", "ablate"}, {"rows", arr}};
  }

  static AblationTable from_json(const nlohmann::json& j) {
    AblationTable t;
    t.config_hash = j.value("config_hash", "");
    for (const auto& r : j.at("rows"))
      t.rows.push_back({r.at("name").get<std::string>(), r.at("use_kd").get<bool>(),
                        r.at("use_teacher_ckpt").get<bool>(), r.at("use_qc").get<bool>(),
                        MetricsReport::from_json(r.at("metrics")), TrainingCurve::from_json(r.at("curve"))});
    return t;
  }
};

}  // namespace distill_seg
