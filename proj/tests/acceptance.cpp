// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Training-based checks use the reference configuration
// (40 phantoms, K = 4) on seeds {0, 1, 2}; runs are cached under the root
// directory given on the command line, so a second invocation only verifies.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "distill_seg/gradcheck.hpp"
#include "distill_seg/losses.hpp"
#include "distill_seg/metrics.hpp"
#include "distill_seg/run.hpp"
#include "oracles.hpp"

using namespace distill_seg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

struct Outcome {
  bool ok;
  std::string detail;
};

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

// ------------------------------------------------------------------ runs

constexpr int kSeeds[] = {0, 1, 2};

ExperimentConfig reference_config(int seed, int n_labeled = 23) {
  ExperimentConfig c;
  c.data_seed = c.model_seed = c.train_seed = static_cast<std::uint64_t>(seed);
  c.n_labeled = n_labeled;
  return c;
}

class Runs {
 public:
  explicit Runs(fs::path root) : root_(std::move(root)) {}

  Run& get(const ExperimentConfig& c) {
    auto& slot = runs_[c.hash()];
    if (!slot) {
      slot = std::make_unique<Run>(c, root_, RunOptions{{}, false});
      progress("run " + c.hash() + " (seed " + std::to_string(c.data_seed) + ", n_labeled " +
               std::to_string(c.n_labeled) + ")");
    }
    return *slot;
  }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
  std::map<std::string, std::unique_ptr<Run>> runs_;
};

Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  RngStream rs(seed, 99);
  std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<float>(sd * rs.normal());
  return Tensor::from(std::move(shape), std::move(v), true);
}

// ------------------------------------------------------------------ criteria

Outcome gradients() {
  const auto t0 = Clock::now();
  bool ok = true;
  double worst = 0.0;
  std::string worst_case, failed;
  std::size_t cases = 0;
  for (const auto& c : gradcheck::all_cases()) {
    const auto r = gradcheck::run(c, 10);
    ++cases;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_case = r.name;
    }
    if (!r.ok) {
      ok = false;
      failed += " " + r.name;
    }
  }
  const double secs = seconds_since(t0);
  std::string d = std::to_string(cases) + " cases x 10 instances, worst rel err " + sci(worst) + " (" +
                  worst_case + "), " + fmt(secs, 1) + " s";
  if (!failed.empty()) d += "; failing:" + failed;
  if (secs >= 120) {
    ok = false;
    d += "; exceeds 120 s";
  }
  return {ok, d};
}

Outcome loss_identities() {
  bool ok = true;
  std::ostringstream d;

  double kd_max = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = random_tensor({2, 4, 5, 5}, seed, 4.0);
    for (float tau : {0.5f, 1.0f, 4.0f, 10.0f}) kd_max = std::max(kd_max, double(std::abs(kd_loss(s, s.clone(), tau).item())));
  }
  ok = ok && kd_max < 1e-7;
  d << "kd(s,s) max " << sci(kd_max);

  bool endpoints = true;
  RngStream rs(5, 5);
  for (int i = 0; i < 100; ++i) {
    auto seg = Tensor::scalar(static_cast<float>(rs.uniform(0.0, 5.0)));
    auto kd = Tensor::scalar(static_cast<float>(rs.uniform(0.0, 5.0)));
    endpoints = endpoints && student_loss(seg, kd, LossWeights(0.0)).item() == seg.item() &&
                student_loss(seg, kd, LossWeights(1.0)).item() == kd.item();
  }
  ok = ok && endpoints;
  d << "; alpha endpoints " << (endpoints ? "exact" : "NOT exact");

  double ce_err = 0.0;
  for (int k = 2; k <= 8; ++k) {
    MaskBatch m{1, 3, 3, std::vector<std::uint8_t>(9, 0)};
    for (std::size_t i = 0; i < 9; ++i) m.labels[i] = static_cast<std::uint8_t>(i % k);
    ce_err = std::max(ce_err, std::abs(double(cross_entropy(Tensor::zeros({1, k, 3, 3}), m).item()) - std::log(double(k))));
  }
  ok = ok && ce_err < 1e-6;
  d << "; |CE(uniform) - ln K| max " << sci(ce_err);

  double dice_err = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    ConfusionMatrix cm(5);
    for (int g = 0; g < 5; ++g)
      for (int p = 0; p < 5; ++p) cm.at(g, p) = rs.below(10000);
    const auto iou = iou_per_class(cm), dice = dice_per_class(cm);
    for (int k = 0; k < 5; ++k) dice_err = std::max(dice_err, std::abs(*dice[k] - 2.0 * *iou[k] / (1.0 + *iou[k])));
  }
  ok = ok && dice_err < 1e-9;
  d << "; Dice-IoU identity max " << sci(dice_err);
  return {ok, d.str()};
}

Outcome kd_direction() {
  auto pixel = [](float a, float b) { return Tensor::from({1, 2, 1, 1}, {a, b}, true); };
  const double want = oracle::kl(oracle::softmax({0, 0}, 1), oracle::softmax({2, 0}, 1));
  const double got = kd_loss(pixel(0, 0), pixel(2, 0), 1.0f).item();
  const double swapped = kd_loss(pixel(2, 0), pixel(0, 0), 1.0f).item();
  const bool ok = std::abs(got - want) < 1e-5 && std::abs(got - swapped) > 1e-5;
  return {ok, "student [0,0] vs teacher [2,0], tau 1: got " + fmt(got, 6) + ", oracle " + fmt(want, 6) +
                  ", swapped " + fmt(swapped, 6)};
}

Outcome conv_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int shapes = 0;
  for (int k : {1, 2, 3, 5})
    for (int stride : {1, 2})
      for (int pad : {0, 1, 2})
        for (int ch : {1, 4, 9})
          for (int size : {3, 8, 17, 40}) {
            if (k > size + 2 * pad) continue;
            auto x = random_tensor({2, ch, size, size + 3}, 10 + size);
            auto w = random_tensor({5, ch, k, k}, 20 + k);
            auto b = random_tensor({5}, 30);
            worst = std::max(worst, oracle::scaled_error(conv2d(x, w, b, stride, pad).data(),
                                                         oracle::naive_conv(x, w, b, stride, pad)));
            ++shapes;
          }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 60,
          std::to_string(shapes) + " shapes, worst relative deviation " + sci(worst) + ", " + fmt(secs, 1) + " s"};
}

Outcome table2(Runs& runs) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream d;
  for (int seed : kSeeds) {
    const auto table = runs.get(reference_config(seed)).ablation();
    const double p = table.row("Proposed").metrics.miou();
    const double fs = table.row("Fully supervised").metrics.miou();
    const double pl = table.row("Pseudo-Labeling").metrics.miou();
    const bool seed_ok = table.rows.size() == 6 && p >= fs + 0.02 && p >= pl;
    ok = ok && seed_ok;
    d << (seed ? "; " : "") << "seed " << seed << (seed_ok ? " ok" : " FAIL") << " (Proposed " << fmt(p)
      << ", FS " << fmt(fs) << ", PL " << fmt(pl) << ", " << table.rows.size() << " rows)";
  }
  d << "; " << fmt(seconds_since(t0) / 60.0, 1) << " min";
  return {ok, d.str()};
}

Outcome table1(Runs& runs) {
  const auto t0 = Clock::now();
  int passing = 0;
  std::ostringstream d;
  for (int seed : kSeeds) {
    std::map<int, std::pair<double, double>> m;  // n_labeled -> (baseline, proposed)
    for (int n : {2, 8, 16}) {
      auto& run = runs.get(reference_config(seed, n));
      m[n] = {run.teacher().metrics.miou(), run.student().metrics.miou()};
    }
    bool seed_ok = m[2].second >= m[8].first;
    for (const auto& [n, v] : m) seed_ok = seed_ok && v.second >= v.first;
    passing += seed_ok;
    d << (seed ? "; " : "") << "seed " << seed << (seed_ok ? " ok" : " FAIL") << " (";
    for (const auto& [n, v] : m) d << (n == 2 ? "" : ", ") << n << ": " << fmt(v.second) << " vs " << fmt(v.first);
    d << ")";
  }
  d << "; " << passing << "/3 seeds, " << fmt(seconds_since(t0) / 60.0, 1) << " min";
  return {passing >= 2, d.str()};
}

Outcome filter_and_qc(Runs& runs) {
  auto& run = runs.get(reference_config(0));
  const auto& q = run.quality_classifier();
  const auto& data = run.data();
  const auto& pls = run.pseudo_labels();
  bool monotone = true;
  double prev = 2.0;
  std::ostringstream rates;
  for (int i = 1; i <= 9; ++i) {
    const double rate = filter_pseudo_labels(q.model, data.store, pls, 0.1 * i).acceptance_rate();
    monotone = monotone && rate <= prev;
    prev = rate;
    rates << (i > 1 ? " " : "") << fmt(rate, 3);
  }
  const double acc = q.report.at("held_out_accuracy").get<double>();
  return {monotone && acc >= 0.8, std::string("acceptance over thresholds 0.1..0.9: ") + rates.str() +
                                      (monotone ? " (non-increasing)" : " (NOT monotone)") +
                                      "; QC held-out accuracy " + fmt(acc, 3)};
}

// Same flags except the initialization: "Teacher Checkpoint" vs "Pseudo-Labeling".
Outcome convergence(Runs& runs) {
  int passing = 0;
  std::ostringstream d;
  for (int seed : kSeeds) {
    const auto table = runs.get(reference_config(seed)).ablation();
    const auto& fresh = table.row("Pseudo-Labeling").curve;
    const auto& init = table.row("Teacher Checkpoint").curve;
    const double target = fresh.final_miou().value_or(1.0);
    const auto fresh_epochs = fresh.epochs_to_reach(target);
    const auto init_epochs = init.epochs_to_reach(target);
    const bool seed_ok = init_epochs && fresh_epochs && *init_epochs <= *fresh_epochs;
    passing += seed_ok;
    d << (seed ? "; " : "") << "seed " << seed << (seed_ok ? " ok" : " FAIL") << " (target " << fmt(target)
      << ": teacher-init " << (init_epochs ? std::to_string(*init_epochs) : "never") << " of "
      << init.epochs.size() - 1 << " epochs, fresh " << (fresh_epochs ? std::to_string(*fresh_epochs) : "never")
      << " of " << fresh.epochs.size() - 1 << ")";
  }
  d << "; " << passing << "/3 seeds";
  return {passing >= 2, d.str()};
}

bool decodes(const fs::path& p, std::span<const std::uint8_t> bytes, io::Bytes* reencoded) {
  try {
    const auto ext = p.extension();
    if (ext == ".vol") *reencoded = io::encode_volume(io::decode_volume(bytes));
    else if (ext == ".msk") *reencoded = io::encode_mask(io::decode_mask(bytes));
    else if (ext == ".pls") *reencoded = PseudoLabelSet::decode(bytes).encode();
    else if (ext == ".ckpt") *reencoded = Checkpoint::decode(bytes).encode();
    return true;
  } catch (const ValidationError&) {
    return false;
  }
}

Outcome determinism(Runs& runs) {
  const auto t0 = Clock::now();
  const auto cfg = reference_config(0);
  auto& run = runs.get(cfg);
  run.evaluate();
  const auto dir = run.dir();

  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "log.txt") files.push_back(e.path());
  std::map<fs::path, io::Bytes> before;
  for (const auto& f : files) before[f] = io::read_file(f);

  // Recompute every stage of the run's own pipeline from its persisted inputs.
  {
    Run again(cfg, runs.root(),
              {{"gen-data", "train-teacher", "pseudo-label", "train-qc", "filter", "train-student", "evaluate"}, false});
    again.evaluate();
  }
  std::vector<std::string> changed;
  for (const auto& f : files)
    if (io::read_file(f) != before[f]) changed.push_back(fs::relative(f, dir).string());

  std::size_t binary = 0, roundtrip_bad = 0, truncation_accepted = 0;
  for (const auto& [f, bytes] : before) {
    const auto ext = f.extension();
    if (ext != ".vol" && ext != ".msk" && ext != ".pls" && ext != ".ckpt") continue;
    ++binary;
    io::Bytes back;
    if (!decodes(f, bytes, &back) || back != bytes) ++roundtrip_bad;
    for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{10}})
      if (decodes(f, std::span(bytes).first(cut), &back)) ++truncation_accepted;
  }

  std::ostringstream d;
  d << files.size() << " artifacts, " << changed.size() << " changed after forced recompute";
  for (const auto& c : changed) d << " [" << c << "]";
  d << "; " << binary << " binary files, " << roundtrip_bad << " failed round trip, " << truncation_accepted
    << " truncations accepted; " << fmt(seconds_since(t0) / 60.0, 1) << " min";
  return {changed.empty() && roundtrip_bad == 0 && truncation_accepted == 0 && binary > 0, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  Runs runs(argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs"));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-correctness", gradients},
      {"loss-identities", loss_identities},
      {"kd-direction", kd_direction},
      {"conv-oracle", conv_oracle},
      {"ablation-ordering", [&] { return table2(runs); }},
      {"labeled-sweep-ordering", [&] { return table1(runs); }},
      {"filter-monotonicity-qc", [&] { return filter_and_qc(runs); }},
      {"convergence-ordering", [&] { return convergence(runs); }},
      {"determinism-persistence", [&] { return determinism(runs); }},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    progress("checking " + name);
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.ok;
    std::cout << (o.ok ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
