// distill_seg: command-line driver for the teacher/student pipeline.
//
//   distill_seg <subcommand> [--config PATH] [--out DIR] [overrides...]
//
// Exit status: 0 success, 1 validation or usage error, 2 runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "distill_seg/config.hpp"
#include "distill_seg/error.hpp"
#include "distill_seg/gradcheck.hpp"
#include "distill_seg/report.hpp"
#include "distill_seg/run.hpp"

namespace {

using namespace distill_seg;

struct Overrides {
  std::string config_path;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  std::optional<int> n_labeled, epochs;
  std::optional<double> alpha, tau, qc_threshold;
  bool force = false, no_kd = false, no_teacher_ckpt = false, no_qc = false;
  int instances = 10;
};

// Flags override the config file; the merged result is what gets hashed.
ExperimentConfig effective_config(const Overrides& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.seed) c.data_seed = c.model_seed = c.train_seed = *o.seed;
  if (o.n_labeled) c.n_labeled = *o.n_labeled;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.tau) c.tau = *o.tau;
  if (o.qc_threshold) c.qc_threshold = *o.qc_threshold;
  if (o.epochs) {
    c.epochs_teacher = c.epochs_student = *o.epochs;
    c.epochs_student_init = std::max(1, *o.epochs / 3);
  }
  if (o.no_kd) c.use_kd = false;
  if (o.no_teacher_ckpt) c.use_teacher_ckpt = false;
  if (o.no_qc) c.use_qc = false;
  c.validate();
  return c;
}

Run open_run(const Overrides& o, const std::string& stage) {
  RunOptions opts;
  if (o.force) opts.force.insert(stage);
  return Run(effective_config(o), o.out, opts);
}

void print_metrics(const std::string& label, const MetricsReport& m) {
  std::printf("%s: mIoU %.4f  Dice %.4f  (%lld pixels)\n", label.c_str(), m.miou(), m.mdice(),
              static_cast<long long>(m.pixels_evaluated));
}

int grad_check(const Overrides& o) {
  bool all = true;
  for (const auto& c : gradcheck::all_cases()) {
    const auto r = gradcheck::run(c, o.instances);
    std::printf("%-22s %3d instances %6zu entries  max rel err %.3e  %s\n", r.name.c_str(), r.instances,
                r.entries, r.max_rel_err, r.ok ? "ok" : "FAILED");
    all = all && r.ok;
  }
  std::printf("%s\n", all ? "all gradient checks passed" : "gradient checks FAILED");
  return all ? 0 : 2;
}

int report(const Overrides& o) {
  const auto runs = scan_runs(o.out);
  const auto sweep = labeled_sweep(runs);
  const auto ablation = ablation_summary(runs);
  std::printf("%zu run(s) under %s\n\n", runs.size(), o.out.c_str());
  std::printf("Labeled-volume sweep\n%s\n", sweep_text(sweep).c_str());
  std::printf("Ablation\n%s", ablation_text(ablation).c_str());
  const auto dir = std::filesystem::path(o.out) / "report";
  io::write_text(dir / "labeled_sweep.csv", sweep_csv(sweep));
  io::write_text(dir / "ablation.csv", ablation_csv(ablation));
  std::fprintf(stderr, "report: wrote %s\n", dir.string().c_str());
  return 0;
}

int dispatch(const std::string& cmd, const Overrides& o) {
  if (cmd == "grad-check") return grad_check(o);
  if (cmd == "report") return report(o);

  Run run = open_run(o, cmd);
  std::fprintf(stderr, "run directory %s\n", run.dir().string().c_str());
  if (cmd == "gen-data") {
    const auto& d = run.data();
    std::printf("%zu volumes: %zu labeled, %zu calibration, %zu unlabeled, %zu validation\n", d.store.size(),
                d.split.labeled.size(), d.split.calibration.size(), d.split.unlabeled.size(),
                d.split.validation.size());
  } else if (cmd == "train-teacher") {
    print_metrics("teacher", run.teacher().metrics);
  } else if (cmd == "pseudo-label") {
    std::printf("%zu pseudo-labels\n", run.pseudo_labels().entries.size());
  } else if (cmd == "train-qc") {
    const auto& q = run.quality_classifier();
    std::printf("quality classifier: train accuracy %.4f, held-out accuracy %.4f\n",
                q.report.at("train_accuracy").get<double>(), q.report.at("held_out_accuracy").get<double>());
  } else if (cmd == "filter") {
    const auto& f = run.filtered();
    std::printf("accepted %zu of %zu pseudo-labels (%.1f%%) at threshold %.3f\n", f.accepted_count(),
                f.entries.size(), 100.0 * f.acceptance_rate(), f.threshold.value_or(0.0));
  } else if (cmd == "train-student") {
    print_metrics("student", run.student().metrics);
  } else if (cmd == "evaluate") {
    const auto j = run.evaluate();
    print_metrics("teacher", MetricsReport::from_json(j.at("teacher")));
    print_metrics("student", MetricsReport::from_json(j.at("student")));
  } else if (cmd == "ablate") {
    const auto table = run.ablation();
    std::printf("%s", ablation_text(ablation_summary({RunSummary{run.dir(), run.config(), {}, {}, table}})).c_str());
  }
  std::printf("%s\n", run.dir().string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher/student self-training for segmentation on synthetic phantoms"};
  app.require_subcommand(1, 1);
  Overrides o;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate phantom volumes and the dataset split"},
      {"train-teacher", "train the fully supervised teacher"},
      {"pseudo-label", "predict masks for unlabeled slices with the teacher"},
      {"train-qc", "train the pseudo-label quality classifier"},
      {"filter", "score pseudo-labels and keep those above the threshold"},
      {"train-student", "train the student on labeled plus pseudo-labeled slices"},
      {"evaluate", "re-evaluate the stored teacher and student checkpoints"},
      {"ablate", "train every student variant and write ablation.json"},
      {"grad-check", "finite-difference checks of every op and loss"},
      {"report", "tabulate finished runs under --out"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--out", o.out, "run root directory")->capture_default_str();
    if (name == "grad-check") {
      sub->add_option("--instances", o.instances, "random instances per case")->check(CLI::PositiveNumber);
      continue;
    }
    if (name == "report") continue;
    sub->add_option("--config", o.config_path, "JSON config file");
    sub->add_option("--seed", o.seed, "data, model and training seed");
    sub->add_option("--n-labeled", o.n_labeled, "labeled volumes (calibration included)");
    sub->add_option("--alpha", o.alpha, "KD weight");
    sub->add_option("--tau", o.tau, "softmax temperature");
    sub->add_option("--qc-threshold", o.qc_threshold, "pseudo-label acceptance threshold");
    sub->add_option("--epochs", o.epochs, "teacher and student epochs (teacher-initialised students: a third)");
    sub->add_flag("--force", o.force, "recompute this stage even if its outputs exist");
    sub->add_flag("--no-kd", o.no_kd, "drop the distillation term");
    sub->add_flag("--no-teacher-ckpt", o.no_teacher_ckpt, "start the student from scratch");
    sub->add_flag("--no-qc", o.no_qc, "use every pseudo-label unfiltered");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return dispatch(cmd, o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}
