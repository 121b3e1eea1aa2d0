#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distill_seg/binary_io.hpp"
#include "distill_seg/config.hpp"
#include "distill_seg/metrics.hpp"
#include "distill_seg/pipeline.hpp"

namespace distill_seg {

// What a finished run directory holds, as far as the tables are concerned.
struct RunSummary {
  std::filesystem::path dir;
  ExperimentConfig config;
  std::optional<MetricsReport> teacher, student;
  std::optional<AblationTable> ablation;
};

namespace detail {

inline std::optional<nlohmann::json> try_read_json(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return std::nullopt;
  try {
    return nlohmann::json::parse(io::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    fail_validation(p.string(), ": ", e.what());
  }
}

inline std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string signed_fixed(double v, int digits = 4) {
  return (v >= 0 ? "+" : "") + fixed(v, digits);
}

}  // namespace detail

// Every <root>/<hash>/ with a config.json, in directory-name order.
inline std::vector<RunSummary> scan_runs(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) fail_validation("run root not found: ", root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root))
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "config.json"))
      dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) {
    RunSummary r{d, ExperimentConfig::from_json(*detail::try_read_json(d / "config.json")), {}, {}, {}};
    if (auto j = detail::try_read_json(d / "metrics" / "teacher.json")) r.teacher = MetricsReport::from_json(*j);
    if (auto j = detail::try_read_json(d / "metrics" / "student.json")) r.student = MetricsReport::from_json(*j);
    if (auto j = detail::try_read_json(d / "ablation.json")) r.ablation = AblationTable::from_json(*j);
    runs.push_back(std::move(r));
  }
  return runs;
}

// Labeled-volume sweep: teacher (fully supervised) vs the all-components
// student, averaged over the seeds found for each n_labeled.
struct SweepRow {
  int n_labeled = 0;
  int seeds = 0;
  double baseline_miou = 0.0, proposed_miou = 0.0;
  double baseline_mdice = 0.0, proposed_mdice = 0.0;
};

inline std::vector<SweepRow> labeled_sweep(const std::vector<RunSummary>& runs) {
  std::map<int, SweepRow> rows;
  for (const auto& r : runs) {
    const auto& c = r.config;
    if (!r.teacher || !r.student || !(c.use_kd && c.use_teacher_ckpt && c.use_qc)) continue;
    auto& row = rows[c.n_labeled];
    row.n_labeled = c.n_labeled;
    ++row.seeds;
    row.baseline_miou += r.teacher->miou();
    row.proposed_miou += r.student->miou();
    row.baseline_mdice += r.teacher->mdice();
    row.proposed_mdice += r.student->mdice();
  }
  std::vector<SweepRow> out;
  for (auto& [n, row] : rows) {
    const double s = row.seeds;
    row.baseline_miou /= s;
    row.proposed_miou /= s;
    row.baseline_mdice /= s;
    row.proposed_mdice /= s;
    out.push_back(row);
  }
  return out;
}

// Ablation rows averaged over every run that has an ablation table.
struct AblationSummaryRow {
  std::string name;
  bool use_kd = false, use_teacher_ckpt = false, use_qc = false;
  int seeds = 0;
  double miou = 0.0, mdice = 0.0;
  std::optional<double> delta_miou, delta_mdice;  // vs Pseudo-Labeling
};

inline std::vector<AblationSummaryRow> ablation_summary(const std::vector<RunSummary>& runs) {
  std::vector<AblationSummaryRow> out;
  for (const auto& r : runs) {
    if (!r.ablation) continue;
    for (const auto& row : r.ablation->rows) {
      auto it = std::find_if(out.begin(), out.end(), [&](const auto& o) { return o.name == row.name; });
      if (it == out.end()) {
        out.push_back({row.name, row.use_kd, row.use_teacher_ckpt, row.use_qc, 0, 0.0, 0.0, {}, {}});
        it = out.end() - 1;
      }
      ++it->seeds;
      it->miou += row.metrics.miou();
      it->mdice += row.metrics.mdice();
    }
  }
  for (auto& o : out) {
    o.miou /= o.seeds;
    o.mdice /= o.seeds;
  }
  const auto base = std::find_if(out.begin(), out.end(), [](const auto& o) { return o.name == "Pseudo-Labeling"; });
  if (base != out.end())
    for (auto& o : out)
      if (o.name != "Fully supervised" && o.name != "Pseudo-Labeling") {
        o.delta_miou = o.miou - base->miou;
        o.delta_mdice = o.mdice - base->mdice;
      }
  return out;
}

inline std::string sweep_text(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "Labeled volumes | seeds | Fully supervised mIoU / Dice | Proposed mIoU / Dice\n";
  for (const auto& r : rows)
    os << r.n_labeled << " | " << r.seeds << " | " << detail::fixed(r.baseline_miou) << " / "
       << detail::fixed(r.baseline_mdice) << " | " << detail::fixed(r.proposed_miou) << " / "
       << detail::fixed(r.proposed_mdice) << "\n";
  return os.str();
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "n_labeled,seeds,baseline_miou,baseline_mdice,proposed_miou,proposed_mdice\n";
  for (const auto& r : rows)
    os << r.n_labeled << "," << r.seeds << "," << detail::fixed(r.baseline_miou, 6) << ","
       << detail::fixed(r.baseline_mdice, 6) << "," << detail::fixed(r.proposed_miou, 6) << ","
       << detail::fixed(r.proposed_mdice, 6) << "\n";
  return os.str();
}

inline std::string ablation_text(const std::vector<AblationSummaryRow>& rows) {
  std::ostringstream os;
  os << "Method | KD | Ckpt | QC | seeds | mIoU | Dice\n";
  auto mark = [](bool b) { return b ? "x" : "-"; };
  for (const auto& r : rows) {
    os << r.name << " | " << mark(r.use_kd) << " | " << mark(r.use_teacher_ckpt) << " | " << mark(r.use_qc)
       << " | " << r.seeds << " | " << detail::fixed(r.miou);
    if (r.delta_miou) os << " (" << detail::signed_fixed(*r.delta_miou) << ")";
    os << " | " << detail::fixed(r.mdice);
    if (r.delta_mdice) os << " (" << detail::signed_fixed(*r.delta_mdice) << ")";
    os << "\n";
  }
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationSummaryRow>& rows) {
  std::ostringstream os;
  os << "name,use_kd,use_teacher_ckpt,use_qc,seeds,miou,mdice,delta_miou,delta_mdice\n";
  for (const auto& r : rows)
    os << '"' << r.name << "\"," << r.use_kd << "," << r.use_teacher_ckpt << "," << r.use_qc << ","
       << r.seeds << "," << detail::fixed(r.miou, 6) << "," << detail::fixed(r.mdice, 6) << ","
       << (r.delta_miou ? detail::fixed(*r.delta_miou, 6) : "") << ","
       << (r.delta_mdice ? detail::fixed(*r.delta_mdice, 6) : "") << "\n";
  return os.str();
}

}  // namespace distill_seg
