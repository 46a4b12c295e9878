#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dspreg/errors.hpp"
#include "dspreg/parameters.hpp"
#include "dspreg/sensitivity.hpp"
#include "dspreg/trainer.hpp"

namespace dspreg {

namespace fs = std::filesystem;
using nlohmann::json;

inline json to_json(const EvalMetrics& m) { return {{"loss", m.loss}, {"accuracy", m.accuracy}}; }

inline json to_json(const EpochRecord& r) {
  json val = json::object();
  for (const auto& v : r.validation) val[v.domain] = to_json(v.metrics);
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"train_sup_loss", r.train_sup_loss},
          {"reg_value", r.reg_value},
          {"mean_step_loss", r.mean_step_loss},
          {"validation", val},
          {"heldout", to_json(r.heldout)},
          {"wall_seconds", r.wall_seconds}};
}

inline std::ofstream open_for_write(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  return os;
}

/// One JSON object per completed epoch.
inline void write_metrics_jsonl(const RunMetrics& m, const fs::path& p) {
  auto os = open_for_write(p);
  for (const auto& e : m.epochs) os << to_json(e).dump() << '\n';
}

inline void write_steps_jsonl(const RunMetrics& m, const fs::path& p) {
  auto os = open_for_write(p);
  for (const auto& s : m.steps) {
    os << json{{"step", s.step},
               {"epoch", s.epoch},
               {"sup_loss", s.sup_loss},
               {"reg_value", s.reg_value},
               {"grad_norm_sq", s.grad_norm_sq}}
              .dump()
       << '\n';
  }
}

/// c_k snapshots as epoch<EEEE>_step<SSSSSSSS>.csv, in refresh order.
inline std::vector<fs::path> write_snapshots(const RunMetrics& m, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (const auto& s : m.snapshots) {
    char name[64];
    std::snprintf(name, sizeof name, "epoch%04zu_step%08zu.csv", s.epoch, s.step);
    const auto p = dir / name;
    auto os = open_for_write(p);
    write_csv(s.report, os);
    out.push_back(p);
  }
  return out;
}

/// index,segment,local_index,value
inline void write_params_csv(const ParameterVector& params, const fs::path& p) {
  auto os = open_for_write(p);
  os << "index,segment,local_index,value\n";
  for (const auto& seg : params.registry())
    for (std::size_t i = 0; i < seg.length; ++i)
      os << seg.offset + i << ',' << seg.name << ',' << i << ',' << format_double(params.values()[seg.offset + i])
         << '\n';
}

inline json run_summary(const RunMetrics& m) {
  return {{"mode", m.mode},
          {"lambda", m.lambda},
          {"t_update", m.t_update},
          {"seed", m.seed},
          {"heldout_domain", m.heldout_domain},
          {"epochs", m.epochs.size()},
          {"refresh_epochs", m.refresh_epochs()},
          {"final_heldout", to_json(m.final_heldout)},
          {"final_validation", to_json(m.final_validation)},
          {"wall_seconds", m.wall_seconds}};
}

/// metrics.jsonl, steps.jsonl (when traced), coefficients/, params.csv,
/// summary.json and summary.txt.
inline void write_run(const TrainResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_metrics_jsonl(r.metrics, dir / "metrics.jsonl");
  if (!r.metrics.steps.empty()) write_steps_jsonl(r.metrics, dir / "steps.jsonl");
  write_snapshots(r.metrics, dir / "coefficients");
  write_params_csv(r.params, dir / "params.csv");
  open_for_write(dir / "summary.json") << run_summary(r.metrics).dump(2) << '\n';
  auto txt = open_for_write(dir / "summary.txt");
  txt << "mode " << r.metrics.mode << "\nlambda " << r.metrics.lambda << "\nt_update " << r.metrics.t_update
      << "\nseed " << r.metrics.seed << "\nheld-out domain " << r.metrics.heldout_domain << "\nepochs "
      << r.metrics.epochs.size() << "\ncoefficient refreshes " << r.metrics.snapshots.size()
      << "\nheld-out loss " << r.metrics.final_heldout.loss << "\nheld-out accuracy "
      << r.metrics.final_heldout.accuracy << "\nvalidation loss " << r.metrics.final_validation.loss
      << "\nwall seconds " << r.metrics.wall_seconds << '\n';
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& os) {
  os << "run_id,mode,lambda,t_update,seed,split,heldout_metric\n";
  for (const auto& r : rows)
    os << r.run_id << ',' << r.mode << ',' << format_double(r.lambda) << ',' << r.t_update << ',' << r.seed << ','
       << r.split << ',' << format_double(r.heldout_metric) << '\n';
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  out.n = v.size();
  if (v.empty()) return out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return out;
}

}  // namespace dspreg
