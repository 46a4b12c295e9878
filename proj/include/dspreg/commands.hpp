#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dspreg/config.hpp"
#include "dspreg/domain_data.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/run_io.hpp"
#include "dspreg/trainer.hpp"
#include "dspreg/validation.hpp"

namespace dspreg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;

inline constexpr const char* kOutputEnv = "DSPREG_OUT";

/// --out, then output.dir from the config, then $DSPREG_OUT, then ./runs.
inline fs::path output_root(const ExperimentConfig& c, const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (c.out_dir) return *c.out_dir;
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  return "runs";
}

inline fs::path prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
  return dir;
}

inline std::size_t domain_count(const ExperimentConfig& c) {
  if (c.source == "synthetic") return c.synthetic.num_domains;
  return load_domains(c, 0, 0).size();
}

inline void check_split(const ExperimentConfig& c, std::size_t split) {
  const std::size_t n = domain_count(c);
  if (n < 2) throw ProtocolError("leave-one-domain-out needs at least two domains");
  if (split >= n) {
    throw ProtocolError("split " + std::to_string(split) + " out of range [0, " + std::to_string(n) + ")");
  }
}

inline std::vector<DomainDataset> sources_of(const std::vector<DomainDataset>& doms, std::size_t split) {
  const auto splits = lodo_splits(doms.size());
  std::vector<DomainDataset> out;
  for (std::size_t s : splits[split].train) out.push_back(doms[s]);
  return out;
}

/// Writes domain CSVs and manifest.json under <root>/data.
inline std::vector<fs::path> cmd_generate(ExperimentConfig c, const fs::path& root, std::ostream& out) {
  if (c.source != "synthetic") throw ProtocolError("generate needs dataset.source = synthetic");
  check_config(c);
  const fs::path dir = prepare_dir(root / "data");
  c.out_dir = root;
  const auto files = write_dataset(c.synthetic, generate(c.synthetic), dir);
  write_config(c, dir / "config.ini");
  for (const auto& f : files) out << f.string() << '\n';
  return files;
}

struct TrainOutcome {
  std::vector<fs::path> run_dirs;
  MeanStd heldout_loss;
  MeanStd heldout_accuracy;
};

/// One run per seed on LODO split `split`; run dirs <root>/train/split<i>/seed<s>.
inline TrainOutcome cmd_train(ExperimentConfig c, std::size_t split, const fs::path& root, std::ostream& out) {
  check_config(c);
  check_split(c, split);
  c.out_dir = root;
  const fs::path base = prepare_dir(root / "train" / ("split" + std::to_string(split)));
  write_config(c, base / "config.ini");
  TrainOutcome res;
  std::vector<double> losses, accs;
  nlohmann::json runs = nlohmann::json::array();
  for (std::uint64_t seed : c.seeds) {
    const auto doms = load_domains(c, seed, split);
    const auto sources = sources_of(doms, split);
    const ModelSpec model = resolve_model(c, doms);
    TrainConfig tc = c.train;
    tc.seed = seed;
    nlohmann::json selection;
    if (c.tune_lambda) {
      const auto sel = select_lambda(tc, model, sources, c.lambda_grid);
      tc.lambda = sel.lambda;
      selection = {{"method", sel.method}, {"grid", sel.grid}, {"scores", sel.scores}, {"lambda", sel.lambda}};
    }
    const auto result = train(tc, model, sources, doms[split]);
    const fs::path dir = prepare_dir(base / ("seed" + std::to_string(seed)));
    write_run(result, dir);
    ExperimentConfig resolved = c;
    resolved.seeds = {seed};
    resolved.train.lambda = tc.lambda;
    resolved.tune_lambda = false;
    write_config(resolved, dir / "config.ini");
    if (!selection.is_null()) open_for_write(dir / "lambda_selection.json") << selection.dump(2) << '\n';
    losses.push_back(result.metrics.final_heldout.loss);
    accs.push_back(result.metrics.final_heldout.accuracy);
    runs.push_back({{"seed", seed}, {"dir", dir.string()}, {"summary", run_summary(result.metrics)}});
    out << "split " << split << " seed " << seed << " mode " << result.metrics.mode << " lambda " << tc.lambda
        << " held-out loss " << result.metrics.final_heldout.loss << " accuracy "
        << result.metrics.final_heldout.accuracy << '\n';
    res.run_dirs.push_back(dir);
  }
  res.heldout_loss = mean_std(losses);
  res.heldout_accuracy = mean_std(accs);
  nlohmann::json agg{{"split", split},
                     {"seeds", c.seeds},
                     {"heldout_loss", {{"mean", res.heldout_loss.mean}, {"std", res.heldout_loss.std}}},
                     {"heldout_accuracy", {{"mean", res.heldout_accuracy.mean}, {"std", res.heldout_accuracy.std}}},
                     {"runs", runs}};
  open_for_write(base / "aggregate.json") << agg.dump(2) << '\n';
  out << "held-out loss " << res.heldout_loss.mean << " ± " << res.heldout_loss.std << " over " << losses.size()
      << " seed(s); accuracy " << res.heldout_accuracy.mean << " ± " << res.heldout_accuracy.std << '\n';
  return res;
}

/// Runs the oracle suite, writes <root>/validate/report.json.
inline ValidationReport cmd_validate(ExperimentConfig c, const fs::path& root, std::ostream& out) {
  check_config(c);
  c.out_dir = root;
  const fs::path dir = prepare_dir(root / "validate");
  write_config(c, dir / "config.ini");
  ValidationReport rep;
  const auto& names = c.validate.checks.empty() ? validation_check_names() : c.validate.checks;
  for (const auto& n : names) {
    rep.checks.push_back(run_check(n, c.validate));
    ValidationReport one{{rep.checks.back()}};
    print_report(one, out);
    out.flush();
  }
  open_for_write(dir / "report.json") << to_json(rep).dump(2) << '\n';
  out << (rep.passed() ? "all checks passed" : "validation FAILED") << '\n';
  return rep;
}

struct AblationOutcome {
  std::vector<AblationRow> rows;
  std::map<std::string, MeanStd> by_run;  // held-out loss per run_id over seeds and splits
  fs::path summary_csv;
};

/// ablation_suite over every LODO split and seed; summary at <root>/ablate/summary.csv.
inline AblationOutcome cmd_ablate(ExperimentConfig c, const fs::path& root, std::ostream& out) {
  check_config(c);
  c.out_dir = root;
  const fs::path base = prepare_dir(root / "ablate");
  write_config(c, base / "config.ini");
  AblationOutcome res;
  const std::size_t n = domain_count(c);
  std::map<std::string, std::vector<double>> per_run;
  std::vector<std::string> order;
  for (std::uint64_t seed : c.seeds) {
    for (std::size_t split = 0; split < n; ++split) {
      const auto doms = load_domains(c, seed, split);
      const ModelSpec model = resolve_model(c, doms);
      TrainConfig tc = c.train;
      tc.seed = seed;
      if (c.tune_lambda) tc.lambda = select_lambda(tc, model, sources_of(doms, split), c.lambda_grid).lambda;
      auto rows = ablation_suite(tc, model, doms, split);
      for (auto& row : rows) {
        const fs::path dir =
            prepare_dir(base / ("seed" + std::to_string(seed)) / ("split" + std::to_string(split)) / row.run_id);
        write_metrics_jsonl(row.metrics, dir / "metrics.jsonl");
        write_snapshots(row.metrics, dir / "coefficients");
        open_for_write(dir / "summary.json") << run_summary(row.metrics).dump(2) << '\n';
        if (!per_run.count(row.run_id)) order.push_back(row.run_id);
        per_run[row.run_id].push_back(row.heldout_metric);
        row.metrics.steps.clear();
        res.rows.push_back(std::move(row));
      }
    }
  }
  res.summary_csv = base / "summary.csv";
  {
    auto os = open_for_write(res.summary_csv);
    write_ablation_csv(res.rows, os);
  }
  for (const auto& id : order) {
    res.by_run[id] = mean_std(per_run[id]);
    out << id << " held-out loss " << res.by_run[id].mean << " ± " << res.by_run[id].std << '\n';
  }
  if (res.by_run.count("full") && res.by_run.count("uniform") && res.by_run.count("erm")) {
    const double f = res.by_run["full"].mean, u = res.by_run["uniform"].mean, e = res.by_run["erm"].mean;
    out << "ordering full <= uniform <= erm (held-out loss): " << (f <= u && u <= e ? "yes" : "no") << '\n';
  }
  return res;
}

/// Parses argv and dispatches; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Domain-sensitivity regularization experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_flag;
  std::string seeds_flag;
  std::size_t split = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI config file");
    sub->add_option("--set", overrides, "override section.key=value (repeatable)");
    sub->add_option("--out", out_flag, "output root (default: output.dir, $DSPREG_OUT, ./runs)");
    sub->add_option("--seed", seeds_flag, "seed or comma-separated seeds");
  };
  auto* gen = app.add_subcommand("generate", "write synthetic domain CSVs and manifest");
  auto* tr = app.add_subcommand("train", "train on one leave-one-domain-out split");
  auto* val = app.add_subcommand("validate", "run the oracle checks");
  auto* abl = app.add_subcommand("ablate", "run the ablation suite over all splits and seeds");
  for (auto* s : {gen, tr, val, abl}) common(s);
  tr->add_option("--split", split, "index of the held-out domain")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    ExperimentConfig c = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path),
                                     overrides);
    if (!seeds_flag.empty()) {
      c.seeds = config_detail::parse_list<std::uint64_t>("--seed", seeds_flag);
      c.synthetic.seed = gen->parsed() ? c.seeds.front() : c.synthetic.seed;
      c.validate.seed = c.seeds.front();
    }
    const fs::path root = output_root(c, out_flag.empty() ? std::nullopt : std::optional<fs::path>(out_flag));
    if (gen->parsed()) {
      cmd_generate(c, root, out);
    } else if (tr->parsed()) {
      cmd_train(c, split, root, out);
    } else if (val->parsed()) {
      if (!cmd_validate(c, root, out).passed()) return kExitValidation;
    } else {
      cmd_ablate(c, root, out);
    }
    return kExitOk;
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "contract error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CapabilityError& e) {
    err << "capability error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitData;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const DimensionError& e) {
    err << "dimension error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace dspreg
