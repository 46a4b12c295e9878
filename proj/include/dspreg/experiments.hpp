#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "dspreg/domain_data.hpp"
#include "dspreg/model.hpp"
#include "dspreg/trainer.hpp"

namespace dspreg {

/// Regenerates `spec` with leak α on every domain except `held_out`, which
/// gets none: the shortcut works on the sources and fails on the target.
inline std::vector<DomainDataset> shortcut_domains(SyntheticSpec spec, std::size_t held_out, double alpha) {
  if (held_out >= spec.num_domains) {
    throw ProtocolError("held-out domain " + std::to_string(held_out) + " out of range [0, " +
                        std::to_string(spec.num_domains) + ")");
  }
  spec.leak.assign(spec.num_domains, alpha);
  spec.leak[held_out] = 0.0;
  return generate(spec);
}

struct ShortcutProtocol {
  SyntheticSpec data;
  double alpha = 2.0;
  ModelSpec model;
  TrainConfig train;
  std::vector<double> lambda_grid;
  std::vector<std::uint64_t> seeds;
};

inline ShortcutProtocol default_shortcut_protocol() {
  ShortcutProtocol p;
  p.data.num_domains = 3;
  p.data.samples_per_domain = 300;
  p.data.invariant_dim = 2;
  p.data.spurious_dim = 2;
  p.data.spurious_scales = {1.0, 2.0, 4.0};
  p.data.num_classes = 2;
  p.data.label_noise = 0.1;
  p.model.layer_sizes = {p.data.feature_dim(), 2};
  p.model.head = Head::softmax_ce;
  p.train.reg_grad = RegGradMode::exact_hvp;
  p.train.optimizer = OptimizerKind::adam;
  p.train.learning_rate = 0.01;
  p.train.batch_size = 8;
  p.train.epochs = 30;
  p.train.trace_steps = false;
  p.lambda_grid = {1e-3, 1e-2, 1e-1, 1.0, 10.0};
  p.seeds = {0, 1, 2, 3, 4};
  return p;
}

struct EfficacyRow {
  std::uint64_t seed = 0;
  std::size_t split = 0;
  double lambda = 0.0;
  std::string lambda_method;
  double full = 0.0;
  double uniform = 0.0;
  double erm = 0.0;
};

struct EfficacySummary {
  std::vector<EfficacyRow> rows;
  double mean_full = 0.0;
  double mean_uniform = 0.0;
  double mean_erm = 0.0;
  double wall_seconds = 0.0;

  [[nodiscard]] bool ordered() const {
    return mean_full <= mean_uniform && mean_uniform <= mean_erm && mean_full < mean_erm;
  }
};

/// Every seed and LODO split: λ picked on source data for the dynamic run,
/// the uniform-c run reuses that λ, ERM is λ = 0. Held-out losses are paired.
inline EfficacySummary run_efficacy(const ShortcutProtocol& p) {
  const auto start = std::chrono::steady_clock::now();
  EfficacySummary out;
  for (std::uint64_t seed : p.seeds) {
    SyntheticSpec spec = p.data;
    spec.seed = seed;
    for (std::size_t h = 0; h < spec.num_domains; ++h) {
      const auto doms = shortcut_domains(spec, h, p.alpha);
      std::vector<DomainDataset> sources;
      for (std::size_t d = 0; d < doms.size(); ++d)
        if (d != h) sources.push_back(doms[d]);

      TrainConfig full = p.train;
      full.seed = seed;
      full.coefficients = CoefficientMode::dynamic;
      const auto sel = select_lambda(full, p.model, sources, p.lambda_grid);
      full.lambda = sel.lambda;
      TrainConfig uniform = full;
      uniform.coefficients = CoefficientMode::uniform;
      TrainConfig erm = full;
      erm.lambda = 0.0;

      EfficacyRow row;
      row.seed = seed;
      row.split = h;
      row.lambda = sel.lambda;
      row.lambda_method = sel.method;
      row.full = train(full, p.model, sources, doms[h]).metrics.final_heldout.loss;
      row.uniform = train(uniform, p.model, sources, doms[h]).metrics.final_heldout.loss;
      row.erm = train(erm, p.model, sources, doms[h]).metrics.final_heldout.loss;
      out.mean_full += row.full;
      out.mean_uniform += row.uniform;
      out.mean_erm += row.erm;
      out.rows.push_back(std::move(row));
    }
  }
  if (!out.rows.empty()) {
    const double n = static_cast<double>(out.rows.size());
    out.mean_full /= n;
    out.mean_uniform /= n;
    out.mean_erm /= n;
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace dspreg
