#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dspreg/batch.hpp"
#include "dspreg/domain_data.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/hvp.hpp"
#include "dspreg/model.hpp"
#include "dspreg/parameters.hpp"
#include "dspreg/sensitivity.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

enum class CoefficientMode { dynamic, static_once, uniform, off };
enum class RegGradMode { exact_hvp, fd_hvp, stop_grad_weighted };
enum class UpdateUnit { epoch, iteration };
enum class OptimizerKind { gd, adam };
enum class VarianceMode { unit, empirical };

inline std::string to_string(CoefficientMode m) {
  switch (m) {
    case CoefficientMode::dynamic: return "dynamic";
    case CoefficientMode::static_once: return "static";
    case CoefficientMode::uniform: return "uniform";
    case CoefficientMode::off: return "off";
  }
  return "?";
}
inline std::string to_string(RegGradMode m) {
  switch (m) {
    case RegGradMode::exact_hvp: return "exact-hvp";
    case RegGradMode::fd_hvp: return "fd-hvp";
    case RegGradMode::stop_grad_weighted: return "stop-grad-weighted";
  }
  return "?";
}
inline std::string to_string(UpdateUnit u) { return u == UpdateUnit::epoch ? "epoch" : "iteration"; }
inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::gd ? "gd" : "adam"; }
inline std::string to_string(VarianceMode v) { return v == VarianceMode::unit ? "unit" : "empirical"; }

inline CoefficientMode parse_coefficient_mode(const std::string& s) {
  if (s == "dynamic") return CoefficientMode::dynamic;
  if (s == "static") return CoefficientMode::static_once;
  if (s == "uniform") return CoefficientMode::uniform;
  if (s == "off") return CoefficientMode::off;
  throw DataError("unknown coefficient mode '" + s + "'");
}
inline RegGradMode parse_reg_grad_mode(const std::string& s) {
  if (s == "exact-hvp") return RegGradMode::exact_hvp;
  if (s == "fd-hvp") return RegGradMode::fd_hvp;
  if (s == "stop-grad-weighted") return RegGradMode::stop_grad_weighted;
  throw DataError("unknown regularizer gradient mode '" + s + "'");
}
inline UpdateUnit parse_update_unit(const std::string& s) {
  if (s == "epoch") return UpdateUnit::epoch;
  if (s == "iteration") return UpdateUnit::iteration;
  throw DataError("unknown update unit '" + s + "'");
}
inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "gd") return OptimizerKind::gd;
  if (s == "adam") return OptimizerKind::adam;
  throw DataError("unknown optimizer '" + s + "'");
}
inline VarianceMode parse_variance_mode(const std::string& s) {
  if (s == "unit") return VarianceMode::unit;
  if (s == "empirical") return VarianceMode::empirical;
  throw DataError("unknown variance mode '" + s + "'");
}

inline constexpr double kDefaultLambda = 0.001;
inline constexpr std::size_t kDefaultTUpdate = 2;

struct TrainConfig {
  double lambda = kDefaultLambda;
  std::size_t t_update = kDefaultTUpdate;
  UpdateUnit unit = UpdateUnit::epoch;
  double learning_rate = 0.05;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  CoefficientMode coefficients = CoefficientMode::dynamic;
  EstimatorMode estimator = EstimatorMode::loss_grad;
  RegGradMode reg_grad = RegGradMode::stop_grad_weighted;
  OptimizerKind optimizer = OptimizerKind::gd;
  VarianceMode variances = VarianceMode::unit;
  std::size_t variance_window = 50;
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;
  std::size_t sensitivity_batch = 0;  // 0: use batch_size
  double cv_epsilon = kDefaultCvEpsilon;
  bool trace_steps = true;

  /// λ = 0 or coefficient mode off: no regularizer work at all.
  [[nodiscard]] bool regularized() const { return lambda > 0.0 && coefficients != CoefficientMode::off; }

  /// "erm" when the regularizer is inert, otherwise the coefficient mode.
  [[nodiscard]] std::string mode_label() const { return regularized() ? to_string(coefficients) : "erm"; }

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DataError("lambda must be a nonnegative number");
    if (t_update < 1) throw DataError("t_update must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw DataError("learning rate must be positive");
    if (batch_size < 1) throw DataError("batch size must be at least 1");
    if (variance_window < 2) throw DataError("variance window must be at least 2");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw DataError("validation fraction must lie in [0, 1)");
    }
    if (!(cv_epsilon >= 0.0)) throw DataError("cv epsilon must be nonnegative");
  }
};

/// Σ_k c_k g_k².
inline double ds_regularizer(std::span<const double> c, std::span<const double> g) {
  if (c.size() != g.size()) throw DimensionError("ds_regularizer: coefficient and gradient lengths differ");
  double r = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) r += c[k] * g[k] * g[k];
  return r;
}

inline double total_loss(double sup_loss, double reg_value, double lambda) {
  if (!(lambda >= 0.0)) throw DataError("total_loss: lambda must be nonnegative");
  return sup_loss + lambda * reg_value;
}

/// Gradient of Σ c_k g_k(θ)² with c held constant: 2 H (c ⊙ g) for the HVP
/// modes, 2 (c ⊙ g) for the first-order surrogate. `build` records the loss
/// whose Hessian is used (see hvp.hpp for the builder contract).
template <class Builder>
Tensor regularizer_gradient(std::span<const double> c, std::span<const double> g, Builder&& build,
                            std::span<const double> theta, RegGradMode mode) {
  if (c.size() != g.size() || g.size() != theta.size()) {
    throw DimensionError("regularizer_gradient: coefficient, gradient and parameter lengths differ");
  }
  std::vector<double> v(c.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = c[k] * g[k];
  Tensor out({v.size()});
  if (mode == RegGradMode::stop_grad_weighted) {
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = 2.0 * v[k];
    return out;
  }
  if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) return out;
  const Tensor hv = hvp(build, theta, v, mode == RegGradMode::exact_hvp ? HvpMode::exact : HvpMode::finite_difference);
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = 2.0 * hv[k];
  return out;
}

struct DomainMetric {
  std::string domain;
  EvalMetrics metrics;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;      // L_sup + λ R_DS on the full training set, end of epoch
  double train_sup_loss = 0.0;  // L_sup on the full training set, end of epoch
  double reg_value = 0.0;       // R_DS of the full-training-set gradient, end of epoch
  double mean_step_loss = 0.0;  // mean minibatch L_sup + λ R_DS over the epoch's steps
  std::vector<DomainMetric> validation;
  EvalMetrics heldout;
  double wall_seconds = 0.0;
};

struct CoefficientSnapshot {
  std::size_t epoch = 0;
  std::size_t step = 0;
  SensitivityReport report;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double sup_loss = 0.0;
  double reg_value = 0.0;
  double grad_norm_sq = 0.0;
};

struct RunMetrics {
  std::string mode;
  double lambda = 0.0;
  std::size_t t_update = 0;
  std::uint64_t seed = 0;
  std::string heldout_domain;
  std::vector<EpochRecord> epochs;
  std::vector<CoefficientSnapshot> snapshots;
  std::vector<StepRecord> steps;
  EvalMetrics final_heldout;
  EvalMetrics final_validation;  // pooled over the training domains' validation rows
  double wall_seconds = 0.0;

  [[nodiscard]] std::vector<std::size_t> refresh_epochs() const {
    std::vector<std::size_t> e;
    for (const auto& s : snapshots)
      if (e.empty() || e.back() != s.epoch) e.push_back(s.epoch);
    return e;
  }
};

struct TrainResult {
  ParameterVector params;
  RunMetrics metrics;
};

namespace detail {

struct DomainSplit {
  std::string id;
  Batch train;
  Batch validation;
};

inline std::vector<DomainSplit> split_domains(std::span<const DomainDataset> domains, double fraction,
                                              std::uint64_t seed) {
  std::vector<DomainSplit> out;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const std::size_t n = domains[d].size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::seed_seq seq{seed, static_cast<std::uint64_t>(d), std::uint64_t{0x5b1}};
    std::mt19937_64 rng(seq);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto nval = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    if (n - nval < 1) throw ProtocolError("domain " + domains[d].id + " has no training rows after the split");
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
    std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(tr.begin(), tr.end());
    out.push_back({domains[d].id, domains[d].data.subset(tr), domains[d].data.subset(val)});
  }
  return out;
}

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t n) : kind_(kind), lr_(lr), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& theta, std::span<const double> grad) {
    if (kind_ == OptimizerKind::gd) {
      for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= lr_ * grad[k];
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m_[k] = b1 * m_[k] + (1.0 - b1) * grad[k];
      v_[k] = b2 * v_[k] + (1.0 - b2) * grad[k] * grad[k];
      theta[k] -= lr_ * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + eps);
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Per-coordinate variance of θ over the most recent `window` iterates.
class RunningVariance {
 public:
  explicit RunningVariance(std::size_t window) : window_(window) {}

  void push(std::span<const double> theta) {
    history_.emplace_back(theta.begin(), theta.end());
    if (history_.size() > window_) history_.pop_front();
  }

  [[nodiscard]] std::vector<double> variances(std::size_t n) const {
    std::vector<double> v(n, 1.0);
    if (history_.size() < 2) return v;
    const double m = static_cast<double>(history_.size());
    for (std::size_t k = 0; k < n; ++k) {
      double mean = 0.0;
      for (const auto& h : history_) mean += h[k];
      mean /= m;
      double s = 0.0;
      for (const auto& h : history_) s += (h[k] - mean) * (h[k] - mean);
      v[k] = s / m;
    }
    return v;
  }

 private:
  std::size_t window_;
  std::deque<std::vector<double>> history_;
};

inline std::string describe(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace detail

/// Algorithm: c ← 1; refresh c from per-domain sensitivities whenever the
/// (0-based) epoch or iteration counter is a multiple of T_update; minibatches
/// come from a shuffle of the union of the training domains; each step
/// applies ∇L_sup + λ ∇R_DS.
inline TrainResult train(const TrainConfig& config, const ModelSpec& model,
                         std::span<const DomainDataset> train_domains, const DomainDataset& held_out) {
  config.validate();
  model.validate();
  if (train_domains.size() < 2) throw ProtocolError("training needs at least two source domains");
  for (const auto& d : train_domains) {
    if (d.size() == 0) throw ProtocolError("training domain " + d.id + " is empty");
    if (d.data.input_dim() != model.input_dim()) {
      throw DimensionError("domain " + d.id + " has " + std::to_string(d.data.input_dim()) +
                           " features, model expects " + std::to_string(model.input_dim()));
    }
  }
  const auto start = std::chrono::steady_clock::now();

  ModelSpec spec = model;
  {
    std::seed_seq seq{model.init_seed, config.seed, std::uint64_t{0x1217}};
    std::vector<std::uint64_t> s(1);
    seq.generate(s.begin(), s.end());
    spec.init_seed = s[0];
  }
  ParameterVector params = init_params(spec);
  std::vector<double> theta(params.values().begin(), params.values().end());
  const std::size_t n_params = theta.size();

  const auto splits = detail::split_domains(train_domains, config.validation_fraction, config.seed);
  std::vector<const Batch*> parts, val_parts;
  for (const auto& s : splits) {
    parts.push_back(&s.train);
    if (s.validation.size() > 0) val_parts.push_back(&s.validation);
  }
  const Batch pool = Batch::concat(parts);
  const Batch val_pool = Batch::concat(val_parts);

  std::seed_seq shuffle_seq{config.seed, std::uint64_t{0xba7c4}};
  std::seed_seq refresh_seq{config.seed, std::uint64_t{0x5e75}};
  std::mt19937_64 rng(shuffle_seq);
  std::mt19937_64 refresh_rng(refresh_seq);
  detail::Optimizer opt(config.optimizer, config.learning_rate, n_params);
  detail::RunningVariance running(config.variance_window);

  RunMetrics metrics;
  metrics.mode = config.mode_label();
  metrics.lambda = config.lambda;
  metrics.t_update = config.t_update;
  metrics.seed = config.seed;
  metrics.heldout_domain = held_out.id;

  const bool regularized = config.regularized();
  std::vector<double> c(n_params, 1.0);
  const std::size_t sens_batch = config.sensitivity_batch ? config.sensitivity_batch : config.batch_size;

  auto refresh = [&](std::size_t epoch, std::size_t step) {
    std::vector<Batch> batches;
    for (const auto& s : splits) {
      std::vector<std::size_t> idx(s.train.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), refresh_rng);
      idx.resize(std::min(sens_batch, idx.size()));
      std::sort(idx.begin(), idx.end());
      batches.push_back(s.train.subset(idx));
    }
    params.set_values(theta);
    const std::vector<double> var = config.variances == VarianceMode::unit ? std::vector<double>(n_params, 1.0)
                                                                           : running.variances(n_params);
    auto report = cross_domain_stats(per_domain_sensitivity(spec, params, batches, var, config.estimator),
                                     config.cv_epsilon, to_string(config.estimator), params.registry());
    c = report.cv;
    metrics.snapshots.push_back({epoch, step, std::move(report)});
  };

  auto needs_refresh = [&](std::size_t counter) {
    if (!regularized) return false;
    switch (config.coefficients) {
      case CoefficientMode::dynamic: return counter % config.t_update == 0;
      case CoefficientMode::static_once: return metrics.snapshots.empty();
      default: return false;
    }
  };

  auto check_finite = [&](double v, const std::string& what, std::size_t epoch) {
    if (!std::isfinite(v)) {
      throw DivergenceError("training diverged: " + what + " is not finite at epoch " + std::to_string(epoch) +
                            " (lambda=" + detail::describe(config.lambda) +
                            ", learning_rate=" + detail::describe(config.learning_rate) + ")");
    }
  };

  std::size_t step = 0;
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    if (config.unit == UpdateUnit::epoch && needs_refresh(epoch)) refresh(epoch, step);
    std::shuffle(order.begin(), order.end(), rng);
    double step_loss_sum = 0.0;
    std::size_t steps_this_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      if (config.unit == UpdateUnit::iteration && needs_refresh(step)) refresh(epoch, step);
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const Batch mb = pool.subset(std::span<const std::size_t>(order).subspan(begin, end - begin));
      const auto lg = loss_and_gradient(spec, theta, mb);
      check_finite(lg.loss, "minibatch loss", epoch);
      std::vector<double> grad = lg.gradient.values();
      double reg = 0.0;
      if (regularized) {
        reg = ds_regularizer(c, grad);
        auto build = [&](auto& tape, auto th) { return build_loss(tape, spec, th, mb); };
        const Tensor rg = regularizer_gradient(c, grad, build, theta, config.reg_grad);
        for (std::size_t k = 0; k < n_params; ++k) grad[k] += config.lambda * rg[k];
      }
      const double step_total = regularized ? total_loss(lg.loss, reg, config.lambda) : lg.loss;
      check_finite(step_total, "training loss", epoch);
      if (config.trace_steps) {
        double gn = 0.0;
        for (double g : lg.gradient.data()) gn += g * g;
        metrics.steps.push_back({step, epoch, lg.loss, reg, gn});
      }
      step_loss_sum += step_total;
      ++steps_this_epoch;
      opt.step(theta, grad);
      if (config.variances == VarianceMode::empirical) running.push(theta);
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const auto full = loss_and_gradient(spec, theta, pool);
    rec.train_sup_loss = full.loss;
    rec.reg_value = regularized ? ds_regularizer(c, full.gradient.data()) : 0.0;
    rec.train_loss = regularized ? total_loss(full.loss, rec.reg_value, config.lambda) : full.loss;
    check_finite(rec.train_loss, "training loss", epoch);
    rec.mean_step_loss = steps_this_epoch ? step_loss_sum / static_cast<double>(steps_this_epoch) : 0.0;
    for (const auto& s : splits) rec.validation.push_back({s.id, evaluate(spec, theta, s.validation)});
    rec.heldout = evaluate(spec, theta, held_out.data);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    metrics.epochs.push_back(std::move(rec));
  }

  params.set_values(theta);
  metrics.final_heldout = evaluate(spec, theta, held_out.data);
  metrics.final_validation = evaluate(spec, theta, val_pool);
  metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(params), std::move(metrics)};
}

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{1e-4, 1e-3, 1e-2, 1e-1};
  return grid;
}

struct LambdaSelection {
  double lambda = 0.0;
  std::vector<double> grid;
  std::vector<double> scores;  // validation loss per grid point
  std::string method;          // "source-lodo" or "validation-rows"
};

/// Picks λ using the training domains only. With three or more source
/// domains each one is held out in turn (training on the rest) and the mean
/// held-out loss is scored; with two, the pooled validation rows are used.
/// Ties keep the smaller λ.
inline LambdaSelection select_lambda(const TrainConfig& config, const ModelSpec& model,
                                     std::span<const DomainDataset> train_domains,
                                     std::span<const double> grid = default_lambda_grid()) {
  if (grid.empty()) throw DataError("select_lambda: empty grid");
  LambdaSelection sel;
  sel.grid.assign(grid.begin(), grid.end());
  sel.method = train_domains.size() >= 3 ? "source-lodo" : "validation-rows";
  for (double l : grid) {
    TrainConfig c = config;
    c.lambda = l;
    c.trace_steps = false;
    double score = 0.0;
    if (train_domains.size() >= 3) {
      for (const auto& split : lodo_splits(train_domains.size())) {
        std::vector<DomainDataset> inner;
        for (std::size_t d : split.train) inner.push_back(train_domains[d]);
        score += train(c, model, inner, train_domains[split.held_out]).metrics.final_heldout.loss;
      }
      score /= static_cast<double>(train_domains.size());
    } else {
      if (c.validation_fraction <= 0.0) throw ProtocolError("select_lambda needs validation rows or three source domains");
      score = train(c, model, train_domains, train_domains.front()).metrics.final_validation.loss;
    }
    sel.scores.push_back(score);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < sel.scores.size(); ++i)
    if (sel.scores[i] < sel.scores[best]) best = i;
  sel.lambda = sel.grid[best];
  return sel;
}

/// One row of the ablation table.
struct AblationRun {
  std::string run_id;
  TrainConfig config;
};

/// {full, λ = 0, uniform c, static c} plus λ ∈ {1e-4, 1e-3, 1e-2, 1e-1} and
/// T_update ∈ {1, 2, 3, 4}; sweep points equal to the base run are not
/// repeated.
inline std::vector<AblationRun> ablation_plan(const TrainConfig& base) {
  std::vector<AblationRun> plan;
  TrainConfig full = base;
  full.coefficients = CoefficientMode::dynamic;
  plan.push_back({"full", full});
  TrainConfig erm = full;
  erm.lambda = 0.0;
  plan.push_back({"erm", erm});
  TrainConfig uniform = full;
  uniform.coefficients = CoefficientMode::uniform;
  plan.push_back({"uniform", uniform});
  TrainConfig stat = full;
  stat.coefficients = CoefficientMode::static_once;
  plan.push_back({"static", stat});
  for (double l : {1e-4, 1e-3, 1e-2, 1e-1}) {
    if (l == full.lambda) continue;
    TrainConfig c = full;
    c.lambda = l;
    plan.push_back({"lambda=" + detail::describe(l), c});
  }
  for (std::size_t t : {1u, 2u, 3u, 4u}) {
    if (t == full.t_update) continue;
    TrainConfig c = full;
    c.t_update = t;
    plan.push_back({"t_update=" + std::to_string(t), c});
  }
  return plan;
}

struct AblationRow {
  std::string run_id;
  std::string mode;
  double lambda = 0.0;
  std::size_t t_update = 0;
  std::uint64_t seed = 0;
  std::size_t split = 0;
  double heldout_metric = 0.0;  // held-out loss
  RunMetrics metrics;
};

/// Runs the ablation plan on one LODO split.
inline std::vector<AblationRow> ablation_suite(const TrainConfig& base, const ModelSpec& model,
                                               std::span<const DomainDataset> domains, std::size_t split) {
  const auto splits = lodo_splits(domains.size());
  if (split >= splits.size()) {
    throw ProtocolError("split " + std::to_string(split) + " out of range [0, " + std::to_string(splits.size()) + ")");
  }
  std::vector<DomainDataset> tr;
  for (std::size_t d : splits[split].train) tr.push_back(domains[d]);
  const DomainDataset& held = domains[splits[split].held_out];
  std::vector<AblationRow> rows;
  for (const auto& run : ablation_plan(base)) {
    auto result = train(run.config, model, tr, held);
    AblationRow row;
    row.run_id = run.run_id;
    row.mode = run.config.mode_label();
    row.lambda = run.config.lambda;
    row.t_update = run.config.t_update;
    row.seed = run.config.seed;
    row.split = split;
    row.heldout_metric = result.metrics.final_heldout.loss;
    row.metrics = std::move(result.metrics);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dspreg
