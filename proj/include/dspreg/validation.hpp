#pragma once

// Executable oracle suite: every check compares a closed-form quantity with an
// independent computation (finite differences, Monte-Carlo sampling of the
// straight-line evaluator, or a hand-derived identity).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dspreg/domain_data.hpp"
#include "dspreg/model.hpp"
#include "dspreg/monte_carlo.hpp"
#include "dspreg/oracles.hpp"
#include "dspreg/sensitivity.hpp"
#include "dspreg/trainer.hpp"

namespace dspreg {

enum class Fault { none, corrupt_gradient };

inline std::string to_string(Fault f) { return f == Fault::none ? "none" : "corrupt-gradient"; }
inline Fault parse_fault(const std::string& s) {
  if (s == "none" || s.empty()) return Fault::none;
  if (s == "corrupt-gradient") return Fault::corrupt_gradient;
  throw DataError("unknown fault '" + s + "'");
}

struct ValidateOptions {
  std::vector<std::string> checks;  // empty: all
  std::size_t gradient_trials = 20;
  std::size_t mc_models = 5;
  std::size_t mc_samples = 200000;
  double mc_scale = 1e-3;
  std::size_t decomposition_cases = 20;
  std::size_t sensitivity_top = 10;
  std::size_t sensitivity_draws_per_row = 1000;
  std::size_t fisher_models = 10;
  std::size_t lemma_samples = 10000;
  std::size_t lemma_seeds = 5;
  std::size_t contamination_trials = 100;
  std::uint64_t seed = 0;
  Fault fault = Fault::none;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string comparison;  // how measured relates to tolerance when passing
  std::string detail;
  double seconds = 0.0;
};

struct ValidationReport {
  std::vector<CheckResult> checks;

  [[nodiscard]] bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

inline const std::vector<std::string>& validation_check_names() {
  static const std::vector<std::string> names{"gradients",   "covariance", "decomposition", "sensitivity",
                                              "fisher",      "lemma",      "contamination"};
  return names;
}

namespace detail {

inline std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{seed, salt};
  std::vector<std::uint64_t> out(1);
  seq.generate(out.begin(), out.end());
  return out[0];
}

inline CheckResult check_gradients(const ValidateOptions& o) {
  CheckResult r{"gradients", false, 0.0, 1e-5, "<", {}};
  std::mt19937_64 rng(mix(o.seed, 1));
  double worst = 0.0;
  for (std::size_t t = 0; t < o.gradient_trials; ++t) {
    const Head head = t % 2 ? Head::softmax_ce : Head::mse;
    const Activation act = t % 3 == 2 ? Activation::identity : Activation::tanh;
    const auto spec = oracle::random_mlp_spec(rng, 3, 32, head, act);
    const auto params = init_params(spec);
    const Batch batch = oracle::random_batch(rng, spec, 5);
    Tensor g = loss_and_gradient(spec, params.values(), batch).gradient;
    if (o.fault == Fault::corrupt_gradient) g[0] += 1e-3 * (1.0 + std::abs(g[0]));
    const auto fd = oracle::fd_gradient(
        [&](std::span<const double> th) { return oracle::reference_loss(spec, th, batch); }, params.values());
    worst = std::max(worst, linalg::max_rel_diff(g, Tensor::vector(fd)));
    const Tensor x = batch.features.row(0);
    worst = std::max(worst, linalg::max_rel_diff(jacobian_params(spec, params, x),
                                                 oracle::fd_jacobian_params(spec, params.values(), x.data())));
    worst = std::max(worst, linalg::max_rel_diff(jacobian_input(spec, params, x),
                                                 oracle::fd_jacobian_input(spec, params.values(), x.data())));
  }
  r.measured = worst;
  r.passed = worst < r.tolerance;
  r.detail = std::to_string(o.gradient_trials) + " random MLPs, max relative error over grad, J_theta, J_x";
  return r;
}

inline CheckResult check_covariance(const ValidateOptions& o) {
  CheckResult r{"covariance", false, 0.0, 0.02, "<", {}};
  std::mt19937_64 rng(mix(o.seed, 2));
  std::uniform_real_distribution<double> u(0.1, 2.0);
  double worst = 0.0, worst_lin = 0.0;
  for (std::size_t m = 0; m < o.mc_models; ++m) {
    const auto spec = oracle::random_mlp_spec(rng, 2, 8, Head::mse);
    const auto p = init_params(spec);
    const Tensor x = oracle::random_matrix(rng, 1, spec.input_dim());
    Tensor cx({spec.input_dim()}), ct({p.size()});
    for (auto& v : cx.data()) v = u(rng);
    for (auto& v : ct.data()) v = u(rng);
    const auto j = jacobians(spec, p.values(), x);
    const double analytic = linalg::trace(propagate_covariance(j.wrt_input, j.wrt_params, cx, ct));
    const auto mc = oracle::mc_output_covariance(spec, p.values(), x.data(), cx, ct, o.mc_samples, o.mc_scale,
                                                 mix(o.seed, 100 + m));
    worst = std::max(worst, std::abs(analytic - linalg::trace(mc.covariance)) / analytic);

    // First-order model of a single perturbation at the same scale.
    std::vector<double> dx(cx.size()), dt(ct.size()), xs(cx.size()), ts(ct.size());
    std::normal_distribution<double> n(0.0, o.mc_scale);
    for (std::size_t i = 0; i < dx.size(); ++i) xs[i] = x[i] + (dx[i] = n(rng));
    for (std::size_t k = 0; k < dt.size(); ++k) ts[k] = p.values()[k] + (dt[k] = n(rng));
    const Tensor lin = linearized_delta_output(spec, p, x, dx, dt);
    const auto y0 = oracle::reference_forward(spec, p.values(), x.data());
    const auto y1 = oracle::reference_forward(spec, ts, xs);
    double err = 0.0, norm = 0.0;
    for (std::size_t a = 0; a < y0.size(); ++a) {
      err += (lin[a] - (y1[a] - y0[a])) * (lin[a] - (y1[a] - y0[a]));
      norm += (y1[a] - y0[a]) * (y1[a] - y0[a]);
    }
    worst_lin = std::max(worst_lin, std::sqrt(err / norm));
  }
  r.measured = worst;
  r.passed = worst < r.tolerance && worst_lin < 0.05;
  r.detail = std::to_string(o.mc_models) + " tanh MLPs, " + std::to_string(o.mc_samples) +
             " samples, trace relative error; linearization relative error " + std::to_string(worst_lin);
  return r;
}

inline CheckResult check_decomposition(const ValidateOptions& o) {
  CheckResult r{"decomposition", false, 0.0, 1e-10, "<", {}};
  std::mt19937_64 rng(mix(o.seed, 3));
  std::uniform_real_distribution<double> u(0.0, 3.0);
  double worst = 0.0;
  for (std::size_t t = 0; t < o.decomposition_cases; ++t) {
    const auto spec = oracle::random_mlp_spec(rng, 3, 12, t % 2 ? Head::mse : Head::softmax_ce);
    auto p = init_params(spec);
    std::vector<double> var(p.size());
    for (double& v : var) v = u(rng);
    p.set_variances(var);
    const Tensor x = oracle::random_matrix(rng, 1, spec.input_dim());
    const Tensor jt = jacobian_params(spec, p, x);
    Tensor diag({p.size(), p.size()});
    for (std::size_t k = 0; k < p.size(); ++k) diag(k, k) = var[k];
    const Tensor dense = linalg::matmul(linalg::matmul(jt, diag), linalg::transpose(jt));
    const Tensor rank1 = param_covariance_decomposition(jt, var);
    const double scale = std::max(1.0, linalg::max_abs(dense.data()));
    worst = std::max(worst, linalg::max_abs_diff(dense, rank1) / scale);
    const Tensor local = local_contribution(spec, p, x, var);
    double sum = 0.0;
    for (double v : local.data()) sum += v;
    const double tr = linalg::trace(rank1);
    worst = std::max(worst, std::abs(sum - tr) / std::max(1.0, tr));
    worst = std::max(worst, std::abs(total_output_variance(spec, p, x, var) - tr) / std::max(1.0, tr));
  }
  r.measured = worst;
  r.passed = worst < r.tolerance;
  r.detail = std::to_string(o.decomposition_cases) + " cases, rank-1 sum vs dense and sum of contributions vs trace";
  return r;
}

inline CheckResult check_sensitivity(const ValidateOptions& o) {
  CheckResult r{"sensitivity", false, 0.0, 0.05, "<", {}};
  // Toy classifier trained with plain ERM on a small three-class task.
  SyntheticSpec ss;
  ss.samples_per_domain = 200;
  ss.num_classes = 3;
  ss.label_noise = 0.1;
  ss.seed = o.seed;
  const auto doms = generate(ss);
  ModelSpec spec;
  spec.layer_sizes = {ss.feature_dim(), 6, 3};
  spec.head = Head::softmax_ce;
  spec.init_seed = mix(o.seed, 4);
  TrainConfig tc;
  tc.lambda = 0.0;
  tc.epochs = 15;
  tc.learning_rate = 0.1;
  tc.seed = o.seed;
  tc.trace_steps = false;
  const std::vector<DomainDataset> sources(doms.begin(), doms.end() - 1);
  const auto trained = train(tc, spec, sources, doms.back());
  ModelSpec fitted = spec;
  std::vector<double> theta(trained.params.values().begin(), trained.params.values().end());
  ParameterVector p = init_params(fitted);
  p.set_values(theta);

  std::vector<std::size_t> rows(40);
  std::iota(rows.begin(), rows.end(), 0);
  const Batch b = doms.back().data.subset(rows);
  const Tensor s = sensitivity_index(fitted, p, b, p.variances());
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return s[a] > s[c]; });
  double worst = 0.0;
  const std::size_t top = std::min(o.sensitivity_top, p.size());
  for (std::size_t i = 0; i < top; ++i) {
    const std::size_t k = order[i];
    const double mc = oracle::mc_single_parameter_sensitivity(fitted, p.values(), b, k, p.variances()[k],
                                                              b.size() * o.sensitivity_draws_per_row, 1e-3,
                                                              mix(o.seed, 200 + k));
    worst = std::max(worst, std::abs(mc - s[k]) / s[k]);
  }
  r.measured = worst;
  r.passed = worst < r.tolerance;
  r.detail = "top " + std::to_string(top) + " s_k of a trained classifier (held-out accuracy " +
             std::to_string(trained.metrics.final_heldout.accuracy) + ") vs per-coordinate Monte-Carlo";
  return r;
}

inline CheckResult check_fisher(const ValidateOptions& o) {
  CheckResult r{"fisher", false, 0.0, 0.9, ">=", {}};
  // Degenerate case: one repeated sample, two-class linear softmax. Every
  // score entry is ±T x_j, so I_kk = T^2 s_k exactly.
  ModelSpec lin;
  lin.layer_sizes = {3, 2};
  lin.head = Head::softmax_ce;
  lin.bias = false;
  ParameterVector p = init_params(lin);
  p.set_values({0.4, -0.2, 0.9, -0.3, 0.5, 0.1});
  Batch one;
  one.features = Tensor::matrix(1, 3, {0.7, -1.3, 2.1});
  one.classes = {1};
  const Tensor s = sensitivity_index(lin, p, one, p.variances());
  const Tensor fisher = empirical_fisher_diagonal(lin, p, one);
  const auto logits = oracle::reference_forward(lin, p.values(), one.features.data());
  const double t = 1.0 - 1.0 / (1.0 + std::exp(logits[0] - logits[1]));
  double exact_err = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) exact_err = std::max(exact_err, std::abs(fisher[k] - t * t * s[k]));

  std::mt19937_64 rng(mix(o.seed, 5));
  double total = 0.0, lowest = 1.0;
  for (std::size_t m = 0; m < o.fisher_models; ++m) {
    auto spec = oracle::random_mlp_spec(rng, 3, 16, Head::softmax_ce);
    spec.layer_sizes.back() = 2 + m % 4;
    const auto q = init_params(spec);
    const Batch b = oracle::heterogeneous_batch(rng, spec, 1000);
    const double rho = oracle::spearman(sensitivity_index(spec, q, b, q.variances()).data(),
                                        empirical_fisher_diagonal(spec, q, b).data());
    total += rho;
    lowest = std::min(lowest, rho);
  }
  const double mean = o.fisher_models ? total / static_cast<double>(o.fisher_models) : 0.0;
  r.measured = mean;
  r.passed = exact_err < 1e-10 && mean >= r.tolerance && lowest > 0.5;
  r.detail = "degenerate-case error " + std::to_string(exact_err) + " (tol 1e-10); mean Spearman over " +
             std::to_string(o.fisher_models) + " classifiers, min " + std::to_string(lowest);
  return r;
}

inline CheckResult check_lemma(const ValidateOptions& o) {
  CheckResult r{"lemma", false, 0.0, 0.05, "<", {}};
  double inv_worst = 0.0, spu_worst = 1e300;
  double loss_grad_inv = 0.0;
  for (std::size_t s = 0; s < o.lemma_seeds; ++s) {
    SyntheticSpec ss;
    ss.samples_per_domain = o.lemma_samples;
    ss.invariant_dim = 3;
    ss.spurious_dim = 3;
    ss.spurious_scales = {1.0, 2.0, 4.0};
    ss.num_classes = 2;
    ss.seed = o.seed + s;
    std::vector<Batch> doms;
    for (auto& d : generate(ss)) doms.push_back(std::move(d.data));
    ModelSpec spec;
    spec.layer_sizes = {6, 2};
    spec.head = Head::softmax_ce;
    spec.bias = false;
    spec.init_seed = mix(o.seed, 300 + s);
    const auto p = init_params(spec);
    const auto rep = cross_domain_stats(per_domain_sensitivity(spec, p, doms, p.variances(), EstimatorMode::jacobian));
    std::vector<double> inv, spu;
    for (std::size_t k = 0; k < p.size(); ++k) (k % 6 < 3 ? inv : spu).push_back(rep.cv[k]);
    inv_worst = std::max(inv_worst, oracle::median(inv));
    spu_worst = std::min(spu_worst, oracle::median(spu));
    if (s == 0) {
      std::vector<Batch> small;
      for (const auto& d : doms) {
        std::vector<std::size_t> idx(std::min<std::size_t>(200, d.size()));
        std::iota(idx.begin(), idx.end(), 0);
        small.push_back(d.subset(idx));
      }
      const auto lg = cross_domain_stats(per_domain_sensitivity(spec, p, small, p.variances(), EstimatorMode::loss_grad));
      loss_grad_inv = lg.cv[0];
    }
  }
  r.measured = inv_worst;
  r.passed = inv_worst < r.tolerance && spu_worst > 0.5 && inv_worst < spu_worst;
  r.detail = "worst invariant-branch median c over " + std::to_string(o.lemma_seeds) +
             " seeds; lowest spurious-branch median " + std::to_string(spu_worst) + " (must exceed 0.5)" +
             "; loss-grad c of first weight " + std::to_string(loss_grad_inv);
  return r;
}

inline CheckResult check_contamination(const ValidateOptions& o) {
  CheckResult r{"contamination", false, 0.0, 0.0, "==", {}};
  std::mt19937_64 rng(mix(o.seed, 7));
  std::size_t violations = 0;
  for (std::size_t t = 0; t < o.contamination_trials; ++t) {
    const auto spec = oracle::random_mlp_spec(rng, 2, 4, t % 2 ? Head::mse : Head::softmax_ce);
    const auto p = init_params(spec);
    const Batch b = oracle::random_batch(rng, spec, 6);
    const Tensor a = oracle::random_matrix(rng, p.size(), p.size());
    if (!contamination_bound_check(spec, p, b, linalg::matmul(a, linalg::transpose(a))).holds()) ++violations;
  }
  r.measured = static_cast<double>(violations);
  r.passed = violations == 0;
  r.detail = std::to_string(o.contamination_trials) + " random PSD parameter covariances, violations counted";
  return r;
}

}  // namespace detail

inline CheckResult run_check(const std::string& name, const ValidateOptions& o) {
  struct Entry {
    const char* name;
    CheckResult (*fn)(const ValidateOptions&);
  };
  static constexpr Entry table[] = {
      {"gradients", detail::check_gradients},         {"covariance", detail::check_covariance},
      {"decomposition", detail::check_decomposition}, {"sensitivity", detail::check_sensitivity},
      {"fisher", detail::check_fisher},               {"lemma", detail::check_lemma},
      {"contamination", detail::check_contamination},
  };
  for (const auto& [n, fn] : table) {
    if (n != name) continue;
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r = fn(o);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }
  throw DataError("unknown validation check '" + name + "'");
}

inline ValidationReport run_validation(const ValidateOptions& o) {
  ValidationReport rep;
  const auto& names = o.checks.empty() ? validation_check_names() : o.checks;
  for (const auto& n : names) rep.checks.push_back(run_check(n, o));
  return rep;
}

inline nlohmann::json to_json(const ValidationReport& rep) {
  nlohmann::json j;
  j["passed"] = rep.passed();
  j["checks"] = nlohmann::json::array();
  for (const auto& c : rep.checks) {
    j["checks"].push_back({{"name", c.name},
                           {"passed", c.passed},
                           {"measured", c.measured},
                           {"tolerance", c.tolerance},
                           {"comparison", c.comparison},
                           {"seconds", c.seconds},
                           {"detail", c.detail}});
  }
  return j;
}

inline void print_report(const ValidationReport& rep, std::ostream& os) {
  for (const auto& c : rep.checks) {
    char line[256];
    std::snprintf(line, sizeof line, "%-4s %-14s measured %-12.4g %s %-8.3g %7.2fs  ", c.passed ? "PASS" : "FAIL",
                  c.name.c_str(), c.measured, c.comparison.c_str(), c.tolerance, c.seconds);
    os << line << c.detail << '\n';
  }
}

}  // namespace dspreg
