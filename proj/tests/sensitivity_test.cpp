#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dspreg/domain_data.hpp"
#include "dspreg/monte_carlo.hpp"
#include "dspreg/oracles.hpp"
#include "dspreg/sensitivity.hpp"

namespace dspreg {
namespace {

ModelSpec linear_spec(std::size_t in, std::size_t out, bool bias = false) {
  ModelSpec spec;
  spec.layer_sizes = {in, out};
  spec.bias = bias;
  return spec;
}

ParameterVector with_values(const ModelSpec& spec, std::vector<double> values) {
  std::vector<double> var(values.size(), 1.0);
  return ParameterVector(std::move(values), std::move(var), spec.registry());
}

Batch rows_of(std::size_t d, std::vector<double> values) {
  Batch b;
  const std::size_t n = values.size() / d;
  b.features = Tensor::matrix(n, d, std::move(values));
  b.targets = Tensor({n, 1});
  return b;
}

TEST(LinearizedDelta, ZeroPerturbationIsZero) {
  std::mt19937_64 rng(1);
  const auto spec = oracle::random_mlp_spec(rng, 2, 6, Head::mse);
  const auto p = init_params(spec);
  const Tensor x = oracle::random_matrix(rng, 1, spec.input_dim());
  const std::vector<double> dx(spec.input_dim(), 0.0), dt(p.size(), 0.0);
  const Tensor d = linearized_delta_output(spec, p, x, dx, dt);
  for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(LinearizedDelta, LinearModelExactAtAnyMagnitude) {
  const auto spec = linear_spec(2, 2);
  const auto p = with_values(spec, {1, 2, 3, 4});
  const Tensor x = Tensor::vector({0.5, -1.0});
  const std::vector<double> dx{300.0, -7.5}, dt(4, 0.0);
  const Tensor lin = linearized_delta_output(spec, p, x, dx, dt);
  const auto y0 = predict(spec, p.values(), x);
  const auto y1 = predict(spec, p.values(), Tensor::vector({300.5, -8.5}));
  for (std::size_t r = 0; r < 2; ++r) EXPECT_EQ(lin[r], y1[r] - y0[r]);
}

TEST(LinearizedDelta, TanhMlpErrorVanishesWithScale) {
  std::mt19937_64 rng(2);
  const auto spec = oracle::random_mlp_spec(rng, 3, 8, Head::mse);
  const auto p = init_params(spec);
  const Tensor x = oracle::random_matrix(rng, 1, spec.input_dim());
  const Tensor ux = oracle::random_matrix(rng, 1, spec.input_dim());
  const Tensor ut = oracle::random_matrix(rng, 1, p.size());
  double prev = 1e300;
  for (double scale : {1e-1, 1e-2, 1e-3, 1e-4}) {
    std::vector<double> dx(ux.size()), dt(ut.size()), xs(x.size()), ts(p.size());
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] = scale * ux[i];
      xs[i] = x[i] + dx[i];
    }
    for (std::size_t k = 0; k < dt.size(); ++k) {
      dt[k] = scale * ut[k];
      ts[k] = p.values()[k] + dt[k];
    }
    const auto lin = linearized_delta_output(spec, p, x, dx, dt);
    const auto y0 = oracle::reference_forward(spec, p.values(), x.data());
    const auto y1 = oracle::reference_forward(spec, ts, xs);
    double err = 0.0, norm = 0.0;
    for (std::size_t r = 0; r < y0.size(); ++r) {
      const double truth = y1[r] - y0[r];
      err += (lin[r] - truth) * (lin[r] - truth);
      norm += truth * truth;
    }
    const double ratio = std::sqrt(err / norm);
    EXPECT_LT(ratio, prev);
    prev = ratio;
    if (scale == 1e-4) {
      EXPECT_LT(ratio, 1e-3);
    }
  }
}

TEST(LinearizedDelta, RejectsWrongLengths) {
  const auto spec = linear_spec(2, 1);
  const auto p = with_values(spec, {1, 2});
  EXPECT_THROW((void)linearized_delta_output(spec, p, Tensor::vector({1, 1}), std::vector<double>(3), std::vector<double>(2)),
               DimensionError);
}

TEST(PropagateCovariance, IdentityMap) {
  const Tensor c = propagate_covariance(Tensor::identity(3), Tensor({3, 2}), Tensor::identity(3), Tensor({2}));
  EXPECT_EQ(c, Tensor::identity(3));
}

TEST(PropagateCovariance, ScalarFormula) {
  const Tensor c = propagate_covariance(Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {3}), Tensor::vector({1}),
                                        Tensor::vector({4}));
  EXPECT_DOUBLE_EQ(c(0, 0), 40.0);
}

TEST(PropagateCovariance, NegativeDiagonalIsDataError) {
  EXPECT_THROW((void)propagate_covariance(Tensor::identity(2), Tensor({2, 1}), Tensor::vector({1, -1}), Tensor({1})),
               DataError);
  EXPECT_THROW((void)propagate_covariance(Tensor::identity(2), Tensor({2, 1}), Tensor::matrix(2, 2, {1, 0, 0, -1}),
                                          Tensor({1})),
               DataError);
}

TEST(PropagateCovariance, MatchesMonteCarloOnTanhMlp) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 2; ++trial) {
    const auto spec = oracle::random_mlp_spec(rng, 2, 6, Head::mse);
    const auto p = init_params(spec);
    const Tensor x = oracle::random_matrix(rng, 1, spec.input_dim());
    std::uniform_real_distribution<double> u(0.1, 2.0);
    Tensor cx({spec.input_dim()}), ct({p.size()});
    for (auto& v : cx.data()) v = u(rng);
    for (auto& v : ct.data()) v = u(rng);
    const auto j = jacobians(spec, p.values(), x);
    const Tensor analytic = propagate_covariance(j.wrt_input, j.wrt_params, cx, ct);
    for (std::size_t a = 0; a < analytic.rows(); ++a)
      for (std::size_t b = 0; b < analytic.cols(); ++b) EXPECT_EQ(analytic(a, b), analytic(b, a));
    const auto mc = oracle::mc_output_covariance(spec, p.values(), x.data(), cx, ct, 50000, 1e-3, 10 + trial);
    EXPECT_LT(std::abs(linalg::trace(analytic) - linalg::trace(mc.covariance)) / linalg::trace(analytic), 0.02);
    for (std::size_t a = 0; a < analytic.rows(); ++a)
      for (std::size_t b = 0; b < analytic.cols(); ++b)
        EXPECT_LT(std::abs(analytic(a, b) - mc.covariance(a, b)), 5.0 * mc.std_error(a, b) + 1e-12);
  }
}

TEST(Decomposition, SingleParameterAndZeroVariance) {
  const Tensor j = Tensor::matrix(2, 1, {1, 3});
  const Tensor one = param_covariance_decomposition(j, std::vector<double>{2.0});
  EXPECT_EQ(one, Tensor::matrix(2, 2, {2, 6, 6, 18}));
  const Tensor zero = param_covariance_decomposition(Tensor::matrix(2, 2, {1, 2, 3, 4}), std::vector<double>{0, 0});
  EXPECT_EQ(zero, Tensor({2, 2}));
}

TEST(Decomposition, MatchesDenseProductAndTrace) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto spec = oracle::random_mlp_spec(rng, 3, 12, trial % 2 ? Head::mse : Head::softmax_ce);
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
    EXPECT_LT(linalg::max_abs_diff(dense, rank1), 1e-10);
    const Tensor local = local_contribution(spec, p, x, var);
    double sum = 0.0;
    for (double v : local.data()) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, linalg::trace(rank1), 1e-10 * std::max(1.0, sum));
    EXPECT_NEAR(total_output_variance(spec, p, x, var), sum, 1e-10 * std::max(1.0, sum));
  }
}

TEST(LocalContribution, ScalarLinear) {
  const auto spec = linear_spec(1, 1);
  const auto p = with_values(spec, {0.7});
  EXPECT_DOUBLE_EQ(local_contribution(spec, p, Tensor::vector({3}), std::vector<double>{1.0})[0], 9.0);
  EXPECT_DOUBLE_EQ(local_contribution(spec, p, Tensor::vector({3}), std::vector<double>{0.0})[0], 0.0);
  EXPECT_DOUBLE_EQ(total_output_variance(spec, p, Tensor::vector({3}), std::vector<double>{1.0}), 9.0);
  EXPECT_DOUBLE_EQ(total_output_variance(spec, p, Tensor::vector({3}), std::vector<double>{0.0}), 0.0);
}

TEST(TotalOutputVariance, MatchesMonteCarlo) {
  std::mt19937_64 rng(5);
  const auto spec = oracle::random_mlp_spec(rng, 2, 8, Head::mse);
  const auto p = init_params(spec);
  const Tensor x = oracle::random_matrix(rng, 1, spec.input_dim());
  const double analytic = total_output_variance(spec, p, x, p.variances());
  const double mc = oracle::mc_param_total_variance(spec, p.values(), x.data(), p.variances(), 50000, 1e-3, 9);
  EXPECT_LT(std::abs(analytic - mc) / analytic, 0.02);
}

TEST(SensitivityIndex, AnalyticMeanAndDuplicates) {
  const auto spec = linear_spec(1, 1);
  const auto p = with_values(spec, {0.3});
  const Batch b = rows_of(1, {1, 2, 3});
  EXPECT_NEAR(sensitivity_index(spec, p, b, p.variances())[0], 14.0 / 3.0, 1e-15);
  const std::vector<std::size_t> twice{0, 0, 1, 1, 2, 2};
  const Batch dup = b.subset(twice);
  EXPECT_NEAR(sensitivity_index(spec, p, dup, p.variances())[0], 14.0 / 3.0, 1e-15);
  EXPECT_THROW((void)sensitivity_index(spec, p, b.subset(std::vector<std::size_t>{}), p.variances()), DataError);
}

TEST(SensitivityIndex, SingleCoordinatePerturbationOracle) {
  std::mt19937_64 rng(6);
  ModelSpec spec;
  spec.layer_sizes = {4, 6, 3};
  spec.head = Head::softmax_ce;
  spec.init_seed = 17;
  const auto p = init_params(spec);
  const Batch b = oracle::random_batch(rng, spec, 40);
  const Tensor s = sensitivity_index(spec, p, b, p.variances());
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return s[a] > s[c]; });
  for (std::size_t r = 0; r < 10; ++r) {
    const std::size_t k = order[r];
    const double mc = oracle::mc_single_parameter_sensitivity(spec, p.values(), b, k, 1.0, 40 * 1000, 1e-3, 100 + k);
    EXPECT_LT(std::abs(mc - s[k]) / s[k], 0.05) << "parameter " << k;
  }
}

TEST(Fisher, PerfectFitGivesZero) {
  ModelSpec spec = linear_spec(2, 2);
  spec.head = Head::softmax_ce;
  // Logit gap of 1000 saturates the softmax to probability 1 in double.
  const auto p = with_values(spec, {1000, 0, 0, 1000});
  Batch b;
  b.features = Tensor::matrix(2, 2, {1, 0, 0, 1});
  b.classes = {0, 1};
  const Tensor fisher = empirical_fisher_diagonal(spec, p, b);
  for (double v : fisher.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fisher, SingleSampleIsSquaredScore) {
  std::mt19937_64 rng(7);
  const auto spec = oracle::random_mlp_spec(rng, 2, 5, Head::softmax_ce);
  const auto p = init_params(spec);
  const Batch b = oracle::random_batch(rng, spec, 1);
  const Tensor fisher = empirical_fisher_diagonal(spec, p, b);
  const auto u = oracle::reference_log_prob_gradient(spec, p.values(), b.features.data(), b.classes[0]);
  for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(fisher[k], u[k] * u[k], 1e-14);
}

TEST(Fisher, MatchesExplicitLogSoftmaxGradients) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 6; ++trial) {
    const auto spec = oracle::random_mlp_spec(rng, 3, 10, Head::softmax_ce,
                                              trial % 2 ? Activation::relu : Activation::tanh);
    const auto p = init_params(spec);
    const Batch b = oracle::random_batch(rng, spec, 25);
    const Tensor fisher = empirical_fisher_diagonal(spec, p, b);
    std::vector<double> ref(p.size(), 0.0);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto u = oracle::reference_log_prob_gradient(spec, p.values(), b.features.row(i).data(), b.classes[i]);
      for (std::size_t k = 0; k < u.size(); ++k) ref[k] += u[k] * u[k] / static_cast<double>(b.size());
    }
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(fisher[k], ref[k], 1e-10);
  }
}

TEST(Fisher, RegressionNeedsNoiseScale) {
  auto spec = linear_spec(2, 1, true);
  const auto p = with_values(spec, {0.5, -0.5, 0.1});
  Batch b = rows_of(2, {1, 2, 3, 4});
  b.targets = Tensor::matrix(2, 1, {1.0, -1.0});
  EXPECT_THROW((void)empirical_fisher_diagonal(spec, p, b), CapabilityError);
  spec.noise_std = 0.5;
  const Tensor fisher = empirical_fisher_diagonal(spec, p, b);
  // f = 0.5 x0 - 0.5 x1 + 0.1; score_k = (y - f) / sigma^2 * df/dtheta_k.
  const double r0 = (1.0 - (0.5 - 1.0 + 0.1)) / 0.25, r1 = (-1.0 - (1.5 - 2.0 + 0.1)) / 0.25;
  EXPECT_NEAR(fisher[0], 0.5 * (r0 * r0 * 1 + r1 * r1 * 9), 1e-12);
  EXPECT_NEAR(fisher[1], 0.5 * (r0 * r0 * 4 + r1 * r1 * 16), 1e-12);
  EXPECT_NEAR(fisher[2], 0.5 * (r0 * r0 + r1 * r1), 1e-12);
}

TEST(Fisher, ExactProportionalityForSharedSampleScalarLogits) {
  // Two-class linear softmax: every weight feeds exactly one logit, so the
  // score of W_cj is (1[c=y] - p_c) x_j and |1[c=y] - p_c| = 1 - p_y = T.
  ModelSpec spec = linear_spec(3, 2);
  spec.head = Head::softmax_ce;
  const auto p = with_values(spec, {0.4, -0.2, 0.9, -0.3, 0.5, 0.1});
  Batch b;
  b.features = Tensor::matrix(4, 3, {0.7, -1.3, 2.1, 0.7, -1.3, 2.1, 0.7, -1.3, 2.1, 0.7, -1.3, 2.1});
  b.classes = {1, 1, 1, 1};
  const Tensor s = sensitivity_index(spec, p, b, p.variances());
  const Tensor fisher = empirical_fisher_diagonal(spec, p, b);
  const auto logits = predict(spec, p.values(), b.features.row(0));
  const double py = 1.0 / (1.0 + std::exp(logits[0] - logits[1]));
  const double t = 1.0 - py;
  for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(fisher[k], t * t * s[k], 1e-10);
}

TEST(Fisher, RankCorrelationWithSensitivity) {
  // The proportionality only holds approximately once T varies across
  // samples, so the check is on the average over a family of classifiers.
  std::mt19937_64 rng(9);
  double total = 0.0;
  const int trials = 10;
  for (int trial = 0; trial < trials; ++trial) {
    auto spec = oracle::random_mlp_spec(rng, 3, 16, Head::softmax_ce);
    spec.layer_sizes.back() = 2 + static_cast<std::size_t>(trial) % 4;
    const auto p = init_params(spec);
    const Batch b = oracle::heterogeneous_batch(rng, spec, 1000);
    const Tensor s = sensitivity_index(spec, p, b, p.variances());
    const Tensor fisher = empirical_fisher_diagonal(spec, p, b);
    const double rho = oracle::spearman(s.data(), fisher.data());
    EXPECT_GT(rho, 0.5) << "trial " << trial;
    total += rho;
  }
  EXPECT_GE(total / trials, 0.9);
}

std::vector<Batch> batches_of(const std::vector<DomainDataset>& ds) {
  std::vector<Batch> out;
  for (const auto& d : ds) out.push_back(d.data);
  return out;
}

TEST(PerDomain, NeedsTwoDomains) {
  const auto spec = linear_spec(1, 1);
  const auto p = with_values(spec, {1.0});
  const std::vector<Batch> one{rows_of(1, {1, 2})};
  EXPECT_THROW((void)per_domain_sensitivity(spec, p, one, p.variances(), EstimatorMode::jacobian), ProtocolError);
}

TEST(PerDomain, IdenticalDomainsGiveEqualColumns) {
  std::mt19937_64 rng(10);
  const auto spec = oracle::random_mlp_spec(rng, 2, 8, Head::softmax_ce);
  const auto p = init_params(spec);
  const Batch b = oracle::random_batch(rng, spec, 30);
  const std::vector<Batch> doms{b, b};
  for (auto mode : {EstimatorMode::jacobian, EstimatorMode::loss_grad}) {
    const Tensor s = per_domain_sensitivity(spec, p, doms, p.variances(), mode);
    for (std::size_t k = 0; k < p.size(); ++k) {
      EXPECT_NEAR(s(k, 0), s(k, 1), 1e-12);
      EXPECT_GE(s(k, 0), 0.0);
    }
    const auto r = cross_domain_stats(s);
    for (double c : r.cv) EXPECT_LT(c, 1e-6);
  }
}

TEST(PerDomain, SecondMomentScalesLinearBranch) {
  const auto spec = linear_spec(2, 1, true);
  const auto p = with_values(spec, {0.3, -0.8, 0.05});
  const Batch a = rows_of(2, {1, 0.5, -2, 1.5, 0.3, -1});
  const Batch b = rows_of(2, {1, 1.0, -2, 3.0, 0.3, -2});  // spurious column doubled
  const std::vector<Batch> doms{a, b};
  const Tensor s = per_domain_sensitivity(spec, p, doms, p.variances(), EstimatorMode::jacobian);
  EXPECT_DOUBLE_EQ(s(1, 1), 4.0 * s(1, 0));
  EXPECT_DOUBLE_EQ(s(0, 1), s(0, 0));
  EXPECT_DOUBLE_EQ(s(2, 0), 1.0);
}

TEST(PerDomain, LossGradModeUsesPerSampleSquares) {
  const auto spec = linear_spec(1, 1);
  const auto p = with_values(spec, {2.0});
  Batch a = rows_of(1, {1, 3});
  a.targets = Tensor::matrix(2, 1, {0, 0});
  const std::vector<Batch> doms{a, a};
  const Tensor s = per_domain_sensitivity(spec, p, doms, std::vector<double>{0.5}, EstimatorMode::loss_grad);
  // dL/dw = 2 (w x) x per sample: 4 and 36.
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5 * (16.0 + 1296.0) / 2.0);
}

TEST(PerDomain, MatchesPerCoordinatePerturbationPerDomain) {
  SyntheticSpec ss;
  ss.samples_per_domain = 60;
  ss.num_classes = 3;
  ss.seed = 4;
  const auto doms = batches_of(generate(ss));
  ModelSpec spec;
  spec.layer_sizes = {4, 5, 3};
  spec.head = Head::softmax_ce;
  spec.init_seed = 3;
  const auto p = init_params(spec);
  const Tensor s = per_domain_sensitivity(spec, p, doms, p.variances(), EstimatorMode::jacobian);
  for (std::size_t d = 0; d < doms.size(); ++d) {
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return s(a, d) > s(c, d); });
    for (std::size_t r = 0; r < 10; ++r) {
      const std::size_t k = order[r];
      const double mc = oracle::mc_single_parameter_sensitivity(spec, p.values(), doms[d], k, 1.0, 60 * 400, 1e-3,
                                                                 1000 * d + k);
      EXPECT_LT(std::abs(mc - s(k, d)) / s(k, d), 0.05) << "domain " << d << " parameter " << k;
    }
  }
}

TEST(CrossDomainStats, TwoPointFormula) {
  const auto r = cross_domain_stats(Tensor::matrix(1, 2, {1, 3}));
  EXPECT_DOUBLE_EQ(r.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(r.variance[0], 1.0);
  EXPECT_DOUBLE_EQ(r.cv[0], 1.0 / (2.0 + kDefaultCvEpsilon));
}

TEST(CrossDomainStats, ConstantAndZeroRows) {
  const auto r = cross_domain_stats(Tensor::matrix(2, 3, {5, 5, 5, 0, 0, 0}));
  EXPECT_EQ(r.variance[0], 0.0);
  EXPECT_EQ(r.cv[0], 0.0);
  EXPECT_EQ(r.cv[1], 0.0);
  EXPECT_THROW((void)cross_domain_stats(Tensor::matrix(1, 1, {1})), ProtocolError);
}

TEST(CrossDomainStats, HomogeneityAndIdentities) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  Tensor s({20, 4});
  for (auto& v : s.data()) v = u(rng);
  const auto base = cross_domain_stats(s, 0.0);
  for (std::size_t k = 0; k < 20; ++k) {
    double m = 0.0;
    for (std::size_t d = 0; d < 4; ++d) m += s(k, d) / 4.0;
    double v = 0.0;
    for (std::size_t d = 0; d < 4; ++d) v += (s(k, d) - m) * (s(k, d) - m) / 4.0;
    EXPECT_NEAR(base.mean[k], m, 1e-12);
    EXPECT_NEAR(base.variance[k], v, 1e-12);
    EXPECT_NEAR(base.cv[k], std::sqrt(v) / m, 1e-12);
  }
  const double alpha = 7.5;
  Tensor scaled = linalg::scaled(s, alpha);
  const auto r = cross_domain_stats(scaled, 0.0);
  for (std::size_t k = 0; k < 20; ++k) {
    EXPECT_NEAR(r.mean[k], alpha * base.mean[k], 1e-12 * alpha * base.mean[k]);
    EXPECT_NEAR(std::sqrt(r.variance[k]), alpha * std::sqrt(base.variance[k]), 1e-12 * alpha * 5);
    EXPECT_NEAR(r.cv[k], base.cv[k], 1e-12);
  }
}

TEST(CrossDomainStats, VarianceScalingPreservesCvOrder) {
  SyntheticSpec ss;
  ss.samples_per_domain = 200;
  ss.num_classes = 2;
  ss.seed = 5;
  const auto doms = batches_of(generate(ss));
  ModelSpec spec;
  spec.layer_sizes = {4, 4, 2};
  spec.head = Head::softmax_ce;
  auto p = init_params(spec);
  const Tensor s1 = per_domain_sensitivity(spec, p, doms, p.variances(), EstimatorMode::jacobian);
  for (double alpha : {1.0, 3.0, 100.0}) {
    const std::vector<double> var(p.size(), alpha);
    const Tensor sa = per_domain_sensitivity(spec, p, doms, var, EstimatorMode::jacobian);
    for (std::size_t k = 0; k < p.size(); ++k)
      for (std::size_t d = 0; d < doms.size(); ++d) EXPECT_NEAR(sa(k, d), alpha * s1(k, d), 1e-12 * alpha * s1(k, d) + 1e-300);
    const auto c0 = cross_domain_stats(s1, 0.0), ca0 = cross_domain_stats(sa, 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(ca0.cv[k], c0.cv[k], 1e-12);
    const auto c1 = cross_domain_stats(s1), ca1 = cross_domain_stats(sa);
    const auto r1 = oracle::ranks(c1.cv), ra = oracle::ranks(ca1.cv);
    EXPECT_EQ(r1, ra);
  }
}

TEST(SensitivityReport, CsvLayout) {
  const auto spec = linear_spec(2, 1, true);
  const auto r = cross_domain_stats(Tensor::matrix(3, 2, {1, 3, 2, 2, 0.5, 0.25}), kDefaultCvEpsilon, "jacobian",
                                    spec.registry());
  std::ostringstream os;
  write_csv(r, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "param_index,segment,local_index,s_d0,s_d1,mean,var,cv");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("0,layer0.weight,0,1,3,2,1,", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("1,layer0.weight,1,", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("2,layer0.bias,0,", 0), 0u);
}

// Linear probe on [invariant | spurious] features: the Jacobian column of the
// weight on feature j is x_j, so s_j^(d) is the domain second moment of x_j.
struct ProbeStats {
  std::vector<double> invariant_cv, spurious_cv;
};

ProbeStats probe_stats(std::uint64_t seed, std::size_t n) {
  SyntheticSpec ss;
  ss.samples_per_domain = n;
  ss.invariant_dim = 3;
  ss.spurious_dim = 3;
  ss.num_classes = 2;
  ss.seed = seed;
  const auto doms = batches_of(generate(ss));
  ModelSpec spec;
  spec.layer_sizes = {6, 2};
  spec.head = Head::softmax_ce;
  spec.bias = false;
  spec.init_seed = seed;
  const auto p = init_params(spec);
  const auto r = cross_domain_stats(per_domain_sensitivity(spec, p, doms, p.variances(), EstimatorMode::jacobian));
  ProbeStats out;
  for (std::size_t k = 0; k < p.size(); ++k) (k % 6 < 3 ? out.invariant_cv : out.spurious_cv).push_back(r.cv[k]);
  return out;
}

TEST(LemmaConstruction, InvariantBranchHasConstantSensitivity) {
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    const auto st = probe_stats(seed, 10000);
    const double inv = oracle::median(st.invariant_cv), spu = oracle::median(st.spurious_cv);
    EXPECT_LT(inv, 0.05);
    EXPECT_GT(spu, 0.5);
    EXPECT_LT(*std::max_element(st.invariant_cv.begin(), st.invariant_cv.end()),
              *std::min_element(st.spurious_cv.begin(), st.spurious_cv.end()));
    // Scales {1, 2, 4} give second moments {1, 4, 16}: cv = sqrt(42) / 7.
    EXPECT_NEAR(spu, std::sqrt(42.0) / 7.0, 0.05);
  }
}

TEST(LemmaConstruction, DisparityIffJacobianEnergyDiffers) {
  SyntheticSpec ss;
  ss.samples_per_domain = 10000;
  ss.spurious_scales = {1.0, 1.0, 2.0};
  ss.num_classes = 2;
  ss.seed = 12;
  const auto doms = batches_of(generate(ss));
  ModelSpec spec;
  spec.layer_sizes = {4, 1};
  spec.bias = false;
  const auto p = init_params(spec);
  const Tensor s = per_domain_sensitivity(spec, p, doms, p.variances(), EstimatorMode::jacobian);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = a + 1; b < 3; ++b) {
        // Domain-mean Jacobian energy of feature k and its sampling error.
        double ea = 0.0, eb = 0.0, qa = 0.0, qb = 0.0;
        const double n = 10000.0;
        for (std::size_t i = 0; i < 10000; ++i) {
          const double xa = doms[a].features(i, k), xb = doms[b].features(i, k);
          ea += xa * xa / n;
          eb += xb * xb / n;
          qa += xa * xa * xa * xa / n;
          qb += xb * xb * xb * xb / n;
        }
        const double sigma = std::sqrt((qa - ea * ea) / n + (qb - eb * eb) / n);
        const bool energy_differs = std::abs(ea - eb) > 4.0 * sigma;
        const bool sensitivity_differs = std::abs(s(k, a) - s(k, b)) > 4.0 * sigma;
        EXPECT_EQ(energy_differs, sensitivity_differs) << "feature " << k << " domains " << a << "," << b;
        const bool spurious_shift = k >= 2 && (a == 2 || b == 2);
        EXPECT_EQ(sensitivity_differs, spurious_shift) << "feature " << k << " domains " << a << "," << b;
      }
  }
}

TEST(Contamination, DiagonalCovarianceCollapses) {
  std::mt19937_64 rng(13);
  const auto spec = oracle::random_mlp_spec(rng, 2, 4, Head::mse);
  const auto p = init_params(spec);
  const Batch b = oracle::random_batch(rng, spec, 5);
  Tensor cov({p.size(), p.size()});
  for (std::size_t k = 0; k < p.size(); ++k) cov(k, k) = 0.5 + k;
  const auto res = contamination_bound_check(spec, p, b, cov);
  for (std::size_t k = 0; k < p.size(); ++k) {
    EXPECT_EQ(res.rhs[k], 0.0);
    EXPECT_LT(res.lhs[k], 1e-12);
  }
  EXPECT_TRUE(res.holds());
}

TEST(Contamination, RankOneHandExpanded) {
  const auto spec = linear_spec(3, 1);
  const auto p = with_values(spec, {0.2, -0.4, 0.6});
  const Batch b = rows_of(3, {1, -2, 0.5, -1, 3, 2, 0.25, 1, -1.5});
  const std::vector<double> u{1.0, -2.0, 0.5};
  Tensor cov({3, 3});
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 3; ++c) cov(a, c) = u[a] * u[c];
  const auto res = contamination_bound_check(spec, p, b, cov);
  for (std::size_t k = 0; k < 3; ++k) {
    double off = 0.0, bound = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
      if (l == k) continue;
      double e = 0.0, ea = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        const double prod = b.features(i, k) * b.features(i, l);
        e += prod / 3.0;
        ea += std::abs(prod) / 3.0;
      }
      off += u[k] * u[l] * e;
      bound += std::abs(u[k] * u[l]) * ea;
    }
    EXPECT_NEAR(res.lhs[k], std::abs(off), 1e-12);
    EXPECT_NEAR(res.rhs[k], bound, 1e-12);
    EXPECT_LE(res.lhs[k], res.rhs[k] + 1e-10);
  }
}

TEST(Contamination, RandomPsdNeverViolates) {
  std::mt19937_64 rng(14);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto spec = oracle::random_mlp_spec(rng, 2, 4, trial % 2 ? Head::mse : Head::softmax_ce);
    const auto p = init_params(spec);
    const Batch b = oracle::random_batch(rng, spec, 6);
    const Tensor a = oracle::random_matrix(rng, p.size(), p.size());
    const Tensor cov = linalg::matmul(a, linalg::transpose(a));
    if (!contamination_bound_check(spec, p, b, cov).holds()) ++violations;
  }
  EXPECT_EQ(violations, 0);
}

TEST(Contamination, RejectsAsymmetricAndLarge) {
  const auto spec = linear_spec(2, 1);
  const auto p = with_values(spec, {1, 1});
  const Batch b = rows_of(2, {1, 2});
  EXPECT_THROW((void)contamination_bound_check(spec, p, b, Tensor::matrix(2, 2, {1, 0.5, 0.4, 1})), DataError);
  ModelSpec big;
  big.layer_sizes = {20, 10};
  const auto pb = init_params(big);
  std::mt19937_64 rng(1);
  const Batch bb = oracle::random_batch(rng, big, 1);
  EXPECT_THROW((void)contamination_bound_check(big, pb, bb, Tensor({pb.size(), pb.size()})), CapabilityError);
}

}  // namespace
}  // namespace dspreg
