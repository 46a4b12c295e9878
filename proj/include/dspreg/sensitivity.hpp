#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dspreg/batch.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/model.hpp"
#include "dspreg/parameters.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

/// How s_k^(d) is estimated: from output Jacobians j_k(x), or from per-sample
/// loss gradients (the cheaper estimator used during training).
enum class EstimatorMode { jacobian, loss_grad };

inline std::string to_string(EstimatorMode m) { return m == EstimatorMode::jacobian ? "jacobian" : "loss-grad"; }
inline EstimatorMode parse_estimator(const std::string& s) {
  if (s == "jacobian") return EstimatorMode::jacobian;
  if (s == "loss-grad" || s == "loss_grad") return EstimatorMode::loss_grad;
  throw DataError("unknown estimator mode '" + s + "'");
}

inline constexpr double kDefaultCvEpsilon = 1e-8;

/// Perturbation model for the covariance oracles. Covariances are rank-1
/// (diagonal) or rank-2 (full). Monte-Carlo draws are scaled by `scale`.
struct PerturbationSpec {
  Tensor input_covariance;
  Tensor param_covariance;
  std::size_t samples = 200000;
  double scale = 1e-3;
  std::uint64_t seed = 0;
};

/// J_x dx + J_theta dtheta at (x0, theta).
inline Tensor linearized_delta_output(const ModelSpec& spec, const ParameterVector& params, const Tensor& x0,
                                      std::span<const double> dx, std::span<const double> dtheta) {
  if (dx.size() != spec.input_dim()) throw DimensionError("linearized_delta_output: dx has wrong length");
  if (dtheta.size() != params.size()) throw DimensionError("linearized_delta_output: dtheta has wrong length");
  const auto j = jacobians(spec, params.values(), x0);
  const std::size_t dy = j.wrt_input.rows();
  Tensor out({dy});
  for (std::size_t r = 0; r < dy; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < dx.size(); ++i) s += j.wrt_input(r, i) * dx[i];
    for (std::size_t k = 0; k < dtheta.size(); ++k) s += j.wrt_params(r, k) * dtheta[k];
    out[r] = s;
  }
  return out;
}

namespace detail {

inline void check_covariance(const Tensor& cov, std::size_t n, const char* what) {
  if (cov.rank() == 1) {
    if (cov.size() != n) throw DimensionError(std::string(what) + ": diagonal has wrong length");
    for (double v : cov.data())
      if (v < 0.0) throw DataError(std::string(what) + ": negative variance, covariance is not PSD");
    return;
  }
  if (cov.rows() != n || cov.cols() != n) throw DimensionError(std::string(what) + ": matrix has wrong shape");
  for (std::size_t i = 0; i < n; ++i)
    if (cov(i, i) < 0.0) throw DataError(std::string(what) + ": negative diagonal, covariance is not PSD");
}

// J C J^T for diagonal or full C.
inline Tensor sandwich(const Tensor& j, const Tensor& cov) {
  const std::size_t m = j.rows(), n = j.cols();
  Tensor jc({m, n});
  if (cov.rank() == 1) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < n; ++k) jc(r, k) = j(r, k) * cov[k];
  } else {
    jc = linalg::matmul(j, cov);
  }
  Tensor out({m, m});
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += jc(a, k) * j(b, k);
      out(a, b) = s;
    }
  return out;
}

inline std::vector<double> diagonal_of(const Tensor& cov) {
  if (cov.rank() == 1) return cov.values();
  std::vector<double> d(cov.rows());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = cov(i, i);
  return d;
}

/// sum_r J(r, k)^2 for every column k.
inline std::vector<double> column_energy(const Tensor& j) {
  std::vector<double> e(j.cols(), 0.0);
  for (std::size_t r = 0; r < j.rows(); ++r)
    for (std::size_t k = 0; k < j.cols(); ++k) e[k] += j(r, k) * j(r, k);
  return e;
}

inline void check_variances(std::span<const double> variances, std::size_t n) {
  if (variances.size() != n) throw DimensionError("variances have wrong length");
  for (double v : variances)
    if (v < 0.0) throw DataError("parameter variances must be nonnegative");
}

}  // namespace detail

/// Cov(dy) = J_x S_x J_x^T + J_theta S_theta J_theta^T, symmetrized.
inline Tensor propagate_covariance(const Tensor& jx, const Tensor& jtheta, const Tensor& cov_x,
                                   const Tensor& cov_theta) {
  if (jx.rows() != jtheta.rows()) throw DimensionError("propagate_covariance: Jacobians disagree on d_y");
  detail::check_covariance(cov_x, jx.cols(), "input covariance");
  detail::check_covariance(cov_theta, jtheta.cols(), "parameter covariance");
  Tensor out = linalg::add(detail::sandwich(jx, cov_x), detail::sandwich(jtheta, cov_theta));
  for (std::size_t a = 0; a < out.rows(); ++a)
    for (std::size_t b = a + 1; b < out.cols(); ++b) {
      const double m = 0.5 * (out(a, b) + out(b, a));
      out(a, b) = out(b, a) = m;
    }
  return out;
}

/// sum_k Var(theta_k) j_k j_k^T, accumulated one rank-1 term at a time.
inline Tensor param_covariance_decomposition(const Tensor& jtheta, std::span<const double> variances) {
  detail::check_variances(variances, jtheta.cols());
  const std::size_t m = jtheta.rows();
  Tensor out({m, m});
  for (std::size_t k = 0; k < jtheta.cols(); ++k) {
    if (variances[k] == 0.0) continue;
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) out(a, b) += variances[k] * jtheta(a, k) * jtheta(b, k);
  }
  return out;
}

/// delta_v_k(x) = Var(theta_k) ||j_k(x)||^2.
inline Tensor local_contribution(const ModelSpec& spec, const ParameterVector& params, const Tensor& x,
                                 std::span<const double> variances) {
  detail::check_variances(variances, params.size());
  auto e = detail::column_energy(jacobian_params(spec, params, x));
  for (std::size_t k = 0; k < e.size(); ++k) e[k] *= variances[k];
  return Tensor::vector(std::move(e));
}

/// Tr(J_theta S_theta J_theta^T) = sum_k delta_v_k(x).
inline double total_output_variance(const ModelSpec& spec, const ParameterVector& params, const Tensor& x,
                                    std::span<const double> variances) {
  const Tensor c = local_contribution(spec, params, x, variances);
  double s = 0.0;
  for (double v : c.data()) s += v;
  return s;
}

/// s_k = Var(theta_k) * mean over rows of ||j_k(x)||^2.
inline Tensor sensitivity_index(const ModelSpec& spec, const ParameterVector& params, const Batch& data,
                                std::span<const double> variances) {
  if (data.size() == 0) throw DataError("sensitivity_index: empty dataset");
  detail::check_variances(variances, params.size());
  std::vector<double> acc(params.size(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto e = detail::column_energy(jacobian_params(spec, params, data.features.row(i)));
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += e[k];
  }
  const double n = static_cast<double>(data.size());
  for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = variances[k] * (acc[k] / n);
  return Tensor::vector(std::move(acc));
}

/// Mean over rows of squared per-sample loss gradients, times Var(theta_k).
inline Tensor loss_gradient_sensitivity(const ModelSpec& spec, const ParameterVector& params, const Batch& data,
                                        std::span<const double> variances) {
  if (data.size() == 0) throw DataError("loss_gradient_sensitivity: empty dataset");
  detail::check_variances(variances, params.size());
  std::vector<double> acc(params.size(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor g = loss_and_gradient(spec, params.values(), data.sample(i)).gradient;
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k] * g[k];
  }
  const double n = static_cast<double>(data.size());
  for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = variances[k] * (acc[k] / n);
  return Tensor::vector(std::move(acc));
}

/// Score vector d/dtheta log p(y|x) for one sample.
inline std::vector<double> score(const ModelSpec& spec, std::span<const double> theta, const Batch& data,
                                 std::size_t row) {
  if (spec.head == Head::softmax_ce) {
    // Cross-entropy is -log p, so the score is the negated loss gradient.
    auto g = loss_and_gradient(spec, theta, data.sample(row)).gradient;
    std::vector<double> u(g.size());
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = -g[k];
    return u;
  }
  if (!spec.noise_std) {
    throw CapabilityError("Fisher information for an mse head needs a declared noise_std (Gaussian likelihood)");
  }
  const double inv_var = 1.0 / (*spec.noise_std * *spec.noise_std);
  Tape tape;
  const NodeId in = tape.constant(data.features.row(row));
  const NodeId out = build_forward<double>(tape, spec, theta, in);
  const Tensor& f = tape.value(out);
  Tensor seed({1, f.size()});
  for (std::size_t j = 0; j < f.size(); ++j) seed[j] = (data.targets(row, j) - f[j]) * inv_var;
  return tape.parameter_gradient(tape.backward(out, seed), theta.size());
}

/// I_kk = mean over samples of the squared score.
inline Tensor empirical_fisher_diagonal(const ModelSpec& spec, const ParameterVector& params, const Batch& data) {
  if (data.size() == 0) throw DataError("empirical_fisher_diagonal: empty dataset");
  std::vector<double> acc(params.size(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto u = score(spec, params.values(), data, i);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += u[k] * u[k];
  }
  for (double& v : acc) v /= static_cast<double>(data.size());
  return Tensor::vector(std::move(acc));
}

/// d_theta x D matrix of s_k^(d), one column per domain.
inline Tensor per_domain_sensitivity(const ModelSpec& spec, const ParameterVector& params,
                                     std::span<const Batch> domains, std::span<const double> variances,
                                     EstimatorMode mode) {
  if (domains.size() < 2) throw ProtocolError("per-domain sensitivity needs at least two domains");
  for (const auto& d : domains)
    if (d.size() == 0) throw ProtocolError("per-domain sensitivity: a domain has no samples");
  Tensor s({params.size(), domains.size()});
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const Tensor col = mode == EstimatorMode::jacobian
                           ? sensitivity_index(spec, params, domains[d], variances)
                           : loss_gradient_sensitivity(spec, params, domains[d], variances);
    for (std::size_t k = 0; k < params.size(); ++k) s(k, d) = col[k];
  }
  return s;
}

/// Per-parameter cross-domain statistics of s_k^(d).
struct SensitivityReport {
  Tensor per_domain;  // d_theta x D
  std::vector<double> mean;
  std::vector<double> variance;
  std::vector<double> cv;
  double epsilon = kDefaultCvEpsilon;
  std::string mode = "jacobian";
  std::vector<Segment> registry;

  [[nodiscard]] std::size_t num_params() const { return mean.size(); }
  [[nodiscard]] std::size_t num_domains() const { return per_domain.cols(); }
};

/// Mean, population variance (divisor D) and coefficient of variation
/// sqrt(v) / (mean + eps) for every row of S.
inline SensitivityReport cross_domain_stats(const Tensor& s, double epsilon = kDefaultCvEpsilon,
                                            std::string mode = "jacobian", std::vector<Segment> registry = {}) {
  if (s.rank() != 2 || s.cols() < 2) throw ProtocolError("cross_domain_stats needs at least two domain columns");
  if (!(epsilon >= 0.0)) throw DataError("cross_domain_stats: epsilon must be nonnegative");
  SensitivityReport r;
  r.per_domain = s;
  r.epsilon = epsilon;
  r.mode = std::move(mode);
  r.registry = std::move(registry);
  const std::size_t n = s.rows(), dcount = s.cols();
  const double dd = static_cast<double>(dcount);
  r.mean.resize(n);
  r.variance.resize(n);
  r.cv.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    double m = 0.0;
    for (std::size_t d = 0; d < dcount; ++d) m += s(k, d);
    m /= dd;
    double v = 0.0;
    for (std::size_t d = 0; d < dcount; ++d) v += (s(k, d) - m) * (s(k, d) - m);
    v /= dd;
    r.mean[k] = m;
    r.variance[k] = v;
    const double sd = std::sqrt(v);
    r.cv[k] = sd == 0.0 ? 0.0 : sd / (m + epsilon);
  }
  return r;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV: param_index,segment,local_index,s_d0,...,s_dN,mean,var,cv
inline void write_csv(const SensitivityReport& r, std::ostream& os) {
  os << "param_index,segment,local_index";
  for (std::size_t d = 0; d < r.num_domains(); ++d) os << ",s_d" << d;
  os << ",mean,var,cv\n";
  for (std::size_t k = 0; k < r.num_params(); ++k) {
    std::string seg = "";
    std::size_t local = k;
    for (const auto& s : r.registry)
      if (k >= s.offset && k < s.offset + s.length) {
        seg = s.name;
        local = k - s.offset;
      }
    os << k << ',' << seg << ',' << local;
    for (std::size_t d = 0; d < r.num_domains(); ++d) os << ',' << format_double(r.per_domain(k, d));
    os << ',' << format_double(r.mean[k]) << ',' << format_double(r.variance[k]) << ','
       << format_double(r.cv[k]) << '\n';
  }
}

struct ContaminationResult {
  std::vector<double> lhs;  // |projected contribution - Var(theta_k) E||j_k||^2|
  std::vector<double> rhs;  // sum_{l != k} |Cov(theta_k, theta_l)| E|<j_k, j_l>|
  double tolerance = 1e-10;

  [[nodiscard]] bool holds() const {
    for (std::size_t k = 0; k < lhs.size(); ++k)
      if (lhs[k] > rhs[k] + tolerance) return false;
    return true;
  }
};

/// Off-diagonal contamination of the per-parameter sensitivity under a full
/// parameter covariance. The projected k-th contribution is
/// E[sum_l Cov(theta_k, theta_l) <j_k, j_l>], the k-th row share of
/// E Tr(J S J^T).
inline ContaminationResult contamination_bound_check(const ModelSpec& spec, const ParameterVector& params,
                                                     const Batch& data, const Tensor& cov_theta) {
  const std::size_t n = params.size();
  if (n > 200) throw CapabilityError("contamination_bound_check is limited to 200 parameters");
  if (cov_theta.rank() != 2 || cov_theta.rows() != n || cov_theta.cols() != n) {
    throw DimensionError("contamination_bound_check: covariance must be d_theta x d_theta");
  }
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (std::abs(cov_theta(a, b) - cov_theta(b, a)) >
          1e-12 * std::max(1.0, std::abs(cov_theta(a, b)) + std::abs(cov_theta(b, a)))) {
        throw DataError("contamination_bound_check: covariance is not symmetric");
      }
  if (data.size() == 0) throw DataError("contamination_bound_check: empty dataset");

  Tensor gram({n, n}), abs_gram({n, n});
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor j = jacobian_params(spec, params, data.features.row(i));
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        double s = 0.0;
        for (std::size_t r = 0; r < j.rows(); ++r) s += j(r, a) * j(r, b);
        gram(a, b) += s;
        abs_gram(a, b) += std::abs(s);
      }
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  ContaminationResult res;
  res.lhs.resize(n);
  res.rhs.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    double projected = 0.0, bound = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      projected += cov_theta(k, l) * gram(k, l) * inv;
      if (l != k) bound += std::abs(cov_theta(k, l)) * abs_gram(k, l) * inv;
    }
    res.lhs[k] = std::abs(projected - cov_theta(k, k) * gram(k, k) * inv);
    res.rhs[k] = bound;
  }
  return res;
}

}  // namespace dspreg
