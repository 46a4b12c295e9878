#pragma once

// Sampling oracles for the covariance and sensitivity formulas. These push
// random perturbations through the straight-line evaluator and measure the
// output spread directly; they never consult a Jacobian.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dspreg/batch.hpp"
#include "dspreg/model.hpp"
#include "dspreg/oracles.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg::oracle {

/// Draws N(0, C) for a diagonal (rank-1) or full (rank-2) covariance.
class GaussianSampler {
 public:
  explicit GaussianSampler(const Tensor& cov) : diagonal_(cov.rank() == 1) {
    if (diagonal_) {
      for (double v : cov.data()) sd_.push_back(std::sqrt(std::max(v, 0.0)));
    } else {
      chol_ = linalg::cholesky_psd(cov);
    }
  }

  [[nodiscard]] std::size_t dim() const { return diagonal_ ? sd_.size() : chol_.rows(); }

  template <class Rng>
  void draw(Rng& rng, std::span<double> out) {
    std::normal_distribution<double> n(0.0, 1.0);
    if (diagonal_) {
      for (std::size_t i = 0; i < sd_.size(); ++i) out[i] = sd_[i] * n(rng);
      return;
    }
    z_.resize(dim());
    for (double& v : z_) v = n(rng);
    for (std::size_t i = 0; i < dim(); ++i) {
      double s = 0.0;
      for (std::size_t p = 0; p <= i; ++p) s += chol_(i, p) * z_[p];
      out[i] = s;
    }
  }

 private:
  bool diagonal_;
  std::vector<double> sd_;
  Tensor chol_;
  std::vector<double> z_;
};

struct McCovariance {
  Tensor covariance;  // sample covariance of dy divided by scale^2
  Tensor std_error;   // per-entry standard error, same normalization
};

/// Covariance of f(x0 + dx; theta + dtheta) - f(x0; theta) with
/// dx ~ N(0, scale^2 C_x), dtheta ~ N(0, scale^2 C_theta).
inline McCovariance mc_output_covariance(const ModelSpec& spec, std::span<const double> theta,
                                         std::span<const double> x0, const Tensor& cov_x, const Tensor& cov_theta,
                                         std::size_t samples, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GaussianSampler sx(cov_x), st(cov_theta);
  const auto base = reference_forward(spec, theta, x0);
  const std::size_t m = base.size();
  std::vector<double> x(x0.size()), t(theta.size()), dx(x0.size()), dt(theta.size());
  std::vector<double> sum(m, 0.0), prod(m * m, 0.0), prod2(m * m, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    sx.draw(rng, dx);
    st.draw(rng, dt);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = x0[i] + scale * dx[i];
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = theta[k] + scale * dt[k];
    auto y = reference_forward(spec, t, x);
    for (std::size_t a = 0; a < m; ++a) y[a] = (y[a] - base[a]) / scale;
    for (std::size_t a = 0; a < m; ++a) {
      sum[a] += y[a];
      for (std::size_t b = 0; b < m; ++b) {
        const double p = y[a] * y[b];
        prod[a * m + b] += p;
        prod2[a * m + b] += p * p;
      }
    }
  }
  const double n = static_cast<double>(samples);
  McCovariance out{Tensor({m, m}), Tensor({m, m})};
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      const double c = (prod[a * m + b] - sum[a] * sum[b] / n) / (n - 1.0);
      out.covariance(a, b) = c;
      const double second = prod2[a * m + b] / n - (prod[a * m + b] / n) * (prod[a * m + b] / n);
      out.std_error(a, b) = std::sqrt(std::max(second, 0.0) / n);
    }
  return out;
}

/// Sum over output coordinates of Var f(x; theta + dtheta), divided by scale^2,
/// with dtheta ~ N(0, scale^2 diag(variances)).
inline double mc_param_total_variance(const ModelSpec& spec, std::span<const double> theta,
                                      std::span<const double> x, std::span<const double> variances,
                                      std::size_t samples, double scale, std::uint64_t seed) {
  Tensor cov_x({x.size()});
  const Tensor cov_t = Tensor::vector({variances.begin(), variances.end()});
  const auto mc = mc_output_covariance(spec, theta, x, cov_x, cov_t, samples, scale, seed);
  return linalg::trace(mc.covariance);
}

/// Perturbs only theta_k by N(0, sigma^2 Var(theta_k)) and returns the mean
/// squared output change over the dataset divided by sigma^2. Draws cycle
/// through the rows so every sample receives the same number of draws.
inline double mc_single_parameter_sensitivity(const ModelSpec& spec, std::span<const double> theta,
                                              const Batch& data, std::size_t k, double variance,
                                              std::size_t draws, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma * std::sqrt(variance));
  std::vector<std::vector<double>> base(data.size());
  std::vector<std::vector<double>> rows(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    rows[i] = data.features.row(i).values();
    base[i] = reference_forward(spec, theta, rows[i]);
  }
  std::vector<double> t(theta.begin(), theta.end());
  double acc = 0.0;
  for (std::size_t s = 0; s < draws; ++s) {
    const std::size_t i = s % data.size();
    t[k] = theta[k] + n(rng);
    const auto y = reference_forward(spec, t, rows[i]);
    for (std::size_t a = 0; a < y.size(); ++a) acc += (y[a] - base[i][a]) * (y[a] - base[i][a]);
  }
  return acc / static_cast<double>(draws) / (sigma * sigma);
}

}  // namespace dspreg::oracle
