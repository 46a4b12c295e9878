#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dspreg/autodiff.hpp"
#include "dspreg/dual.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

enum class HvpMode {
  exact,              // forward-over-reverse; throws at a nonsmooth point
  finite_difference,  // central difference of gradients
  exact_or_fallback,  // exact, falling back to finite differences at a kink
};

// A loss builder is any callable usable as
//   NodeId build(BasicTape<S>& tape, std::span<const S> theta)
// for S = double and S = Dual<double>, returning a scalar node.

template <class Builder>
std::vector<double> builder_gradient(Builder&& build, std::span<const double> theta) {
  Tape tape;
  const NodeId loss = build(tape, theta);
  return tape.parameter_gradient(tape.backward(loss), theta.size());
}

inline double fd_hvp_step(std::span<const double> theta) {
  return 1e-4 * (1.0 + linalg::max_abs(theta));
}

template <class Builder>
Tensor hvp_finite_difference(Builder&& build, std::span<const double> theta, std::span<const double> v) {
  const double eps = fd_hvp_step(theta);
  std::vector<double> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    plus[k] += eps * v[k];
    minus[k] -= eps * v[k];
  }
  const auto gp = builder_gradient(build, std::span<const double>(plus));
  const auto gm = builder_gradient(build, std::span<const double>(minus));
  Tensor out({theta.size()});
  for (std::size_t k = 0; k < theta.size(); ++k) out[k] = (gp[k] - gm[k]) / (2.0 * eps);
  return out;
}

/// H v with H the Hessian of the built loss at theta.
template <class Builder>
Tensor hvp(Builder&& build, std::span<const double> theta, std::span<const double> v,
           HvpMode mode = HvpMode::exact_or_fallback) {
  if (v.size() != theta.size()) {
    throw DimensionError("hvp: direction has length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(theta.size()));
  }
  if (mode == HvpMode::finite_difference) return hvp_finite_difference(build, theta, v);

  std::vector<Dual<double>> dual(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) dual[k] = {theta[k], v[k]};
  DualTape tape;
  const NodeId loss = build(tape, std::span<const Dual<double>>(dual));
  if (tape.nonsmooth()) {
    if (mode == HvpMode::exact) {
      throw CapabilityError("exact Hessian-vector product requested at a point where the model is not twice "
                            "differentiable (ReLU at its kink); use fd-hvp");
    }
    return hvp_finite_difference(build, theta, v);
  }
  const auto g = tape.parameter_gradient(tape.backward(loss), theta.size());
  Tensor out({theta.size()});
  for (std::size_t k = 0; k < theta.size(); ++k) out[k] = g[k].tangent;
  return out;
}

}  // namespace dspreg
