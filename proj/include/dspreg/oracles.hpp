#pragma once

// Brute-force reference computations used only by the validation suite and
// the tests. Nothing here touches the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "dspreg/batch.hpp"
#include "dspreg/model.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg::oracle {

/// Straight-line MLP evaluation of a single input.
inline std::vector<double> reference_forward(const ModelSpec& spec, std::span<const double> theta,
                                             std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
    std::vector<double> next(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += theta[off + o * in + i] * h[i];
      next[o] = s;
    }
    off += in * out;
    if (spec.bias) {
      for (std::size_t o = 0; o < out; ++o) next[o] += theta[off + o];
      off += out;
    }
    if (l + 1 < spec.num_layers()) {
      for (double& v : next) {
        if (spec.activation == Activation::relu) v = v > 0.0 ? v : 0.0;
        if (spec.activation == Activation::tanh) v = std::tanh(v);
      }
    }
    h = std::move(next);
  }
  return h;
}

inline double reference_sample_loss(const ModelSpec& spec, std::span<const double> theta, const Batch& batch,
                                    std::size_t row) {
  const auto x = batch.features.row(row);
  const auto out = reference_forward(spec, theta, x.data());
  if (spec.head == Head::softmax_ce) {
    double m = *std::max_element(out.begin(), out.end());
    double z = 0.0;
    for (double v : out) z += std::exp(v - m);
    return m + std::log(z) - out[batch.classes[row]];
  }
  double s = 0.0;
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double d = out[j] - batch.targets(row, j);
    s += d * d;
  }
  return s / static_cast<double>(out.size());
}

inline double reference_loss(const ModelSpec& spec, std::span<const double> theta, const Batch& batch) {
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) s += reference_sample_loss(spec, theta, batch, i);
  return s / static_cast<double>(batch.size());
}

/// d/dtheta log softmax(f(x))_y by explicit backpropagation over plain loops.
inline std::vector<double> reference_log_prob_gradient(const ModelSpec& spec, std::span<const double> theta,
                                                       std::span<const double> x, std::size_t label) {
  const std::size_t layers = spec.num_layers();
  std::vector<std::vector<double>> acts{std::vector<double>(x.begin(), x.end())};
  std::vector<std::vector<double>> pre;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
    offsets.push_back(off);
    std::vector<double> z(out, 0.0);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i) z[o] += theta[off + o * in + i] * acts[l][i];
    off += in * out;
    if (spec.bias) {
      for (std::size_t o = 0; o < out; ++o) z[o] += theta[off + o];
      off += out;
    }
    std::vector<double> a = z;
    if (l + 1 < layers) {
      for (double& v : a) {
        if (spec.activation == Activation::relu) v = v > 0.0 ? v : 0.0;
        if (spec.activation == Activation::tanh) v = std::tanh(v);
      }
    }
    pre.push_back(std::move(z));
    acts.push_back(std::move(a));
  }

  const auto& logits = acts.back();
  const double m = *std::max_element(logits.begin(), logits.end());
  double norm = 0.0;
  for (double v : logits) norm += std::exp(v - m);
  std::vector<double> delta(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    delta[c] = (c == label ? 1.0 : 0.0) - std::exp(logits[c] - m) / norm;
  }

  std::vector<double> grad(theta.size(), 0.0);
  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
    const std::size_t w = offsets[l];
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i) grad[w + o * in + i] = delta[o] * acts[l][i];
    if (spec.bias)
      for (std::size_t o = 0; o < out; ++o) grad[w + in * out + o] = delta[o];
    if (l == 0) break;
    std::vector<double> back(in, 0.0);
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t o = 0; o < out; ++o) back[i] += theta[w + o * in + i] * delta[o];
      const double z = pre[l - 1][i];
      if (spec.activation == Activation::relu) back[i] *= z > 0.0 ? 1.0 : 0.0;
      if (spec.activation == Activation::tanh) back[i] *= 1.0 - std::tanh(z) * std::tanh(z);
    }
    delta = std::move(back);
  }
  return grad;
}

/// Fourth-order central-difference gradient of a scalar function:
/// (f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> at, double h = 1e-3) {
  std::vector<double> p(at.begin(), at.end());
  std::vector<double> g(at.size());
  for (std::size_t k = 0; k < at.size(); ++k) {
    const double saved = p[k];
    double v[4];
    const double off[4] = {-2.0, -1.0, 1.0, 2.0};
    for (int i = 0; i < 4; ++i) {
      p[k] = saved + off[i] * h;
      v[i] = f(p);
    }
    p[k] = saved;
    g[k] = (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h);
  }
  return g;
}

/// Same stencil as fd_gradient, one Jacobian column (rows = outputs) at a time.
inline Tensor fd_jacobian(const std::function<std::vector<double>(std::span<const double>)>& f,
                          std::span<const double> at, double h = 1e-3) {
  std::vector<double> p(at.begin(), at.end());
  const std::size_t m = f(p).size();
  Tensor jac({m, at.size()});
  for (std::size_t k = 0; k < at.size(); ++k) {
    const double saved = p[k];
    std::vector<double> v[4];
    const double off[4] = {-2.0, -1.0, 1.0, 2.0};
    for (int i = 0; i < 4; ++i) {
      p[k] = saved + off[i] * h;
      v[i] = f(p);
    }
    p[k] = saved;
    for (std::size_t r = 0; r < m; ++r) jac(r, k) = (v[0][r] - 8.0 * v[1][r] + 8.0 * v[2][r] - v[3][r]) / (12.0 * h);
  }
  return jac;
}

inline Tensor fd_jacobian_params(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                                 double h = 1e-3) {
  return fd_jacobian([&](std::span<const double> t) { return reference_forward(spec, t, x); }, theta, h);
}

inline Tensor fd_jacobian_input(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                                double h = 1e-3) {
  return fd_jacobian([&](std::span<const double> xx) { return reference_forward(spec, theta, xx); }, x, h);
}

/// Ranks with ties averaged (1-based).
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  return pearson(ra, rb);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Random fully connected spec with tanh activations unless told otherwise.
inline ModelSpec random_mlp_spec(std::mt19937_64& rng, std::size_t max_depth, std::size_t max_width, Head head,
                                 Activation act = Activation::tanh) {
  std::uniform_int_distribution<std::size_t> depth(1, max_depth);
  std::uniform_int_distribution<std::size_t> width(2, max_width);
  ModelSpec spec;
  spec.layer_sizes.clear();
  const std::size_t layers = depth(rng);
  for (std::size_t l = 0; l <= layers; ++l) spec.layer_sizes.push_back(width(rng));
  spec.activation = act;
  spec.head = head;
  spec.init_seed = rng();
  return spec;
}

inline Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline Batch random_batch(std::mt19937_64& rng, const ModelSpec& spec, std::size_t n) {
  Batch b;
  b.features = random_matrix(rng, n, spec.input_dim());
  if (spec.head == Head::softmax_ce) {
    std::uniform_int_distribution<std::size_t> cls(0, spec.output_dim() - 1);
    for (std::size_t i = 0; i < n; ++i) b.classes.push_back(cls(rng));
  } else {
    b.targets = random_matrix(rng, n, spec.output_dim());
  }
  return b;
}

/// Like random_batch, but feature j is rescaled by a log-uniform factor in
/// [0.1, 10] so per-parameter sensitivities spread over several decades.
inline Batch heterogeneous_batch(std::mt19937_64& rng, const ModelSpec& spec, std::size_t n) {
  Batch b = random_batch(rng, spec, n);
  std::uniform_real_distribution<double> lu(std::log(0.1), std::log(10.0));
  std::vector<double> scale(spec.input_dim());
  for (double& v : scale) v = std::exp(lu(rng));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < scale.size(); ++j) b.features(i, j) *= scale[j];
  return b;
}

}  // namespace dspreg::oracle
