#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dspreg/autodiff.hpp"
#include "dspreg/batch.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/parameters.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

enum class Activation { relu, tanh, identity };
enum class Head { softmax_ce, mse };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}
inline std::string to_string(Head h) { return h == Head::softmax_ce ? "softmax-ce" : "mse"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw DataError("unknown activation '" + s + "'");
}
inline Head parse_head(const std::string& s) {
  if (s == "softmax-ce" || s == "softmax_ce") return Head::softmax_ce;
  if (s == "mse") return Head::mse;
  throw DataError("unknown head '" + s + "'");
}

/// Fully connected network. `layer_sizes` = {d_x, hidden..., d_y}; a single
/// entry describes the identity map. Weights are stored {out, in}, row-major,
/// and the activation is applied after every layer except the last.
struct ModelSpec {
  std::vector<std::size_t> layer_sizes{1, 1};
  Activation activation = Activation::tanh;
  Head head = Head::mse;
  std::uint64_t init_seed = 0;
  bool bias = true;
  // Gaussian observation noise for the regression likelihood; required by the
  // Fisher computation on an mse head.
  std::optional<double> noise_std;

  [[nodiscard]] std::size_t input_dim() const { return layer_sizes.front(); }
  [[nodiscard]] std::size_t output_dim() const { return layer_sizes.back(); }
  [[nodiscard]] std::size_t num_layers() const { return layer_sizes.size() - 1; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers(); ++l)
      n += layer_sizes[l] * layer_sizes[l + 1] + (bias ? layer_sizes[l + 1] : 0);
    return n;
  }

  void validate() const {
    if (layer_sizes.empty()) throw DataError("model needs at least one layer size");
    for (std::size_t s : layer_sizes)
      if (s == 0) throw DataError("layer sizes must be positive");
    if (head == Head::softmax_ce && output_dim() < 2 && num_layers() > 0) {
      throw DataError("softmax-ce head needs at least two outputs");
    }
    if (noise_std && !(*noise_std > 0.0)) throw DataError("noise_std must be positive");
  }

  [[nodiscard]] std::vector<Segment> registry() const {
    std::vector<Segment> segs;
    std::size_t off = 0;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const std::size_t in = layer_sizes[l], out = layer_sizes[l + 1];
      segs.push_back({"layer" + std::to_string(l) + ".weight", off, in * out, {out, in}});
      off += in * out;
      if (bias) {
        segs.push_back({"layer" + std::to_string(l) + ".bias", off, out, {out}});
        off += out;
      }
    }
    return segs;
  }
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, unit variances.
inline ParameterVector init_params(const ModelSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.init_seed);
  std::vector<double> values(spec.parameter_count(), 0.0);
  const auto segs = spec.registry();
  for (const auto& seg : segs) {
    if (seg.shape.size() != 2) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(seg.shape[1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t k = 0; k < seg.length; ++k) values[seg.offset + k] = dist(rng);
  }
  std::vector<double> variances(values.size(), 1.0);
  return ParameterVector(std::move(values), std::move(variances), segs);
}

template <class T>
BasicTensor<T> convert(const Tensor& t) {
  std::vector<T> v(t.values().begin(), t.values().end());
  return BasicTensor<T>(t.shape(), std::move(v));
}

inline Tensor as_row_matrix(const Tensor& x) {
  return x.rank() == 2 ? x : x.reshaped({x.rows(), x.cols()});
}

/// Records f_theta(x) on `tape`; `x` is an n x d_x node.
template <class T>
NodeId build_forward(BasicTape<T>& tape, const ModelSpec& spec, std::span<const T> theta, NodeId x) {
  if (theta.size() != spec.parameter_count()) {
    throw DimensionError("model expects " + std::to_string(spec.parameter_count()) + " parameters, got " +
                         std::to_string(theta.size()));
  }
  NodeId h = x;
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
    if (tape.value(h).cols() != in) {
      throw DimensionError("layer" + std::to_string(l) + ": expected input width " + std::to_string(in) + ", got " +
                           std::to_string(tape.value(h).cols()));
    }
    std::vector<T> w(theta.begin() + static_cast<std::ptrdiff_t>(off),
                     theta.begin() + static_cast<std::ptrdiff_t>(off + in * out));
    const NodeId wn = tape.parameter(BasicTensor<T>({out, in}, std::move(w)), off);
    off += in * out;
    h = tape.matmul_nt(h, wn);
    if (spec.bias) {
      std::vector<T> b(theta.begin() + static_cast<std::ptrdiff_t>(off),
                       theta.begin() + static_cast<std::ptrdiff_t>(off + out));
      const NodeId bn = tape.parameter(BasicTensor<T>({1, out}, std::move(b)), off);
      off += out;
      h = tape.add_row(h, bn);
    }
    if (l + 1 < spec.num_layers()) {
      if (spec.activation == Activation::relu) h = tape.relu(h);
      if (spec.activation == Activation::tanh) h = tape.tanh(h);
    }
  }
  if (spec.num_layers() == 0 && tape.value(h).cols() != spec.input_dim()) {
    throw DimensionError("identity model: expected input width " + std::to_string(spec.input_dim()));
  }
  return h;
}

/// Records the mean supervised loss of `batch` on `tape`.
template <class T>
NodeId build_loss(BasicTape<T>& tape, const ModelSpec& spec, std::span<const T> theta, const Batch& batch) {
  const NodeId x = tape.constant(convert<T>(batch.features));
  const NodeId out = build_forward(tape, spec, theta, x);
  if (spec.head == Head::softmax_ce) {
    if (!batch.is_classification()) throw DataError("softmax-ce head needs class labels");
    return tape.softmax_cross_entropy(out, batch.classes);
  }
  if (batch.is_classification()) throw DataError("mse head needs real-valued targets");
  const NodeId y = tape.constant(convert<T>(batch.targets));
  return tape.mse(out, y);
}

struct ForwardPass {
  Tape tape;
  NodeId input;
  NodeId output;
};

inline ForwardPass forward(const ModelSpec& spec, const ParameterVector& params, const Tensor& x) {
  ForwardPass fp;
  fp.input = fp.tape.input(as_row_matrix(x));
  fp.output = build_forward<double>(fp.tape, spec, params.values(), fp.input);
  return fp;
}

inline Tensor predict(const ModelSpec& spec, std::span<const double> theta, const Tensor& x) {
  Tape tape;
  const NodeId in = tape.constant(as_row_matrix(x));
  return tape.value(build_forward<double>(tape, spec, theta, in));
}

struct LossPass {
  Tape tape;
  NodeId loss;
  [[nodiscard]] double value() const { return tape.value(loss)[0]; }
};

inline LossPass supervised_loss(const ModelSpec& spec, std::span<const double> theta, const Batch& batch) {
  LossPass lp;
  lp.loss = build_loss<double>(lp.tape, spec, theta, batch);
  return lp;
}

inline LossPass supervised_loss(const ModelSpec& spec, const ParameterVector& params, const Batch& batch) {
  return supervised_loss(spec, params.values(), batch);
}

/// dL/dtheta for a scalar node, flat-indexed; length `count`.
inline Tensor grad_params(const Tape& tape, NodeId loss, std::size_t count) {
  const auto adj = tape.backward(loss);
  return Tensor::vector(tape.parameter_gradient(adj, count));
}

struct LossAndGradient {
  double loss = 0.0;
  Tensor gradient;
};

inline LossAndGradient loss_and_gradient(const ModelSpec& spec, std::span<const double> theta, const Batch& batch) {
  const LossPass lp = supervised_loss(spec, theta, batch);
  return {lp.value(), grad_params(lp.tape, lp.loss, theta.size())};
}

/// Per-row losses; their mean equals the batch loss.
inline std::vector<double> per_sample_losses(const ModelSpec& spec, std::span<const double> theta,
                                             const Batch& batch) {
  const Tensor out = predict(spec, theta, batch.features);
  std::vector<double> losses(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (spec.head == Head::softmax_ce) {
      const std::size_t y = batch.classes.at(i);
      if (y >= out.cols()) throw DataError("label " + std::to_string(y) + " out of range");
      double m = out(i, 0);
      for (std::size_t j = 1; j < out.cols(); ++j) m = std::max(m, out(i, j));
      double denom = 0.0;
      for (std::size_t j = 0; j < out.cols(); ++j) denom += std::exp(out(i, j) - m);
      losses[i] = m + std::log(denom) - out(i, y);
    } else {
      double s = 0.0;
      for (std::size_t j = 0; j < out.cols(); ++j) {
        const double d = out(i, j) - batch.targets(i, j);
        s += d * d;
      }
      losses[i] = s / static_cast<double>(out.cols());
    }
  }
  return losses;
}

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;  // classification only
};

inline EvalMetrics evaluate(const ModelSpec& spec, std::span<const double> theta, const Batch& batch) {
  EvalMetrics m;
  if (batch.size() == 0) return m;
  const auto losses = per_sample_losses(spec, theta, batch);
  for (double l : losses) m.loss += l;
  m.loss /= static_cast<double>(losses.size());
  if (spec.head == Head::softmax_ce) {
    const Tensor out = predict(spec, theta, batch.features);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < out.cols(); ++j)
        if (out(i, j) > out(i, best)) best = j;
      correct += best == batch.classes[i];
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
  }
  return m;
}

inline constexpr std::size_t kMaxDenseJacobianParams = 100000;

struct Jacobians {
  Tensor wrt_input;   // d_y x d_x
  Tensor wrt_params;  // d_y x d_theta
};

/// Both Jacobians at a single input, one backward sweep per output coordinate.
inline Jacobians jacobians(const ModelSpec& spec, std::span<const double> theta, const Tensor& x) {
  if (theta.size() > kMaxDenseJacobianParams) {
    throw CapabilityError("dense Jacobians are limited to " + std::to_string(kMaxDenseJacobianParams) +
                          " parameters; use the loss-gradient estimator");
  }
  if (x.size() != spec.input_dim()) {
    throw DimensionError("layer0: expected a single input of width " + std::to_string(spec.input_dim()) + ", got " +
                         std::to_string(x.size()));
  }
  Tape tape;
  const NodeId in = tape.input(x.reshaped({1, x.size()}));
  const NodeId out = build_forward<double>(tape, spec, theta, in);
  const std::size_t dy = tape.value(out).cols(), dx = x.size(), dt = theta.size();
  Jacobians j{Tensor({dy, dx}), Tensor({dy, dt})};
  for (std::size_t r = 0; r < dy; ++r) {
    Tensor seed({1, dy});
    seed[r] = 1.0;
    const auto adj = tape.backward(out, seed);
    const auto g = tape.parameter_gradient(adj, dt);
    for (std::size_t k = 0; k < dt; ++k) j.wrt_params(r, k) = g[k];
    if (adj.has(in))
      for (std::size_t k = 0; k < dx; ++k) j.wrt_input(r, k) = adj[in][k];
  }
  return j;
}

inline Tensor jacobian_params(const ModelSpec& spec, const ParameterVector& params, const Tensor& x) {
  return jacobians(spec, params.values(), x).wrt_params;
}

inline Tensor jacobian_input(const ModelSpec& spec, const ParameterVector& params, const Tensor& x) {
  return jacobians(spec, params.values(), x).wrt_input;
}

}  // namespace dspreg
