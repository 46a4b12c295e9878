#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dspreg/dual.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  constant,
  input,
  parameter,
  matmul,     // A B
  matmul_nt,  // A B^T
  add,
  add_row,  // A + broadcast of a 1 x n row
  mul,
  relu,
  tanh,
  softmax_ce,  // mean cross-entropy of row-wise softmax, fused
  mse,         // mean squared error over all elements
  scale,
  sum,
};

template <class T>
class BasicTape;

/// Result of one backward sweep: an adjoint per node, present only for
/// nodes reachable from the seeded output.
template <class T>
class Adjoints {
 public:
  [[nodiscard]] bool has(NodeId id) const { return present_[id.index]; }
  [[nodiscard]] const BasicTensor<T>& operator[](NodeId id) const { return grads_[id.index]; }
  /// Number of times each node was processed; always 0 or 1.
  [[nodiscard]] const std::vector<int>& visits() const noexcept { return visits_; }

 private:
  friend class BasicTape<T>;
  std::vector<BasicTensor<T>> grads_;
  std::vector<bool> present_;
  std::vector<int> visits_;
};

/// Append-only record of a single evaluation. Every node's inputs precede it,
/// so a reverse scan over the node list is a valid topological order.
/// Values are rank-2; vectors are stored as 1 x n rows.
template <class T>
class BasicTape {
 public:
  NodeId constant(BasicTensor<T> value) { return leaf(OpKind::constant, std::move(value), 0); }
  NodeId input(BasicTensor<T> value) { return leaf(OpKind::input, std::move(value), 0); }
  /// Leaf bound to flat parameter indices [offset, offset + value.size()).
  NodeId parameter(BasicTensor<T> value, std::size_t offset) {
    return leaf(OpKind::parameter, std::move(value), offset);
  }

  NodeId matmul(NodeId a, NodeId b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.cols() != bv.rows()) mismatch("matmul", av, bv);
    return push(OpKind::matmul, {a, b}, linalg::matmul(av, bv));
  }

  NodeId matmul_nt(NodeId a, NodeId b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.cols() != bv.cols()) mismatch("matmul_nt", av, bv);
    BasicTensor<T> out({av.rows(), bv.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < bv.rows(); ++j) {
        T s{};
        for (std::size_t p = 0; p < av.cols(); ++p) s += av(i, p) * bv(j, p);
        out(i, j) = s;
      }
    return push(OpKind::matmul_nt, {a, b}, std::move(out));
  }

  NodeId add(NodeId a, NodeId b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.shape() != bv.shape()) mismatch("add", av, bv);
    BasicTensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return push(OpKind::add, {a, b}, std::move(out));
  }

  NodeId add_row(NodeId a, NodeId row) {
    const auto& av = value(a);
    const auto& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) mismatch("add_row", av, rv);
    BasicTensor<T> out = av;
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) += rv(0, j);
    return push(OpKind::add_row, {a, row}, std::move(out));
  }

  NodeId mul(NodeId a, NodeId b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.shape() != bv.shape()) mismatch("mul", av, bv);
    BasicTensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return push(OpKind::mul, {a, b}, std::move(out));
  }

  NodeId relu(NodeId a) {
    BasicTensor<T> out = value(a);
    for (auto& v : out.data()) {
      if (value_of(v) == 0.0) nonsmooth_ = true;
      if (!(value_of(v) > 0.0)) v = T{};
    }
    return push(OpKind::relu, {a}, std::move(out));
  }

  NodeId tanh(NodeId a) {
    using std::tanh;
    BasicTensor<T> out = value(a);
    for (auto& v : out.data()) v = tanh(v);
    return push(OpKind::tanh, {a}, std::move(out));
  }

  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
    using std::exp;
    using std::log;
    const auto& z = value(logits);
    const std::size_t n = z.rows(), c = z.cols();
    if (labels.size() != n) {
      throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(n) + " rows");
    }
    BasicTensor<T> probs({n, c});
    T total{};
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] >= c) {
        throw DataError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) +
                        " classes");
      }
      T m = z(i, 0);
      for (std::size_t j = 1; j < c; ++j)
        if (z(i, j) > m) m = z(i, j);
      T denom{};
      for (std::size_t j = 0; j < c; ++j) {
        probs(i, j) = exp(z(i, j) - m);
        denom += probs(i, j);
      }
      for (std::size_t j = 0; j < c; ++j) probs(i, j) = probs(i, j) / denom;
      total += (m + log(denom)) - z(i, labels[i]);
    }
    const NodeId id = push(OpKind::softmax_ce, {logits}, BasicTensor<T>::scalar(total / static_cast<double>(n)));
    nodes_.back().aux = std::move(probs);
    nodes_.back().labels = std::move(labels);
    return id;
  }

  NodeId mse(NodeId prediction, NodeId target) {
    const auto& p = value(prediction);
    const auto& y = value(target);
    if (p.shape() != y.shape()) mismatch("mse", p, y);
    T total{};
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = p[i] - y[i];
      total += d * d;
    }
    return push(OpKind::mse, {prediction, target}, BasicTensor<T>::scalar(total / static_cast<double>(p.size())));
  }

  NodeId scale(NodeId a, double s) {
    BasicTensor<T> out = value(a);
    for (auto& v : out.data()) v = v * s;
    const NodeId id = push(OpKind::scale, {a}, std::move(out));
    nodes_.back().factor = s;
    return id;
  }

  NodeId sum(NodeId a) {
    T s{};
    for (const auto& v : value(a).data()) s += v;
    return push(OpKind::sum, {a}, BasicTensor<T>::scalar(s));
  }

  [[nodiscard]] const BasicTensor<T>& value(NodeId id) const {
    if (id.index >= nodes_.size()) throw ContractError("tape: unknown node " + std::to_string(id.index));
    return nodes_[id.index].value;
  }
  [[nodiscard]] OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] std::vector<NodeId> inputs(NodeId id) const {
    const auto& n = nodes_.at(id.index);
    return {n.inputs.begin(), n.inputs.begin() + n.arity};
  }
  /// True when some ReLU was evaluated exactly at zero, where the loss is
  /// not twice differentiable.
  [[nodiscard]] bool nonsmooth() const noexcept { return nonsmooth_; }

  /// Backward sweep from a scalar node with seed 1.
  [[nodiscard]] Adjoints<T> backward(NodeId output) const {
    const auto& v = value(output);
    if (v.size() != 1) {
      throw ContractError("backward: output node has shape " + shape_string(v.shape()) + ", expected a scalar");
    }
    return backward(output, BasicTensor<T>({v.rows(), v.cols()}, T{1}));
  }

  /// Backward sweep with an arbitrary seed (vector-Jacobian product).
  [[nodiscard]] Adjoints<T> backward(NodeId output, BasicTensor<T> seed) const {
    const auto& v = value(output);
    if (seed.size() != v.size()) throw DimensionError("backward: seed does not match output shape");
    Adjoints<T> adj;
    adj.grads_.resize(nodes_.size());
    adj.present_.assign(nodes_.size(), false);
    adj.visits_.assign(nodes_.size(), 0);
    adj.grads_[output.index] = seed.reshaped(v.shape());
    adj.present_[output.index] = true;

    for (std::size_t i = output.index + 1; i-- > 0;) {
      if (!adj.present_[i]) continue;
      ++adj.visits_[i];
      const Node& node = nodes_[i];
      const BasicTensor<T>& g = adj.grads_[i];
      switch (node.kind) {
        case OpKind::constant:
        case OpKind::input:
        case OpKind::parameter:
          break;
        case OpKind::matmul: {
          const auto& a = value(node.inputs[0]);
          const auto& b = value(node.inputs[1]);
          accumulate(adj, node.inputs[0], linalg::matmul(g, linalg::transpose(b)));
          accumulate(adj, node.inputs[1], linalg::matmul(linalg::transpose(a), g));
          break;
        }
        case OpKind::matmul_nt: {
          const auto& a = value(node.inputs[0]);
          const auto& b = value(node.inputs[1]);
          accumulate(adj, node.inputs[0], linalg::matmul(g, b));
          accumulate(adj, node.inputs[1], linalg::matmul(linalg::transpose(g), a));
          break;
        }
        case OpKind::add:
          accumulate(adj, node.inputs[0], g);
          accumulate(adj, node.inputs[1], g);
          break;
        case OpKind::add_row: {
          accumulate(adj, node.inputs[0], g);
          BasicTensor<T> r({1, g.cols()});
          for (std::size_t p = 0; p < g.rows(); ++p)
            for (std::size_t q = 0; q < g.cols(); ++q) r(0, q) += g(p, q);
          accumulate(adj, node.inputs[1], std::move(r));
          break;
        }
        case OpKind::mul: {
          const auto& a = value(node.inputs[0]);
          const auto& b = value(node.inputs[1]);
          BasicTensor<T> ga = g, gb = g;
          for (std::size_t k = 0; k < g.size(); ++k) {
            ga[k] *= b[k];
            gb[k] *= a[k];
          }
          accumulate(adj, node.inputs[0], std::move(ga));
          accumulate(adj, node.inputs[1], std::move(gb));
          break;
        }
        case OpKind::relu: {
          const auto& x = value(node.inputs[0]);
          BasicTensor<T> gx = g;
          for (std::size_t k = 0; k < gx.size(); ++k)
            if (!(value_of(x[k]) > 0.0)) gx[k] = T{};
          accumulate(adj, node.inputs[0], std::move(gx));
          break;
        }
        case OpKind::tanh: {
          BasicTensor<T> gx = g;
          for (std::size_t k = 0; k < gx.size(); ++k) gx[k] *= T{1} - node.value[k] * node.value[k];
          accumulate(adj, node.inputs[0], std::move(gx));
          break;
        }
        case OpKind::softmax_ce: {
          BasicTensor<T> gz = node.aux;
          const std::size_t n = gz.rows();
          for (std::size_t r = 0; r < n; ++r) gz(r, node.labels[r]) -= T{1};
          const T w = g[0] / static_cast<double>(n);
          for (auto& e : gz.data()) e *= w;
          accumulate(adj, node.inputs[0], std::move(gz));
          break;
        }
        case OpKind::mse: {
          const auto& p = value(node.inputs[0]);
          const auto& y = value(node.inputs[1]);
          const T w = g[0] * (2.0 / static_cast<double>(p.size()));
          BasicTensor<T> gp(p.shape()), gy(p.shape());
          for (std::size_t k = 0; k < p.size(); ++k) {
            gp[k] = (p[k] - y[k]) * w;
            gy[k] = -gp[k];
          }
          accumulate(adj, node.inputs[0], std::move(gp));
          accumulate(adj, node.inputs[1], std::move(gy));
          break;
        }
        case OpKind::scale: {
          BasicTensor<T> gx = g;
          for (auto& e : gx.data()) e = e * node.factor;
          accumulate(adj, node.inputs[0], std::move(gx));
          break;
        }
        case OpKind::sum: {
          const auto& x = value(node.inputs[0]);
          accumulate(adj, node.inputs[0], BasicTensor<T>(x.shape(), g[0]));
          break;
        }
      }
    }
    return adj;
  }

  /// Scatters parameter-leaf adjoints into a flat vector of length `count`.
  [[nodiscard]] std::vector<T> parameter_gradient(const Adjoints<T>& adj, std::size_t count) const {
    std::vector<T> out(count);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& node = nodes_[i];
      if (node.kind != OpKind::parameter || !adj.present_[i]) continue;
      if (node.offset + node.value.size() > count) {
        throw DimensionError("parameter leaf exceeds gradient length " + std::to_string(count));
      }
      for (std::size_t k = 0; k < node.value.size(); ++k) out[node.offset + k] += adj.grads_[i][k];
    }
    return out;
  }

 private:
  struct Node {
    OpKind kind;
    std::array<NodeId, 2> inputs{};
    int arity = 0;
    BasicTensor<T> value;
    BasicTensor<T> aux;
    std::vector<std::size_t> labels;
    std::size_t offset = 0;
    double factor = 1.0;
  };

  NodeId leaf(OpKind kind, BasicTensor<T> value, std::size_t offset) {
    if (value.rank() != 2) value = value.reshaped({value.rows(), value.cols()});
    Node n{kind, {}, 0, std::move(value), {}, {}, offset, 1.0};
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  NodeId push(OpKind kind, std::initializer_list<NodeId> in, BasicTensor<T> value) {
    Node n{kind, {}, static_cast<int>(in.size()), std::move(value), {}, {}, 0, 1.0};
    std::copy(in.begin(), in.end(), n.inputs.begin());
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  static void accumulate(Adjoints<T>& adj, NodeId target, BasicTensor<T> g) {
    const std::size_t i = target.index;
    if (!adj.present_[i]) {
      adj.grads_[i] = std::move(g);
      adj.present_[i] = true;
      return;
    }
    auto& acc = adj.grads_[i];
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
  }

  [[noreturn]] static void mismatch(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }

  std::vector<Node> nodes_;
  bool nonsmooth_ = false;
};

using Tape = BasicTape<double>;
using DualTape = BasicTape<Dual<double>>;

}  // namespace dspreg
