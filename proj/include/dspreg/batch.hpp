#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dspreg/errors.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

/// Features with either class labels or real-valued targets.
struct Batch {
  Tensor features;                    // n x d_x
  std::vector<std::size_t> classes;   // classification labels, one per row
  Tensor targets;                     // n x d_y regression targets

  [[nodiscard]] std::size_t size() const noexcept { return features.rank() == 2 ? features.rows() : 0; }
  [[nodiscard]] std::size_t input_dim() const noexcept { return features.cols(); }
  [[nodiscard]] bool is_classification() const noexcept { return targets.empty(); }

  [[nodiscard]] Batch subset(std::span<const std::size_t> rows) const {
    const std::size_t d = features.cols();
    Batch out;
    out.features = Tensor({rows.size(), d});
    if (!is_classification()) out.targets = Tensor({rows.size(), targets.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t r = rows[i];
      if (r >= size()) throw DimensionError("batch row index out of range");
      for (std::size_t j = 0; j < d; ++j) out.features(i, j) = features(r, j);
      if (is_classification()) {
        out.classes.push_back(classes[r]);
      } else {
        for (std::size_t j = 0; j < targets.cols(); ++j) out.targets(i, j) = targets(r, j);
      }
    }
    return out;
  }

  [[nodiscard]] Batch sample(std::size_t r) const {
    const std::size_t idx[1] = {r};
    return subset(idx);
  }

  /// Row-wise concatenation; all parts must share feature and label layout.
  static Batch concat(std::span<const Batch* const> parts) {
    Batch out;
    if (parts.empty()) return out;
    const std::size_t d = parts.front()->input_dim();
    const bool cls = parts.front()->is_classification();
    const std::size_t dy = cls ? 0 : parts.front()->targets.cols();
    std::size_t n = 0;
    for (const Batch* p : parts) {
      if (p->input_dim() != d || p->is_classification() != cls) throw DimensionError("concat: incompatible batches");
      n += p->size();
    }
    out.features = Tensor({n, d});
    if (!cls) out.targets = Tensor({n, dy});
    std::size_t row = 0;
    for (const Batch* p : parts) {
      for (std::size_t i = 0; i < p->size(); ++i, ++row) {
        for (std::size_t j = 0; j < d; ++j) out.features(row, j) = p->features(i, j);
        if (cls) {
          out.classes.push_back(p->classes[i]);
        } else {
          for (std::size_t j = 0; j < dy; ++j) out.targets(row, j) = p->targets(i, j);
        }
      }
    }
    return out;
  }
};

}  // namespace dspreg
