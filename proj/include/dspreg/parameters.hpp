#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dspreg/errors.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

/// Named contiguous slice of the flat parameter vector.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  Shape shape;  // logical shape of the slice, e.g. {out, in} for a weight

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct ParameterLocation {
  std::size_t segment = 0;
  std::size_t local_index = 0;
};

/// Flat parameters theta, their variances Var(theta_k), and the segment registry.
class ParameterVector {
 public:
  ParameterVector() = default;

  ParameterVector(std::vector<double> values, std::vector<double> variances, std::vector<Segment> registry)
      : values_(std::move(values)), variances_(std::move(variances)), registry_(std::move(registry)) {
    validate();
  }

  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
  [[nodiscard]] std::span<double> values() noexcept { return values_; }
  [[nodiscard]] std::span<const double> variances() const noexcept { return variances_; }
  [[nodiscard]] const std::vector<Segment>& registry() const noexcept { return registry_; }

  void set_values(std::vector<double> v) {
    if (v.size() != values_.size()) throw DimensionError("set_values: length mismatch");
    values_ = std::move(v);
  }

  void set_variances(std::vector<double> v) {
    if (v.size() != values_.size()) throw DimensionError("set_variances: length mismatch");
    for (double x : v)
      if (!(x >= 0.0)) throw DataError("parameter variances must be nonnegative");
    variances_ = std::move(v);
  }

  [[nodiscard]] ParameterLocation locate(std::size_t k) const {
    for (std::size_t s = 0; s < registry_.size(); ++s) {
      const auto& seg = registry_[s];
      if (k >= seg.offset && k < seg.offset + seg.length) return {s, k - seg.offset};
    }
    throw DimensionError("parameter index " + std::to_string(k) + " out of range");
  }

  [[nodiscard]] const Segment& segment(const std::string& name) const {
    for (const auto& s : registry_)
      if (s.name == name) return s;
    throw DimensionError("no parameter segment named '" + name + "'");
  }

 private:
  void validate() const {
    if (variances_.size() != values_.size()) throw DimensionError("variances length differs from values");
    std::size_t expected = 0;
    for (const auto& s : registry_) {
      if (s.offset != expected) throw DimensionError("segment '" + s.name + "' is not contiguous");
      if (shape_size(s.shape) != s.length) throw DimensionError("segment '" + s.name + "' shape/length mismatch");
      expected += s.length;
    }
    if (expected != values_.size()) throw DimensionError("registry does not cover the parameter vector");
    for (double x : variances_)
      if (!(x >= 0.0)) throw DataError("parameter variances must be nonnegative");
  }

  std::vector<double> values_;
  std::vector<double> variances_;
  std::vector<Segment> registry_;
};

}  // namespace dspreg
