#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dspreg/batch.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/sensitivity.hpp"
#include "dspreg/tensor.hpp"

namespace dspreg {

struct DomainDataset {
  std::string id;
  Batch data;

  [[nodiscard]] std::size_t size() const { return data.size(); }
};

enum class LabelKind { classification, regression };

/// Multi-domain data with a known invariant/spurious split. Columns are
/// [invariant block | spurious block]. The invariant block is N(0, I) in every
/// domain; the spurious block of domain d is scale_d * R_d z with z ~ N(0, I)
/// and R_d orthogonal (identity when the rotation seed is 0). Labels depend on
/// the invariant block only, except that `leak[d] * code(label)` is added to
/// the first spurious coordinate.
struct SyntheticSpec {
  std::size_t num_domains = 3;
  std::size_t samples_per_domain = 1000;
  std::size_t invariant_dim = 2;
  std::size_t spurious_dim = 2;
  std::vector<double> spurious_scales{1.0, 2.0, 4.0};
  std::vector<std::uint64_t> rotation_seeds;  // empty: no rotations
  std::vector<double> leak;                   // empty: no leakage
  std::size_t num_classes = 2;                // 0 selects a regression target
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t feature_dim() const { return invariant_dim + spurious_dim; }
  [[nodiscard]] LabelKind label_kind() const {
    return num_classes == 0 ? LabelKind::regression : LabelKind::classification;
  }

  void validate() const {
    if (num_domains < 2) throw ProtocolError("synthetic spec needs at least two domains");
    if (samples_per_domain < 1) throw DataError("samples_per_domain must be at least 1");
    if (invariant_dim < 1 || spurious_dim < 1) throw DataError("feature blocks must have dimension >= 1");
    if (spurious_scales.size() != num_domains) throw DataError("need one spurious scale per domain");
    for (double s : spurious_scales)
      if (!(s > 0.0)) throw DataError("spurious scales must be positive");
    if (!rotation_seeds.empty() && rotation_seeds.size() != num_domains) {
      throw DataError("need one rotation seed per domain");
    }
    if (!leak.empty() && leak.size() != num_domains) throw DataError("need one leak coefficient per domain");
    if (num_classes == 1) throw DataError("classification needs at least two classes");
    if (label_noise < 0.0) throw DataError("label noise must be nonnegative");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"num_domains", s.num_domains},
                     {"samples_per_domain", s.samples_per_domain},
                     {"invariant_dim", s.invariant_dim},
                     {"spurious_dim", s.spurious_dim},
                     {"spurious_scales", s.spurious_scales},
                     {"rotation_seeds", s.rotation_seeds},
                     {"leak", s.leak},
                     {"num_classes", s.num_classes},
                     {"label_noise", s.label_noise},
                     {"seed", s.seed}};
}

namespace detail {

inline Tensor random_orthogonal(std::size_t n, std::uint64_t seed) {
  Tensor q = Tensor::identity(n);
  if (seed == 0) return q;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  for (auto& v : q.data()) v = nd(rng);
  // Gram-Schmidt on rows.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < i; ++p) {
      double d = 0.0;
      for (std::size_t j = 0; j < n; ++j) d += q(i, j) * q(p, j);
      for (std::size_t j = 0; j < n; ++j) q(i, j) -= d * q(p, j);
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < n; ++j) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < n; ++j) q(i, j) /= norm;
  }
  return q;
}

}  // namespace detail

/// Label map drawn from the master seed: rows are classes (or a single row
/// for regression), columns are invariant coordinates.
inline Tensor label_map(const SyntheticSpec& spec) {
  std::seed_seq seq{spec.seed, std::uint64_t{0x1abe1}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> nd;
  const std::size_t rows = spec.num_classes == 0 ? 1 : spec.num_classes;
  Tensor w({rows, spec.invariant_dim});
  for (auto& v : w.data()) v = nd(rng);
  if (spec.num_classes == 0) {
    // Unit-norm regression map so the target has unit variance before noise.
    double n = 0.0;
    for (double v : w.data()) n += v * v;
    for (auto& v : w.data()) v /= std::sqrt(n);
  }
  return w;
}

inline std::vector<DomainDataset> generate(const SyntheticSpec& spec) {
  spec.validate();
  const Tensor w = label_map(spec);
  const std::size_t di = spec.invariant_dim, ds = spec.spurious_dim, n = spec.samples_per_domain;
  std::vector<DomainDataset> out;
  for (std::size_t d = 0; d < spec.num_domains; ++d) {
    std::seed_seq seq{spec.seed, static_cast<std::uint64_t>(d), std::uint64_t{0xd0}};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> nd;
    const Tensor rot = detail::random_orthogonal(ds, spec.rotation_seeds.empty() ? 0 : spec.rotation_seeds[d]);
    const double scale = spec.spurious_scales[d];
    const double alpha = spec.leak.empty() ? 0.0 : spec.leak[d];

    DomainDataset dom;
    dom.id = "d" + std::to_string(d);
    dom.data.features = Tensor({n, di + ds});
    if (spec.num_classes == 0) dom.data.targets = Tensor({n, 1});
    std::vector<double> z(ds);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < di; ++j) dom.data.features(i, j) = nd(rng);
      for (double& v : z) v = nd(rng);
      for (std::size_t j = 0; j < ds; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < ds; ++p) s += rot(j, p) * z[p];
        dom.data.features(i, di + j) = scale * s;
      }
      double code = 0.0;
      if (spec.num_classes == 0) {
        double y = 0.0;
        for (std::size_t j = 0; j < di; ++j) y += w(0, j) * dom.data.features(i, j);
        y += spec.label_noise * nd(rng);
        dom.data.targets(i, 0) = y;
        code = y;
      } else {
        std::size_t best = 0;
        double best_score = -1e300;
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
          double sc = 0.0;
          for (std::size_t j = 0; j < di; ++j) sc += w(c, j) * dom.data.features(i, j);
          sc += spec.label_noise * nd(rng);
          if (sc > best_score) {
            best_score = sc;
            best = c;
          }
        }
        dom.data.classes.push_back(best);
        code = 2.0 * static_cast<double>(best) / static_cast<double>(spec.num_classes - 1) - 1.0;
      }
      dom.data.features(i, di) += alpha * code;
    }
    out.push_back(std::move(dom));
  }
  return out;
}

struct LodoSplit {
  std::vector<std::size_t> train;
  std::size_t held_out = 0;
};

/// Split i holds out domain i and trains on the others, in index order.
inline std::vector<LodoSplit> lodo_splits(std::size_t num_domains) {
  if (num_domains < 2) throw ProtocolError("leave-one-domain-out needs at least two domains");
  std::vector<LodoSplit> splits;
  for (std::size_t h = 0; h < num_domains; ++h) {
    LodoSplit s;
    s.held_out = h;
    for (std::size_t d = 0; d < num_domains; ++d)
      if (d != h) s.train.push_back(d);
    splits.push_back(std::move(s));
  }
  return splits;
}

inline std::vector<LodoSplit> lodo_splits(const std::vector<DomainDataset>& domains) {
  return lodo_splits(domains.size());
}

/// Header `domain,label,f0,...`; one row per sample, 17 significant digits.
inline void write_csv(const DomainDataset& dom, std::ostream& os) {
  const std::size_t d = dom.data.input_dim();
  os << "domain,label";
  for (std::size_t j = 0; j < d; ++j) os << ",f" << j;
  os << '\n';
  for (std::size_t i = 0; i < dom.size(); ++i) {
    os << dom.id << ',';
    if (dom.data.is_classification()) {
      os << dom.data.classes[i];
    } else {
      os << format_double(dom.data.targets(i, 0));
    }
    for (std::size_t j = 0; j < d; ++j) os << ',' << format_double(dom.data.features(i, j));
    os << '\n';
  }
}

inline void write_csv(const DomainDataset& dom, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  write_csv(dom, os);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_number(const std::string& cell, const std::string& where, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    throw ParseError(where, line, "non-numeric value '" + cell + "'");
  }
  if (used != cell.size() || !std::isfinite(v)) throw ParseError(where, line, "non-numeric value '" + cell + "'");
  return v;
}

}  // namespace detail

/// Reads a CSV and returns one dataset per distinct domain value, in order of
/// first appearance.
inline std::vector<DomainDataset> load_csv(std::istream& is, LabelKind kind, const std::string& where = "<csv>") {
  std::string line;
  if (!std::getline(is, line)) throw ParseError(where, 1, "missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "domain" || header[1] != "label") {
    throw ParseError(where, 1, "header must be domain,label,f0,...");
  }
  for (std::size_t j = 2; j < header.size(); ++j)
    if (header[j] != "f" + std::to_string(j - 2)) throw ParseError(where, 1, "unexpected column '" + header[j] + "'");
  const std::size_t d = header.size() - 2;

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::vector<double>>> rows;
  std::map<std::string, std::vector<double>> labels;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError(where, lineno,
                       "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    const std::string& dom = cells[0];
    if (!rows.count(dom)) order.push_back(dom);
    const double label = detail::parse_number(cells[1], where, lineno);
    if (kind == LabelKind::classification && (label < 0.0 || label != std::floor(label))) {
      throw ParseError(where, lineno, "class label must be a nonnegative integer");
    }
    std::vector<double> f(d);
    for (std::size_t j = 0; j < d; ++j) f[j] = detail::parse_number(cells[j + 2], where, lineno);
    rows[dom].push_back(std::move(f));
    labels[dom].push_back(label);
  }
  if (order.empty()) throw ParseError(where, lineno, "no data rows");

  std::vector<DomainDataset> out;
  for (const auto& id : order) {
    const auto& r = rows[id];
    DomainDataset dom;
    dom.id = id;
    dom.data.features = Tensor({r.size(), d});
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dom.data.features(i, j) = r[i][j];
    if (kind == LabelKind::classification) {
      for (double l : labels[id]) dom.data.classes.push_back(static_cast<std::size_t>(l));
    } else {
      dom.data.targets = Tensor({r.size(), 1}, labels[id]);
    }
    out.push_back(std::move(dom));
  }
  return out;
}

inline std::vector<DomainDataset> load_csv(const std::filesystem::path& path, LabelKind kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return load_csv(is, kind, path.string());
}

/// Writes domain_<id>.csv per domain plus manifest.json; returns the files.
inline std::vector<std::filesystem::path> write_dataset(const SyntheticSpec& spec,
                                                        const std::vector<DomainDataset>& domains,
                                                        const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> files;
  nlohmann::json manifest;
  manifest["spec"] = spec;
  manifest["seed"] = spec.seed;
  manifest["label_kind"] = spec.num_classes == 0 ? "regression" : "classification";
  manifest["label_map"] = label_map(spec).values();
  for (const auto& dom : domains) {
    const auto path = dir / ("domain_" + dom.id + ".csv");
    write_csv(dom, path);
    files.push_back(path);
    manifest["files"].push_back(path.filename().string());
  }
  const auto mpath = dir / "manifest.json";
  std::ofstream os(mpath, std::ios::binary);
  if (!os) throw Error("cannot write " + mpath.string());
  os << manifest.dump(2) << '\n';
  files.push_back(mpath);
  return files;
}

}  // namespace dspreg
