#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dspreg/domain_data.hpp"
#include "dspreg/errors.hpp"
#include "dspreg/experiments.hpp"
#include "dspreg/model.hpp"
#include "dspreg/sensitivity.hpp"
#include "dspreg/trainer.hpp"
#include "dspreg/validation.hpp"

namespace dspreg {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

struct ExperimentConfig {
  // [dataset]
  std::string source = "synthetic";  // synthetic | csv
  SyntheticSpec synthetic;
  std::optional<double> shortcut_alpha;  // leak on sources only, per split
  std::vector<fs::path> csv_paths;
  LabelKind csv_labels = LabelKind::classification;
  // [model]
  std::vector<std::size_t> hidden;
  Activation activation = Activation::tanh;
  std::optional<Head> head;
  std::uint64_t init_seed = 0;
  bool bias = true;
  std::optional<double> noise_std;
  // [train]
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  bool tune_lambda = false;
  std::vector<double> lambda_grid = default_lambda_grid();
  // [output]
  std::optional<fs::path> out_dir;  // unset: DSPREG_OUT, then ./runs
  // [validate]
  ValidateOptions validate;
};

namespace config_detail {

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (is.fail() || !(is >> std::ws).eof()) throw DataError("config key " + key + ": cannot parse '" + text + "'");
  return v;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw DataError("config key " + key + ": expected a boolean, got '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_value<T>(key, item));
  return out;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(pt::ptree::path_type(key, '.'));
    if (!v) return std::nullopt;
    used_.push_back(key);
    return *v;
  }

  template <class T>
  void get(const std::string& key, T& into) const {
    if (auto v = raw(key)) into = parse_value<T>(key, *v);
  }

  template <class T>
  void list(const std::string& key, std::vector<T>& into) const {
    if (auto v = raw(key)) into = parse_list<T>(key, *v);
  }

  template <class F>
  void with(const std::string& key, F&& f) const {
    if (auto v = raw(key)) f(*v);
  }

  /// Keys present in the file that no field consumed.
  [[nodiscard]] std::vector<std::string> unknown() const {
    std::vector<std::string> out;
    for (const auto& [section, body] : tree_) {
      for (const auto& [k, _] : body) {
        const std::string full = section + "." + k;
        if (std::find(used_.begin(), used_.end(), full) == used_.end()) out.push_back(full);
      }
    }
    return out;
  }

 private:
  const pt::ptree& tree_;
  mutable std::vector<std::string> used_;
};

}  // namespace config_detail

inline ExperimentConfig parse_config(const pt::ptree& tree) {
  using namespace config_detail;
  ExperimentConfig c;
  const Reader r(tree);

  r.get("dataset.source", c.source);
  auto& s = c.synthetic;
  r.get("dataset.num_domains", s.num_domains);
  r.get("dataset.samples_per_domain", s.samples_per_domain);
  r.get("dataset.invariant_dim", s.invariant_dim);
  r.get("dataset.spurious_dim", s.spurious_dim);
  r.list("dataset.spurious_scales", s.spurious_scales);
  r.list("dataset.rotation_seeds", s.rotation_seeds);
  r.list("dataset.leak", s.leak);
  r.with("dataset.shortcut_alpha", [&](const std::string& v) {
    if (!split_list(v).empty()) c.shortcut_alpha = parse_value<double>("dataset.shortcut_alpha", v);
  });
  r.get("dataset.num_classes", s.num_classes);
  r.get("dataset.label_noise", s.label_noise);
  r.get("dataset.seed", s.seed);
  r.with("dataset.csv_paths", [&](const std::string& v) {
    c.csv_paths.clear();
    for (const auto& p : split_list(v)) c.csv_paths.emplace_back(p);
  });
  r.with("dataset.label_kind", [&](const std::string& v) {
    if (v == "classification") c.csv_labels = LabelKind::classification;
    else if (v == "regression") c.csv_labels = LabelKind::regression;
    else throw DataError("dataset.label_kind must be classification or regression");
  });

  r.list("model.hidden", c.hidden);
  r.with("model.activation", [&](const std::string& v) { c.activation = parse_activation(v); });
  r.with("model.head", [&](const std::string& v) {
    if (!v.empty()) c.head = parse_head(v);
  });
  r.get("model.init_seed", c.init_seed);
  r.get("model.bias", c.bias);
  r.with("model.noise_std", [&](const std::string& v) {
    if (!v.empty()) c.noise_std = parse_value<double>("model.noise_std", v);
  });

  auto& t = c.train;
  r.get("train.lambda", t.lambda);
  r.get("train.t_update", t.t_update);
  r.with("train.unit", [&](const std::string& v) { t.unit = parse_update_unit(v); });
  r.get("train.learning_rate", t.learning_rate);
  r.get("train.epochs", t.epochs);
  r.get("train.batch_size", t.batch_size);
  r.with("train.coefficients", [&](const std::string& v) { t.coefficients = parse_coefficient_mode(v); });
  r.with("train.estimator", [&](const std::string& v) { t.estimator = parse_estimator(v); });
  r.with("train.reg_grad", [&](const std::string& v) { t.reg_grad = parse_reg_grad_mode(v); });
  r.with("train.optimizer", [&](const std::string& v) { t.optimizer = parse_optimizer(v); });
  r.with("train.variances", [&](const std::string& v) { t.variances = parse_variance_mode(v); });
  r.get("train.variance_window", t.variance_window);
  r.get("train.validation_fraction", t.validation_fraction);
  r.get("train.sensitivity_batch", t.sensitivity_batch);
  r.get("train.cv_epsilon", t.cv_epsilon);
  r.get("train.trace_steps", t.trace_steps);
  r.list("train.seeds", c.seeds);
  r.get("train.tune_lambda", c.tune_lambda);
  r.list("train.lambda_grid", c.lambda_grid);

  r.with("output.dir", [&](const std::string& v) {
    if (!v.empty()) c.out_dir = v;
  });

  auto& v = c.validate;
  r.with("validate.checks", [&](const std::string& x) { v.checks = split_list(x); });
  r.get("validate.gradient_trials", v.gradient_trials);
  r.get("validate.mc_models", v.mc_models);
  r.get("validate.mc_samples", v.mc_samples);
  r.get("validate.mc_scale", v.mc_scale);
  r.get("validate.decomposition_cases", v.decomposition_cases);
  r.get("validate.sensitivity_top", v.sensitivity_top);
  r.get("validate.sensitivity_draws_per_row", v.sensitivity_draws_per_row);
  r.get("validate.fisher_models", v.fisher_models);
  r.get("validate.lemma_samples", v.lemma_samples);
  r.get("validate.lemma_seeds", v.lemma_seeds);
  r.get("validate.contamination_trials", v.contamination_trials);
  r.get("validate.seed", v.seed);
  r.with("validate.fault", [&](const std::string& x) { v.fault = parse_fault(x); });

  if (const auto unknown = r.unknown(); !unknown.empty()) throw DataError("unknown config key " + unknown.front());
  return c;
}

/// Throws when the resolved configuration cannot be run.
inline void check_config(const ExperimentConfig& c) {
  if (c.source != "synthetic" && c.source != "csv") throw DataError("dataset.source must be synthetic or csv");
  if (c.source == "synthetic") c.synthetic.validate();
  if (c.source == "csv") {
    if (c.csv_paths.empty()) throw DataError("dataset.csv_paths is empty");
    for (const auto& p : c.csv_paths)
      if (!fs::exists(p)) throw DataError("dataset file " + p.string() + " does not exist");
  }
  if (c.seeds.empty()) throw DataError("train.seeds is empty");
  if (c.lambda_grid.empty()) throw DataError("train.lambda_grid is empty");
  for (const auto& name : c.validate.checks)
    if (std::find(validation_check_names().begin(), validation_check_names().end(), name) ==
        validation_check_names().end()) {
      throw DataError("unknown validation check '" + name + "'");
    }
  c.train.validate();
}

inline pt::ptree to_ptree(const ExperimentConfig& c) {
  using config_detail::join;
  pt::ptree t;
  auto put = [&](const std::string& key, const std::string& value) {
    t.put(pt::ptree::path_type(key, '.'), value);
  };
  auto num = [](auto v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  const auto& s = c.synthetic;
  put("dataset.source", c.source);
  put("dataset.num_domains", num(s.num_domains));
  put("dataset.samples_per_domain", num(s.samples_per_domain));
  put("dataset.invariant_dim", num(s.invariant_dim));
  put("dataset.spurious_dim", num(s.spurious_dim));
  put("dataset.spurious_scales", join(s.spurious_scales));
  put("dataset.rotation_seeds", join(s.rotation_seeds));
  put("dataset.leak", join(s.leak));
  put("dataset.shortcut_alpha", c.shortcut_alpha ? num(*c.shortcut_alpha) : "");
  put("dataset.num_classes", num(s.num_classes));
  put("dataset.label_noise", num(s.label_noise));
  put("dataset.seed", num(s.seed));
  std::vector<std::string> paths;
  for (const auto& p : c.csv_paths) paths.push_back(p.string());
  put("dataset.csv_paths", join(paths));
  put("dataset.label_kind", c.csv_labels == LabelKind::classification ? "classification" : "regression");

  put("model.hidden", join(c.hidden));
  put("model.activation", to_string(c.activation));
  put("model.head", c.head ? to_string(*c.head) : "");
  put("model.init_seed", num(c.init_seed));
  put("model.bias", c.bias ? "true" : "false");
  put("model.noise_std", c.noise_std ? num(*c.noise_std) : "");

  const auto& tr = c.train;
  put("train.lambda", num(tr.lambda));
  put("train.t_update", num(tr.t_update));
  put("train.unit", to_string(tr.unit));
  put("train.learning_rate", num(tr.learning_rate));
  put("train.epochs", num(tr.epochs));
  put("train.batch_size", num(tr.batch_size));
  put("train.coefficients", to_string(tr.coefficients));
  put("train.estimator", to_string(tr.estimator));
  put("train.reg_grad", to_string(tr.reg_grad));
  put("train.optimizer", to_string(tr.optimizer));
  put("train.variances", to_string(tr.variances));
  put("train.variance_window", num(tr.variance_window));
  put("train.validation_fraction", num(tr.validation_fraction));
  put("train.sensitivity_batch", num(tr.sensitivity_batch));
  put("train.cv_epsilon", num(tr.cv_epsilon));
  put("train.trace_steps", tr.trace_steps ? "true" : "false");
  put("train.seeds", join(c.seeds));
  put("train.tune_lambda", c.tune_lambda ? "true" : "false");
  put("train.lambda_grid", join(c.lambda_grid));

  put("output.dir", c.out_dir ? c.out_dir->string() : "");

  const auto& v = c.validate;
  put("validate.checks", join(v.checks));
  put("validate.gradient_trials", num(v.gradient_trials));
  put("validate.mc_models", num(v.mc_models));
  put("validate.mc_samples", num(v.mc_samples));
  put("validate.mc_scale", num(v.mc_scale));
  put("validate.decomposition_cases", num(v.decomposition_cases));
  put("validate.sensitivity_top", num(v.sensitivity_top));
  put("validate.sensitivity_draws_per_row", num(v.sensitivity_draws_per_row));
  put("validate.fisher_models", num(v.fisher_models));
  put("validate.lemma_samples", num(v.lemma_samples));
  put("validate.lemma_seeds", num(v.lemma_seeds));
  put("validate.contamination_trials", num(v.contamination_trials));
  put("validate.seed", num(v.seed));
  put("validate.fault", to_string(v.fault));
  return t;
}

/// Reads an INI file and applies `section.key=value` overrides on top.
inline ExperimentConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides = {}) {
  pt::ptree tree;
  if (path) {
    if (!fs::exists(*path)) throw DataError("config file " + path->string() + " does not exist");
    try {
      pt::read_ini(path->string(), tree);
    } catch (const pt::ini_parser_error& e) {
      throw ParseError(path->string(), e.line(), e.message());
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ProtocolError("override '" + o + "' is not of the form section.key=value");
    }
    tree.put(pt::ptree::path_type(o.substr(0, eq), '.'), o.substr(eq + 1));
  }
  return parse_config(tree);
}

inline void write_config(const ExperimentConfig& c, const fs::path& path) {
  pt::write_ini(path.string(), to_ptree(c));
}

/// Model spec sized for the data: input width, hidden layers, then one unit
/// per class (or per regression target).
inline ModelSpec resolve_model(const ExperimentConfig& c, const std::vector<DomainDataset>& domains) {
  if (domains.empty()) throw DataError("no domains to size the model from");
  const Batch& first = domains.front().data;
  ModelSpec m;
  m.layer_sizes = {first.input_dim()};
  for (std::size_t h : c.hidden) m.layer_sizes.push_back(h);
  std::size_t out = 1;
  if (first.is_classification()) {
    std::size_t top = 0;
    for (const auto& d : domains)
      for (std::size_t y : d.data.classes) top = std::max(top, y);
    out = std::max<std::size_t>(2, top + 1);
  } else {
    out = first.targets.cols();
  }
  m.layer_sizes.push_back(out);
  m.activation = c.activation;
  m.head = c.head.value_or(first.is_classification() ? Head::softmax_ce : Head::mse);
  m.init_seed = c.init_seed;
  m.bias = c.bias;
  m.noise_std = c.noise_std;
  m.validate();
  return m;
}

/// Domains for one run seed and LODO split. Synthetic data is regenerated with
/// dataset.seed + seed; with shortcut_alpha set the held-out domain loses its
/// leak.
inline std::vector<DomainDataset> load_domains(const ExperimentConfig& c, std::uint64_t seed, std::size_t split) {
  if (c.source == "csv") {
    std::vector<DomainDataset> out;
    for (const auto& p : c.csv_paths)
      for (auto& d : load_csv(p, c.csv_labels)) out.push_back(std::move(d));
    return out;
  }
  SyntheticSpec s = c.synthetic;
  s.seed = c.synthetic.seed + seed;
  if (c.shortcut_alpha) return shortcut_domains(s, split, *c.shortcut_alpha);
  return generate(s);
}

}  // namespace dspreg
