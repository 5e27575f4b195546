#pragma once

// JSON experiment configuration and run-header sidecars.
//
// Sections mirror ExperimentConfig: data, shift, model, pretrain, stats,
// methods, output_dir, plus an optional top-level seed that seeds every
// component not given its own. Unknown keys are rejected at every level.
// `to_json` writes the fully resolved form (explicit class means and
// covariances), which `experiment_from_json` reads back unchanged.

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cafa/bench.hpp"
#include "cafa/error.hpp"
#include "cafa/experiment.hpp"
#include "cafa/tta.hpp"

namespace cafa {

using Json = nlohmann::json;

inline constexpr int kRunHeaderVersion = 1;

namespace detail {

inline Error config_error(const std::string& where, const std::string& why) {
  return Error(ErrorKind::ConfigInvalid, where + ": " + why);
}

inline void check_object(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw config_error(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!known) throw config_error(where, "unknown key '" + key + "'");
  }
}

/// j[key] as T when present, `fallback` otherwise; type errors become
/// ConfigInvalid naming the key.
template <class T>
T get_or(const Json& j, const char* key, const std::string& where, T fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_integer() || it->template get<long long>() < 0) {
        throw config_error(where, std::string(key) + " must be a non-negative integer");
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw config_error(where, std::string(key) + " must be an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw config_error(where, std::string(key) + " must be a number");
    }
    return it->template get<T>();
  } catch (const Json::exception& e) {
    throw config_error(where, std::string(key) + ": " + e.what());
  }
}

inline Vector vector_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) throw config_error(where, "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw config_error(where, "expected an array of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline Matrix matrix_from_json(const Json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw config_error(where, "expected a non-empty array of rows");
  const std::size_t rows = j.size();
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    const Vector row = vector_from_json(j[r], where);
    if (static_cast<std::size_t>(row.size()) != cols) throw config_error(where, "ragged matrix");
    m.row(static_cast<Eigen::Index>(r)) = row.transpose();
  }
  return m;
}

inline Json to_json(const Vector& v) {
  Json j = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

inline Json to_json(const Matrix& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) j.push_back(to_json(Vector(m.row(r).transpose())));
  return j;
}

template <class Enum, std::size_t N>
Enum enum_from(const Json& j, const char* key, const std::string& where, Enum fallback,
               const std::pair<const char*, Enum> (&names)[N]) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_string()) throw config_error(where, std::string(key) + " must be a string");
  const auto s = it->get<std::string>();
  for (const auto& [name, value] : names) {
    if (s == name) return value;
  }
  std::string options;
  for (const auto& [name, value] : names) options += std::string(options.empty() ? "" : ", ") + name;
  throw config_error(where, std::string(key) + " '" + s + "' is not one of " + options);
}

inline constexpr std::pair<const char*, LossKind> kLossNames[] = {
    {"none", LossKind::None},       {"global_fa", LossKind::GlobalFA},
    {"intra", LossKind::IntraOnly}, {"cafa", LossKind::Cafa},
    {"entropy", LossKind::Entropy}, {"pseudo_label", LossKind::PseudoLabelCE},
};
inline constexpr std::pair<const char*, StatMode> kModeNames[] = {
    {"batch", StatMode::BatchOnly},
    {"running", StatMode::RunningEval},
};
inline constexpr std::pair<const char*, ParamGroup> kGroupNames[] = {
    {"bn", ParamGroup::BnOnly},
    {"feature", ParamGroup::FeatureFull},
};
inline constexpr std::pair<const char*, Activation> kActivationNames[] = {
    {"identity", Activation::Identity},
    {"relu", Activation::Relu},
};
inline constexpr std::pair<const char*, CovarianceMode> kCovarianceNames[] = {
    {"classwise", CovarianceMode::ClassWise},
    {"tied", CovarianceMode::Tied},
};
inline constexpr std::pair<const char*, ShiftKind> kShiftNames[] = {
    {"noise", ShiftKind::AdditiveGaussianNoise},
    {"mean_shift", ShiftKind::MeanShift},
    {"scaling", ShiftKind::Scaling},
    {"rotation", ShiftKind::Rotation},
};

template <class Enum, std::size_t N>
const char* name_of(Enum value, const std::pair<const char*, Enum> (&names)[N]) {
  for (const auto& [name, v] : names) {
    if (v == value) return name;
  }
  return "?";
}

// -- sections ---------------------------------------------------------------

inline SyntheticSpec data_from_json(const Json& j, std::uint64_t seed) {
  const std::string where = "data";
  check_object(j, where,
               {"n_classes", "input_dim", "separation", "min_std", "max_std", "class_scales", "means",
                "covariances", "train_per_class", "test_per_class", "stream_batches", "batch_size", "seed"});
  const auto n_classes = get_or<std::size_t>(j, "n_classes", where, 3);
  const auto input_dim = get_or<std::size_t>(j, "input_dim", where, 8);
  seed = get_or<std::uint64_t>(j, "seed", where, seed);

  SyntheticSpec spec;
  const bool explicit_geometry = j.contains("means") || j.contains("covariances");
  if (explicit_geometry) {
    for (const char* k : {"separation", "min_std", "max_std", "class_scales"}) {
      if (j.contains(k)) throw config_error(where, std::string(k) + " conflicts with explicit means/covariances");
    }
    if (!j.contains("means") || !j.contains("covariances")) {
      throw config_error(where, "means and covariances must be given together");
    }
    spec.n_classes = n_classes;
    spec.input_dim = input_dim;
    spec.seed = seed;
    const Json& means = j.at("means");
    const Json& covs = j.at("covariances");
    if (!means.is_array() || !covs.is_array()) throw config_error(where, "means/covariances must be arrays");
    for (const auto& m : means) spec.means.push_back(vector_from_json(m, where + ".means"));
    for (const auto& c : covs) spec.covariances.push_back(matrix_from_json(c, where + ".covariances"));
  } else {
    std::vector<double> scales;
    if (j.contains("class_scales")) {
      const Vector s = vector_from_json(j.at("class_scales"), where + ".class_scales");
      scales.assign(s.data(), s.data() + s.size());
      if (scales.size() != n_classes) throw config_error(where, "class_scales needs one entry per class");
      for (double v : scales) {
        if (!(v > 0.0)) throw config_error(where, "class_scales must be > 0");
      }
    } else if (n_classes == 3) {
      scales = {0.5, 1.0, 1.5};
    }
    const double separation = get_or<double>(j, "separation", where, 3.0);
    const double min_std = get_or<double>(j, "min_std", where, 0.5);
    const double max_std = get_or<double>(j, "max_std", where, 1.5);
    if (!(separation > 0.0)) throw config_error(where, "separation must be > 0");
    if (!(min_std > 0.0 && max_std >= min_std)) throw config_error(where, "need 0 < min_std <= max_std");
    if (n_classes < 1 || input_dim < 1) throw config_error(where, "n_classes and input_dim must be >= 1");
    spec = make_synthetic_spec(n_classes, input_dim, separation, seed, min_std, max_std, scales);
  }
  spec.train_per_class = get_or<std::size_t>(j, "train_per_class", where, spec.train_per_class);
  spec.test_per_class = get_or<std::size_t>(j, "test_per_class", where, spec.test_per_class);
  spec.stream_batches = get_or<std::size_t>(j, "stream_batches", where, spec.stream_batches);
  spec.batch_size = get_or<std::size_t>(j, "batch_size", where, spec.batch_size);
  return spec;
}

inline ShiftSpec shift_from_json(const Json& j) {
  const std::string where = "shift";
  check_object(j, where, {"severity", "transforms"});
  ShiftSpec s;
  s.severity = get_or<int>(j, "severity", where, 5);
  const auto it = j.find("transforms");
  if (it == j.end()) {
    s.transforms = {ShiftTransform{}};
    return s;
  }
  if (!it->is_array()) throw config_error(where, "transforms must be an array");
  for (std::size_t i = 0; i < it->size(); ++i) {
    const Json& t = (*it)[i];
    const std::string tw = where + ".transforms[" + std::to_string(i) + "]";
    if (!t.is_object() || !t.contains("kind")) throw config_error(tw, "each transform needs a kind");
    ShiftTransform tr;
    tr.kind = enum_from(t, "kind", tw, ShiftKind::AdditiveGaussianNoise, kShiftNames);
    switch (tr.kind) {
      case ShiftKind::AdditiveGaussianNoise:
        check_object(t, tw, {"kind", "noise_std"});
        tr.noise_std = get_or<double>(t, "noise_std", tw, 0.0);
        break;
      case ShiftKind::MeanShift:
        check_object(t, tw, {"kind", "offset"});
        if (!t.contains("offset")) throw config_error(tw, "mean_shift needs offset");
        tr.offset = vector_from_json(t.at("offset"), tw + ".offset");
        break;
      case ShiftKind::Scaling:
        check_object(t, tw, {"kind", "factors"});
        if (!t.contains("factors")) throw config_error(tw, "scaling needs factors");
        tr.factors = vector_from_json(t.at("factors"), tw + ".factors");
        break;
      case ShiftKind::Rotation: {
        check_object(t, tw, {"kind", "angle", "axes"});
        tr.angle = get_or<double>(t, "angle", tw, 0.0);
        const auto axes = get_or<std::vector<std::size_t>>(t, "axes", tw, {0, 1});
        if (axes.size() != 2) throw config_error(tw, "axes needs exactly two indices");
        tr.axis_a = axes[0];
        tr.axis_b = axes[1];
        break;
      }
    }
    s.transforms.push_back(std::move(tr));
  }
  return s;
}

inline TtaConfig method_from_json(const Json& j, std::size_t index, std::uint64_t seed) {
  const std::string where = "methods[" + std::to_string(index) + "]";
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    for (auto m : standard_methods()) {
      if (m.name == name) {
        m.seed = seed;
        return m;
      }
    }
    throw config_error(where, "'" + name + "' is not a standard method; give an object instead");
  }
  check_object(j, where,
               {"name", "loss", "forward_mode", "param_group", "steps_per_batch", "learning_rate", "beta1",
                "beta2", "adam_eps", "seed"});
  if (!j.contains("name") || !j.at("name").is_string()) throw config_error(where, "name is required");
  if (!j.contains("loss")) throw config_error(where, "loss is required");
  TtaConfig m;
  m.name = j.at("name").get<std::string>();
  if (m.name.empty() || m.name.find_first_of(",/\\\n\" ") != std::string::npos) {
    throw config_error(where, "name must be non-empty without spaces, commas, quotes or slashes");
  }
  m.method = enum_from(j, "loss", where, LossKind::Cafa, kLossNames);
  m.forward_mode = enum_from(j, "forward_mode", where, StatMode::BatchOnly, kModeNames);
  m.param_group = enum_from(j, "param_group", where, ParamGroup::BnOnly, kGroupNames);
  m.steps_per_batch =
      get_or<std::size_t>(j, "steps_per_batch", where, m.method == LossKind::None ? std::size_t{0} : 1);
  m.adam.lr = get_or<double>(j, "learning_rate", where, m.adam.lr);
  m.adam.beta1 = get_or<double>(j, "beta1", where, m.adam.beta1);
  m.adam.beta2 = get_or<double>(j, "beta2", where, m.adam.beta2);
  m.adam.eps = get_or<double>(j, "adam_eps", where, m.adam.eps);
  m.seed = get_or<std::uint64_t>(j, "seed", where, seed);
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parsing

/// Builds a validated ExperimentConfig. Missing sections take the defaults
/// of `default_experiment`; an absent `shift` means severity-5 noise, an
/// explicit `"shift": null` means no shift.
inline ExperimentConfig experiment_from_json(const Json& j) {
  detail::check_object(j, "config", {"seed", "data", "shift", "model", "pretrain", "stats", "methods", "output_dir"});
  const auto seed = detail::get_or<std::uint64_t>(j, "seed", "config", 0);
  ExperimentConfig cfg = default_experiment(seed);

  cfg.data = detail::data_from_json(j.value("data", Json::object()), seed);

  if (j.contains("shift")) {
    if (j.at("shift").is_null()) cfg.shift.reset();
    else cfg.shift = detail::shift_from_json(j.at("shift"));
  }

  {
    const Json m = j.value("model", Json::object());
    const std::string where = "model";
    detail::check_object(m, where, {"hidden_dims", "feature_activation", "bn_momentum"});
    cfg.arch.hidden_dims = detail::get_or<std::vector<std::size_t>>(m, "hidden_dims", where, cfg.arch.hidden_dims);
    cfg.arch.feature_activation =
        detail::enum_from(m, "feature_activation", where, cfg.arch.feature_activation, detail::kActivationNames);
    cfg.arch.bn_momentum = detail::get_or<double>(m, "bn_momentum", where, cfg.arch.bn_momentum);
    if (cfg.arch.hidden_dims.empty() ||
        std::find(cfg.arch.hidden_dims.begin(), cfg.arch.hidden_dims.end(), 0u) != cfg.arch.hidden_dims.end()) {
      throw detail::config_error(where, "hidden_dims must be non-empty and positive");
    }
    if (!(cfg.arch.bn_momentum > 0.0 && cfg.arch.bn_momentum < 1.0)) {
      throw detail::config_error(where, "bn_momentum must lie in (0, 1)");
    }
    cfg.arch.input_dim = cfg.data.input_dim;
    cfg.arch.num_classes = cfg.data.n_classes;
  }

  {
    const Json p = j.value("pretrain", Json::object());
    const std::string where = "pretrain";
    detail::check_object(p, where, {"epochs", "batch_size", "learning_rate", "seed"});
    cfg.pretrain.epochs = detail::get_or<std::size_t>(p, "epochs", where, cfg.pretrain.epochs);
    cfg.pretrain.batch_size = detail::get_or<std::size_t>(p, "batch_size", where, cfg.pretrain.batch_size);
    cfg.pretrain.learning_rate = detail::get_or<double>(p, "learning_rate", where, cfg.pretrain.learning_rate);
    cfg.pretrain.seed = detail::get_or<std::uint64_t>(p, "seed", where, seed);
    if (cfg.pretrain.epochs < 1 || cfg.pretrain.batch_size < 2 || !(cfg.pretrain.learning_rate > 0.0)) {
      throw detail::config_error(where, "epochs >= 1, batch_size >= 2 and learning_rate > 0 required");
    }
  }

  {
    const Json s = j.value("stats", Json::object());
    const std::string where = "stats";
    detail::check_object(s, where, {"covariance_mode", "eps_scale"});
    cfg.stats.covariance_mode =
        detail::enum_from(s, "covariance_mode", where, cfg.stats.covariance_mode, detail::kCovarianceNames);
    cfg.stats.eps_scale = detail::get_or<double>(s, "eps_scale", where, cfg.stats.eps_scale);
  }

  if (j.contains("methods")) {
    const Json& ms = j.at("methods");
    if (!ms.is_array()) throw detail::config_error("methods", "expected an array");
    cfg.methods.clear();
    for (std::size_t i = 0; i < ms.size(); ++i) cfg.methods.push_back(detail::method_from_json(ms[i], i, seed));
  }
  for (auto& m : cfg.methods) m.batch_size = cfg.data.batch_size;

  cfg.output_dir = detail::get_or<std::string>(j, "output_dir", "config", cfg.output_dir);
  cfg.validate();
  return cfg;
}

/// Reads and parses a config file. Unreadable file: Io; malformed JSON or
/// schema violation: ConfigInvalid.
inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::ConfigInvalid, "config '" + path + "': " + e.what());
  }
  return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Serialization

inline Json to_json(const TtaConfig& m) {
  return Json{{"name", m.name},
              {"loss", to_string(m.method)},
              {"forward_mode", detail::name_of(m.forward_mode, detail::kModeNames)},
              {"param_group", detail::name_of(m.param_group, detail::kGroupNames)},
              {"steps_per_batch", m.steps_per_batch},
              {"learning_rate", m.adam.lr},
              {"beta1", m.adam.beta1},
              {"beta2", m.adam.beta2},
              {"adam_eps", m.adam.eps},
              {"seed", m.seed}};
}

inline Json to_json(const ShiftSpec& s) {
  Json ts = Json::array();
  for (const auto& t : s.transforms) {
    Json o{{"kind", detail::name_of(t.kind, detail::kShiftNames)}};
    switch (t.kind) {
      case ShiftKind::AdditiveGaussianNoise: o["noise_std"] = t.noise_std; break;
      case ShiftKind::MeanShift: o["offset"] = detail::to_json(t.offset); break;
      case ShiftKind::Scaling: o["factors"] = detail::to_json(t.factors); break;
      case ShiftKind::Rotation:
        o["angle"] = t.angle;
        o["axes"] = {t.axis_a, t.axis_b};
        break;
    }
    ts.push_back(std::move(o));
  }
  return Json{{"severity", s.severity}, {"transforms", std::move(ts)}};
}

inline Json to_json(const ExperimentConfig& cfg) {
  Json data{{"n_classes", cfg.data.n_classes},
            {"input_dim", cfg.data.input_dim},
            {"train_per_class", cfg.data.train_per_class},
            {"test_per_class", cfg.data.test_per_class},
            {"stream_batches", cfg.data.stream_batches},
            {"batch_size", cfg.data.batch_size},
            {"seed", cfg.data.seed}};
  data["means"] = Json::array();
  for (const auto& m : cfg.data.means) data["means"].push_back(detail::to_json(m));
  data["covariances"] = Json::array();
  for (const auto& c : cfg.data.covariances) data["covariances"].push_back(detail::to_json(c));

  Json methods = Json::array();
  for (const auto& m : cfg.methods) methods.push_back(to_json(m));

  return Json{{"data", std::move(data)},
              {"shift", cfg.shift ? to_json(*cfg.shift) : Json(nullptr)},
              {"model",
               {{"hidden_dims", cfg.arch.hidden_dims},
                {"feature_activation", detail::name_of(cfg.arch.feature_activation, detail::kActivationNames)},
                {"bn_momentum", cfg.arch.bn_momentum}}},
              {"pretrain",
               {{"epochs", cfg.pretrain.epochs},
                {"batch_size", cfg.pretrain.batch_size},
                {"learning_rate", cfg.pretrain.learning_rate},
                {"seed", cfg.pretrain.seed}}},
              {"stats",
               {{"covariance_mode", detail::name_of(cfg.stats.covariance_mode, detail::kCovarianceNames)},
                {"eps_scale", cfg.stats.eps_scale}}},
              {"methods", std::move(methods)},
              {"output_dir", cfg.output_dir}};
}

/// Sidecar written next to each RunRecord CSV: the method config, the full
/// experiment it ran in, seeds, and timing (timing lives here, not in the
/// CSV, so CSVs from repeated runs compare byte-for-byte).
inline Json run_header(const RunRecord& rec, const ExperimentConfig& cfg, const std::string& error = {}) {
  double wall = 0.0;
  std::size_t steps = 0;
  for (const auto& r : rec.rows) {
    wall += r.wall_time;
    steps += r.optimizer_steps;
  }
  Json j{{"format", "cafa-run-header"},
         {"version", kRunHeaderVersion},
         {"method", to_json(rec.config)},
         {"seeds", {{"data", cfg.data.seed}, {"pretrain", cfg.pretrain.seed}, {"method", rec.config.seed}}},
         {"batches", rec.rows.size()},
         {"optimizer_steps", steps},
         {"wall_time_seconds", wall},
         {"completed", error.empty()},
         {"experiment", to_json(cfg)}};
  if (!error.empty()) j["error"] = error;
  return j;
}

inline void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

}  // namespace cafa
