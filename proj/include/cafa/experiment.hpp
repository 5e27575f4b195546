#pragma once

// Method comparison on one shared target stream.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "cafa/bench.hpp"
#include "cafa/stats.hpp"
#include "cafa/tta.hpp"

namespace cafa {

struct StatsConfig {
  CovarianceMode covariance_mode = CovarianceMode::ClassWise;
  double eps_scale = kDefaultEpsScale;
};

struct ExperimentConfig {
  SyntheticSpec data = default_synthetic_spec();
  std::optional<ShiftSpec> shift;
  Architecture arch;
  PretrainConfig pretrain;
  StatsConfig stats;
  std::vector<TtaConfig> methods;
  std::string output_dir = "out";

  void validate() const {
    data.validate();
    if (shift) shift->validate(data.input_dim);
    if (arch.input_dim != data.input_dim) {
      throw Error(ErrorKind::ConfigInvalid, "model.input_dim differs from data.input_dim");
    }
    if (arch.num_classes != data.n_classes) {
      throw Error(ErrorKind::ConfigInvalid, "model.num_classes differs from data.n_classes");
    }
    if (data.n_classes < 2) throw Error(ErrorKind::ConfigInvalid, "classification needs at least two classes");
    if (!(stats.eps_scale > 0.0)) throw Error(ErrorKind::ConfigInvalid, "stats.eps_scale must be > 0");
    for (std::size_t i = 0; i < methods.size(); ++i) {
      methods[i].validate();
      if (methods[i].batch_size != data.batch_size) {
        throw Error(ErrorKind::ConfigInvalid, methods[i].name + ": batch_size differs from the data stream");
      }
      for (std::size_t k = 0; k < i; ++k) {
        if (methods[k].name == methods[i].name) {
          throw Error(ErrorKind::ConfigInvalid, "duplicate method name '" + methods[i].name + "'");
        }
      }
    }
  }
};

inline TtaConfig method_config(const std::string& name, LossKind kind, StatMode mode = StatMode::BatchOnly,
                               std::size_t steps = 1) {
  TtaConfig c;
  c.name = name;
  c.method = kind;
  c.forward_mode = mode;
  c.steps_per_batch = kind == LossKind::None ? 0 : steps;
  return c;
}

/// Source, BN, PL, TENT-style entropy, global alignment, intra-only, CAFA.
inline std::vector<TtaConfig> standard_methods() {
  return {
      method_config("source", LossKind::None, StatMode::RunningEval),
      method_config("bn", LossKind::None),
      method_config("pl", LossKind::PseudoLabelCE),
      method_config("tent", LossKind::Entropy),
      method_config("global_fa", LossKind::GlobalFA),
      method_config("intra", LossKind::IntraOnly),
      method_config("cafa", LossKind::Cafa),
  };
}

inline ShiftSpec noise_shift(int severity) {
  ShiftTransform noise;
  noise.kind = ShiftKind::AdditiveGaussianNoise;
  return ShiftSpec{{noise}, severity};
}

/// Defaults used by `compare` without a config file: severity-5 additive
/// noise on the default mixture, all standard methods.
inline ExperimentConfig default_experiment(std::uint64_t seed = 0) {
  ExperimentConfig cfg;
  cfg.data = default_synthetic_spec(seed);
  cfg.shift = noise_shift(5);
  cfg.pretrain.seed = seed;
  cfg.methods = standard_methods();
  for (auto& m : cfg.methods) m.seed = seed;
  return cfg;
}

struct MethodFailure {
  std::string method;
  std::string message;
};

struct ExperimentResult {
  PretrainResult pretrained;
  SourceStats stats;
  std::vector<RunRecord> records;      // one per configured method, config order
  std::vector<MethodFailure> failures;  // methods whose record is partial
};

/// Generates the data once, pre-trains (unless `pretrained` is given),
/// estimates source statistics (unless `stats` is given), then runs each
/// method on its own copy of the model over the identical stream. A method
/// that aborts on a non-finite loss keeps its partial record and is listed
/// in `failures`; the remaining methods still run.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const AdaptiveModel* pretrained = nullptr,
                                       const SourceStats* stats = nullptr) {
  cfg.validate();
  const Dataset data = generate_dataset(cfg.data, cfg.shift);

  ExperimentResult result;
  if (pretrained) {
    result.pretrained.model = *pretrained;
    result.pretrained.source_accuracy =
        accuracy(predict(*pretrained, data.test_x, StatMode::RunningEval), data.test_y);
  } else {
    result.pretrained = pretrain_source(cfg.arch, cfg.pretrain, data);
  }
  result.stats = stats ? *stats
                       : estimate_source_stats(result.pretrained.model, data.train_x, data.train_y,
                                               cfg.stats.covariance_mode, cfg.stats.eps_scale);

  for (const auto& method : cfg.methods) {
    AdaptiveModel model = result.pretrained.model;
    try {
      result.records.push_back(adapt_stream(model, result.stats, data.stream, method));
    } catch (const AdaptAborted& e) {
      result.records.push_back(e.partial());
      result.failures.push_back({method.name, e.what()});
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Summaries

struct MethodSummary {
  std::string name;
  double mean_accuracy = 0.0;
  double final_quarter_accuracy = 0.0;
  double last_accuracy = 0.0;
  double first_mean_intra = 0.0;
  double final_mean_intra = 0.0;  // final-quarter mean
  double final_mean_inter = 0.0;  // final-quarter mean
};

/// First row of the last quarter of a stream of `n` batches (at least one row).
inline std::size_t final_quarter_start(std::size_t n) {
  const std::size_t q = std::max<std::size_t>(1, n / 4);
  return n - std::min(q, n);
}

inline MethodSummary summarize(const RunRecord& rec) {
  MethodSummary s;
  s.name = rec.config.name;
  const std::size_t n = rec.rows.size();
  if (n == 0) return s;
  const std::size_t q0 = final_quarter_start(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = rec.rows[i];
    s.mean_accuracy += r.accuracy;
    if (i >= q0) {
      s.final_quarter_accuracy += r.accuracy;
      s.final_mean_intra += r.mean_intra;
      s.final_mean_inter += r.mean_inter;
    }
  }
  const double nq = static_cast<double>(n - q0);
  s.mean_accuracy /= static_cast<double>(n);
  s.final_quarter_accuracy /= nq;
  s.final_mean_intra /= nq;
  s.final_mean_inter /= nq;
  s.last_accuracy = rec.rows.back().accuracy;
  s.first_mean_intra = rec.rows.front().mean_intra;
  return s;
}

}  // namespace cafa
