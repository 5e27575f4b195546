#pragma once

// Online test-time adaptation. Target batches arrive in order; each one is
// predicted with the current model before any update touches it, then the
// selected parameter group takes `steps_per_batch` Adam steps on the
// configured loss. Batches are never revisited.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cafa/align.hpp"
#include "cafa/grad.hpp"
#include "cafa/nn.hpp"
#include "cafa/stats.hpp"

namespace cafa {

struct LabeledBatch {
  Matrix inputs;
  std::vector<int> labels;  // ground truth, metrics only
};

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<ParamKey, std::vector<double>> m;
  std::map<ParamKey, std::vector<double>> v;
  std::uint64_t t = 0;
};

namespace detail {

/// Bias-corrected Adam update of one tensor at step t (t >= 1).
inline void adam_update(std::span<double> param, std::span<const double> grad, std::vector<double>& m,
                        std::vector<double>& v, std::uint64_t t, const AdamOptions& opt) {
  require(param.size() == grad.size(), ErrorKind::DimensionMismatch,
          "adam: parameter has " + std::to_string(param.size()) + " entries, gradient " +
              std::to_string(grad.size()));
  if (m.empty()) {
    m.assign(param.size(), 0.0);
    v.assign(param.size(), 0.0);
  }
  require(m.size() == param.size() && v.size() == param.size(), ErrorKind::DimensionMismatch,
          "adam: moment shape differs from parameter");
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    param[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

}  // namespace detail

/// One Adam step over every tensor in `grads`. Parameters absent from
/// `grads` are not touched.
inline void adam_step(AdaptiveModel& model, const GradientStore& grads, AdamState& state,
                      const AdamOptions& opt) {
  ++state.t;
  for (const auto& [key, g] : grads) {
    detail::adam_update(parameter(model, key), g, state.m[key], state.v[key], state.t, opt);
  }
}

// ---------------------------------------------------------------------------
// Config and record

struct TtaConfig {
  std::string name = "cafa";
  LossKind method = LossKind::Cafa;
  StatMode forward_mode = StatMode::BatchOnly;  // RunningEval only for the Source baseline
  ParamGroup param_group = ParamGroup::BnOnly;
  std::size_t steps_per_batch = 1;
  AdamOptions adam;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [&](const std::string& why) { return Error(ErrorKind::ConfigInvalid, name + ": " + why); };
    if (method == LossKind::SupervisedCE) throw bad("supervised loss needs labels; not a test-time method");
    if (method == LossKind::None && steps_per_batch != 0) throw bad("method none requires steps_per_batch = 0");
    if (method != LossKind::None && steps_per_batch == 0) throw bad("steps_per_batch = 0 only for method none");
    if (method != LossKind::None && forward_mode != StatMode::BatchOnly) {
      throw bad("adaptation runs in batch-statistics mode");
    }
    if (forward_mode == StatMode::TrainUpdate) throw bad("TrainUpdate is a training mode");
    if (!(adam.lr > 0.0)) throw bad("learning_rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw bad("adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw bad("adam eps must be > 0");
    if (batch_size < 2) throw bad("batch_size must be >= 2");
  }
};

struct RunRow {
  std::size_t batch_index = 0;
  double accuracy = 0.0;
  double loss = 0.0;  // loss on the pre-update forward pass; 0 for method none
  double mean_intra = 0.0;
  double mean_inter = 0.0;
  double wall_time = 0.0;  // seconds
  std::size_t optimizer_steps = 0;
  std::vector<int> predictions;
};

struct RunRecord {
  TtaConfig config;
  std::vector<RunRow> rows;
};

/// Raised when a loss or gradient goes non-finite; carries every row
/// completed before the failing batch.
class AdaptAborted : public Error {
 public:
  AdaptAborted(RunRecord partial, const std::string& what)
      : Error(ErrorKind::NonFiniteLoss, what), partial_(std::move(partial)) {}
  const RunRecord& partial() const { return partial_; }

 private:
  RunRecord partial_;
};

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  detail::require(predicted.size() == truth.size(), ErrorKind::DimensionMismatch,
                  "prediction/label length mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

inline LossSpec loss_spec_for(LossKind kind, const SourceStats& stats) {
  switch (kind) {
    case LossKind::None: return LossSpec::none();
    case LossKind::GlobalFA: return LossSpec::global_fa(stats);
    case LossKind::IntraOnly: return LossSpec::intra(stats);
    case LossKind::Cafa: return LossSpec::cafa(stats);
    case LossKind::Entropy: return LossSpec::entropy();
    case LossKind::PseudoLabelCE: return LossSpec::pseudo_label();
    case LossKind::SupervisedCE: break;
  }
  throw Error(ErrorKind::ConfigInvalid, "no test-time loss for this method");
}

/// Adapts `model` in place over `batches` and returns the per-batch record.
inline RunRecord adapt_stream(AdaptiveModel& model, const SourceStats& stats,
                              std::span<const LabeledBatch> batches, const TtaConfig& config) {
  config.validate();
  model.validate();
  detail::require(stats.feature_dim() == model.feature_dim() && stats.num_classes() == model.num_classes(),
                  ErrorKind::DimensionMismatch, "source statistics do not match the model");
  const LossSpec spec = loss_spec_for(config.method, stats);

  RunRecord record;
  record.config = config;
  AdamState adam;
  using clock = std::chrono::steady_clock;

  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto start = clock::now();
    const LabeledBatch& batch = batches[b];
    detail::require(static_cast<std::size_t>(batch.inputs.rows()) == batch.labels.size(),
                    ErrorKind::DimensionMismatch, "batch inputs and labels differ in length");
    RunRow row;
    row.batch_index = b;

    // Predictions and instrumentation come from the model as left by
    // batches < b; this batch has not influenced it yet.
    {
      const Matrix features = forward_features(std::as_const(model), batch.inputs, config.forward_mode);
      const Matrix logits = forward_logits(model, features);
      row.predictions = argmax_rows(logits);
      row.accuracy = accuracy(row.predictions, batch.labels);
      const DistanceReport rep = distance_report(features, batch.labels, stats);
      row.mean_intra = rep.mean_intra;
      row.mean_inter = rep.mean_inter;
    }

    try {
      for (std::size_t step = 0; step < config.steps_per_batch; ++step) {
        LossAndGrad lg = loss_and_grad(model, batch.inputs, config.forward_mode, spec);
        if (step == 0) row.loss = lg.loss.value;
        GradientStore selected;
        for (const auto& key : parameter_keys(model, config.param_group)) {
          selected[key] = std::move(lg.grads.at(key));
        }
        adam_step(model, selected, adam, config.adam);
        ++row.optimizer_steps;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFiniteLoss) throw;
      throw AdaptAborted(record, "batch " + std::to_string(b) + ": " + e.what());
    }

    row.wall_time = std::chrono::duration<double>(clock::now() - start).count();
    record.rows.push_back(std::move(row));
  }
  return record;
}

}  // namespace cafa
