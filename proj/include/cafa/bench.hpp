#pragma once

// Synthetic benchmark: Gaussian class mixtures stand in for an image
// dataset, composable input transforms stand in for corruptions, and a small
// supervised pre-training loop produces the source model.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/QR>

#include "cafa/grad.hpp"
#include "cafa/nn.hpp"
#include "cafa/stats.hpp"
#include "cafa/tta.hpp"

namespace cafa {

// ---------------------------------------------------------------------------
// Dataset spec

struct SyntheticSpec {
  std::size_t n_classes = 3;
  std::size_t input_dim = 8;
  std::vector<Vector> means;
  std::vector<Matrix> covariances;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 500;  // held-out, unshifted
  std::size_t stream_batches = 60;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const std::string& why) { return Error(ErrorKind::ConfigInvalid, "data: " + why); };
    if (n_classes < 1) throw bad("n_classes must be >= 1");
    if (input_dim < 1) throw bad("input_dim must be >= 1");
    if (means.size() != n_classes || covariances.size() != n_classes) {
      throw bad("need one mean and one covariance per class");
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (static_cast<std::size_t>(means[c].size()) != input_dim) throw bad("mean of wrong dimension");
      const auto& s = covariances[c];
      if (static_cast<std::size_t>(s.rows()) != input_dim || s.rows() != s.cols()) {
        throw bad("covariance of wrong shape");
      }
      try {
        (void)spd_factor(s);
      } catch (const Error&) {
        throw bad("covariance " + std::to_string(c) + " is not symmetric positive definite");
      }
      for (std::size_t k = 0; k < c; ++k) {
        if (means[k] == means[c]) throw bad("class means must be distinct");
      }
    }
    if (train_per_class < 2) throw bad("train_per_class must be >= 2");
    if (batch_size < 2) throw bad("batch_size must be >= 2");
  }
};

/// Class means at distance `separation` from the origin along random
/// directions; covariances with random orientation and per-axis standard
/// deviations in [min_std, max_std], multiplied by `class_scales[c]` when
/// given (one entry per class).
inline SyntheticSpec make_synthetic_spec(std::size_t n_classes, std::size_t input_dim, double separation,
                                         std::uint64_t seed, double min_std = 0.5, double max_std = 1.5,
                                         const std::vector<double>& class_scales = {}) {
  detail::require(class_scales.empty() || class_scales.size() == n_classes, ErrorKind::ConfigInvalid,
                  "class_scales needs one entry per class");
  SyntheticSpec spec;
  spec.n_classes = n_classes;
  spec.input_dim = input_dim;
  spec.seed = seed;
  std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(input_dim);
  for (std::size_t c = 0; c < n_classes; ++c) {
    Vector dir(d);
    for (Eigen::Index i = 0; i < d; ++i) dir(i) = normal(rng);
    spec.means.push_back(separation * dir.normalized());

    Matrix g(d, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    const Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ();
    Vector stds(d);
    for (Eigen::Index i = 0; i < d; ++i) stds(i) = min_std + (max_std - min_std) * unit(rng);
    if (!class_scales.empty()) stds *= class_scales[c];
    Matrix cov = q * stds.array().square().matrix().asDiagonal() * q.transpose();
    cov = 0.5 * (cov + cov.transpose());
    spec.covariances.push_back(std::move(cov));
  }
  return spec;
}

/// The default desk-scale benchmark: 3 classes in 8 input dimensions with
/// class spreads in ratio 0.5 : 1 : 1.5.
inline SyntheticSpec default_synthetic_spec(std::uint64_t seed = 0) {
  return make_synthetic_spec(3, 8, 3.0, seed, 0.5, 1.5, {0.5, 1.0, 1.5});
}

/// Mean per-class standard deviation sqrt(trace(Σ_c)/d), averaged over classes.
inline double mean_class_std(const SyntheticSpec& spec) {
  double sum = 0.0;
  for (const auto& s : spec.covariances) sum += std::sqrt(s.trace() / static_cast<double>(s.rows()));
  return sum / static_cast<double>(spec.covariances.size());
}

// ---------------------------------------------------------------------------
// Shifts

enum class ShiftKind { AdditiveGaussianNoise, MeanShift, Scaling, Rotation };

inline const char* to_string(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::AdditiveGaussianNoise: return "noise";
    case ShiftKind::MeanShift: return "mean_shift";
    case ShiftKind::Scaling: return "scaling";
    case ShiftKind::Rotation: return "rotation";
  }
  return "?";
}

/// Magnitude multiplier per severity level 1..5.
inline constexpr std::array<double, 5> kSeverityScale = {0.2, 0.4, 0.6, 0.9, 1.3};

inline double severity_scale(int severity) {
  detail::require(severity >= 1 && severity <= 5, ErrorKind::ConfigInvalid,
                  "severity must be in 1..5, got " + std::to_string(severity));
  return kSeverityScale[static_cast<std::size_t>(severity - 1)];
}

/// One input transform. Magnitudes are base values multiplied by the
/// severity scale:
///   noise       σ = scale · (noise_std > 0 ? noise_std : mean class std)
///   mean_shift  x + scale · offset
///   scaling     x_i · (1 + scale · (factors_i − 1))
///   rotation    rotate plane (axis_a, axis_b) by scale · angle radians
struct ShiftTransform {
  ShiftKind kind = ShiftKind::AdditiveGaussianNoise;
  double noise_std = 0.0;
  Vector offset;
  Vector factors;
  double angle = 0.0;
  std::size_t axis_a = 0;
  std::size_t axis_b = 1;
};

struct ShiftSpec {
  std::vector<ShiftTransform> transforms;  // applied in order
  int severity = 5;

  void validate(std::size_t input_dim) const {
    (void)severity_scale(severity);
    for (const auto& t : transforms) {
      auto bad = [&](const std::string& why) {
        return Error(ErrorKind::ConfigInvalid, std::string("shift ") + to_string(t.kind) + ": " + why);
      };
      switch (t.kind) {
        case ShiftKind::AdditiveGaussianNoise:
          if (t.noise_std < 0.0) throw bad("noise_std must be >= 0");
          break;
        case ShiftKind::MeanShift:
          if (static_cast<std::size_t>(t.offset.size()) != input_dim) throw bad("offset has wrong dimension");
          break;
        case ShiftKind::Scaling:
          if (static_cast<std::size_t>(t.factors.size()) != input_dim) throw bad("factors have wrong dimension");
          break;
        case ShiftKind::Rotation:
          if (t.axis_a >= input_dim || t.axis_b >= input_dim || t.axis_a == t.axis_b) {
            throw bad("rotation axes must be two distinct input dimensions");
          }
          break;
      }
    }
  }
};

/// Applies every transform to the rows of `x` in place. Labels never change.
inline void apply_shift(Matrix& x, const ShiftSpec& shift, const SyntheticSpec& spec, std::mt19937_64& rng) {
  const double scale = severity_scale(shift.severity);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& t : shift.transforms) {
    switch (t.kind) {
      case ShiftKind::AdditiveGaussianNoise: {
        const double sigma = scale * (t.noise_std > 0.0 ? t.noise_std : mean_class_std(spec));
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += sigma * normal(rng);
        break;
      }
      case ShiftKind::MeanShift:
        x.rowwise() += (scale * t.offset).transpose();
        break;
      case ShiftKind::Scaling: {
        const Vector f = (1.0 + scale * (t.factors.array() - 1.0)).matrix();
        x = x * f.asDiagonal();
        break;
      }
      case ShiftKind::Rotation: {
        const double a = scale * t.angle;
        const double c = std::cos(a), s = std::sin(a);
        const auto i = static_cast<Eigen::Index>(t.axis_a);
        const auto j = static_cast<Eigen::Index>(t.axis_b);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const double u = x(r, i), v = x(r, j);
          x(r, i) = c * u - s * v;
          x(r, j) = s * u + c * v;
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Generation

struct Dataset {
  Matrix train_x;
  std::vector<int> train_y;
  Matrix test_x;  // unshifted held-out source data
  std::vector<int> test_y;
  std::vector<LabeledBatch> stream;  // shifted target batches, in order
};

namespace detail {

inline std::uint64_t substream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  std::array<std::uint64_t, 1> out{};
  seq.generate(reinterpret_cast<std::uint32_t*>(out.data()),
               reinterpret_cast<std::uint32_t*>(out.data()) + 2);
  return out[0];
}

inline std::pair<Matrix, std::vector<int>> sample_labeled(const SyntheticSpec& spec,
                                                          const std::vector<int>& labels,
                                                          std::mt19937_64& rng) {
  std::vector<Matrix> chol;
  for (const auto& s : spec.covariances) chol.push_back(spd_factor(s).lower());
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(spec.input_dim);
  Matrix x(static_cast<Eigen::Index>(labels.size()), d);
  Vector z(d);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto c = static_cast<std::size_t>(labels[r]);
    for (Eigen::Index i = 0; i < d; ++i) z(i) = normal(rng);
    x.row(static_cast<Eigen::Index>(r)) = (spec.means[c] + chol[c] * z).transpose();
  }
  return {std::move(x), labels};
}

inline std::vector<int> balanced_labels(std::size_t n_classes, std::size_t per_class, std::mt19937_64& rng) {
  std::vector<int> y;
  y.reserve(n_classes * per_class);
  for (std::size_t c = 0; c < n_classes; ++c) y.insert(y.end(), per_class, static_cast<int>(c));
  std::shuffle(y.begin(), y.end(), rng);
  return y;
}

}  // namespace detail

/// Draws the source train/test splits and the target stream. The stream is
/// source-distributed draws (uniform labels) passed through `shift`.
/// Deterministic in spec.seed.
inline Dataset generate_dataset(const SyntheticSpec& spec, const std::optional<ShiftSpec>& shift) {
  spec.validate();
  if (shift) shift->validate(spec.input_dim);
  Dataset ds;

  std::mt19937_64 train_rng(detail::substream(spec.seed, 1));
  auto train = detail::sample_labeled(spec, detail::balanced_labels(spec.n_classes, spec.train_per_class, train_rng),
                                      train_rng);
  ds.train_x = std::move(train.first);
  ds.train_y = std::move(train.second);

  std::mt19937_64 test_rng(detail::substream(spec.seed, 2));
  auto test = detail::sample_labeled(spec, detail::balanced_labels(spec.n_classes, spec.test_per_class, test_rng),
                                     test_rng);
  ds.test_x = std::move(test.first);
  ds.test_y = std::move(test.second);

  std::mt19937_64 stream_rng(detail::substream(spec.seed, 3));
  std::mt19937_64 shift_rng(detail::substream(spec.seed, 4));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(spec.n_classes) - 1);
  for (std::size_t b = 0; b < spec.stream_batches; ++b) {
    std::vector<int> y(spec.batch_size);
    for (auto& v : y) v = pick(stream_rng);
    auto [x, labels] = detail::sample_labeled(spec, y, stream_rng);
    if (shift) apply_shift(x, *shift, spec, shift_rng);
    ds.stream.push_back({std::move(x), std::move(labels)});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Source pre-training

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  AdaptiveModel model;
  double source_accuracy = 0.0;  // held-out unshifted test split, RunningEval
  double final_loss = 0.0;
};

/// Cross-entropy training of every parameter with Adam; batch norm runs in
/// TrainUpdate mode so running statistics track the source data.
inline PretrainResult pretrain_source(const Architecture& arch, const PretrainConfig& cfg, const Dataset& data) {
  detail::require(arch.num_classes >= 2, ErrorKind::ConfigInvalid,
                  "classification needs at least two classes");
  detail::require(cfg.batch_size >= 2 && cfg.epochs >= 1 && cfg.learning_rate > 0.0, ErrorKind::ConfigInvalid,
                  "pretrain: batch_size >= 2, epochs >= 1 and learning_rate > 0 required");
  detail::require(static_cast<std::size_t>(data.train_x.cols()) == arch.input_dim, ErrorKind::ConfigInvalid,
                  "pretrain: data dimension differs from architecture input_dim");

  std::mt19937_64 rng(detail::substream(cfg.seed, 10));
  PretrainResult result{make_model(arch, rng)};
  AdaptiveModel& model = result.model;
  AdamState adam;
  const AdamOptions opt{cfg.learning_rate};

  const std::size_t n = data.train_y.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t d = arch.input_dim;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + 2 <= n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      if (len < 2) break;
      Matrix x(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(d));
      std::vector<int> y(len);
      for (std::size_t k = 0; k < len; ++k) {
        x.row(static_cast<Eigen::Index>(k)) = data.train_x.row(static_cast<Eigen::Index>(order[start + k]));
        y[k] = data.train_y[order[start + k]];
      }
      const ForwardCache cache = detail::forward_cached(model, x, StatMode::TrainUpdate);
      const Matrix logits = forward_logits(model, cache.features);
      LossEval loss;
      try {
        loss = evaluate_loss(LossSpec::supervised(y), cache.features, logits);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::NonFiniteLoss) throw Error(ErrorKind::TrainingDiverged, e.what());
        throw;
      }
      const GradientStore grads = backward(model, cache, loss.dfeatures, loss.dlogits);
      detail::update_running_stats(model, cache);
      adam_step(model, grads, adam, opt);
      result.final_loss = loss.value;
    }
  }
  for (const auto& key : all_parameter_keys(model)) {
    for (double v : parameter(std::as_const(model), key)) {
      if (!std::isfinite(v)) throw Error(ErrorKind::TrainingDiverged, "parameters became non-finite");
    }
  }
  const auto pred = predict(model, data.test_x, StatMode::RunningEval);
  result.source_accuracy = accuracy(pred, data.test_y);
  return result;
}

}  // namespace cafa
