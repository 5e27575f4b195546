#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <gtest/gtest.h>

#include "cafa/bench.hpp"
#include "cafa/experiment.hpp"
#include "cafa/tta.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cafa;

namespace {

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::InvalidArgument;
}

/// Small end-to-end setting shared by the stream tests: default mixture,
/// pre-trained model, source stats, severity-5 noise stream of 12 batches.
struct Bench {
  ExperimentConfig cfg;
  Dataset data;
  AdaptiveModel model;
  SourceStats stats;
};

const Bench& bench() {
  static const Bench b = [] {
    Bench out;
    out.cfg = default_experiment(0);
    out.cfg.data.stream_batches = 12;
    out.data = generate_dataset(out.cfg.data, out.cfg.shift);
    out.model = pretrain_source(out.cfg.arch, out.cfg.pretrain, out.data).model;
    out.stats = estimate_source_stats(out.model, out.data.train_x, out.data.train_y, CovarianceMode::ClassWise);
    return out;
  }();
  return b;
}

TtaConfig method(LossKind kind, ParamGroup group = ParamGroup::BnOnly, std::size_t steps = 1) {
  TtaConfig c = method_config(to_string(kind), kind, kind == LossKind::None ? StatMode::RunningEval : StatMode::BatchOnly,
                              steps);
  c.param_group = group;
  return c;
}

bool same_parameter(const AdaptiveModel& a, const AdaptiveModel& b, const ParamKey& key) {
  const auto x = parameter(a, key);
  const auto y = parameter(b, key);
  return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientLeavesParametersAndCountsStep) {
  AdaptiveModel m = fixture::random_model(2, {3}, 2, 1);
  const AdaptiveModel before = m;
  AdamState state;
  GradientStore g;
  for (const auto& key : parameter_keys(m, ParamGroup::BnOnly)) g[key] = std::vector<double>(parameter(m, key).size(), 0.0);
  adam_step(m, g, state, AdamOptions{});
  adam_step(m, g, state, AdamOptions{});
  EXPECT_TRUE(m == before);
  EXPECT_EQ(state.t, 2u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // t = 1: m̂ = g and v̂ = g², so the step is −lr·g/(|g| + eps) ≈ −lr·sign(g).
  for (double g : {3.0, -0.02, 250.0}) {
    std::vector<double> p{1.0}, m, v;
    const std::vector<double> grad{g};
    const AdamOptions opt{0.01};
    detail::adam_update(p, grad, m, v, 1, opt);
    EXPECT_NEAR(p[0], 1.0 - 0.01 * g / (std::fabs(g) + 1e-8), 1e-15);
    EXPECT_NEAR(p[0], 1.0 - 0.01 * (g > 0 ? 1.0 : -1.0), 1e-8);
  }
}

// f(x) = (x − 3)², x₀ = 0, lr = 0.1, β = (0.9, 0.999), eps = 1e-8.
// Step 1 by hand: g = −6, m̂ = −6, v̂ = 36, x₁ = 0 + 0.1·6/(6 + 1e-8).
// Later steps follow m ← 0.9m + 0.1g, v ← 0.999v + 0.001g², bias-corrected
// with 1 − βᵗ; the values below were worked through that recurrence.
TEST(Adam, FiveStepsOnQuadraticMatchHandTrace) {
  const double expected[5] = {0.09999999983333335, 0.19989729258521102, 0.29961847654925267, 0.3990864689442145,
                              0.4982205437727129};
  std::vector<double> x{0.0}, m, v;
  const AdamOptions opt{0.1};
  for (std::uint64_t t = 1; t <= 5; ++t) {
    const std::vector<double> g{2.0 * (x[0] - 3.0)};
    detail::adam_update(x, g, m, v, t, opt);
    EXPECT_NEAR(x[0], expected[t - 1], 1e-12) << "step " << t;
  }
}

TEST(Adam, ShapeMismatchIsRejected) {
  std::vector<double> p{1.0, 2.0}, m, v;
  const std::vector<double> g{1.0};
  EXPECT_EQ(kind_of([&] { detail::adam_update(p, g, m, v, 1, AdamOptions{}); }), ErrorKind::DimensionMismatch);
}

// ---------------------------------------------------------------------------
// Config

TEST(TtaConfig, InvalidCombinationsAreRejected) {
  TtaConfig c = method(LossKind::None);
  c.steps_per_batch = 1;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigInvalid);
  c = method(LossKind::Cafa);
  c.steps_per_batch = 0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigInvalid);
  c = method(LossKind::Cafa);
  c.adam.lr = 0.0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigInvalid);
  c = method(LossKind::Cafa);
  c.batch_size = 1;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigInvalid);
  c = method(LossKind::Cafa);
  c.forward_mode = StatMode::RunningEval;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigInvalid);
  c = method(LossKind::SupervisedCE);
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigInvalid);
}

// ---------------------------------------------------------------------------
// adapt_stream

TEST(AdaptStream, SourceBaselineLeavesModelBitwiseUnchanged) {
  const Bench& b = bench();
  AdaptiveModel m = b.model;
  const RunRecord rec = adapt_stream(m, b.stats, b.data.stream, method(LossKind::None));
  EXPECT_TRUE(m == b.model);
  ASSERT_EQ(rec.rows.size(), b.data.stream.size());
  for (std::size_t i = 0; i < rec.rows.size(); ++i) {
    EXPECT_EQ(rec.rows[i].batch_index, i);
    EXPECT_EQ(rec.rows[i].optimizer_steps, 0u);
    EXPECT_EQ(rec.rows[i].loss, 0.0);
    EXPECT_EQ(rec.rows[i].predictions, predict(b.model, b.data.stream[i].inputs, StatMode::RunningEval));
  }
}

TEST(AdaptStream, BnBaselineChangesPredictionsNotParameters) {
  const Bench& b = bench();
  AdaptiveModel src = b.model, bn = b.model;
  const RunRecord a = adapt_stream(src, b.stats, b.data.stream, method(LossKind::None));
  const RunRecord c = adapt_stream(bn, b.stats, b.data.stream, method_config("bn", LossKind::None));
  EXPECT_TRUE(bn == b.model);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < a.rows.size(); ++i) differing += a.rows[i].predictions != c.rows[i].predictions;
  EXPECT_GT(differing, 0u);
}

TEST(AdaptStream, PredictionsPrecedeUpdates) {
  // Replays the run by hand: the recorded predictions for batch i must be
  // exactly what the model left by batches < i predicts.
  const Bench& b = bench();
  const TtaConfig cfg = method(LossKind::Cafa, ParamGroup::BnOnly, 2);
  AdaptiveModel adapted = b.model;
  const RunRecord rec = adapt_stream(adapted, b.stats, b.data.stream, cfg);

  AdaptiveModel replay = b.model;
  AdamState adam;
  const LossSpec spec = LossSpec::cafa(b.stats);
  for (std::size_t i = 0; i < b.data.stream.size(); ++i) {
    const Matrix& x = b.data.stream[i].inputs;
    EXPECT_EQ(rec.rows[i].predictions, predict(replay, x, StatMode::BatchOnly)) << "batch " << i;
    for (std::size_t s = 0; s < cfg.steps_per_batch; ++s) {
      adam_step(replay, grad(replay, x, StatMode::BatchOnly, spec, ParamGroup::BnOnly), adam, cfg.adam);
    }
  }
  EXPECT_TRUE(replay == adapted);
  // Batch 0 is predicted by the untouched model.
  EXPECT_EQ(rec.rows[0].predictions, predict(b.model, b.data.stream[0].inputs, StatMode::BatchOnly));
}

TEST(AdaptStream, BnOnlyGroupKeepsEverythingElseBitwise) {
  const Bench& b = bench();
  for (LossKind kind : {LossKind::GlobalFA, LossKind::IntraOnly, LossKind::Cafa, LossKind::Entropy,
                        LossKind::PseudoLabelCE}) {
    AdaptiveModel m = b.model;
    (void)adapt_stream(m, b.stats, b.data.stream, method(kind));
    bool bn_moved = false;
    for (const auto& key : all_parameter_keys(m)) {
      if (key.is_bn()) bn_moved |= !same_parameter(m, b.model, key);
      else EXPECT_TRUE(same_parameter(m, b.model, key)) << to_string(kind) << " " << to_string(key.kind);
    }
    EXPECT_TRUE(bn_moved) << to_string(kind);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
      EXPECT_EQ(m.blocks[i].bn.running_mean, b.model.blocks[i].bn.running_mean);
      EXPECT_EQ(m.blocks[i].bn.running_var, b.model.blocks[i].bn.running_var);
    }
  }
}

TEST(AdaptStream, FeatureFullGroupNeverTouchesClassifier) {
  const Bench& b = bench();
  AdaptiveModel m = b.model;
  (void)adapt_stream(m, b.stats, b.data.stream, method(LossKind::Cafa, ParamGroup::FeatureFull));
  EXPECT_TRUE(m.classifier == b.model.classifier);
  EXPECT_FALSE(m.blocks[0].dense.weight == b.model.blocks[0].dense.weight);
}

TEST(AdaptStream, EachConfiguredStepRunsOncePerBatch) {
  const Bench& b = bench();
  for (std::size_t steps : {1u, 2u, 3u}) {
    AdaptiveModel m = b.model;
    const RunRecord rec = adapt_stream(m, b.stats, b.data.stream, method(LossKind::Cafa, ParamGroup::BnOnly, steps));
    ASSERT_EQ(rec.rows.size(), b.data.stream.size());
    for (const auto& r : rec.rows) EXPECT_EQ(r.optimizer_steps, steps);
  }
}

TEST(AdaptStream, DeterministicRecords) {
  const Bench& b = bench();
  AdaptiveModel m1 = b.model, m2 = b.model;
  const RunRecord r1 = adapt_stream(m1, b.stats, b.data.stream, method(LossKind::Cafa));
  const RunRecord r2 = adapt_stream(m2, b.stats, b.data.stream, method(LossKind::Cafa));
  ASSERT_EQ(r1.rows.size(), r2.rows.size());
  for (std::size_t i = 0; i < r1.rows.size(); ++i) {
    EXPECT_EQ(r1.rows[i].accuracy, r2.rows[i].accuracy);
    EXPECT_EQ(r1.rows[i].loss, r2.rows[i].loss);
    EXPECT_EQ(r1.rows[i].mean_intra, r2.rows[i].mean_intra);
    EXPECT_EQ(r1.rows[i].mean_inter, r2.rows[i].mean_inter);
    EXPECT_EQ(r1.rows[i].predictions, r2.rows[i].predictions);
  }
  EXPECT_TRUE(m1 == m2);
}

TEST(AdaptStream, RecordedLossIsPreUpdateLoss) {
  const Bench& b = bench();
  AdaptiveModel m = b.model;
  const RunRecord rec = adapt_stream(m, b.stats, b.data.stream, method(LossKind::Entropy));
  const Matrix f = forward_features(b.model, b.data.stream[0].inputs, StatMode::BatchOnly);
  EXPECT_EQ(rec.rows[0].loss, loss_entropy(forward_logits(b.model, f)));
  for (const auto& r : rec.rows) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
}

TEST(AdaptStream, NonFiniteLossAbortsWithPartialRecord) {
  const Bench& b = bench();
  std::vector<LabeledBatch> stream(b.data.stream.begin(), b.data.stream.begin() + 6);
  stream[3].inputs(5, 2) = std::numeric_limits<double>::quiet_NaN();
  AdaptiveModel m = b.model;
  try {
    (void)adapt_stream(m, b.stats, stream, method(LossKind::Cafa));
    FAIL() << "expected AdaptAborted";
  } catch (const AdaptAborted& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
    ASSERT_EQ(e.partial().rows.size(), 3u);
    EXPECT_EQ(e.partial().rows.back().batch_index, 2u);
  }
}

TEST(AdaptStream, MismatchedStatsAreRejected) {
  const Bench& b = bench();
  std::mt19937_64 rng(1);
  const SourceStats wrong = fixture::random_stats(b.model.feature_dim() + 1, 3, rng);
  AdaptiveModel m = b.model;
  EXPECT_EQ(kind_of([&] { (void)adapt_stream(m, wrong, b.data.stream, method(LossKind::Cafa)); }),
            ErrorKind::DimensionMismatch);
}

TEST(AdaptStream, BatchStatisticsCancelConstantInputOffset) {
  // The first dense layer maps a constant input offset to a constant
  // pre-normalization offset, which batch statistics subtract again.
  const Bench& b = bench();
  const Matrix& x = b.data.stream[0].inputs;
  const Matrix moved = x.rowwise() + Vector::Constant(x.cols(), 2.0).transpose();
  const Matrix f0 = forward_features(b.model, x, StatMode::BatchOnly);
  const Matrix f1 = forward_features(b.model, moved, StatMode::BatchOnly);
  EXPECT_LT((f0 - f1).cwiseAbs().maxCoeff(), 1e-9);
}

// With batch-statistics BN the mean shift is removed before adaptation starts
// (see above), so this run measures drift on effectively unshifted data.
TEST(AdaptStream, CafaImprovesOverMeanShiftedStream) {
  ExperimentConfig cfg = default_experiment(0);
  ShiftTransform t;
  t.kind = ShiftKind::MeanShift;
  t.offset = Vector::Constant(static_cast<Eigen::Index>(cfg.data.input_dim), 1.5);
  cfg.shift = ShiftSpec{{t}, 5};
  const Dataset data = generate_dataset(cfg.data, cfg.shift);
  const AdaptiveModel model = pretrain_source(cfg.arch, cfg.pretrain, data).model;
  const SourceStats stats = estimate_source_stats(model, data.train_x, data.train_y, CovarianceMode::ClassWise);
  AdaptiveModel m = model;
  const RunRecord rec = adapt_stream(m, stats, data.stream, method(LossKind::Cafa));
  const std::size_t half = rec.rows.size() / 2;
  double first = 0.0, second = 0.0;
  for (std::size_t i = 0; i < rec.rows.size(); ++i) (i < half ? first : second) += rec.rows[i].accuracy;
  first /= static_cast<double>(half);
  second /= static_cast<double>(rec.rows.size() - half);
  EXPECT_GT(second, first);
}
