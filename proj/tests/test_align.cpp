#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "cafa/align.hpp"
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

/// Stats holding exactly the given Gaussians (global stats = first class).
SourceStats stats_of(std::vector<ClassGaussian> classes) {
  SourceStats s;
  s.global_mu = classes.front().mu;
  s.global_sigma = classes.front().sigma;
  s.global_n = 10;
  s.classes = std::move(classes);
  return s;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

/// Brute-force Eq. terms per sample via explicit inverses of Σ_c + ε_c I.
double explicit_distance(const Vector& x, const ClassGaussian& g) {
  Matrix reg = g.sigma;
  reg.diagonal().array() += g.eps;
  return oracle::mahalanobis_explicit(oracle::to_vec(x), oracle::to_vec(g.mu), oracle::to_mat(reg));
}

}  // namespace

// ---------------------------------------------------------------------------
// Distances

TEST(Mahalanobis, ZeroAtTheMean) {
  std::mt19937_64 rng(1);
  const ClassGaussian g = ClassGaussian::make(0, oracle::random_vector(3, rng), oracle::random_spd(3, rng), 10);
  EXPECT_EQ(mahalanobis(g.mu, g), 0.0);
}

TEST(Mahalanobis, EuclideanCaseWithRegularization) {
  const ClassGaussian g = ClassGaussian::make(0, Vector::Zero(2), Matrix::Identity(2, 2), 10);
  EXPECT_DOUBLE_EQ(g.eps, 1e-6);
  EXPECT_NEAR(mahalanobis(vec({3.0, 4.0}), g), 25.0 / (1.0 + 1e-6), 1e-12);
  EXPECT_NEAR(mahalanobis(vec({3.0, 4.0}), g), 25.0, 1e-4);
}

TEST(Mahalanobis, MatchesExplicitInverse) {
  std::mt19937_64 rng(2);
  for (std::size_t d : {2u, 3u, 6u}) {
    for (int k = 0; k < 20; ++k) {
      const ClassGaussian g =
          ClassGaussian::make(0, oracle::random_vector(d, rng), oracle::random_spd(d, rng), 10);
      const Vector x = oracle::random_vector(d, rng, 2.0);
      const double ref = explicit_distance(x, g);
      EXPECT_NEAR(mahalanobis(x, g), ref, 1e-9 * ref);
      EXPECT_GE(mahalanobis(x, g), 0.0);
    }
  }
}

TEST(Mahalanobis, InvariantUnderSharedLinearMap) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    const Matrix sigma = oracle::random_spd(4, rng);
    const Vector mu = oracle::random_vector(4, rng);
    const Vector x = oracle::random_vector(4, rng);
    const Matrix a = oracle::random_matrix(4, 4, rng) + 3.0 * Matrix::Identity(4, 4);
    const ClassGaussian g = ClassGaussian::make(0, mu, sigma, 10, 0.0);
    Matrix mapped = a * sigma * a.transpose();
    mapped = 0.5 * (mapped + mapped.transpose());
    const ClassGaussian h = ClassGaussian::make(0, a * mu, mapped, 10, 0.0);
    const double d0 = mahalanobis(x, g);
    EXPECT_NEAR(mahalanobis(a * x, h), d0, 1e-8 * std::max(1.0, d0));
  }
}

TEST(Mahalanobis, DimensionMismatchIsRejected) {
  const ClassGaussian g = ClassGaussian::make(0, Vector::Zero(2), Matrix::Identity(2, 2), 10);
  EXPECT_EQ(kind_of([&] { (void)mahalanobis(Vector::Zero(3), g); }), ErrorKind::DimensionMismatch);
}

TEST(IntraDistance, ZeroAtOwnMeanAndSymmetricPair) {
  const ClassGaussian a = ClassGaussian::make(0, vec({-1.0, 0.0}), Matrix::Identity(2, 2), 10);
  const ClassGaussian b = ClassGaussian::make(1, vec({1.0, 0.0}), Matrix::Identity(2, 2), 10);
  const SourceStats s = stats_of({a, b});
  EXPECT_EQ(intra_distance(a.mu, 0, s), 0.0);
  EXPECT_EQ(intra_distance(b.mu, 1, s), 0.0);
  EXPECT_GT(intra_distance(b.mu, 0, s), 0.0);
  EXPECT_EQ(intra_distance(b.mu, 0, s), intra_distance(a.mu, 1, s));
}

TEST(IntraDistance, EqualsMahalanobisToLabelClass) {
  std::mt19937_64 rng(4);
  const SourceStats s = fixture::random_stats(4, 3, rng);
  for (int k = 0; k < 10; ++k) {
    const Vector x = oracle::random_vector(4, rng, 2.0);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(intra_distance(x, c, s), mahalanobis(x, s.classes[static_cast<std::size_t>(c)]));
  }
}

TEST(IntraDistance, UnknownClassIsRejected) {
  std::mt19937_64 rng(5);
  const SourceStats s = fixture::random_stats(2, 2, rng);
  EXPECT_EQ(kind_of([&] { (void)intra_distance(Vector::Zero(2), 2, s); }), ErrorKind::UnknownClass);
  EXPECT_EQ(kind_of([&] { (void)intra_distance(Vector::Zero(2), -1, s); }), ErrorKind::UnknownClass);
}

TEST(InterDistance, TwoClassesIsDistanceToTheOther) {
  std::mt19937_64 rng(6);
  const SourceStats s = fixture::random_stats(3, 2, rng);
  const Vector x = oracle::random_vector(3, rng);
  EXPECT_EQ(inter_distance(x, 0, s), mahalanobis(x, s.classes[1]));
  EXPECT_EQ(inter_distance(x, 1, s), mahalanobis(x, s.classes[0]));
}

TEST(InterDistance, AverageOfEqualDistances) {
  // x at the origin, three other unit-covariance classes on a circle of radius 2.
  std::vector<ClassGaussian> cls;
  cls.push_back(ClassGaussian::make(0, vec({0.0, 0.0}), Matrix::Identity(2, 2), 10));
  for (int k = 0; k < 3; ++k) {
    const double t = 2.0 * M_PI * k / 3.0;
    cls.push_back(ClassGaussian::make(static_cast<std::size_t>(k + 1), vec({2.0 * std::cos(t), 2.0 * std::sin(t)}),
                                      Matrix::Identity(2, 2), 10));
  }
  const SourceStats s = stats_of(cls);
  const double v = mahalanobis(Vector::Zero(2), s.classes[1]);
  EXPECT_NEAR(inter_distance(Vector::Zero(2), 0, s), v, 1e-12);
  EXPECT_NEAR(v, 4.0 / (1.0 + 1e-6), 1e-12);
}

TEST(InterDistance, MatchesBruteForceOverOtherClasses) {
  std::mt19937_64 rng(7);
  const SourceStats s = fixture::random_stats(5, 4, rng);
  for (int k = 0; k < 10; ++k) {
    const Vector x = oracle::random_vector(5, rng, 2.0);
    for (int y = 0; y < 4; ++y) {
      double ref = 0.0;
      for (int c = 0; c < 4; ++c) {
        if (c != y) ref += explicit_distance(x, s.classes[static_cast<std::size_t>(c)]);
      }
      ref /= 3.0;
      EXPECT_NEAR(inter_distance(x, y, s), ref, 1e-9 * ref);
    }
  }
}

TEST(InterDistance, SingleClassIsRejected) {
  std::mt19937_64 rng(8);
  const SourceStats s = fixture::random_stats(2, 1, rng);
  EXPECT_EQ(kind_of([&] { (void)inter_distance(Vector::Zero(2), 0, s); }), ErrorKind::SingleClass);
}

// ---------------------------------------------------------------------------
// Global alignment

TEST(GlobalFa, ZeroWhenBatchMatchesSourceMoments) {
  std::mt19937_64 rng(9);
  const Matrix batch = oracle::random_matrix(12, 3, rng);
  const MeanCov mc = mean_and_cov(batch);
  SourceStats s = fixture::random_stats(3, 2, rng);
  s.global_mu = mc.mean;
  s.global_sigma = mc.cov;
  EXPECT_EQ(loss_global_fa(batch, s), 0.0);
}

TEST(GlobalFa, ConstructedScalarMatch) {
  SourceStats s = stats_of({ClassGaussian::make(0, vec({0.0}), Matrix::Identity(1, 1), 2)});
  s.global_mu = vec({0.0});
  s.global_sigma = Matrix::Identity(1, 1);
  Matrix batch(2, 1);
  batch << -1.0, 1.0;
  EXPECT_EQ(loss_global_fa(batch, s), 0.0);
}

TEST(GlobalFa, MatchesNaiveRecomputation) {
  std::mt19937_64 rng(10);
  const SourceStats s = fixture::random_stats(4, 3, rng);
  const Matrix batch = oracle::random_matrix(20, 4, rng, 1.5);
  const oracle::MeanCov t = oracle::two_pass(oracle::to_mat(batch));
  double ref = 0.0;
  for (int i = 0; i < 4; ++i) {
    ref += (s.global_mu(i) - t.mean[i]) * (s.global_mu(i) - t.mean[i]);
    for (int j = 0; j < 4; ++j) ref += (s.global_sigma(i, j) - t.cov[i][j]) * (s.global_sigma(i, j) - t.cov[i][j]);
  }
  EXPECT_NEAR(loss_global_fa(batch, s), ref, 1e-12 * std::max(1.0, ref));
}

TEST(GlobalFa, SingleRowIsBatchTooSmall) {
  std::mt19937_64 rng(11);
  const SourceStats s = fixture::random_stats(2, 2, rng);
  EXPECT_EQ(kind_of([&] { (void)loss_global_fa(Matrix::Zero(1, 2), s); }), ErrorKind::BatchTooSmall);
}

// ---------------------------------------------------------------------------
// Intra / CAFA

TEST(IntraLoss, ZeroAtClassMeans) {
  std::mt19937_64 rng(12);
  const SourceStats s = fixture::random_stats(3, 3, rng);
  Matrix batch(3, 3);
  for (int c = 0; c < 3; ++c) batch.row(c) = s.classes[static_cast<std::size_t>(c)].mu.transpose();
  const std::vector<int> y{0, 1, 2};
  EXPECT_EQ(loss_intra(batch, y, s), 0.0);
}

TEST(IntraLoss, SingleSampleEqualsIntraDistance) {
  std::mt19937_64 rng(13);
  const SourceStats s = fixture::random_stats(3, 3, rng);
  const Vector x = oracle::random_vector(3, rng);
  const std::vector<int> y{2};
  EXPECT_EQ(loss_intra(Matrix(x.transpose()), y, s), intra_distance(x, 2, s));
}

TEST(IntraLoss, MatchesBruteForceLoop) {
  std::mt19937_64 rng(14);
  const SourceStats s = fixture::random_stats(4, 3, rng);
  const Matrix batch = oracle::random_matrix(10, 4, rng, 2.0);
  std::vector<int> y(10);
  double ref = 0.0;
  for (int r = 0; r < 10; ++r) {
    y[static_cast<std::size_t>(r)] = r % 3;
    ref += intra_distance(batch.row(r).transpose(), r % 3, s);
  }
  ref /= 10.0;
  EXPECT_EQ(loss_intra(batch, y, s), ref);
}

TEST(IntraLoss, UnknownClassIsRejected) {
  std::mt19937_64 rng(15);
  const SourceStats s = fixture::random_stats(2, 2, rng);
  const std::vector<int> y{0, 3};
  EXPECT_EQ(kind_of([&] { (void)loss_intra(Matrix::Zero(2, 2), y, s); }), ErrorKind::UnknownClass);
}

TEST(CafaLoss, SingleClassIsExactlyZero) {
  std::mt19937_64 rng(16);
  const SourceStats s = fixture::random_stats(3, 1, rng);
  for (int k = 0; k < 5; ++k) {
    const Matrix batch = oracle::random_matrix(7, 3, rng, 3.0);
    const std::vector<int> y(7, 0);
    EXPECT_EQ(loss_cafa(batch, y, s), 0.0);
  }
  const std::vector<int> y{0};
  EXPECT_EQ(loss_cafa(Matrix(s.classes[0].mu.transpose()), y, s), 0.0);
}

TEST(CafaLoss, ClampAtOwnClassMean) {
  std::mt19937_64 rng(17);
  const SourceStats s = fixture::random_stats(3, 2, rng);
  const Vector x = s.classes[0].mu;
  const double v = mahalanobis(x, s.classes[1]);
  ASSERT_GT(v, 0.0);
  const std::vector<int> y{0};
  const double term = loss_cafa(Matrix(x.transpose()), y, s);
  EXPECT_DOUBLE_EQ(term, std::log(kCafaClamp / (kCafaClamp + v)));
  EXPECT_LT(term, -20.0);
}

TEST(CafaLoss, MatchesBruteForceLoop) {
  std::mt19937_64 rng(18);
  const SourceStats s = fixture::random_stats(4, 3, rng);
  const Matrix batch = oracle::random_matrix(8, 4, rng, 2.0);
  std::vector<int> y(8);
  double ref = 0.0;
  for (int r = 0; r < 8; ++r) {
    const int label = (r * 7) % 3;
    y[static_cast<std::size_t>(r)] = label;
    const Vector x = batch.row(r).transpose();
    double total = 0.0;
    for (int c = 0; c < 3; ++c) total += explicit_distance(x, s.classes[static_cast<std::size_t>(c)]);
    ref += std::log(explicit_distance(x, s.classes[static_cast<std::size_t>(label)]) / total);
  }
  ref /= 8.0;
  EXPECT_NEAR(loss_cafa(batch, y, s), ref, 1e-10);
}

TEST(CafaLoss, PerSampleTermIsNegative) {
  std::mt19937_64 rng(19);
  const SourceStats s = fixture::random_stats(3, 4, rng);
  for (int k = 0; k < 50; ++k) {
    const Vector x = oracle::random_vector(3, rng, 3.0);
    const std::vector<int> y{k % 4};
    EXPECT_LT(loss_cafa(Matrix(x.transpose()), y, s), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Logit losses

TEST(EntropyLoss, PointMassIsZero) {
  Matrix logits = Matrix::Zero(2, 3);
  logits(0, 1) = 1e6;
  logits(1, 2) = 1e6;
  EXPECT_NEAR(loss_entropy(logits), 0.0, 1e-12);
}

TEST(EntropyLoss, UniformIsLogC) {
  EXPECT_NEAR(loss_entropy(Matrix::Constant(3, 4, 0.7)), std::log(4.0), 1e-15);
  EXPECT_NEAR(loss_entropy(Matrix::Constant(3, 4, 0.7)), 1.386294, 1e-6);
}

TEST(EntropyLoss, MatchesDirectFormulaAndBounds) {
  std::mt19937_64 rng(20);
  const Matrix logits = oracle::random_matrix(25, 5, rng, 2.0);
  double ref = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < 5; ++c) z += std::exp(logits(r, c));
    for (Eigen::Index c = 0; c < 5; ++c) {
      const double p = std::exp(logits(r, c)) / z;
      ref -= p * std::log(p);
    }
  }
  ref /= 25.0;
  const double h = loss_entropy(logits);
  EXPECT_NEAR(h, ref, 1e-10);
  EXPECT_GE(h, 0.0);
  EXPECT_LE(h, std::log(5.0));
}

TEST(PseudoLabelLoss, ConfidentAtPseudoLabelIsZero) {
  Matrix logits = Matrix::Zero(2, 3);
  logits(0, 2) = 1e6;
  logits(1, 0) = 1e6;
  const std::vector<int> y{2, 0};
  EXPECT_NEAR(loss_pseudo_label(logits, y), 0.0, 1e-12);
}

TEST(PseudoLabelLoss, UniformIsLogC) {
  const std::vector<int> y{0, 3, 1};
  EXPECT_NEAR(loss_pseudo_label(Matrix::Zero(3, 4), y), std::log(4.0), 1e-15);
}

TEST(PseudoLabelLoss, MatchesDirectFormula) {
  std::mt19937_64 rng(21);
  const Matrix logits = oracle::random_matrix(12, 4, rng, 2.0);
  const std::vector<int> y = argmax_rows(logits);
  double ref = 0.0;
  for (Eigen::Index r = 0; r < 12; ++r) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < 4; ++c) z += std::exp(logits(r, c));
    ref -= std::log(std::exp(logits(r, y[static_cast<std::size_t>(r)])) / z);
  }
  ref /= 12.0;
  const double v = loss_pseudo_label(logits, y);
  EXPECT_NEAR(v, ref, 1e-10);
  EXPECT_GE(v, 0.0);
}

TEST(PseudoLabelLoss, UnknownClassIsRejected) {
  const std::vector<int> y{0, 4};
  EXPECT_EQ(kind_of([&] { (void)loss_pseudo_label(Matrix::Zero(2, 4), y); }), ErrorKind::UnknownClass);
}

// ---------------------------------------------------------------------------
// Dispatch and instrumentation

TEST(EvaluateLoss, PseudoLabelsAreRowArgmax) {
  std::mt19937_64 rng(22);
  const SourceStats s = fixture::random_stats(3, 3, rng);
  const Matrix feats = oracle::random_matrix(9, 3, rng);
  const Matrix logits = oracle::random_matrix(9, 3, rng);
  const LossEval e = evaluate_loss(LossSpec::cafa(s), feats, logits);
  EXPECT_EQ(e.pseudo_labels, argmax_rows(logits));
  EXPECT_EQ(e.value, loss_cafa(feats, argmax_rows(logits), s));
}

TEST(EvaluateLoss, AlignmentLossWithoutStatsIsRejected) {
  const LossSpec bad{LossKind::Cafa, nullptr, {}};
  EXPECT_EQ(kind_of([&] { (void)evaluate_loss(bad, Matrix::Zero(2, 2), Matrix::Zero(2, 2)); }),
            ErrorKind::InvalidArgument);
}

TEST(EvaluateLoss, NonFiniteFeaturesGiveNonFiniteLoss) {
  std::mt19937_64 rng(23);
  const SourceStats s = fixture::random_stats(2, 2, rng);
  Matrix feats = Matrix::Zero(3, 2);
  feats(1, 0) = std::numeric_limits<double>::infinity();
  EXPECT_EQ(kind_of([&] { (void)evaluate_loss(LossSpec::global_fa(s), feats, Matrix::Zero(3, 2)); }),
            ErrorKind::NonFiniteLoss);
}

TEST(EvaluateLoss, LossesAreBitwiseDeterministic) {
  std::mt19937_64 rng(24);
  const SourceStats s = fixture::random_stats(4, 3, rng);
  const Matrix feats = oracle::random_matrix(16, 4, rng);
  const Matrix logits = oracle::random_matrix(16, 3, rng);
  for (const LossSpec& spec : {LossSpec::global_fa(s), LossSpec::intra(s), LossSpec::cafa(s), LossSpec::entropy(),
                               LossSpec::pseudo_label()}) {
    const LossEval a = evaluate_loss(spec, feats, logits);
    const LossEval b = evaluate_loss(spec, feats, logits);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.dfeatures, b.dfeatures);
    EXPECT_EQ(a.dlogits, b.dlogits);
  }
}

TEST(DistanceReport, ZeroIntraAtTrueMeans) {
  std::mt19937_64 rng(25);
  const SourceStats s = fixture::random_stats(3, 3, rng);
  Matrix batch(3, 3);
  for (int c = 0; c < 3; ++c) batch.row(c) = s.classes[static_cast<std::size_t>(c)].mu.transpose();
  const std::vector<int> y{0, 1, 2};
  EXPECT_EQ(distance_report(batch, y, s).mean_intra, 0.0);
}

TEST(DistanceReport, TwoClassInterIsCrossDistance) {
  const ClassGaussian a = ClassGaussian::make(0, vec({-1.0, 0.0}), Matrix::Identity(2, 2), 10);
  const ClassGaussian b = ClassGaussian::make(1, vec({1.0, 0.0}), Matrix::Identity(2, 2), 10);
  const SourceStats s = stats_of({a, b});
  Matrix batch(2, 2);
  batch << -1.0, 0.5, 1.0, -0.5;
  const std::vector<int> y{0, 1};
  const double cross = 0.5 * (mahalanobis(batch.row(0).transpose(), b) + mahalanobis(batch.row(1).transpose(), a));
  EXPECT_NEAR(distance_report(batch, y, s).mean_inter, cross, 1e-15);
}

TEST(DistanceReport, MatchesPerSampleBruteForce) {
  std::mt19937_64 rng(26);
  const SourceStats s = fixture::random_stats(4, 3, rng);
  const Matrix batch = oracle::random_matrix(12, 4, rng, 2.0);
  std::vector<int> y(12);
  double intra = 0.0, inter = 0.0;
  for (int r = 0; r < 12; ++r) {
    y[static_cast<std::size_t>(r)] = r % 3;
    const Vector x = batch.row(r).transpose();
    intra += explicit_distance(x, s.classes[static_cast<std::size_t>(r % 3)]);
    double other = 0.0;
    for (int c = 0; c < 3; ++c) {
      if (c != r % 3) other += explicit_distance(x, s.classes[static_cast<std::size_t>(c)]);
    }
    inter += other / 2.0;
  }
  const DistanceReport rep = distance_report(batch, y, s);
  EXPECT_NEAR(rep.mean_intra, intra / 12.0, 1e-12 * std::max(1.0, intra / 12.0));
  EXPECT_NEAR(rep.mean_inter, inter / 12.0, 1e-12 * std::max(1.0, inter / 12.0));
  EXPECT_GE(rep.mean_intra, 0.0);
  EXPECT_GE(rep.mean_inter, 0.0);
}

TEST(DistanceReport, SingleClassIsRejected) {
  std::mt19937_64 rng(27);
  const SourceStats s = fixture::random_stats(2, 1, rng);
  const std::vector<int> y{0, 0};
  EXPECT_EQ(kind_of([&] { (void)distance_report(Matrix::Zero(2, 2), y, s); }), ErrorKind::SingleClass);
}
