#pragma once

// Dense linear algebra shared by every other module: the matrix/vector
// carriers, SPD factorization with solves, and the (biased) sample mean and
// covariance used for class-conditional statistics.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "cafa/error.hpp"

namespace cafa {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// Lower-triangular Cholesky factor L of a symmetric positive-definite
/// matrix A = L Lᵀ.
class SpdFactor {
 public:
  SpdFactor() = default;

  std::size_t dim() const { return static_cast<std::size_t>(lower_.rows()); }
  const Matrix& lower() const { return lower_; }

  Matrix reconstruct() const { return lower_ * lower_.transpose(); }

  /// Solves (L Lᵀ) x = b by forward then backward substitution.
  Vector solve(const Vector& b) const {
    detail::require(static_cast<std::size_t>(b.size()) == dim(), ErrorKind::DimensionMismatch,
                    "spd_solve: factor dim " + std::to_string(dim()) + " vs rhs " +
                        std::to_string(b.size()));
    Vector y = lower_.triangularView<Eigen::Lower>().solve(b);
    return lower_.transpose().triangularView<Eigen::Upper>().solve(y);
  }

  /// x = A⁻¹ b followed by bᵀ x, i.e. the quadratic form bᵀ A⁻¹ b.
  double inverse_quadratic(const Vector& b) const {
    // ‖L⁻¹ b‖² avoids the second triangular solve.
    detail::require(static_cast<std::size_t>(b.size()) == dim(), ErrorKind::DimensionMismatch,
                    "inverse_quadratic: dim mismatch");
    Vector y = lower_.triangularView<Eigen::Lower>().solve(b);
    return y.squaredNorm();
  }

  friend SpdFactor spd_factor(const Matrix& m);

 private:
  explicit SpdFactor(Matrix lower) : lower_(std::move(lower)) {}
  Matrix lower_;
};

inline SpdFactor spd_factor(const Matrix& m) {
  detail::require(m.rows() == m.cols(), ErrorKind::DimensionMismatch,
                  "spd_factor: matrix not square (" + shape_str(m) + ")");
  detail::require(m.rows() > 0, ErrorKind::EmptyInput, "spd_factor: empty matrix");
  detail::require(all_finite(m), ErrorKind::InvalidArgument, "spd_factor: non-finite entries");
  const double asym = (m - m.transpose()).norm();
  detail::require(asym <= 1e-10 * m.norm(), ErrorKind::InvalidArgument,
                  "spd_factor: matrix not symmetric");

  Eigen::LLT<Matrix, Eigen::Lower> llt(m);
  detail::require(llt.info() == Eigen::Success, ErrorKind::NotPositiveDefinite,
                  "spd_factor: non-positive pivot encountered");
  Matrix lower = llt.matrixL();
  for (Eigen::Index i = 0; i < lower.rows(); ++i) {
    detail::require(lower(i, i) > 0.0 && std::isfinite(lower(i, i)),
                    ErrorKind::NotPositiveDefinite, "spd_factor: non-positive pivot encountered");
  }
  return SpdFactor(std::move(lower));
}

inline Vector spd_solve(const SpdFactor& f, const Vector& b) { return f.solve(b); }

/// Scatter Σ (x-μ)(x-μ)ᵀ of `samples` around `mean`, upper triangle
/// accumulated in row order then mirrored. Not normalized.
inline Matrix scatter(const Matrix& samples, const Vector& mean) {
  const Eigen::Index d = samples.cols();
  Matrix s = Matrix::Zero(d, d);
  Vector centered(d);
  for (Eigen::Index r = 0; r < samples.rows(); ++r) {
    for (Eigen::Index j = 0; j < d; ++j) centered(j) = samples(r, j) - mean(j);
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = i; j < d; ++j) s(i, j) += centered(i) * centered(j);
    }
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = i + 1; j < d; ++j) s(j, i) = s(i, j);
  }
  return s;
}

struct MeanCov {
  Vector mean;
  Matrix cov;
};

/// Sample mean and 1/N-normalized covariance of the rows of `samples`.
/// Reductions run sequentially in row order so results are bit-reproducible;
/// the covariance is symmetric by construction (upper triangle mirrored).
inline MeanCov mean_and_cov(const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  detail::require(n >= 1, ErrorKind::EmptyInput, "mean_and_cov: no samples");

  MeanCov out{Vector::Zero(d), Matrix()};
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index j = 0; j < d; ++j) out.mean(j) += samples(r, j);
  }
  out.mean /= static_cast<double>(n);
  out.cov = scatter(samples, out.mean) / static_cast<double>(n);
  return out;
}

inline MeanCov mean_and_cov(std::span<const Vector> samples) {
  detail::require(!samples.empty(), ErrorKind::EmptyInput, "mean_and_cov: no samples");
  const auto d = samples.front().size();
  Matrix rows(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    detail::require(samples[r].size() == d, ErrorKind::DimensionMismatch,
                    "mean_and_cov: samples of different dimension");
    rows.row(static_cast<Eigen::Index>(r)) = samples[r].transpose();
  }
  return mean_and_cov(rows);
}

}  // namespace cafa
