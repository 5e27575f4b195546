#pragma once

// Distances between target features and source Gaussians, and every loss an
// adaptation run can minimize. Each loss optionally writes its gradient with
// respect to its input (features or logits) so value and gradient come from
// the same arithmetic.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cafa/nn.hpp"
#include "cafa/stats.hpp"

namespace cafa {

/// Lower clamp applied to both sides of the CAFA log-ratio.
inline constexpr double kCafaClamp = 1e-12;

enum class LossKind { None, GlobalFA, IntraOnly, Cafa, Entropy, PseudoLabelCE, SupervisedCE };

inline const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::None: return "none";
    case LossKind::GlobalFA: return "global_fa";
    case LossKind::IntraOnly: return "intra";
    case LossKind::Cafa: return "cafa";
    case LossKind::Entropy: return "entropy";
    case LossKind::PseudoLabelCE: return "pseudo_label";
    case LossKind::SupervisedCE: return "supervised";
  }
  return "?";
}

inline bool needs_source_stats(LossKind kind) {
  return kind == LossKind::GlobalFA || kind == LossKind::IntraOnly || kind == LossKind::Cafa;
}

/// What to minimize. Alignment losses borrow the source statistics;
/// SupervisedCE borrows the ground-truth labels. Both must outlive the spec.
struct LossSpec {
  LossKind kind = LossKind::None;
  const SourceStats* stats = nullptr;
  std::span<const int> labels;

  static LossSpec none() { return {}; }
  static LossSpec global_fa(const SourceStats& s) { return {LossKind::GlobalFA, &s, {}}; }
  static LossSpec intra(const SourceStats& s) { return {LossKind::IntraOnly, &s, {}}; }
  static LossSpec cafa(const SourceStats& s) { return {LossKind::Cafa, &s, {}}; }
  static LossSpec entropy() { return {LossKind::Entropy, nullptr, {}}; }
  static LossSpec pseudo_label() { return {LossKind::PseudoLabelCE, nullptr, {}}; }
  static LossSpec supervised(std::span<const int> y) { return {LossKind::SupervisedCE, nullptr, y}; }

  void validate() const {
    detail::require(!needs_source_stats(kind) || stats != nullptr, ErrorKind::InvalidArgument,
                    std::string(to_string(kind)) + " loss requires source statistics");
  }
};

// ---------------------------------------------------------------------------
// Distances

namespace detail {

inline void check_label(int label, std::size_t num_classes) {
  require(label >= 0 && static_cast<std::size_t>(label) < num_classes, ErrorKind::UnknownClass,
          "label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) + ")");
}

/// D = ‖L⁻¹ δ‖²; optional gradient 2 (LLᵀ)⁻¹ δ.
inline double mahalanobis_impl(const Vector& x, const ClassGaussian& g, Vector* grad) {
  require(x.size() == g.mu.size(), ErrorKind::DimensionMismatch,
          "feature dim " + std::to_string(x.size()) + " vs Gaussian dim " + std::to_string(g.mu.size()));
  const Vector delta = x - g.mu;
  const Matrix& lower = g.precision.lower();
  const Vector y = lower.triangularView<Eigen::Lower>().solve(delta);
  if (grad) *grad = 2.0 * lower.transpose().triangularView<Eigen::Upper>().solve(y);
  return y.squaredNorm();
}

}  // namespace detail

/// (x-μ)ᵀ (Σ + εI)⁻¹ (x-μ) with the Gaussian's cached factor.
inline double mahalanobis(const Vector& x, const ClassGaussian& g) {
  return detail::mahalanobis_impl(x, g, nullptr);
}

inline double intra_distance(const Vector& x, int label, const SourceStats& stats) {
  detail::check_label(label, stats.num_classes());
  return mahalanobis(x, stats.classes[static_cast<std::size_t>(label)]);
}

/// Mean distance to every class other than `label`.
inline double inter_distance(const Vector& x, int label, const SourceStats& stats) {
  const std::size_t c = stats.num_classes();
  detail::require(c >= 2, ErrorKind::SingleClass, "inter-class distance needs at least two classes");
  detail::check_label(label, c);
  double sum = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    if (static_cast<int>(k) != label) sum += mahalanobis(x, stats.classes[k]);
  }
  return sum / static_cast<double>(c - 1);
}

// ---------------------------------------------------------------------------
// Feature-space losses

namespace detail {

inline void check_batch(const Matrix& feats, std::span<const int> labels, const SourceStats& stats) {
  require(static_cast<std::size_t>(feats.cols()) == stats.feature_dim(), ErrorKind::DimensionMismatch,
          "batch feature dim " + std::to_string(feats.cols()) + " vs stats dim " +
              std::to_string(stats.feature_dim()));
  require(static_cast<std::size_t>(feats.rows()) == labels.size(), ErrorKind::DimensionMismatch,
          "features and labels differ in length");
  require(feats.rows() >= 1, ErrorKind::EmptyInput, "empty batch");
  for (int y : labels) check_label(y, stats.num_classes());
}

}  // namespace detail

/// ‖μ_s − μ_t‖² + ‖Σ_s − Σ_t‖_F² against the batch's own mean and
/// 1/N covariance.
inline double loss_global_fa(const Matrix& feats, const SourceStats& stats, Matrix* grad = nullptr) {
  detail::require(static_cast<std::size_t>(feats.cols()) == stats.feature_dim(),
                  ErrorKind::DimensionMismatch, "batch feature dim vs stats dim");
  detail::require(feats.rows() >= 2, ErrorKind::BatchTooSmall,
                  "batch covariance needs at least 2 rows");
  const MeanCov target = mean_and_cov(feats);
  const Vector mean_gap = target.mean - stats.global_mu;
  const Matrix cov_gap = target.cov - stats.global_sigma;
  if (grad) {
    const double n = static_cast<double>(feats.rows());
    Matrix centered = feats.rowwise() - target.mean.transpose();
    // Row k enters Σ_t through both factors of c_k c_kᵀ; the centering
    // correction sums to zero over rows.
    *grad = (4.0 / n) * centered * cov_gap;  // cov_gap symmetric
    grad->rowwise() += ((2.0 / n) * mean_gap).transpose();
  }
  return mean_gap.squaredNorm() + cov_gap.squaredNorm();
}

/// Batch mean of the distance from each feature to its (pseudo-)label's Gaussian.
inline double loss_intra(const Matrix& feats, std::span<const int> labels, const SourceStats& stats,
                         Matrix* grad = nullptr) {
  detail::check_batch(feats, labels, stats);
  const Eigen::Index n = feats.rows();
  if (grad) grad->setZero(n, feats.cols());
  double sum = 0.0;
  Vector g;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& cls = stats.classes[static_cast<std::size_t>(labels[static_cast<std::size_t>(r)])];
    sum += detail::mahalanobis_impl(feats.row(r).transpose(), cls, grad ? &g : nullptr);
    if (grad) grad->row(r) = g.transpose() / static_cast<double>(n);
  }
  return sum / static_cast<double>(n);
}

/// Batch mean of log(D_intra / Σ_c D_c). The denominator sums over every
/// class including the predicted one. The predicted-class distance is
/// clamped below at kCafaClamp before it enters either side, so a feature
/// sitting on its class mean contributes log(δ / (δ + Σ_{c≠ŷ} D_c)).
inline double loss_cafa(const Matrix& feats, std::span<const int> labels, const SourceStats& stats,
                        Matrix* grad = nullptr) {
  detail::check_batch(feats, labels, stats);
  const Eigen::Index n = feats.rows();
  const std::size_t c = stats.num_classes();
  if (grad) grad->setZero(n, feats.cols());

  double sum = 0.0;
  std::vector<double> dist(c);
  std::vector<Vector> dgrad(c);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Vector x = feats.row(r).transpose();
    const auto label = static_cast<std::size_t>(labels[static_cast<std::size_t>(r)]);
    double others = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      dist[k] = detail::mahalanobis_impl(x, stats.classes[k], grad ? &dgrad[k] : nullptr);
      if (k != label) others += dist[k];
    }
    const bool clamped = !(dist[label] > kCafaClamp);
    const double num = clamped ? kCafaClamp : dist[label];
    const double den = std::max(num + others, kCafaClamp);
    sum += std::log(num / den);
    if (grad) {
      // d/dx [log num − log den]; a clamped numerator is constant in x.
      Vector dnum = clamped ? Vector::Zero(x.size()) : dgrad[label];
      Vector dden = dnum;
      for (std::size_t k = 0; k < c; ++k) {
        if (k != label) dden += dgrad[k];
      }
      const Vector g = (clamped ? Vector::Zero(x.size()) : Vector(dnum / num)) - dden / den;
      grad->row(r) = g.transpose() / static_cast<double>(n);
    }
  }
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Logit-space losses

namespace detail {

inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace detail

/// Mean Shannon entropy (nats) of the row softmaxes.
inline double loss_entropy(const Matrix& logits, Matrix* grad = nullptr) {
  detail::require(logits.rows() >= 1 && logits.cols() >= 1, ErrorKind::EmptyInput, "empty logits");
  const Matrix logp = detail::log_softmax(logits);
  const Matrix p = logp.array().exp();
  const double n = static_cast<double>(logits.rows());
  double sum = 0.0;
  if (grad) grad->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double h = -(p.row(r).array() * logp.row(r).array()).sum();
    sum += h;
    // dH/dz_j = -p_j (log p_j + H)
    if (grad) grad->row(r) = -(p.row(r).array() * (logp.row(r).array() + h)) / n;
  }
  return sum / n;
}

/// Mean cross-entropy of the row softmaxes against `labels`.
inline double loss_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                 Matrix* grad = nullptr) {
  detail::require(static_cast<std::size_t>(logits.rows()) == labels.size(),
                  ErrorKind::DimensionMismatch, "logits and labels differ in length");
  detail::require(logits.rows() >= 1, ErrorKind::EmptyInput, "empty logits");
  for (int y : labels) detail::check_label(y, static_cast<std::size_t>(logits.cols()));
  const Matrix logp = detail::log_softmax(logits);
  const double n = static_cast<double>(logits.rows());
  double sum = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) sum -= logp(r, labels[static_cast<std::size_t>(r)]);
  if (grad) {
    *grad = logp.array().exp();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) (*grad)(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
    *grad /= n;
  }
  return sum / n;
}

/// Cross-entropy against the model's own argmax labels. The labels are
/// treated as constants.
inline double loss_pseudo_label(const Matrix& logits, std::span<const int> pseudo_labels,
                                 Matrix* grad = nullptr) {
  return loss_cross_entropy(logits, pseudo_labels, grad);
}

// ---------------------------------------------------------------------------
// Dispatch

struct LossEval {
  double value = 0.0;
  Matrix dfeatures;  // empty when the loss does not read features
  Matrix dlogits;    // empty when the loss does not read logits
  std::vector<int> pseudo_labels;
};

/// Evaluates `spec` on one forward pass. Pseudo labels are the row argmax of
/// `logits`; ground truth is only ever read by SupervisedCE.
inline LossEval evaluate_loss(const LossSpec& spec, const Matrix& features, const Matrix& logits,
                              bool with_grad = true) {
  spec.validate();
  LossEval out;
  out.pseudo_labels = argmax_rows(logits);
  Matrix* gf = with_grad ? &out.dfeatures : nullptr;
  Matrix* gl = with_grad ? &out.dlogits : nullptr;
  switch (spec.kind) {
    case LossKind::None: out.value = 0.0; break;
    case LossKind::GlobalFA: out.value = loss_global_fa(features, *spec.stats, gf); break;
    case LossKind::IntraOnly: out.value = loss_intra(features, out.pseudo_labels, *spec.stats, gf); break;
    case LossKind::Cafa: out.value = loss_cafa(features, out.pseudo_labels, *spec.stats, gf); break;
    case LossKind::Entropy: out.value = loss_entropy(logits, gl); break;
    case LossKind::PseudoLabelCE: out.value = loss_pseudo_label(logits, out.pseudo_labels, gl); break;
    case LossKind::SupervisedCE: out.value = loss_cross_entropy(logits, spec.labels, gl); break;
  }
  if (!std::isfinite(out.value)) {
    throw Error(ErrorKind::NonFiniteLoss, std::string(to_string(spec.kind)) + " loss is not finite");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instrumentation

struct DistanceReport {
  double mean_intra = 0.0;
  double mean_inter = 0.0;
};

/// Batch means of intra- and inter-class distance under ground-truth labels.
/// Instrumentation only; no loss reads these labels.
inline DistanceReport distance_report(const Matrix& feats, std::span<const int> true_labels,
                                      const SourceStats& stats) {
  detail::require(stats.num_classes() >= 2, ErrorKind::SingleClass,
                  "inter-class distance needs at least two classes");
  detail::check_batch(feats, true_labels, stats);
  DistanceReport rep;
  for (Eigen::Index r = 0; r < feats.rows(); ++r) {
    const Vector x = feats.row(r).transpose();
    const int y = true_labels[static_cast<std::size_t>(r)];
    rep.mean_intra += intra_distance(x, y, stats);
    rep.mean_inter += inter_distance(x, y, stats);
  }
  rep.mean_intra /= static_cast<double>(feats.rows());
  rep.mean_inter /= static_cast<double>(feats.rows());
  return rep;
}

}  // namespace cafa
