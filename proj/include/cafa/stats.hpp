#pragma once

// Source-side statistics computed once before adaptation: a Gaussian per class
// over penultimate features, plus the class-agnostic Gaussian of all source
// features. Each class carries a cached Cholesky factor of its regularized
// covariance so Mahalanobis distances cost one triangular solve.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "cafa/nn.hpp"
#include "cafa/numcore.hpp"

namespace cafa {

enum class CovarianceMode : std::uint8_t { ClassWise = 0, Tied = 1 };

inline const char* to_string(CovarianceMode mode) {
  return mode == CovarianceMode::Tied ? "tied" : "classwise";
}

inline constexpr double kDefaultEpsScale = 1e-6;

/// ε = eps_scale · trace(Σ) / d, so the ridge is in the same units as Σ.
inline double regularization_eps(const Matrix& sigma, double eps_scale) {
  return eps_scale * sigma.trace() / static_cast<double>(sigma.rows());
}

struct ClassGaussian {
  std::size_t class_id = 0;
  Vector mu;
  Matrix sigma;
  SpdFactor precision;  // factor of sigma + eps I
  double eps = 0.0;
  std::size_t n_samples = 0;

  /// eps_scale = 0 factors sigma itself (must then be positive definite).
  static ClassGaussian make(std::size_t id, Vector mu, Matrix sigma, std::size_t n,
                            double eps_scale = kDefaultEpsScale) {
    detail::require(mu.size() == sigma.rows() && sigma.rows() == sigma.cols(),
                    ErrorKind::DimensionMismatch, "class Gaussian: mean/covariance shapes differ");
    detail::require(eps_scale >= 0.0, ErrorKind::InvalidArgument, "eps_scale must be >= 0");
    ClassGaussian g;
    g.class_id = id;
    g.eps = regularization_eps(sigma, eps_scale);
    Matrix reg = sigma;
    reg.diagonal().array() += g.eps;
    g.precision = spd_factor(reg);
    g.mu = std::move(mu);
    g.sigma = std::move(sigma);
    g.n_samples = n;
    return g;
  }

  std::size_t dim() const { return static_cast<std::size_t>(mu.size()); }
};

struct SourceStats {
  std::vector<ClassGaussian> classes;
  Vector global_mu;
  Matrix global_sigma;
  std::size_t global_n = 0;
  CovarianceMode covariance_mode = CovarianceMode::ClassWise;
  double eps_scale = kDefaultEpsScale;
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(global_mu.size()); }
};

inline bool operator==(const ClassGaussian& a, const ClassGaussian& b) {
  auto same_m = [](const Matrix& x, const Matrix& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
  };
  return a.class_id == b.class_id && a.mu.size() == b.mu.size() && a.mu == b.mu &&
         same_m(a.sigma, b.sigma) && same_m(a.precision.lower(), b.precision.lower()) &&
         a.eps == b.eps && a.n_samples == b.n_samples;
}

inline bool operator==(const SourceStats& a, const SourceStats& b) {
  return a.classes == b.classes && a.global_mu.size() == b.global_mu.size() &&
         a.global_mu == b.global_mu && a.global_sigma.rows() == b.global_sigma.rows() &&
         a.global_sigma == b.global_sigma && a.global_n == b.global_n &&
         a.covariance_mode == b.covariance_mode && a.eps_scale == b.eps_scale &&
         a.warnings == b.warnings;
}

/// Class-conditional and global Gaussians from already-extracted features.
/// Rows of `features` are grouped by `labels` in input order.
inline SourceStats stats_from_features(const Matrix& features, std::span<const int> labels,
                                       std::size_t num_classes, CovarianceMode mode,
                                       double eps_scale = kDefaultEpsScale) {
  detail::require(static_cast<std::size_t>(features.rows()) == labels.size(),
                  ErrorKind::DimensionMismatch, "features and labels differ in length");
  detail::require(num_classes >= 1, ErrorKind::InvalidArgument, "need at least one class");
  detail::require(eps_scale >= 0.0, ErrorKind::InvalidArgument, "eps_scale must be >= 0");
  const Eigen::Index d = features.cols();

  std::vector<std::vector<Eigen::Index>> rows_of(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    detail::require(y >= 0 && static_cast<std::size_t>(y) < num_classes, ErrorKind::UnknownClass,
                    "label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    rows_of[static_cast<std::size_t>(y)].push_back(static_cast<Eigen::Index>(i));
  }

  SourceStats stats;
  stats.covariance_mode = mode;
  stats.eps_scale = eps_scale;

  std::vector<MeanCov> per_class;
  std::vector<Matrix> class_rows;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto& idx = rows_of[c];
    detail::require(!idx.empty(), ErrorKind::MissingClass,
                    "class " + std::to_string(c) + " has no source samples");
    detail::require(idx.size() >= 2, ErrorKind::InvalidArgument,
                    "class " + std::to_string(c) + " has a single sample; covariance undefined");
    if (idx.size() <= static_cast<std::size_t>(d)) {
      stats.warnings.push_back("class " + std::to_string(c) + ": " + std::to_string(idx.size()) +
                               " samples <= feature dim " + std::to_string(d) +
                               "; covariance is rank deficient before regularization");
    }
    Matrix rows(static_cast<Eigen::Index>(idx.size()), d);
    for (std::size_t k = 0; k < idx.size(); ++k) rows.row(static_cast<Eigen::Index>(k)) = features.row(idx[k]);
    per_class.push_back(mean_and_cov(rows));
    class_rows.push_back(std::move(rows));
  }

  if (mode == CovarianceMode::Tied) {
    // Pooled within-class covariance: all class scatters summed, divided by N.
    Matrix pooled = Matrix::Zero(d, d);
    std::size_t total = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      pooled += scatter(class_rows[c], per_class[c].mean);
      total += rows_of[c].size();
    }
    pooled /= static_cast<double>(total);
    ClassGaussian shared = ClassGaussian::make(0, Vector::Zero(d), pooled, total, eps_scale);
    for (std::size_t c = 0; c < num_classes; ++c) {
      ClassGaussian g = shared;
      g.class_id = c;
      g.mu = per_class[c].mean;
      g.n_samples = rows_of[c].size();
      stats.classes.push_back(std::move(g));
    }
  } else {
    for (std::size_t c = 0; c < num_classes; ++c) {
      stats.classes.push_back(ClassGaussian::make(c, per_class[c].mean, per_class[c].cov,
                                                  rows_of[c].size(), eps_scale));
    }
  }

  MeanCov global = mean_and_cov(features);
  stats.global_mu = std::move(global.mean);
  stats.global_sigma = std::move(global.cov);
  stats.global_n = static_cast<std::size_t>(features.rows());
  return stats;
}

/// Pre-stage: run the source data through g with stored running statistics
/// and fit the Gaussians.
inline SourceStats estimate_source_stats(const AdaptiveModel& model, const Matrix& inputs,
                                         std::span<const int> labels, CovarianceMode mode,
                                         double eps_scale = kDefaultEpsScale) {
  const Matrix features = forward_features(model, inputs, StatMode::RunningEval);
  return stats_from_features(features, labels, model.num_classes(), mode, eps_scale);
}

// ---------------------------------------------------------------------------
// Stats file
//
// Little-endian binary container:
//   "CAFASTAT"            8 bytes magic
//   format_version        u32
//   d, C                  u64, u64
//   covariance_mode       u8 (0 classwise, 1 tied)
//   eps_scale             f64
//   global: n u64, mu[d] f64, sigma[d*d] f64 (row-major)
//   C x class: class_id u64, n u64, mu[d], sigma[d*d]
//   warnings: count u32, then (length u32, bytes) each
//   crc32 over every preceding byte   u32
// Precision factors are recomputed on load from sigma and eps_scale; the
// factorization is deterministic so they reload bit-identically.

inline constexpr std::uint32_t kStatsFormatVersion = 1;
inline constexpr char kStatsMagic[8] = {'C', 'A', 'F', 'A', 'S', 'T', 'A', 'T'};
inline constexpr std::size_t kStatsVersionOffset = sizeof(kStatsMagic);

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_doubles(const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put(p[i]);
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v{};
    take(&v, sizeof(T));
    return v;
  }
  void take(void* out, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw Error(ErrorKind::CorruptChecksum, "stats file truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline void save_stats(const SourceStats& stats, const std::string& path) {
  const std::size_t d = stats.feature_dim();
  detail::ByteWriter w;
  w.put_bytes(kStatsMagic, sizeof kStatsMagic);
  w.put(kStatsFormatVersion);
  w.put(static_cast<std::uint64_t>(d));
  w.put(static_cast<std::uint64_t>(stats.num_classes()));
  w.put(static_cast<std::uint8_t>(stats.covariance_mode));
  w.put(stats.eps_scale);
  w.put(static_cast<std::uint64_t>(stats.global_n));
  w.put_doubles(stats.global_mu.data(), d);
  w.put_doubles(stats.global_sigma.data(), d * d);
  for (const auto& g : stats.classes) {
    w.put(static_cast<std::uint64_t>(g.class_id));
    w.put(static_cast<std::uint64_t>(g.n_samples));
    w.put_doubles(g.mu.data(), d);
    w.put_doubles(g.sigma.data(), d * d);
  }
  w.put(static_cast<std::uint32_t>(stats.warnings.size()));
  for (const auto& s : stats.warnings) {
    w.put(static_cast<std::uint32_t>(s.size()));
    w.put_bytes(s.data(), s.size());
  }
  w.put(detail::crc32_of(w.bytes()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

inline SourceStats load_stats(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());

  constexpr std::size_t header = sizeof(kStatsMagic) + sizeof(std::uint32_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kStatsMagic, sizeof kStatsMagic) != 0) {
    throw Error(ErrorKind::Io, "'" + path + "' is not a stats file");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + kStatsVersionOffset, sizeof version);
  if (version != kStatsFormatVersion) {
    throw Error(ErrorKind::FormatVersionMismatch,
                "stats format " + std::to_string(version) + ", expected " +
                    std::to_string(kStatsFormatVersion));
  }
  if (bytes.size() < header + sizeof(std::uint32_t)) {
    throw Error(ErrorKind::CorruptChecksum, "stats file truncated");
  }
  const std::span<const unsigned char> payload(bytes.data(), bytes.size() - sizeof(std::uint32_t));
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + payload.size(), sizeof stored);
  if (stored != detail::crc32_of(payload)) {
    throw Error(ErrorKind::CorruptChecksum, "checksum mismatch in '" + path + "'");
  }

  detail::ByteReader r(payload.subspan(header));
  const auto d = static_cast<Eigen::Index>(r.get<std::uint64_t>());
  const auto c = r.get<std::uint64_t>();
  SourceStats stats;
  const auto mode = r.get<std::uint8_t>();
  detail::require(mode <= 1, ErrorKind::CorruptChecksum, "bad covariance mode byte");
  stats.covariance_mode = static_cast<CovarianceMode>(mode);
  stats.eps_scale = r.get<double>();
  auto read_vector = [&] {
    Vector v(d);
    r.take(v.data(), static_cast<std::size_t>(d) * sizeof(double));
    return v;
  };
  auto read_matrix = [&] {
    Matrix m(d, d);
    r.take(m.data(), static_cast<std::size_t>(d * d) * sizeof(double));
    return m;
  };
  stats.global_n = r.get<std::uint64_t>();
  stats.global_mu = read_vector();
  stats.global_sigma = read_matrix();

  for (std::uint64_t k = 0; k < c; ++k) {
    const auto id = r.get<std::uint64_t>();
    const auto n = r.get<std::uint64_t>();
    Vector mu = read_vector();
    Matrix sigma = read_matrix();
    if (stats.covariance_mode == CovarianceMode::Tied && !stats.classes.empty()) {
      ClassGaussian g = stats.classes.front();
      g.class_id = id;
      g.mu = std::move(mu);
      g.n_samples = n;
      stats.classes.push_back(std::move(g));
    } else {
      stats.classes.push_back(ClassGaussian::make(id, std::move(mu), std::move(sigma), n, stats.eps_scale));
    }
  }
  const auto nwarn = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < nwarn; ++k) {
    std::string s(r.get<std::uint32_t>(), '\0');
    r.take(s.data(), s.size());
    stats.warnings.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw Error(ErrorKind::CorruptChecksum, "trailing bytes in stats file");
  return stats;
}

}  // namespace cafa
