#pragma once

// Randomized inputs shared by several test files.

#include <random>
#include <vector>

#include "cafa/nn.hpp"
#include "cafa/stats.hpp"
#include "oracles.hpp"

namespace fixture {

/// Network with non-trivial BN parameters and running statistics.
inline cafa::AdaptiveModel random_model(std::size_t input_dim, std::vector<std::size_t> hidden,
                                        std::size_t classes, std::uint64_t seed,
                                        cafa::Activation last = cafa::Activation::Identity) {
  cafa::Architecture arch;
  arch.input_dim = input_dim;
  arch.hidden_dims = std::move(hidden);
  arch.num_classes = classes;
  arch.feature_activation = last;
  std::mt19937_64 rng(seed);
  cafa::AdaptiveModel m = cafa::make_model(arch, rng);
  std::uniform_real_distribution<double> unit(0.5, 1.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& b : m.blocks) {
    for (Eigen::Index i = 0; i < b.bn.gamma.size(); ++i) {
      b.bn.gamma(i) = unit(rng);
      b.bn.beta(i) = 0.3 * normal(rng);
      b.bn.running_mean(i) = normal(rng);
      b.bn.running_var(i) = unit(rng);
    }
    for (Eigen::Index i = 0; i < b.dense.bias.size(); ++i) b.dense.bias(i) = 0.1 * normal(rng);
  }
  for (Eigen::Index i = 0; i < m.classifier.bias.size(); ++i) m.classifier.bias(i) = 0.1 * normal(rng);
  return m;
}

/// Class-clustered features: class c centred at 2·e_c-ish random points.
inline std::pair<cafa::Matrix, std::vector<int>> clustered(std::size_t d, std::size_t classes, std::size_t per_class,
                                                           std::mt19937_64& rng) {
  std::vector<cafa::Vector> centers;
  for (std::size_t c = 0; c < classes; ++c) centers.push_back(oracle::random_vector(d, rng, 2.0));
  std::normal_distribution<double> normal(0.0, 1.0);
  cafa::Matrix x(static_cast<Eigen::Index>(classes * per_class), static_cast<Eigen::Index>(d));
  std::vector<int> y;
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const cafa::Matrix mix = oracle::random_matrix(d, d, rng, 0.7);
    for (std::size_t k = 0; k < per_class; ++k, ++r) {
      const cafa::Vector z = oracle::random_vector(d, rng);
      x.row(r) = (centers[c] + mix * z + 0.3 * z).transpose();
      y.push_back(static_cast<int>(c));
    }
  }
  return {x, y};
}

inline cafa::SourceStats random_stats(std::size_t d, std::size_t classes, std::mt19937_64& rng,
                                      cafa::CovarianceMode mode = cafa::CovarianceMode::ClassWise) {
  auto [x, y] = clustered(d, classes, 40, rng);
  return cafa::stats_from_features(x, y, classes, mode);
}

}  // namespace fixture
