#pragma once

// Desk-scale feed-forward network: blocks of dense -> batch norm -> activation
// forming the feature extractor, followed by a linear classifier head.
//
// Forward passes take a StatMode that decides which statistics batch norm
// uses. Backprop starts from loss seeds on features and/or logits and returns
// gradients for every parameter; grad.hpp narrows that to a ParamGroup.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstddef>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cafa/numcore.hpp"

namespace cafa {

enum class StatMode {
  TrainUpdate,  ///< batch statistics, running statistics updated
  BatchOnly,    ///< batch statistics, running statistics untouched
  RunningEval,  ///< stored running statistics
};

enum class ParamGroup { BnOnly, FeatureFull };

enum class Activation { Relu, Identity };

inline bool uses_batch_stats(StatMode mode) { return mode != StatMode::RunningEval; }

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
};

struct BnLayer {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BnLayer identity(std::size_t dim) {
    const auto n = static_cast<Eigen::Index>(dim);
    return BnLayer{Vector::Ones(n), Vector::Zero(n), Vector::Zero(n), Vector::Ones(n)};
  }
  std::size_t dim() const { return static_cast<std::size_t>(gamma.size()); }
};

struct FeatureBlock {
  DenseLayer dense;
  BnLayer bn;
  Activation activation = Activation::Relu;
};

inline bool operator==(const DenseLayer& a, const DenseLayer& b) {
  return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
         a.weight == b.weight && a.bias.size() == b.bias.size() && a.bias == b.bias;
}

inline bool operator==(const BnLayer& a, const BnLayer& b) {
  auto same = [](const Vector& x, const Vector& y) { return x.size() == y.size() && x == y; };
  return same(a.gamma, b.gamma) && same(a.beta, b.beta) && same(a.running_mean, b.running_mean) &&
         same(a.running_var, b.running_var) && a.momentum == b.momentum && a.eps == b.eps;
}

inline bool operator==(const FeatureBlock& a, const FeatureBlock& b) {
  return a.dense == b.dense && a.bn == b.bn && a.activation == b.activation;
}

/// g (feature blocks) followed by h (classifier).
struct AdaptiveModel {
  std::vector<FeatureBlock> blocks;
  DenseLayer classifier;

  std::size_t input_dim() const { return blocks.front().dense.in_dim(); }
  std::size_t feature_dim() const { return blocks.back().bn.dim(); }
  std::size_t num_classes() const { return classifier.out_dim(); }

  void validate() const {
    detail::require(!blocks.empty(), ErrorKind::InvalidArgument, "model has no feature blocks");
    std::size_t in = blocks.front().dense.in_dim();
    for (const auto& b : blocks) {
      detail::require(b.dense.in_dim() == in && b.dense.bias.size() == b.dense.weight.rows(),
                      ErrorKind::DimensionMismatch, "dense layer shapes inconsistent");
      const auto out = static_cast<Eigen::Index>(b.dense.out_dim());
      detail::require(b.bn.gamma.size() == out && b.bn.beta.size() == out &&
                          b.bn.running_mean.size() == out && b.bn.running_var.size() == out,
                      ErrorKind::DimensionMismatch, "batch norm shapes inconsistent");
      detail::require((b.bn.running_var.array() >= 0.0).all(), ErrorKind::InvalidArgument,
                      "negative running variance");
      in = b.dense.out_dim();
    }
    detail::require(classifier.in_dim() == in &&
                        classifier.bias.size() == classifier.weight.rows(),
                    ErrorKind::DimensionMismatch, "classifier input dim != feature dim");
  }
};

inline bool operator==(const AdaptiveModel& a, const AdaptiveModel& b) {
  return a.blocks == b.blocks && a.classifier == b.classifier;
}

struct Architecture {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden_dims = {32, 32, 16};  // last entry is the feature dim
  std::size_t num_classes = 3;
  Activation feature_activation = Activation::Identity;
  double bn_momentum = 0.1;
};

/// He-initialized weights, zero biases, identity batch norm.
inline AdaptiveModel make_model(const Architecture& arch, std::mt19937_64& rng) {
  detail::require(arch.input_dim > 0 && !arch.hidden_dims.empty() && arch.num_classes > 0,
                  ErrorKind::ConfigInvalid, "architecture needs input, hidden and class dims");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto dense = [&](std::size_t in, std::size_t out) {
    DenseLayer layer{Matrix(out, in), Vector::Zero(static_cast<Eigen::Index>(out))};
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = scale * normal(rng);
    return layer;
  };

  AdaptiveModel model;
  std::size_t in = arch.input_dim;
  for (std::size_t i = 0; i < arch.hidden_dims.size(); ++i) {
    const std::size_t out = arch.hidden_dims[i];
    detail::require(out > 0, ErrorKind::ConfigInvalid, "zero-width hidden layer");
    FeatureBlock block{dense(in, out), BnLayer::identity(out),
                       i + 1 == arch.hidden_dims.size() ? arch.feature_activation : Activation::Relu};
    block.bn.momentum = arch.bn_momentum;
    model.blocks.push_back(std::move(block));
    in = out;
  }
  model.classifier = dense(in, arch.num_classes);
  return model;
}

// ---------------------------------------------------------------------------
// Parameters

enum class ParamKind { DenseWeight, DenseBias, BnGamma, BnBeta, ClassifierWeight, ClassifierBias };

inline const char* to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::DenseWeight: return "dense.weight";
    case ParamKind::DenseBias: return "dense.bias";
    case ParamKind::BnGamma: return "bn.gamma";
    case ParamKind::BnBeta: return "bn.beta";
    case ParamKind::ClassifierWeight: return "classifier.weight";
    case ParamKind::ClassifierBias: return "classifier.bias";
  }
  return "?";
}

/// Identifies one parameter tensor. `layer` is the block index; classifier
/// parameters use layer = number of blocks.
struct ParamKey {
  std::size_t layer = 0;
  ParamKind kind = ParamKind::BnGamma;

  auto operator<=>(const ParamKey&) const = default;

  bool is_bn() const { return kind == ParamKind::BnGamma || kind == ParamKind::BnBeta; }
  bool is_classifier() const {
    return kind == ParamKind::ClassifierWeight || kind == ParamKind::ClassifierBias;
  }
};

/// Flattened (row-major) gradient per parameter tensor.
using GradientStore = std::map<ParamKey, std::vector<double>>;

inline std::span<double> parameter(AdaptiveModel& model, const ParamKey& key) {
  auto view = [](auto& t) { return std::span<double>(t.data(), static_cast<std::size_t>(t.size())); };
  if (key.is_classifier()) {
    return key.kind == ParamKind::ClassifierWeight ? view(model.classifier.weight)
                                                   : view(model.classifier.bias);
  }
  detail::require(key.layer < model.blocks.size(), ErrorKind::InvalidArgument, "no such layer");
  auto& block = model.blocks[key.layer];
  switch (key.kind) {
    case ParamKind::DenseWeight: return view(block.dense.weight);
    case ParamKind::DenseBias: return view(block.dense.bias);
    case ParamKind::BnGamma: return view(block.bn.gamma);
    case ParamKind::BnBeta: return view(block.bn.beta);
    default: break;
  }
  throw Error(ErrorKind::InvalidArgument, "bad parameter key");
}

inline std::span<const double> parameter(const AdaptiveModel& model, const ParamKey& key) {
  return parameter(const_cast<AdaptiveModel&>(model), key);
}

/// Keys selected by `group`. The classifier is never part of a group.
inline std::vector<ParamKey> parameter_keys(const AdaptiveModel& model, ParamGroup group) {
  std::vector<ParamKey> keys;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    if (group == ParamGroup::FeatureFull) {
      keys.push_back({i, ParamKind::DenseWeight});
      keys.push_back({i, ParamKind::DenseBias});
    }
    keys.push_back({i, ParamKind::BnGamma});
    keys.push_back({i, ParamKind::BnBeta});
  }
  return keys;
}

inline std::vector<ParamKey> all_parameter_keys(const AdaptiveModel& model) {
  auto keys = parameter_keys(model, ParamGroup::FeatureFull);
  keys.push_back({model.blocks.size(), ParamKind::ClassifierWeight});
  keys.push_back({model.blocks.size(), ParamKind::ClassifierBias});
  return keys;
}

// ---------------------------------------------------------------------------
// Forward

struct BlockCache {
  Matrix input;
  Matrix xhat;     // normalized pre-activations
  Vector inv_std;  // 1 / sqrt(var + eps) per channel
  Vector batch_mean;
  Vector batch_var;  // biased
  Matrix output;     // post-activation
};

struct ForwardCache {
  StatMode mode = StatMode::RunningEval;
  std::vector<BlockCache> blocks;
  Matrix features;
};

namespace detail {

inline Matrix affine(const DenseLayer& layer, const Matrix& x) {
  Matrix out = x * layer.weight.transpose();
  out.rowwise() += layer.bias.transpose();
  return out;
}

inline ForwardCache forward_cached(const AdaptiveModel& model, const Matrix& batch, StatMode mode) {
  detail::require(static_cast<std::size_t>(batch.cols()) == model.input_dim(),
                  ErrorKind::DimensionMismatch,
                  "batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                      std::to_string(model.input_dim()));
  const Eigen::Index n = batch.rows();
  detail::require(!uses_batch_stats(mode) || n >= 2, ErrorKind::BatchTooSmall,
                  "batch statistics need at least 2 rows, got " + std::to_string(n));
  detail::require(n >= 1, ErrorKind::EmptyInput, "empty batch");

  ForwardCache cache;
  cache.mode = mode;
  cache.blocks.reserve(model.blocks.size());
  Matrix x = batch;
  for (const auto& block : model.blocks) {
    BlockCache bc;
    bc.input = x;
    Matrix z = affine(block.dense, x);
    const Eigen::Index d = z.cols();
    if (uses_batch_stats(mode)) {
      bc.batch_mean = z.colwise().mean().transpose();
      bc.batch_var = Vector(d);
      for (Eigen::Index j = 0; j < d; ++j) {
        bc.batch_var(j) = (z.col(j).array() - bc.batch_mean(j)).square().sum() / static_cast<double>(n);
      }
      bc.inv_std = (bc.batch_var.array() + block.bn.eps).rsqrt();
      bc.xhat = (z.rowwise() - bc.batch_mean.transpose()).array().rowwise() * bc.inv_std.transpose().array();
    } else {
      bc.inv_std = (block.bn.running_var.array() + block.bn.eps).rsqrt();
      bc.xhat = (z.rowwise() - block.bn.running_mean.transpose()).array().rowwise() *
                bc.inv_std.transpose().array();
    }
    Matrix y = (bc.xhat.array().rowwise() * block.bn.gamma.transpose().array()).matrix();
    y.rowwise() += block.bn.beta.transpose();
    if (block.activation == Activation::Relu) y = y.cwiseMax(0.0);
    bc.output = y;
    x = std::move(y);
    cache.blocks.push_back(std::move(bc));
  }
  cache.features = std::move(x);
  return cache;
}

inline void update_running_stats(AdaptiveModel& model, const ForwardCache& cache) {
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& bn = model.blocks[i].bn;
    const auto& bc = cache.blocks[i];
    const double n = static_cast<double>(bc.input.rows());
    const Vector unbiased = bc.batch_var * (n / (n - 1.0));
    bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * bc.batch_mean;
    bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * unbiased;
  }
}

}  // namespace detail

/// Runs g on `batch`; TrainUpdate additionally folds the batch statistics
/// into each layer's running mean/variance (unbiased variance, momentum blend).
inline Matrix forward_features(AdaptiveModel& model, const Matrix& batch, StatMode mode) {
  auto cache = detail::forward_cached(model, batch, mode);
  if (mode == StatMode::TrainUpdate) detail::update_running_stats(model, cache);
  return std::move(cache.features);
}

/// Const overload: TrainUpdate is rejected because it mutates the model.
inline Matrix forward_features(const AdaptiveModel& model, const Matrix& batch, StatMode mode) {
  detail::require(mode != StatMode::TrainUpdate, ErrorKind::InvalidArgument,
                  "TrainUpdate needs a mutable model");
  return std::move(detail::forward_cached(model, batch, mode).features);
}

inline Matrix forward_logits(const AdaptiveModel& model, const Matrix& features) {
  detail::require(static_cast<std::size_t>(features.cols()) == model.classifier.in_dim(),
                  ErrorKind::DimensionMismatch,
                  "features have " + std::to_string(features.cols()) + " columns, classifier expects " +
                      std::to_string(model.classifier.in_dim()));
  return detail::affine(model.classifier, features);
}

/// Row-wise argmax; ties go to the lowest class index.
inline std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const AdaptiveModel& model, const Matrix& batch, StatMode mode) {
  return argmax_rows(forward_logits(model, forward_features(model, batch, mode)));
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

inline std::vector<double> flatten(const Matrix& m) { return {m.data(), m.data() + m.size()}; }
inline std::vector<double> flatten(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace detail

/// Gradients of every parameter given dL/dfeatures and dL/dlogits seeds
/// (either may be empty). Batch-statistic modes differentiate through the
/// batch mean and variance.
inline GradientStore backward(const AdaptiveModel& model, const ForwardCache& cache,
                              const Matrix& dfeatures, const Matrix& dlogits) {
  const Eigen::Index n = cache.features.rows();
  const std::size_t nb = model.blocks.size();
  GradientStore grads;

  Matrix dx = dfeatures.size() ? dfeatures : Matrix::Zero(n, cache.features.cols());
  if (dlogits.size()) {
    grads[{nb, ParamKind::ClassifierWeight}] = detail::flatten(Matrix(dlogits.transpose() * cache.features));
    grads[{nb, ParamKind::ClassifierBias}] = detail::flatten(Vector(dlogits.colwise().sum().transpose()));
    dx += dlogits * model.classifier.weight;
  } else {
    grads[{nb, ParamKind::ClassifierWeight}] = std::vector<double>(
        static_cast<std::size_t>(model.classifier.weight.size()), 0.0);
    grads[{nb, ParamKind::ClassifierBias}] =
        std::vector<double>(static_cast<std::size_t>(model.classifier.bias.size()), 0.0);
  }

  for (std::size_t bi = nb; bi-- > 0;) {
    const auto& block = model.blocks[bi];
    const auto& bc = cache.blocks[bi];
    Matrix dy = dx;
    if (block.activation == Activation::Relu) {
      dy = (bc.output.array() > 0.0).select(dy, 0.0);
    }
    grads[{bi, ParamKind::BnGamma}] =
        detail::flatten(Vector((dy.array() * bc.xhat.array()).colwise().sum().transpose()));
    grads[{bi, ParamKind::BnBeta}] = detail::flatten(Vector(dy.colwise().sum().transpose()));

    Matrix dxhat = dy.array().rowwise() * block.bn.gamma.transpose().array();
    Matrix dz;
    if (uses_batch_stats(cache.mode)) {
      const double nn = static_cast<double>(n);
      const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
      const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * bc.xhat.array()).colwise().sum();
      Matrix centered = (dxhat * nn).rowwise() - sum_dxhat;
      centered -= (bc.xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
      dz = centered.array().rowwise() * (bc.inv_std.transpose().array() / nn);
    } else {
      dz = dxhat.array().rowwise() * bc.inv_std.transpose().array();
    }
    grads[{bi, ParamKind::DenseWeight}] = detail::flatten(Matrix(dz.transpose() * bc.input));
    grads[{bi, ParamKind::DenseBias}] = detail::flatten(Vector(dz.colwise().sum().transpose()));
    dx = dz * block.dense.weight;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoint
//
// Text format, one tensor per line, values in hexadecimal floating point so
// every double round-trips exactly:
//
//   cafa-checkpoint <version>
//   blocks <count> classes <C>
//   block <i> activation <relu|identity> momentum <hex> eps <hex>
//   tensor <layer> <name> <rows> <cols> <v0> <v1> ...
//   end

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string hex(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

inline double parse_hex(const std::string& token) {
  double v = 0.0;
  const char* first = token.data();
  const char* last = first + token.size();
  bool neg = false;
  if (first != last && *first == '-') {
    neg = true;
    ++first;
  }
  auto res = std::from_chars(first, last, v, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != last) {
    throw Error(ErrorKind::Io, "checkpoint: bad number '" + token + "'");
  }
  return neg ? -v : v;
}

}  // namespace detail

inline void save_checkpoint(const AdaptiveModel& model, const std::string& path) {
  model.validate();
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out << "cafa-checkpoint " << kCheckpointVersion << "\n";
  out << "blocks " << model.blocks.size() << " classes " << model.num_classes() << "\n";
  auto tensor = [&](std::size_t layer, const char* name, auto rows, auto cols, const double* data) {
    out << "tensor " << layer << ' ' << name << ' ' << rows << ' ' << cols;
    for (Eigen::Index i = 0; i < rows * cols; ++i) out << ' ' << detail::hex(data[i]);
    out << "\n";
  };
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    out << "block " << i << " activation "
        << (b.activation == Activation::Relu ? "relu" : "identity") << " momentum "
        << detail::hex(b.bn.momentum) << " eps " << detail::hex(b.bn.eps) << "\n";
    tensor(i, "dense.weight", b.dense.weight.rows(), b.dense.weight.cols(), b.dense.weight.data());
    tensor(i, "dense.bias", b.dense.bias.size(), Eigen::Index{1}, b.dense.bias.data());
    tensor(i, "bn.gamma", b.bn.gamma.size(), Eigen::Index{1}, b.bn.gamma.data());
    tensor(i, "bn.beta", b.bn.beta.size(), Eigen::Index{1}, b.bn.beta.data());
    tensor(i, "bn.running_mean", b.bn.running_mean.size(), Eigen::Index{1}, b.bn.running_mean.data());
    tensor(i, "bn.running_var", b.bn.running_var.size(), Eigen::Index{1}, b.bn.running_var.data());
  }
  const auto& c = model.classifier;
  const std::size_t nb = model.blocks.size();
  tensor(nb, "classifier.weight", c.weight.rows(), c.weight.cols(), c.weight.data());
  tensor(nb, "classifier.bias", c.bias.size(), Eigen::Index{1}, c.bias.data());
  out << "end\n";
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

inline AdaptiveModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  auto fail = [&](const std::string& why) -> Error {
    return Error(ErrorKind::Io, "checkpoint '" + path + "': " + why);
  };

  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "cafa-checkpoint") throw fail("missing header");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::FormatVersionMismatch,
                "checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  std::size_t nblocks = 0, nclasses = 0;
  std::string kw1, kw2;
  if (!(in >> kw1 >> nblocks >> kw2 >> nclasses) || kw1 != "blocks" || kw2 != "classes") {
    throw fail("missing layout line");
  }

  AdaptiveModel model;
  model.blocks.resize(nblocks);
  bool done = false;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    ls >> tag;
    if (tag == "end") {
      done = true;
      break;
    }
    if (tag == "block") {
      std::size_t i = 0;
      std::string act, m, e, mv, ev;
      ls >> i >> kw1 >> act >> m >> mv >> e >> ev;
      if (!ls || i >= nblocks) throw fail("bad block line");
      model.blocks[i].activation = act == "relu" ? Activation::Relu : Activation::Identity;
      model.blocks[i].bn.momentum = detail::parse_hex(mv);
      model.blocks[i].bn.eps = detail::parse_hex(ev);
      continue;
    }
    if (tag != "tensor") throw fail("unexpected record '" + tag + "'");
    std::size_t layer = 0;
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    ls >> layer >> name >> rows >> cols;
    if (!ls || rows < 0 || cols < 0) throw fail("bad tensor header");
    std::vector<double> values(static_cast<std::size_t>(rows * cols));
    for (auto& v : values) {
      std::string tok;
      if (!(ls >> tok)) throw fail("tensor '" + name + "' truncated");
      v = detail::parse_hex(tok);
    }
    auto as_matrix = [&] { return Matrix(Eigen::Map<Matrix>(values.data(), rows, cols)); };
    auto as_vector = [&] { return Vector(Eigen::Map<Vector>(values.data(), rows * cols)); };
    if (layer == nblocks) {
      if (name == "classifier.weight") model.classifier.weight = as_matrix();
      else if (name == "classifier.bias") model.classifier.bias = as_vector();
      else throw fail("unknown tensor '" + name + "'");
      continue;
    }
    if (layer > nblocks) throw fail("layer index out of range");
    auto& b = model.blocks[layer];
    if (name == "dense.weight") b.dense.weight = as_matrix();
    else if (name == "dense.bias") b.dense.bias = as_vector();
    else if (name == "bn.gamma") b.bn.gamma = as_vector();
    else if (name == "bn.beta") b.bn.beta = as_vector();
    else if (name == "bn.running_mean") b.bn.running_mean = as_vector();
    else if (name == "bn.running_var") b.bn.running_var = as_vector();
    else throw fail("unknown tensor '" + name + "'");
  }
  if (!done) throw fail("missing end marker");
  try {
    model.validate();
  } catch (const Error& e) {
    throw fail(e.what());
  }
  detail::require(model.num_classes() == nclasses, ErrorKind::Io, "class count mismatch");
  return model;
}

}  // namespace cafa
