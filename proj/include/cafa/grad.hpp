#pragma once

#include <cmath>
#include <string>

#include "cafa/align.hpp"
#include "cafa/nn.hpp"

namespace cafa {

struct LossAndGrad {
  LossEval loss;
  Matrix features;
  Matrix logits;
  GradientStore grads;  // every parameter, classifier included
};

/// One forward pass, the loss on it, and reverse-mode gradients for all
/// parameters. TrainUpdate is evaluated like BatchOnly here; callers that
/// want running statistics updated do that themselves.
inline LossAndGrad loss_and_grad(const AdaptiveModel& model, const Matrix& batch, StatMode mode,
                                 const LossSpec& spec) {
  const ForwardCache cache = detail::forward_cached(model, batch, mode);
  LossAndGrad out;
  out.logits = forward_logits(model, cache.features);
  out.loss = evaluate_loss(spec, cache.features, out.logits, true);
  out.grads = backward(model, cache, out.loss.dfeatures, out.loss.dlogits);
  for (const auto& [key, g] : out.grads) {
    for (double v : g) {
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::NonFiniteLoss,
                    std::string("non-finite gradient for ") + to_string(key.kind) + " of layer " +
                        std::to_string(key.layer));
      }
    }
  }
  out.features = cache.features;
  return out;
}

/// ∂loss/∂p for exactly the parameters in `group`; nothing else appears in
/// the result, in particular never the classifier.
inline GradientStore grad(const AdaptiveModel& model, const Matrix& batch, StatMode mode,
                          const LossSpec& spec, ParamGroup group) {
  GradientStore full = loss_and_grad(model, batch, mode, spec).grads;
  GradientStore selected;
  for (const auto& key : parameter_keys(model, group)) selected[key] = std::move(full.at(key));
  return selected;
}

}  // namespace cafa
