#include "coflow/flow.hpp"

#include <cmath>

#include "coflow/errors.hpp"
#include "coflow/nn.hpp"

namespace coflow {

Backbone::Backbone(BackboneConfig config, std::string prefix, std::uint64_t seed)
    : config_(config), prefix_(std::move(prefix)) {
  Rng rng(seed);
  int in = config_.in_channels;
  for (int i = 0; i < 4; ++i) {
    add_conv(params_, prefix_ + ".block" + std::to_string(i), config_.width, in, 3, rng);
    in = config_.width;
  }
  add_conv(params_, prefix_ + ".merge", config_.width, 2 * config_.width, 1, rng);
}

Tensor Backbone::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(0) != config_.in_channels) {
    throw DimensionError("backbone " + prefix_ + " expects " + std::to_string(config_.in_channels) +
                         " input channels, got " + shape_str(x.shape()));
  }
  Tensor first = conv_block(params_, prefix_ + ".block0", x, {config_.strides[0], 1});
  Tensor h = first;
  for (int i = 1; i < 4; ++i) {
    h = conv_block(params_, prefix_ + ".block" + std::to_string(i), h, {config_.strides[i], 1});
  }
  if (h.dim(1) != first.dim(1)) throw ConfigError("backbone lateral merge needs stride-1 tail blocks");
  return conv_block(params_, prefix_ + ".merge", concat_channels(first, h), {1, 0});
}

FeatureExtractor::FeatureExtractor(int in_channels, int width, std::string prefix, std::uint64_t seed)
    : backbone_(BackboneConfig{in_channels, width, {2, 1, 1, 1}}, std::move(prefix), seed) {}

FeatureMap FeatureExtractor::extract(const PseudoImage& img) const {
  return {backbone_.forward(img.tensor), img.frame, img.timestamp};
}

DerivativeGenerator::DerivativeGenerator(BackboneConfig config, int out_channels, std::string prefix,
                                         std::uint64_t seed)
    : backbone_(config, prefix, seed), prefix_(std::move(prefix)) {
  params_.merge(backbone_.params());
  Rng rng(mix_seed(seed, 17));
  // Small output gain so an untrained generator starts near "no change".
  add_conv(params_, prefix_ + ".out", out_channels, config.width, 1, rng, 0.1);
}

Tensor DerivativeGenerator::forward(const Tensor& prev, const Tensor& curr, double frame_interval) const {
  if (!(frame_interval > 0.0)) throw UsageError("frame interval must be positive");
  Tensor h = backbone_.forward(concat_channels(prev, curr));
  Tensor delta = conv_block(params_, prefix_ + ".out", h, {1, 0}, false);
  return scale(delta, static_cast<float>(1.0 / frame_interval));
}

Tensor estimate_derivative(const PseudoImage& img_prev, const PseudoImage& img_curr,
                           const DerivativeGenerator& generator, double frame_interval) {
  const double gap = img_curr.timestamp - img_prev.timestamp;
  if (std::abs(gap - frame_interval) > 1e-6) {
    throw UsageError("derivative estimation needs adjacent frames (gap " + std::to_string(gap) + " s)");
  }
  if (img_prev.tensor.shape() != img_curr.tensor.shape()) {
    throw DimensionError("pseudo-image shapes differ");
  }
  return generator.forward(img_prev.tensor, img_curr.tensor, frame_interval);
}

FeatureMap predict_unscaled(const FeatureFlow& flow, double t) {
  if (t < flow.t_i) {
    throw TemporalOrderError("cannot predict at t=" + std::to_string(t) + " before t_i=" +
                             std::to_string(flow.t_i));
  }
  const double dt = t - flow.t_i;
  if (dt == 0.0) return {flow.feature.tensor, flow.feature.frame, t};
  if (flow.derivative.shape() != flow.feature.tensor.shape()) {
    throw DimensionError("derivative shape differs from feature shape");
  }
  return {add(flow.feature.tensor, scale(flow.derivative, static_cast<float>(dt))), flow.feature.frame, t};
}

FeatureMap predict(const FeatureFlow& flow, double t, PredictOptions options) {
  FeatureMap out = predict_unscaled(flow, t);
  if (t == flow.t_i || !options.scale_correction) return out;
  return scale_correct(out, flow.feature);
}

Tensor scale_correct(const Tensor& predicted, const Tensor& reference) {
  if (predicted.shape() != reference.shape()) throw DimensionError("scale_correct: shape mismatch");
  Tensor pred_l1 = l1_norm(predicted);
  if (pred_l1.item() == 0.0f) throw DegenerateInputError("scale_correct: predicted feature has zero L1 norm");
  return scale_by(predicted, div_scalar(l1_norm(reference), pred_l1));
}

FeatureMap scale_correct(const FeatureMap& predicted, const FeatureMap& reference) {
  return {scale_correct(predicted.tensor, reference.tensor), predicted.frame, predicted.timestamp};
}

}  // namespace coflow
