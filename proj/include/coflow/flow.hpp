#pragma once

// Feature flow: an infrastructure feature map together with its estimated
// first-order time derivative, and linear prediction of the feature at a
// later time.

#include <array>
#include <cstdint>
#include <string>

#include "coflow/pillar.hpp"
#include "coflow/tensor.hpp"

namespace coflow {

struct FeatureMap {
  Tensor tensor;  // [C, H, W]
  Frame frame = Frame::Infra;
  double timestamp = 0.0;
};

struct FeatureFlow {
  FeatureMap feature;
  Tensor derivative;  // same shape as feature.tensor, feature units per second
  double t_i = 0.0;
};

// Four conv blocks followed by a lateral merge of the first and last block
// outputs (concat + 1x1 conv), a reduced stand-in for a SECOND-style
// backbone + FPN.
struct BackboneConfig {
  int in_channels = 16;
  int width = 32;
  std::array<int, 4> strides{2, 1, 1, 1};
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig config, std::string prefix, std::uint64_t seed);

  Tensor forward(const Tensor& x) const;
  const BackboneConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  BackboneConfig config_;
  std::string prefix_;
  ParamSet params_;
};

class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(int in_channels, int width, std::string prefix, std::uint64_t seed);

  FeatureMap extract(const PseudoImage& img) const;
  int out_channels() const { return backbone_.config().width; }
  ParamSet& params() { return backbone_.params(); }
  const ParamSet& params() const { return backbone_.params(); }

 private:
  Backbone backbone_;
};

inline FeatureMap extract_feature(const PseudoImage& img, const FeatureExtractor& extractor) {
  return extractor.extract(img);
}

// Estimates d(feature)/dt from two consecutive inputs concatenated along
// channels. The network emits a per-frame change which is divided by the
// frame interval. Output layer is linear (derivatives are signed).
class DerivativeGenerator {
 public:
  DerivativeGenerator() = default;
  DerivativeGenerator(BackboneConfig config, int out_channels, std::string prefix, std::uint64_t seed);

  // prev/curr: [C_in/2, H, W] each.
  Tensor forward(const Tensor& prev, const Tensor& curr, double frame_interval) const;
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  Backbone backbone_;
  std::string prefix_;
  ParamSet params_;  // backbone params + output layer
};

// Infrastructure-side estimate from two pseudo-images captured exactly one
// frame interval apart. Throws UsageError otherwise.
Tensor estimate_derivative(const PseudoImage& img_prev, const PseudoImage& img_curr,
                           const DerivativeGenerator& generator, double frame_interval);

// feature + (t - t_i) * derivative, with no rescaling. Throws
// TemporalOrderError when t < t_i.
FeatureMap predict_unscaled(const FeatureFlow& flow, double t);

struct PredictOptions {
  bool scale_correction = true;
};

// Linear prediction at time t. At t == t_i the stored feature is returned
// as-is. Otherwise the extrapolated map is rescaled so its L1 norm matches
// the transmitted feature (see scale_correct) unless disabled. Only
// elementwise work: no convolution runs here.
FeatureMap predict(const FeatureFlow& flow, double t, PredictOptions options = {});

// predicted * (|reference|_1 / |predicted|_1). Throws DegenerateInputError
// when predicted is all zeros.
FeatureMap scale_correct(const FeatureMap& predicted, const FeatureMap& reference);
Tensor scale_correct(const Tensor& predicted, const Tensor& reference);

}  // namespace coflow
