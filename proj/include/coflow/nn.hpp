#pragma once

// Parameter initialization and the conv blocks shared by every network.

#include <cstdint>
#include <string>

#include "coflow/rng.hpp"
#include "coflow/tensor.hpp"

namespace coflow {

// Uniform(-bound, bound) tensor that requires grad.
Tensor init_uniform(Shape shape, double bound, Rng& rng);

// Adds "<name>.weight" [out, in, k, k] and "<name>.bias" [out]. He-style
// uniform init scaled by `gain`.
void add_conv(ParamSet& params, const std::string& name, int out_channels, int in_channels, int kernel,
              Rng& rng, double gain = 1.0);
// Adds "<name>.weight" [in, out, k, k] and "<name>.bias" [out].
void add_deconv(ParamSet& params, const std::string& name, int in_channels, int out_channels, int kernel,
                Rng& rng, double gain = 1.0);

// Conv (+ bias) optionally followed by relu. Conv-Bias-ReLU stands in for
// Conv-BN-ReLU: per-sample training makes batch statistics meaningless.
Tensor conv_block(const ParamSet& params, const std::string& name, const Tensor& x, ConvSpec spec,
                  bool apply_relu = true);
Tensor deconv_block(const ParamSet& params, const std::string& name, const Tensor& x, ConvSpec spec,
                    bool apply_relu = true);

// Stable fingerprint of all parameter values, for reproducibility checks.
std::uint64_t params_fingerprint(const ParamSet& params);

}  // namespace coflow
