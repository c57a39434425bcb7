#include "coflow/nn.hpp"

#include <cmath>
#include <string_view>

#include "coflow/bytes.hpp"

namespace coflow {

Tensor init_uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

void add_conv(ParamSet& params, const std::string& name, int out_channels, int in_channels, int kernel,
              Rng& rng, double gain) {
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  const double bound = gain * std::sqrt(6.0 / fan_in);
  params.add(name + ".weight", init_uniform({out_channels, in_channels, kernel, kernel}, bound, rng));
  params.add(name + ".bias", Tensor({out_channels}, 0.0f).set_requires_grad(true));
}

void add_deconv(ParamSet& params, const std::string& name, int in_channels, int out_channels, int kernel,
                Rng& rng, double gain) {
  // Each output pixel of a stride-k, kernel-k deconv sees in_channels taps.
  const double fan_in = static_cast<double>(in_channels);
  const double bound = gain * std::sqrt(6.0 / fan_in);
  params.add(name + ".weight", init_uniform({in_channels, out_channels, kernel, kernel}, bound, rng));
  params.add(name + ".bias", Tensor({out_channels}, 0.0f).set_requires_grad(true));
}

Tensor conv_block(const ParamSet& params, const std::string& name, const Tensor& x, ConvSpec spec,
                  bool apply_relu) {
  Tensor y = conv2d(x, params.get(name + ".weight"), params.get(name + ".bias"), spec);
  return apply_relu ? relu(y) : y;
}

Tensor deconv_block(const ParamSet& params, const std::string& name, const Tensor& x, ConvSpec spec,
                    bool apply_relu) {
  Tensor y = deconv2d(x, params.get(name + ".weight"), params.get(name + ".bias"), spec);
  return apply_relu ? relu(y) : y;
}

std::uint64_t params_fingerprint(const ParamSet& params) {
  std::string blob;
  for (const auto& [name, t] : params) {
    blob += name;
    blob.append(reinterpret_cast<const char*>(t.data().data()), t.data().size_bytes());
  }
  return fnv1a64(blob);
}

}  // namespace coflow
