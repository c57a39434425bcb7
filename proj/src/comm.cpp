#include "coflow/comm.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "coflow/bytes.hpp"
#include "coflow/errors.hpp"
#include "coflow/nn.hpp"
#include "coflow/rng.hpp"

namespace coflow {
namespace {

constexpr char kMagic[4] = {'F', 'F', 'N', 'T'};
// Arrival comparisons tolerate accumulated float error in frame times.
constexpr double kTimeEps = 1e-9;

void add_compressor(ParamSet& p, const std::string& prefix, const CodecConfig& c, Rng& rng) {
  add_conv(p, prefix + ".c0", c.hidden_channels, c.feature_channels, 3, rng);
  add_conv(p, prefix + ".c1", c.hidden_channels, c.hidden_channels, 3, rng);
  add_conv(p, prefix + ".c2", c.code_channels, c.hidden_channels, 1, rng);
}

void add_decompressor(ParamSet& p, const std::string& prefix, const CodecConfig& c, Rng& rng) {
  add_deconv(p, prefix + ".d0", c.code_channels, c.hidden_channels, 1, rng);
  add_deconv(p, prefix + ".d1", c.hidden_channels, c.hidden_channels, 4, rng, 0.5);
  add_deconv(p, prefix + ".d2", c.hidden_channels, c.feature_channels, 4, rng, 0.5);
}

Tensor run_compressor(const ParamSet& p, const std::string& prefix, const Tensor& x) {
  Tensor h = conv_block(p, prefix + ".c0", x, {2, 1});
  h = conv_block(p, prefix + ".c1", h, {2, 1});
  return conv_block(p, prefix + ".c2", h, {1, 0}, false);
}

Tensor run_decompressor(const ParamSet& p, const std::string& prefix, const Tensor& code, bool final_relu) {
  Tensor h = deconv_block(p, prefix + ".d0", code, {1, 0});
  h = deconv_block(p, prefix + ".d1", h, {2, 1});
  return deconv_block(p, prefix + ".d2", h, {2, 1}, final_relu);
}

}  // namespace

FlowCodec::FlowCodec(CodecConfig config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  add_compressor(feature_params_, "codec.feature", config_, rng);
  add_decompressor(feature_params_, "codec.feature", config_, rng);
  add_compressor(derivative_params_, "codec.derivative", config_, rng);
  add_decompressor(derivative_params_, "codec.derivative", config_, rng);
}

Tensor FlowCodec::compress_feature(const Tensor& feature) const {
  return run_compressor(feature_params_, "codec.feature", feature);
}

Tensor FlowCodec::decompress_feature(const Tensor& code) const {
  return run_decompressor(feature_params_, "codec.feature", code, true);
}

Tensor FlowCodec::compress_derivative(const Tensor& derivative) const {
  return run_compressor(derivative_params_, "codec.derivative", derivative);
}

Tensor FlowCodec::decompress_derivative(const Tensor& code) const {
  return run_decompressor(derivative_params_, "codec.derivative", code, false);
}

std::size_t FlowMessage::payload_bytes() const {
  std::size_t n = comp_feature.defined() ? comp_feature.numel() : 0;
  if (comp_derivative) n += comp_derivative->numel();
  return 4 * n;
}

FlowMessage compress(const FeatureFlow& flow, const FlowCodec& codec, const Pose& calib, bool include_derivative) {
  if (flow.feature.tensor.rank() != 3 || flow.feature.tensor.dim(0) != codec.config().feature_channels) {
    throw DimensionError("compress: feature shape " + shape_str(flow.feature.tensor.shape()) +
                         " does not match codec");
  }
  FlowMessage msg;
  msg.t_i = flow.t_i;
  msg.calib = calib.to_matrix34();
  msg.comp_feature = codec.compress_feature(flow.feature.tensor).detach();
  if (include_derivative) {
    if (flow.derivative.shape() != flow.feature.tensor.shape()) {
      throw DimensionError("compress: derivative shape differs from feature shape");
    }
    msg.comp_derivative = codec.compress_derivative(flow.derivative).detach();
  }
  return msg;
}

FeatureFlow decompress(const FlowMessage& msg, const FlowCodec& codec) {
  if (msg.version != kFlowMessageVersion) {
    throw FormatError("unsupported message version " + std::to_string(msg.version), 4);
  }
  FeatureFlow flow;
  flow.t_i = msg.t_i;
  flow.feature = {codec.decompress_feature(msg.comp_feature), Frame::Infra, msg.t_i};
  if (msg.comp_derivative) {
    flow.derivative = codec.decompress_derivative(*msg.comp_derivative);
  } else {
    flow.derivative = Tensor(flow.feature.tensor.shape(), 0.0f);
  }
  return flow;
}

std::string serialize(const FlowMessage& msg) {
  const Tensor& f = msg.comp_feature;
  if (!f.defined() || f.rank() != 3) throw DimensionError("serialize: compressed feature must be rank 3");
  if (msg.comp_derivative && msg.comp_derivative->shape() != f.shape()) {
    throw DimensionError("serialize: compressed derivative dims differ from feature dims");
  }
  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint8_t>(msg.version);
  w.put<std::uint8_t>(msg.has_derivative() ? 1 : 0);
  w.put<double>(msg.t_i);
  for (float v : msg.calib) w.put<float>(v);
  for (int d : f.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put_floats(f.data());
  if (msg.comp_derivative) w.put_floats(msg.comp_derivative->data());
  return w.take();
}

FlowMessage deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("bad magic", 0);
  FlowMessage msg;
  msg.version = r.get<std::uint8_t>("version");
  if (msg.version != kFlowMessageVersion) {
    throw FormatError("unsupported version " + std::to_string(msg.version), 4);
  }
  const auto flags = r.get<std::uint8_t>("flags");
  if (flags & ~std::uint8_t{1}) throw FormatError("unknown flag bits", 5);
  msg.t_i = r.get<double>("t_i");
  for (float& v : msg.calib) v = r.get<float>("calib");
  Shape shape(3);
  std::size_t numel = 1;
  for (int& d : shape) {
    const std::size_t at = r.offset();
    const auto dim = r.get<std::uint32_t>("dims");
    if (dim == 0) throw FormatError("zero dimension", at);
    numel *= dim;
    if (numel > r.remaining() / sizeof(float)) throw FormatError("dims exceed payload", at);
    d = static_cast<int>(dim);
  }
  const std::size_t expected = numel * sizeof(float) * ((flags & 1) ? 2 : 1);
  if (r.remaining() < expected) throw FormatError("truncated payload", r.offset());
  if (r.remaining() > expected) throw FormatError("trailing bytes", r.offset() + expected);
  std::vector<float> data(numel);
  r.get_floats(data, "feature payload");
  msg.comp_feature = Tensor(shape, std::move(data));
  if (flags & 1) {
    std::vector<float> deriv(numel);
    r.get_floats(deriv, "derivative payload");
    msg.comp_derivative = Tensor(shape, std::move(deriv));
  }
  return msg;
}

FlowMessage deserialize(const std::string& bytes) { return deserialize(as_bytes(bytes)); }

std::size_t tensor_payload_bytes(const Shape& shape) { return 4 * shape_numel(shape); }
std::size_t early_fusion_bytes(std::size_t n_points) { return 16 * n_points; }
std::size_t late_fusion_bytes(std::size_t n_detections) { return 32 * n_detections; }

double average_byte(std::span<const std::size_t> transmission_log) {
  if (transmission_log.empty()) return 0.0;
  long double total = 0.0L;
  for (std::size_t b : transmission_log) total += static_cast<long double>(b);
  return static_cast<double>(total / static_cast<long double>(transmission_log.size()));
}

ChannelModel ChannelModel::fixed(double latency) {
  ChannelModel c;
  c.mode = Mode::Fixed;
  c.fixed_latency = latency;
  c.validate();
  return c;
}

ChannelModel ChannelModel::uniform_set(std::vector<double> latencies, std::uint64_t seed) {
  ChannelModel c;
  c.mode = Mode::UniformSet;
  c.latency_set = std::move(latencies);
  c.seed = seed;
  c.validate();
  return c;
}

ChannelModel ChannelModel::receivers(std::map<std::string, double> latencies) {
  ChannelModel c;
  c.mode = Mode::PerReceiver;
  c.per_receiver = std::move(latencies);
  c.validate();
  return c;
}

void ChannelModel::validate() const {
  auto bad = [](double v) { return !(v >= 0.0) || !std::isfinite(v); };
  if (bad(fixed_latency) || bad(per_byte_cost)) throw ConfigError("channel latencies must be >= 0");
  for (double v : latency_set) {
    if (bad(v)) throw ConfigError("channel latencies must be >= 0");
  }
  for (const auto& [name, v] : per_receiver) {
    if (bad(v)) throw ConfigError("channel latency for receiver " + name + " must be >= 0");
  }
  if (mode == Mode::UniformSet && latency_set.empty()) throw ConfigError("uniform latency set is empty");
}

double ChannelModel::latency(std::size_t message_index, std::size_t bytes, const std::string& receiver) const {
  double base = 0.0;
  switch (mode) {
    case Mode::Fixed:
      base = fixed_latency;
      break;
    case Mode::UniformSet: {
      Rng rng(mix_seed(seed, message_index));
      base = latency_set[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(latency_set.size()) - 1))];
      break;
    }
    case Mode::PerReceiver: {
      auto it = per_receiver.find(receiver);
      if (it == per_receiver.end()) throw ConfigError("no channel latency for receiver '" + receiver + "'");
      base = it->second;
      break;
    }
  }
  return base + per_byte_cost * static_cast<double>(bytes);
}

std::optional<std::size_t> latest_delivered(std::span<const Transmission> log, const ChannelModel& channel,
                                            double query_time, const std::string& receiver) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < log.size(); ++i) {
    if (log[i].send_time > query_time + kTimeEps) break;
    const double arrive = log[i].send_time + channel.latency(i, log[i].bytes, receiver);
    if (arrive <= query_time + kTimeEps) best = i;
  }
  return best;
}

std::optional<FlowMessage> channel_deliver(const std::vector<std::pair<double, FlowMessage>>& messages,
                                           const ChannelModel& channel, double query_time,
                                           const std::string& receiver) {
  std::vector<Transmission> log;
  log.reserve(messages.size());
  for (const auto& [t, m] : messages) log.push_back({t, m.payload_bytes(), "feature_flow"});
  const auto idx = latest_delivered(log, channel, query_time, receiver);
  if (!idx) return std::nullopt;
  return messages[*idx].second;
}

std::string transmission_log_csv(std::span<const Transmission> log, const ChannelModel& channel,
                                 const std::string& receiver) {
  std::string out = "send_time,arrive_time,bytes,kind\n";
  char buf[160];
  for (std::size_t i = 0; i < log.size(); ++i) {
    const double arrive = log[i].send_time + channel.latency(i, log[i].bytes, receiver);
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%zu,", log[i].send_time, arrive, log[i].bytes);
    out += buf;
    out += log[i].kind;
    out += '\n';
  }
  return out;
}

}  // namespace coflow
