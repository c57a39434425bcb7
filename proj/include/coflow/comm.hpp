#pragma once

// Feature-flow codec, the broadcast wire format, the latency channel and
// Average Byte accounting.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coflow/flow.hpp"
#include "coflow/scene.hpp"
#include "coflow/tensor.hpp"

namespace coflow {

struct CodecConfig {
  int feature_channels = 32;
  int code_channels = 4;  // 8 for the double-rate variant
  int hidden_channels = 32;
};

// Two independent compressor/decompressor pairs, one for the feature and
// one for the derivative. Compressor: two stride-2 3x3 conv blocks then a
// 1x1 channel reduction, so [C, H, W] -> [code, H/4, W/4]. Decompressor:
// 1x1 expansion then two stride-2 deconv blocks back to [C, H, W].
class FlowCodec {
 public:
  FlowCodec() = default;
  FlowCodec(CodecConfig config, std::uint64_t seed);

  Tensor compress_feature(const Tensor& feature) const;
  Tensor decompress_feature(const Tensor& code) const;
  Tensor compress_derivative(const Tensor& derivative) const;
  Tensor decompress_derivative(const Tensor& code) const;

  const CodecConfig& config() const { return config_; }
  ParamSet& feature_params() { return feature_params_; }
  const ParamSet& feature_params() const { return feature_params_; }
  ParamSet& derivative_params() { return derivative_params_; }
  const ParamSet& derivative_params() const { return derivative_params_; }

 private:
  CodecConfig config_;
  ParamSet feature_params_;
  ParamSet derivative_params_;
};

inline constexpr std::uint8_t kFlowMessageVersion = 1;
inline constexpr std::size_t kFlowMessageHeaderBytes = 74;

struct FlowMessage {
  std::uint8_t version = kFlowMessageVersion;
  double t_i = 0.0;
  std::array<float, 12> calib{};  // infra -> world, row-major [R | t]
  Tensor comp_feature;            // [C', H', W']
  std::optional<Tensor> comp_derivative;

  bool has_derivative() const { return comp_derivative.has_value(); }
  // Transmitted tensor payload only; timestamp and calibration are not counted.
  std::size_t payload_bytes() const;
  Pose calibration() const { return Pose::from_matrix34(calib); }
};

FlowMessage compress(const FeatureFlow& flow, const FlowCodec& codec, const Pose& calib,
                     bool include_derivative = true);
// Lossy reconstruction. A message without a derivative yields a zero one.
FeatureFlow decompress(const FlowMessage& msg, const FlowCodec& codec);

// Little-endian layout: "FFNT", u8 version, u8 flags (bit0 = derivative),
// f64 t_i, 12 x f32 calib, 3 x u32 dims, f32 feature payload, then the
// optional f32 derivative payload of the same dims.
std::string serialize(const FlowMessage& msg);
FlowMessage deserialize(std::span<const std::uint8_t> bytes);
FlowMessage deserialize(const std::string& bytes);

// Payload sizes of the three transmission forms, 4 bytes per 32-bit float.
std::size_t tensor_payload_bytes(const Shape& shape);
std::size_t early_fusion_bytes(std::size_t n_points);      // (x, y, z, intensity)
std::size_t late_fusion_bytes(std::size_t n_detections);   // 8 floats per box

// Mean payload bytes per transmission; an empty log is 0.
double average_byte(std::span<const std::size_t> transmission_log);

struct ChannelModel {
  enum class Mode { Fixed, UniformSet, PerReceiver };

  Mode mode = Mode::Fixed;
  double fixed_latency = 0.0;
  std::vector<double> latency_set;
  std::map<std::string, double> per_receiver;
  std::uint64_t seed = 0;
  // Optional size-dependent term: latency += bytes * per_byte_cost.
  double per_byte_cost = 0.0;

  static ChannelModel fixed(double latency);
  static ChannelModel uniform_set(std::vector<double> latencies, std::uint64_t seed);
  static ChannelModel receivers(std::map<std::string, double> latencies);

  void validate() const;
  // Latency of the message_index-th transmission. Deterministic in
  // (seed, message_index).
  double latency(std::size_t message_index, std::size_t bytes, const std::string& receiver = {}) const;
};

struct Transmission {
  double send_time = 0.0;
  std::size_t bytes = 0;
  std::string kind;
};

// Index of the most recently sent transmission that has arrived by
// query_time. `log` must be sorted by send_time.
std::optional<std::size_t> latest_delivered(std::span<const Transmission> log, const ChannelModel& channel,
                                            double query_time, const std::string& receiver = {});

std::optional<FlowMessage> channel_deliver(const std::vector<std::pair<double, FlowMessage>>& messages,
                                           const ChannelModel& channel, double query_time,
                                           const std::string& receiver = {});

// CSV rows (send_time, arrive_time, bytes, kind) with a header line.
std::string transmission_log_csv(std::span<const Transmission> log, const ChannelModel& channel,
                                 const std::string& receiver = {});

}  // namespace coflow
