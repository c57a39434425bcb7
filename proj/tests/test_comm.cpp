#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "coflow/comm.hpp"
#include "coflow/errors.hpp"
#include "support.hpp"
#include "wire_cases.hpp"

using namespace coflow;
using coflow::testing::bitwise_equal;
using coflow::testing::random_message;
using coflow::testing::same_message;
using coflow::testing::uniform_tensor;

namespace {

FeatureFlow desk_flow(Rng& rng) {
  FeatureFlow f;
  f.feature.tensor = uniform_tensor({32, 36, 36}, rng, 0, 1);
  f.derivative = uniform_tensor({32, 36, 36}, rng, -1, 1);
  f.t_i = 0.7;
  f.feature.timestamp = 0.7;
  return f;
}

std::vector<std::pair<double, FlowMessage>> sends(std::initializer_list<double> times) {
  std::vector<std::pair<double, FlowMessage>> out;
  for (double t : times) {
    FlowMessage m;
    m.t_i = t;
    m.comp_feature = Tensor({1, 1, 1}, static_cast<float>(t));
    out.emplace_back(t, m);
  }
  return out;
}

}  // namespace

TEST(Codec, DeskScaleShapesAndPayload) {
  Rng rng(1);
  const FlowCodec codec(CodecConfig{}, 2);
  const FlowMessage msg = compress(desk_flow(rng), codec, Pose::identity());
  EXPECT_EQ(msg.comp_feature.shape(), (Shape{4, 9, 9}));
  ASSERT_TRUE(msg.has_derivative());
  EXPECT_EQ(msg.comp_derivative->shape(), (Shape{4, 9, 9}));
  EXPECT_EQ(msg.payload_bytes(), 2u * 4 * 9 * 9 * 4);
  EXPECT_EQ(msg.payload_bytes(), 2592u);
  // Compressed / original elements: 1/8 channels, 1/4 x 1/4 spatial.
  EXPECT_DOUBLE_EQ(static_cast<double>(msg.comp_feature.numel()) / (32 * 36 * 36), 1.0 / 8 / 4 / 4);
}

TEST(Codec, WithoutDerivativeHalvesPayload) {
  Rng rng(3);
  const FlowCodec codec(CodecConfig{}, 4);
  const FeatureFlow f = desk_flow(rng);
  const FlowMessage full = compress(f, codec, Pose::identity(), true);
  const FlowMessage half = compress(f, codec, Pose::identity(), false);
  EXPECT_FALSE(half.has_derivative());
  EXPECT_EQ(2 * half.payload_bytes(), full.payload_bytes());
  EXPECT_EQ(half.payload_bytes(), 1296u);
}

TEST(Codec, DecompressRestoresShapeAndCarriesMetadata) {
  Rng rng(5);
  const FlowCodec codec(CodecConfig{}, 6);
  const Pose calib = Pose::from_yaw(0.4, {48, 1, 2.5});
  const FlowMessage msg = compress(desk_flow(rng), codec, calib, false);
  const FeatureFlow back = decompress(msg, codec);
  EXPECT_EQ(back.feature.tensor.shape(), (Shape{32, 36, 36}));
  EXPECT_EQ(back.derivative.shape(), (Shape{32, 36, 36}));
  for (float v : back.derivative.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_DOUBLE_EQ(back.t_i, 0.7);
  EXPECT_NEAR((msg.calibration().translation - calib.translation).norm(), 0.0, 1e-5);
}

TEST(Codec, WideCodeDoublesFeaturePayload) {
  Rng rng(7);
  const FlowCodec wide(CodecConfig{32, 8, 32}, 8);
  EXPECT_EQ(compress(desk_flow(rng), wide, Pose::identity(), false).payload_bytes(), 2592u);
}

TEST(Bytes, AppendixWorkedExamples) {
  EXPECT_EQ(early_fusion_bytes(100000), 1600000u);
  EXPECT_EQ(late_fusion_bytes(10), 320u);
  EXPECT_EQ(tensor_payload_bytes({100, 100, 100}), 4000000u);
  EXPECT_EQ(2 * tensor_payload_bytes({12, 36, 36}), 124416u);
  EXPECT_EQ(tensor_payload_bytes({12, 36, 36}), 62208u);
}

TEST(Bytes, AverageByte) {
  EXPECT_EQ(average_byte({}), 0.0);
  const std::vector<std::size_t> log{100, 200, 600};
  EXPECT_DOUBLE_EQ(average_byte(log), 300.0);
}

TEST(Wire, HeaderIs74Bytes) {
  FlowMessage m;
  m.comp_feature = Tensor({2, 3, 3}, 1.0f);
  const std::string b = serialize(m);
  EXPECT_EQ(kFlowMessageHeaderBytes, 4u + 1 + 1 + 8 + 48 + 12);
  EXPECT_EQ(b.size(), kFlowMessageHeaderBytes + m.payload_bytes());
  EXPECT_EQ(b.substr(0, 4), "FFNT");
  EXPECT_EQ(b[5], 0);
  m.comp_derivative = Tensor({2, 3, 3}, 2.0f);
  const std::string d = serialize(m);
  EXPECT_EQ(d.size(), kFlowMessageHeaderBytes + 2 * 18 * 4);
  EXPECT_EQ(d[5], 1);
}

TEST(Wire, LittleEndianFields) {
  FlowMessage m;
  m.t_i = 1.5;
  m.calib[0] = 2.0f;
  m.comp_feature = Tensor({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  const std::string b = serialize(m);
  double t;
  std::memcpy(&t, b.data() + 6, 8);
  EXPECT_EQ(t, 1.5);
  float c0;
  std::memcpy(&c0, b.data() + 14, 4);
  EXPECT_EQ(c0, 2.0f);
  std::uint32_t dims[3];
  std::memcpy(dims, b.data() + 62, 12);
  EXPECT_EQ(dims[0], 1u);
  EXPECT_EQ(dims[1], 2u);
  EXPECT_EQ(dims[2], 3u);
  float first;
  std::memcpy(&first, b.data() + 74, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(Wire, RandomRoundTripIsBitwise) {
  Rng rng(9);
  for (int i = 0; i < 10000; ++i) {
    const FlowMessage m = random_message(rng);
    ASSERT_TRUE(same_message(deserialize(serialize(m)), m)) << "message " << i;
  }
}

TEST(Wire, TruncationAndBadMagicThrow) {
  Rng rng(10);
  const std::string b = serialize(random_message(rng));
  for (std::size_t n = 0; n < b.size(); ++n) EXPECT_THROW(deserialize(b.substr(0, n)), FormatError) << n;
  std::string bad = b;
  bad[0] = 'X';
  EXPECT_THROW(deserialize(bad), FormatError);
  std::string version = b;
  version[4] = 9;
  EXPECT_THROW(deserialize(version), FormatError);
  EXPECT_THROW(deserialize(b + "x"), FormatError);
}

TEST(Wire, MutationsNeverCrash) {
  Rng rng(11);
  int decoded = 0, rejected = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string b = serialize(random_message(rng));
    const int flips = static_cast<int>(rng.integer(1, 4));
    for (int k = 0; k < flips; ++k) {
      b[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(b.size()) - 1))] =
          static_cast<char>(rng.integer(0, 255));
    }
    try {
      (void)deserialize(b);
      ++decoded;
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  EXPECT_EQ(decoded + rejected, 10000);
}

TEST(Channel, FixedLatencyExample) {
  const auto msgs = sends({0.0, 0.1});
  const auto got = channel_deliver(msgs, ChannelModel::fixed(0.2), 0.25);
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(got->t_i, 0.0);
  EXPECT_FALSE(channel_deliver(msgs, ChannelModel::fixed(0.2), 0.15).has_value());
  EXPECT_EQ(channel_deliver(msgs, ChannelModel::fixed(0.2), 0.3)->t_i, 0.1);
}

TEST(Channel, MonotoneInQueryTime) {
  const auto msgs = sends({0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7});
  const ChannelModel ch = ChannelModel::uniform_set({0.1, 0.2, 0.3, 0.4, 0.5}, 3);
  double last = -1.0;
  for (double q = 0.0; q < 1.5; q += 0.01) {
    const auto got = channel_deliver(msgs, ch, q);
    if (!got) {
      EXPECT_LT(last, 0.0);
      continue;
    }
    EXPECT_GE(got->t_i, last);
    last = got->t_i;
  }
}

TEST(Channel, UniformSetIsUniform) {
  const std::vector<double> set{0.1, 0.2, 0.3, 0.4, 0.5};
  const ChannelModel ch = ChannelModel::uniform_set(set, 12);
  std::vector<int> counts(set.size(), 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double l = ch.latency(static_cast<std::size_t>(i), 0);
    const auto it = std::find(set.begin(), set.end(), l);
    ASSERT_NE(it, set.end());
    ++counts[static_cast<std::size_t>(it - set.begin())];
  }
  // Each count is Binomial(n, 1/5): within 3 standard deviations.
  const double p = 1.0 / set.size(), mean = n * p, sd = std::sqrt(n * p * (1 - p));
  for (int c : counts) EXPECT_LE(std::abs(c - mean), 3 * sd) << c;
  EXPECT_EQ(ch.latency(17, 0), ChannelModel::uniform_set(set, 12).latency(17, 0));
}

TEST(Channel, PerReceiverAndByteCost) {
  ChannelModel ch = ChannelModel::receivers({{"a", 0.1}, {"b", 0.3}});
  EXPECT_EQ(ch.latency(0, 0, "a"), 0.1);
  EXPECT_EQ(ch.latency(0, 0, "b"), 0.3);
  EXPECT_THROW(ch.latency(0, 0, "c"), ConfigError);
  ChannelModel fixed = ChannelModel::fixed(0.1);
  fixed.per_byte_cost = 1e-6;
  EXPECT_NEAR(fixed.latency(0, 100000), 0.2, 1e-12);
  EXPECT_THROW(ChannelModel::fixed(-0.1).validate(), ConfigError);
}

TEST(Channel, TransmissionLogCsv) {
  const std::vector<Transmission> log{{0.0, 100, "flow"}, {0.1, 200, "flow"}};
  const std::string csv = transmission_log_csv(log, ChannelModel::fixed(0.2));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "send_time,arrive_time,bytes,kind");
  EXPECT_NE(csv.find("0.100000,0.300000,200,flow"), std::string::npos) << csv;
  const auto idx = latest_delivered(log, ChannelModel::fixed(0.2), 0.29);
  ASSERT_TRUE(idx.has_value());
  EXPECT_EQ(*idx, 0u);
}
