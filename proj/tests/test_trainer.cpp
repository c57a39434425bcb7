#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "coflow/errors.hpp"
#include "coflow/trainer.hpp"
#include "generator_oracle.hpp"
#include "support.hpp"

using namespace coflow;
using coflow::testing::bitwise_equal;
using coflow::testing::check_generator_gradient;
using coflow::testing::hand_flow_loss;
using coflow::testing::randomize_biases;
using coflow::testing::uniform_tensor;

namespace {

bool params_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    if (!b.contains(name) || !bitwise_equal(t, b.get(name))) return false;
  }
  return true;
}

// Names whose values differ between the two sets.
std::set<std::string> changed(const ParamSet& before, const ParamSet& after) {
  std::set<std::string> out;
  for (const auto& [name, t] : before) {
    if (!bitwise_equal(t, after.get(name))) out.insert(name);
  }
  return out;
}

std::vector<Scenario> tiny_scenarios(int count, int frames) {
  WorldConfig w;
  w.duration = frames * w.frame_interval;
  w.n_objects = 4;
  w.ground_noise_points = 300;
  std::vector<Scenario> out;
  for (int i = 0; i < count; ++i) {
    w.seed = 100 + i;
    out.push_back(simulate(w));
  }
  return out;
}

TrainConfig one_epoch() {
  TrainConfig c;
  c.stage1.epochs = 1;
  c.stage2.epochs = 1;
  return c;
}

}  // namespace

TEST(Pairs, SingleStepCoversEveryInteriorFrame) {
  const auto pairs = build_pairs(3, 10, 1, 1, 42);
  ASSERT_EQ(pairs.size(), 8u);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].scenario, 3);
    EXPECT_EQ(pairs[i].t_index, static_cast<int>(i) + 1);
    EXPECT_EQ(pairs[i].prev_index(), pairs[i].t_index - 1);
    EXPECT_EQ(pairs[i].future_index(), pairs[i].t_index + 1);
  }
}

TEST(Pairs, VariableHorizonStaysInRange) {
  std::set<int> ks;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pairs = build_pairs(0, 10, 1, 2, seed);
    ASSERT_EQ(pairs.size(), 7u);
    for (const auto& p : pairs) {
      EXPECT_GE(p.prev_index(), 0);
      EXPECT_LE(p.future_index(), 9);
      EXPECT_TRUE(p.k == 1 || p.k == 2);
      ks.insert(p.k);
    }
  }
  EXPECT_EQ(ks, (std::set<int>{1, 2}));
  const auto a = build_pairs(0, 10, 1, 2, 5), b = build_pairs(0, 10, 1, 2, 5);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].k, b[i].k);
}

TEST(Pairs, ShortScenarioOrBadRangeThrows) {
  EXPECT_THROW(build_pairs(0, 3, 1, 2, 1), ConfigError);
  EXPECT_NO_THROW(build_pairs(0, 4, 1, 2, 1));
  EXPECT_THROW(build_pairs(0, 10, 0, 1, 1), ConfigError);
  EXPECT_THROW(build_pairs(0, 10, 2, 1, 1), ConfigError);
}

TEST(FlowLoss, MatchesHandFormula) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = uniform_tensor({3, 5, 5}, rng, 0, 1);
    const Tensor d = uniform_tensor({3, 5, 5}, rng, -2, 2);
    const Tensor target = uniform_tensor({3, 5, 5}, rng, -0.2, 1);
    const double dt = rng.uniform(0.1, 0.3);
    const double loss = flow_loss(f, d, target, dt).item();
    EXPECT_NEAR(loss, hand_flow_loss(f, d, target, dt), 1e-6);
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 2.0);
  }
}

TEST(FlowLoss, Extremes) {
  Rng rng(2);
  const Tensor f = uniform_tensor({2, 4, 4}, rng, 0.1, 1);
  const Tensor zero(f.shape());
  EXPECT_NEAR(flow_loss(f, zero, f, 0.2).item(), 0.0, 1e-6);
  EXPECT_NEAR(flow_loss(f, zero, scale(f, -3.0f), 0.2).item(), 2.0, 1e-6);
  // The prediction is scale corrected, so a derivative along the feature
  // costs nothing.
  EXPECT_NEAR(flow_loss(f, f, f, 0.2).item(), 0.0, 1e-6);
}

TEST(FlowLoss, GeneratorGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    // Two-channel feature on a 4x4 grid; the generator sees two 2-channel frames.
    DerivativeGenerator gen(BackboneConfig{4, 4, {1, 1, 1, 1}}, 2, "toy", 100 + seed);
    randomize_biases(gen.params(), rng);
    const Tensor prev = uniform_tensor({2, 4, 4}, rng, 0, 1), curr = uniform_tensor({2, 4, 4}, rng, 0, 1);
    const Tensor feature = uniform_tensor({2, 4, 4}, rng, 0.2, 1), target = uniform_tensor({2, 4, 4}, rng, 0.2, 1);
    const auto r = check_generator_gradient(gen, "toy", prev, curr, feature, target, 0.1, 0.2);
    EXPECT_LT(r.forward_error, 1e-5);
    EXPECT_LT(r.gradient_error, 1e-3);
  }
}

class TinyTraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { scenarios_ = new std::vector<Scenario>(tiny_scenarios(1, 5)); }
  static void TearDownTestSuite() {
    delete scenarios_;
    scenarios_ = nullptr;
  }
  static std::vector<Scenario>* scenarios_;
};
std::vector<Scenario>* TinyTraining::scenarios_ = nullptr;

TEST_F(TinyTraining, StageOneLeavesFlowParametersAlone) {
  CooperativeModel model{ModelConfig{}};
  const ParamSet flow = model.flow_params().clone(), vehicle_flow = model.vehicle_flow_params().clone();
  const ParamSet stage1 = model.stage1_params().clone();
  const TrainReport report = train_stage1(model, *scenarios_, one_epoch());
  EXPECT_FALSE(report.log.empty());
  EXPECT_TRUE(params_equal(flow, model.flow_params()));
  EXPECT_TRUE(params_equal(vehicle_flow, model.vehicle_flow_params()));
  EXPECT_FALSE(changed(stage1, model.stage1_params()).empty());
}

TEST_F(TinyTraining, StageOneIsDeterministic) {
  CooperativeModel a{ModelConfig{}}, b{ModelConfig{}};
  (void)train_stage1(a, *scenarios_, one_epoch());
  (void)train_stage1(b, *scenarios_, one_epoch());
  EXPECT_TRUE(params_equal(a.all_params(), b.all_params()));
}

TEST_F(TinyTraining, StageTwoOnlyMovesTheGenerator) {
  CooperativeModel model{ModelConfig{}};
  const FlowCache cache = build_flow_cache(model, *scenarios_);
  const auto pairs = build_pairs(*scenarios_, 1, 2, 9);
  for (const FlowSide side : {FlowSide::Infra, FlowSide::Vehicle}) {
    const ParamSet trainable = side == FlowSide::Infra ? model.flow_params() : model.vehicle_flow_params();
    const ParamSet before = model.all_params().clone();
    (void)train_stage2(model, cache, pairs, one_epoch(), side);
    const auto moved = changed(before, model.all_params());
    EXPECT_FALSE(moved.empty());
    for (const auto& name : moved) EXPECT_TRUE(trainable.contains(name)) << name;
    const double loss = stage2_mean_loss(model, cache, pairs, side);
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 2.0);
  }
}

TEST_F(TinyTraining, StageTwoPairLossIsTheFlowLoss) {
  const CooperativeModel model{ModelConfig{}};
  const FlowCache cache = build_flow_cache(model, *scenarios_);
  const TrainPair pair{0, 2, 2};
  const double dt = cache.frame_interval[0];
  const Tensor d = model.infra_derivative.forward(cache.infra_image[0][1], cache.infra_image[0][2], dt);
  const Tensor d_hat = model.codec.decompress_derivative(model.codec.compress_derivative(d));
  const double expect = hand_flow_loss(cache.decompressed[0][2], d_hat, cache.decompressed[0][4], 2 * dt);
  EXPECT_NEAR(stage2_pair_loss(model, cache, pair, FlowSide::Infra).item(), expect, 1e-6);
  const double raw = hand_flow_loss(cache.feature[0][2], d_hat, cache.feature[0][4], 2 * dt);
  EXPECT_NEAR(stage2_pair_loss(model, cache, pair, FlowSide::Infra, FlowSpace::Extractor).item(), raw, 1e-6);
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.stage2.k_min = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.stage1.lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainingLog, CsvHasHeaderAndRows) {
  const std::string csv = training_log_csv({{"stage1", 0, 3, 0.5}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "stage,epoch,step,loss");
  EXPECT_NE(csv.find("stage1,0,3,"), std::string::npos);
}
