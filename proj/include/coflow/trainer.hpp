#pragma once

// Stage 1 (end-to-end detection at zero latency, flow masked), stage 2
// (self-supervised feature-flow training) and baseline detector training.

#include <cstdint>
#include <string>
#include <vector>

#include "coflow/model.hpp"
#include "coflow/scene.hpp"

namespace coflow {

// (P_i(t-1), P_i(t), P_i(t+k)) as frame indices into one scenario.
struct TrainPair {
  int scenario = 0;
  int t_index = 0;
  int k = 1;
  int prev_index() const { return t_index - 1; }
  int future_index() const { return t_index + k; }
};

struct Stage1Config {
  int epochs = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch = 2;
};

// Space of the stage-2 base feature and target. Decompressed matches what
// the vehicle holds after the link and what the fusion block was trained
// on; Extractor uses the raw extractor output on both ends.
enum class FlowSpace { Decompressed, Extractor };

struct Stage2Config {
  int epochs = 5;
  double lr = 1e-3;
  int batch = 2;
  int k_min = 1;
  int k_max = 2;
  FlowSpace space = FlowSpace::Decompressed;
};

struct TrainConfig {
  Stage1Config stage1;
  Stage2Config stage2;
  std::uint64_t seed = 7;
  void validate() const;
};

struct LogRow {
  std::string stage;
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

struct TrainReport {
  std::vector<LogRow> log;
  std::vector<std::string> warnings;
};

// "stage,epoch,step,loss" with a header row.
std::string training_log_csv(const std::vector<LogRow>& log);

// Every t in [1, n - 1 - k_max] with k drawn uniformly from [k_min, k_max].
// Throws ConfigError when the scenario has fewer than k_max + 2 frames.
std::vector<TrainPair> build_pairs(int scenario_index, int frame_count, int k_min, int k_max, std::uint64_t seed);
std::vector<TrainPair> build_pairs(const std::vector<Scenario>& scenarios, int k_min, int k_max,
                                   std::uint64_t seed);

// Cooperative labels: world boxes in the vehicle frame, clipped to the
// grid, seen by at least one sensor.
std::vector<GroundTruthBox> vehicle_labels(const FrameData& frame, const BevGrid& grid);

// Zero-latency differentiable forward of the middle-fusion model: the infra
// feature goes through the feature codec, the derivative path is masked.
Tensor cooperative_head_output(const CooperativeModel& model, const FrameData& frame);
Tensor cooperative_loss(const CooperativeModel& model, const FrameData& frame, LossBreakdown* breakdown = nullptr);

TrainReport train_stage1(CooperativeModel& model, const std::vector<Scenario>& scenarios, const TrainConfig& config);

enum class DetectorRole { Vehicle, Early, Infra };

// Input cloud and labels of a single-branch detector for one frame. Early
// fusion merges the (same-time) infra cloud into the vehicle frame.
PointCloud detector_input(DetectorRole role, const FrameData& frame);
PointCloud merge_clouds(const PointCloud& vehicle_cloud, const PointCloud& infra_cloud, const Pose& infra_pose,
                        const Pose& vehicle_pose);
std::vector<GroundTruthBox> detector_labels(DetectorRole role, const FrameData& frame, const BevGrid& grid);
Tensor detector_loss(const SingleDetector& det, DetectorRole role, const FrameData& frame);

TrainReport train_detector(SingleDetector& det, DetectorRole role, const std::vector<Scenario>& scenarios,
                           const TrainConfig& config);

// 1 - cos(scale_correct(feature + dt * derivative, feature), target).
Tensor flow_loss(const Tensor& feature, const Tensor& derivative, const Tensor& target, double dt);

// Frozen stage-1 products for one scenario frame, reused by stage 2.
struct FlowCache {
  std::vector<std::vector<Tensor>> infra_image;    // pseudo-image tensors
  std::vector<std::vector<Tensor>> feature;        // raw extractor output
  std::vector<std::vector<Tensor>> decompressed;   // after the feature codec
  std::vector<double> frame_interval;
};
FlowCache build_flow_cache(const CooperativeModel& model, const std::vector<Scenario>& scenarios);

enum class FlowSide { Infra, Vehicle };

// Loss of one pair. Infra side: derivative from the two pseudo-images
// through the derivative codec. Vehicle side: derivative from the two
// received (decompressed) features. The vehicle side always starts from
// the decompressed feature.
Tensor stage2_pair_loss(const CooperativeModel& model, const FlowCache& cache, const TrainPair& pair, FlowSide side,
                        FlowSpace space = FlowSpace::Decompressed);
// Mean pair loss without recording; pairs with a zero-norm prediction are skipped.
double stage2_mean_loss(const CooperativeModel& model, const FlowCache& cache, const std::vector<TrainPair>& pairs,
                        FlowSide side, FlowSpace space = FlowSpace::Decompressed);

// Only the derivative generator (and, infra side, the derivative codec)
// is updated; everything else stays bitwise frozen.
TrainReport train_stage2(CooperativeModel& model, const FlowCache& cache, const std::vector<TrainPair>& pairs,
                         const TrainConfig& config, FlowSide side = FlowSide::Infra);

}  // namespace coflow
