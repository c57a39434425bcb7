#pragma once

// Network assemblies for every system variant and their per-frame
// inference steps on each side of the link.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coflow/comm.hpp"
#include "coflow/flow.hpp"
#include "coflow/fusion.hpp"
#include "coflow/pillar.hpp"
#include "coflow/scene.hpp"

namespace coflow {

struct ModelConfig {
  BevGrid grid;  // input pseudo-image grid, shared by both sensors
  int feature_channels = 32;
  AnchorConfig anchors;
  CodecConfig codec;
  LossWeights loss;
  std::uint64_t seed = 7;

  BevGrid feature_grid() const { return grid.downsampled(2, feature_channels); }
};

// Pillar encoder + extractor + head over one point cloud. Used for the
// vehicle-only baseline, early fusion (merged clouds) and the
// infrastructure-side detector of late fusion.
class SingleDetector {
 public:
  SingleDetector() = default;
  SingleDetector(const ModelConfig& config, const std::string& name);

  Tensor head_output(const PointCloud& cloud) const;
  std::vector<DetectionBox> detect(const PointCloud& cloud, DetectOptions options) const;

  const ModelConfig& config() const { return config_; }
  ParamSet params() const;

 private:
  ModelConfig config_;
  PillarEncoder pillar_;
  FeatureExtractor extractor_;
  DetectionHead head_;
};

// Infrastructure-side products for one frame.
struct InfraFrameOutput {
  FeatureFlow flow;
  FlowMessage message;
};

// Middle-fusion system: vehicle branch, infrastructure branch, feature-flow
// generator and codec, fusion block and head. One instance serves FFNet,
// its no-prediction ablation and the vehicle-side flow variant; a second
// instance with a wider code serves the double-rate ablation.
class CooperativeModel {
 public:
  CooperativeModel() = default;
  explicit CooperativeModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  PillarEncoder vehicle_pillar, infra_pillar;
  FeatureExtractor vehicle_extractor, infra_extractor;
  DerivativeGenerator infra_derivative;    // from two infra pseudo-images
  DerivativeGenerator vehicle_derivative;  // from two received feature maps
  FlowCodec codec;
  FusionBlock fusion;
  DetectionHead head;

  // Trained end to end at zero latency.
  ParamSet stage1_params() const;
  // Trained by the self-supervised flow stage: derivative generator and
  // the derivative compressor/decompressor.
  ParamSet flow_params() const;
  ParamSet vehicle_flow_params() const;
  ParamSet all_params() const;

  PseudoImage infra_image(const PointCloud& cloud) const;
  PseudoImage vehicle_image(const PointCloud& cloud) const;
  FeatureMap vehicle_feature(const PointCloud& cloud) const;

  // Extracts the feature (and the derivative when prev is given) for the
  // infrastructure frame `curr` and compresses them into a message.
  InfraFrameOutput infra_step(const PointCloud* prev, const PointCloud& curr, const Pose& calib,
                              bool send_derivative) const;

  // Vehicle side, message already decompressed into `flow`: predicted
  // infra feature at t_v (feature only when predict is false).
  FeatureMap predict_infra(const FeatureFlow& flow, double t_v, bool predict) const;
  // Vehicle-side flow estimate from two consecutive received features.
  FeatureMap predict_infra_vehicle_side(const FeatureMap& prev, const FeatureMap& curr, double t_v,
                                        double frame_interval) const;

  // Warp + fuse + head. `infra` is absent when nothing has arrived yet.
  Tensor fuse_and_head(const FeatureMap& vehicle_feat, const std::optional<FeatureMap>& infra,
                       const Pose& infra_pose, const Pose& vehicle_pose) const;

 private:
  ModelConfig config_;
};

// Loads values for every parameter name present in `src`.
void load_params(ParamSet& dst, const ParamSet& src);

}  // namespace coflow
