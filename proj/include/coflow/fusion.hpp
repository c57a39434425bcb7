#pragma once

// BEV warp of infrastructure features into the vehicle frame, concat
// fusion, the single-anchor detection head and its training loss.

#include <cstdint>
#include <string>
#include <vector>

#include "coflow/flow.hpp"
#include "coflow/pillar.hpp"
#include "coflow/scene.hpp"
#include "coflow/tensor.hpp"

namespace coflow {

enum class ObjectClass : std::uint8_t { Car = 0 };

struct DetectionBox {
  double cx = 0, cy = 0, cz = 0;
  double w = 0, l = 0, h = 0;
  double yaw = 0;
  double score = 0;
  ObjectClass cls = ObjectClass::Car;
};

struct AnchorConfig {
  double w = 1.6, l = 3.9, h = 1.56;
  double z_center = -1.78;
  double pos_iou = 0.6;
  double neg_iou = 0.45;

  double diagonal() const;
  void validate() const;
};

// Axis-aligned BEV IoU of the boxes' axis-aligned hulls.
double bev_iou(double ax, double ay, double aw, double al, double ayaw,
               double bx, double by, double bw, double bl, double byaw);
double bev_iou(const DetectionBox& a, const DetectionBox& b);
double bev_iou(const DetectionBox& a, const GroundTruthBox& b);

// Bilinear resampling of an infra-frame BEV feature onto the vehicle grid
// using the planar (yaw, x, y) part of the relative pose. Target cells that
// map outside the source are zero. Differentiable w.r.t. the feature.
FeatureMap warp_to_vehicle(const FeatureMap& feature, const Pose& infra_pose, const Pose& vehicle_pose,
                           const BevGrid& grid);

// concat(vehicle, infra) -> 3x3 conv block back to C channels.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(int channels, std::uint64_t seed);
  FeatureMap fuse(const FeatureMap& vehicle_feat, const FeatureMap& infra_feat_warped) const;
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ParamSet params_;
};

inline FeatureMap fuse(const FeatureMap& vehicle_feat, const FeatureMap& infra_feat_warped,
                       const FusionBlock& block) {
  return block.fuse(vehicle_feat, infra_feat_warped);
}

// Output channels of the head, per BEV cell.
enum HeadChannel : int {
  kObjectness = 0,
  kDx, kDy, kDz, kLogW, kLogL, kLogH, kSinYaw, kCosYaw,
  kHeadChannels
};

class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(int channels, std::uint64_t seed);
  Tensor forward(const FeatureMap& fused) const;  // [9, H, W]
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ParamSet params_;
};

struct DetectOptions {
  double score_threshold = 0.5;
  double nms_iou = 0.2;
};

// Decodes every cell whose objectness probability exceeds the threshold,
// then runs greedy BEV NMS. Boxes are in the grid's frame.
std::vector<DetectionBox> decode_detections(const Tensor& head_out, const AnchorConfig& anchors,
                                            const BevGrid& grid, DetectOptions options);
std::vector<DetectionBox> detect(const FeatureMap& fused, const DetectionHead& head, const AnchorConfig& anchors,
                                 const BevGrid& grid, DetectOptions options);
std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold);

// Per-cell regression target of a box relative to the anchor at (row, col).
std::array<float, kHeadChannels> encode_box(const GroundTruthBox& box, int row, int col, const AnchorConfig& anchors,
                                            const BevGrid& grid);

enum class AnchorLabel : std::int8_t { Negative = 0, Positive = 1, Ignore = -1 };

struct AnchorTargets {
  std::vector<AnchorLabel> labels;  // per cell, row-major
  std::vector<int> matched;         // gt index per positive cell, else -1
};

// Matches anchors to ground truth. The anchor takes each ground truth's yaw
// when scoring the pair, so one anchor per cell serves every heading. Each
// ground truth's best anchor is forced positive.
AnchorTargets assign_anchors(const std::vector<GroundTruthBox>& gts, const AnchorConfig& anchors,
                             const BevGrid& grid);

struct LossWeights {
  double cls = 1.0;
  double reg = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
};

struct LossBreakdown {
  double classification = 0;
  double regression = 0;
  int positives = 0;
};

// Focal classification over matched/negative anchors plus smooth-L1 box
// residuals (sin-difference for yaw) on positives, normalised by the
// positive count. gts are in the grid's frame.
Tensor detection_loss(const Tensor& head_out, const std::vector<GroundTruthBox>& gts, const AnchorConfig& anchors,
                      const BevGrid& grid, const LossWeights& weights = {}, LossBreakdown* breakdown = nullptr);

enum class Visibility { Any, Infra, Vehicle, Unfiltered };

// World boxes re-expressed in a sensor frame (sensor_pose: sensor -> world)
// and kept when their center lies in `region` and the chosen sensors saw
// at least one point on them.
std::vector<GroundTruthBox> boxes_in_frame(const std::vector<GroundTruthBox>& world_boxes, const Pose& sensor_pose,
                                           const Rect& region, Visibility visibility = Visibility::Any);

inline Rect grid_region(const BevGrid& g) { return {g.x_min, g.x_max, g.y_min, g.y_max}; }

}  // namespace coflow
