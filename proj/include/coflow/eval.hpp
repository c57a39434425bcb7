#pragma once

// 11-point interpolated BEV mAP, Average Byte, and the paired-seed latency
// sweep over every system variant.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coflow/model.hpp"
#include "coflow/scene.hpp"

namespace coflow {

struct EvalConfig {
  Rect region{0.0, 36.0, -18.0, 18.0};  // vehicle frame
  std::vector<double> iou_thresholds{0.5, 0.7};
  double score_threshold = 0.05;  // low, so the PR sweep sees the tail
  double nms_iou = 0.2;
  double late_send_threshold = 0.3;  // infra detections broadcast for late fusion
  int first_frame = 6;               // frames before this only warm up the link
  void validate() const;
};

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct MatchedDetection {
  DetectionBox det;
  bool is_tp = false;
};

// Greedy matching in descending score; each ground truth is claimed once,
// by the highest-scoring detection whose IoU reaches iou_thr.
std::vector<MatchedDetection> match_detections(const std::vector<DetectionBox>& dets,
                                               const std::vector<GroundTruthBox>& gts, double iou_thr);

// Cumulative PR points over detections sorted by descending score.
std::vector<PRPoint> pr_curve(std::vector<std::pair<double, bool>> scored, std::size_t n_ground_truth);

// (1/11) sum over r in {0, 0.1, ..., 1} of max precision at recall >= r.
double average_precision(std::span<const PRPoint> pr_points);

std::vector<DetectionBox> clip_to_region(const std::vector<DetectionBox>& dets, const Rect& region);

// Accumulates matches across frames for one IoU threshold.
class ApAccumulator {
 public:
  explicit ApAccumulator(double iou_thr) : iou_thr_(iou_thr) {}
  void add_frame(const std::vector<DetectionBox>& dets, const std::vector<GroundTruthBox>& gts);
  double ap() const;
  std::size_t ground_truths() const { return n_gt_; }

 private:
  double iou_thr_;
  std::vector<std::pair<double, bool>> scored_;
  std::size_t n_gt_ = 0;
};

enum class Variant { NonFusion, EarlyFusion, LateFusion, MiddleNoPred, MiddleNoPredWide, FFNet, FFNetV };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);  // throws ConfigError
std::vector<Variant> all_variants();

// Every trained network the sweep needs.
struct TrainedSystem {
  CooperativeModel ffnet;  // FFNet, MiddleNoPred, FFNetV
  CooperativeModel wide;   // MiddleNoPredWide
  SingleDetector vehicle;  // NonFusion and the vehicle half of late fusion
  SingleDetector early;
  SingleDetector infra;    // infra half of late fusion
};

struct VariantOutput {
  std::vector<DetectionBox> detections;  // vehicle frame
  std::optional<std::size_t> bytes;      // payload of the consumed message, if any
};

// Per-scenario caches of everything that does not depend on latency.
class SweepRunner {
 public:
  SweepRunner(const TrainedSystem& system, const std::vector<Scenario>& scenarios, EvalConfig config);

  // Detections of `variant` for vehicle frame `frame` of scenario `s` when
  // infra messages arrive `latency` seconds after capture.
  VariantOutput run_frame(Variant variant, std::size_t s, int frame, double latency) const;
  std::vector<GroundTruthBox> ground_truth(std::size_t s, int frame) const;

  struct Cell {
    Variant variant;
    double latency_ms = 0.0;
    std::vector<double> map;  // one per IoU threshold
    double avg_byte = 0.0;
    int frames = 0;
  };
  Cell evaluate(Variant variant, double latency_ms) const;

 private:
  struct ScenarioCache {
    std::vector<FeatureMap> vehicle_feature;       // ffnet vehicle branch
    std::vector<FeatureMap> vehicle_feature_wide;  // wide vehicle branch
    std::vector<FeatureFlow> flow;                 // ffnet messages with derivative, decompressed
    std::vector<std::size_t> flow_bytes;
    std::vector<FeatureMap> feature_only;          // ffnet messages without derivative
    std::vector<std::size_t> feature_only_bytes;
    std::vector<FeatureMap> feature_wide;
    std::vector<std::size_t> feature_wide_bytes;
    std::vector<std::vector<DetectionBox>> vehicle_dets;
    std::vector<std::vector<DetectionBox>> infra_dets;  // infra frame, above send threshold
  };

  const TrainedSystem& system_;
  const std::vector<Scenario>& scenarios_;
  EvalConfig config_;
  std::vector<ScenarioCache> cache_;
};

struct SweepRow {
  std::string variant;
  double latency_ms = 0.0;
  double map_bev_50 = 0.0;
  double map_bev_70 = 0.0;
  double avg_byte = 0.0;
  int frames = 0;
  std::uint64_t seed = 0;
};

// Fixed-latency channel per entry of latencies_ms; every variant sees the
// same frames and the same channel.
std::vector<SweepRow> run_latency_sweep(const TrainedSystem& system, const std::vector<Scenario>& scenarios,
                                        const std::vector<Variant>& variants, const std::vector<double>& latencies_ms,
                                        std::uint64_t channel_seed, const EvalConfig& config = {});

// "variant,latency_ms,map_bev_50,map_bev_70,avg_byte,frames,seed" with a
// leading "# spec_hash=..." comment line.
std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& spec_hash);
// Two-column "latency_ms map_bev_50" text for one variant.
std::string latency_curve(const std::vector<SweepRow>& rows, const std::string& variant, const std::string& spec_hash);

// Box re-expressed from one sensor frame into another (planar).
DetectionBox transform_detection(const DetectionBox& box, const Pose& from_sensor, const Pose& to_sensor);

}  // namespace coflow
