#include "coflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "coflow/errors.hpp"
#include "coflow/trainer.hpp"

namespace coflow {
namespace {

// Recall grid points are compared with a tolerance so 3/10 computed two
// ways still counts.
constexpr double kRecallEps = 1e-12;

std::vector<Transmission> transmissions(const std::vector<std::size_t>& bytes, const Scenario& sc, int upto) {
  std::vector<Transmission> log;
  for (int k = 0; k <= upto; ++k) log.push_back({sc.frames[k].timestamp, bytes[k], "infra"});
  return log;
}

}  // namespace

void EvalConfig::validate() const {
  if (!(region.x_max > region.x_min) || !(region.y_max > region.y_min)) throw ConfigError("eval region is empty");
  if (iou_thresholds.empty()) throw ConfigError("eval needs at least one IoU threshold");
  for (double t : iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("IoU thresholds must lie in (0, 1]");
  }
  if (first_frame < 0) throw ConfigError("first_frame must be >= 0");
}

std::vector<MatchedDetection> match_detections(const std::vector<DetectionBox>& dets,
                                               const std::vector<GroundTruthBox>& gts, double iou_thr) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> claimed(gts.size(), false);
  std::vector<MatchedDetection> out;
  out.reserve(dets.size());
  for (std::size_t i : order) {
    double best = iou_thr;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double iou = bev_iou(dets[i], gts[g]);
      if (iou >= best) {
        best = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) claimed[static_cast<std::size_t>(best_gt)] = true;
    out.push_back({dets[i], best_gt >= 0});
  }
  return out;
}

std::vector<PRPoint> pr_curve(std::vector<std::pair<double, bool>> scored, std::size_t n_ground_truth) {
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<PRPoint> pts;
  if (n_ground_truth == 0) return pts;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (scored[i].second) ++tp;
    pts.push_back({static_cast<double>(tp) / static_cast<double>(n_ground_truth),
                   static_cast<double>(tp) / static_cast<double>(i + 1)});
  }
  return pts;
}

double average_precision(std::span<const PRPoint> pr_points) {
  double total = 0.0;
  for (int i = 0; i <= 10; ++i) {
    const double r = i / 10.0;
    double best = 0.0;
    for (const auto& p : pr_points) {
      if (p.recall >= r - kRecallEps) best = std::max(best, p.precision);
    }
    total += best;
  }
  return total / 11.0;
}

std::vector<DetectionBox> clip_to_region(const std::vector<DetectionBox>& dets, const Rect& region) {
  std::vector<DetectionBox> out;
  for (const auto& d : dets) {
    if (region.contains(d.cx, d.cy)) out.push_back(d);
  }
  return out;
}

void ApAccumulator::add_frame(const std::vector<DetectionBox>& dets, const std::vector<GroundTruthBox>& gts) {
  for (const auto& m : match_detections(dets, gts, iou_thr_)) scored_.push_back({m.det.score, m.is_tp});
  n_gt_ += gts.size();
}

double ApAccumulator::ap() const {
  const auto pts = pr_curve(scored_, n_gt_);
  return average_precision(pts);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::NonFusion: return "NonFusion";
    case Variant::EarlyFusion: return "EarlyFusion";
    case Variant::LateFusion: return "LateFusion";
    case Variant::MiddleNoPred: return "MiddleNoPred";
    case Variant::MiddleNoPredWide: return "MiddleNoPredWide";
    case Variant::FFNet: return "FFNet";
    case Variant::FFNetV: return "FFNetV";
  }
  return "?";
}

std::vector<Variant> all_variants() {
  return {Variant::NonFusion,    Variant::EarlyFusion,      Variant::LateFusion, Variant::MiddleNoPred,
          Variant::MiddleNoPredWide, Variant::FFNet, Variant::FFNetV};
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

DetectionBox transform_detection(const DetectionBox& box, const Pose& from_sensor, const Pose& to_sensor) {
  const Pose rel = to_sensor.inverse().compose(from_sensor);
  const Eigen::Vector3d c = rel.apply({box.cx, box.cy, box.cz});
  DetectionBox out = box;
  out.cx = c.x();
  out.cy = c.y();
  out.cz = c.z();
  out.yaw = std::remainder(box.yaw + rel.yaw(), 2.0 * 3.14159265358979323846);
  return out;
}

SweepRunner::SweepRunner(const TrainedSystem& system, const std::vector<Scenario>& scenarios, EvalConfig config)
    : system_(system), scenarios_(scenarios), config_(std::move(config)) {
  config_.validate();
  const DetectOptions send{config_.late_send_threshold, config_.nms_iou};
  const DetectOptions eval{config_.score_threshold, config_.nms_iou};
  for (const auto& sc : scenarios_) {
    ScenarioCache c;
    for (std::size_t k = 0; k < sc.frames.size(); ++k) {
      const FrameData& fr = sc.frames[k];
      const PointCloud* prev = k > 0 ? &sc.frames[k - 1].infra_cloud : nullptr;
      c.vehicle_feature.push_back(system_.ffnet.vehicle_feature(fr.vehicle_cloud));
      c.vehicle_feature_wide.push_back(system_.wide.vehicle_feature(fr.vehicle_cloud));

      // Every message goes through the wire format before the vehicle sees it.
      const InfraFrameOutput full = system_.ffnet.infra_step(prev, fr.infra_cloud, fr.infra_pose, true);
      const FlowMessage full_rx = deserialize(serialize(full.message));
      c.flow.push_back(decompress(full_rx, system_.ffnet.codec));
      c.flow_bytes.push_back(full_rx.payload_bytes());

      FlowMessage feature_msg = full_rx;
      feature_msg.comp_derivative.reset();
      c.feature_only.push_back(decompress(feature_msg, system_.ffnet.codec).feature);
      c.feature_only_bytes.push_back(feature_msg.payload_bytes());

      const InfraFrameOutput wide = system_.wide.infra_step(nullptr, fr.infra_cloud, fr.infra_pose, false);
      const FlowMessage wide_rx = deserialize(serialize(wide.message));
      c.feature_wide.push_back(decompress(wide_rx, system_.wide.codec).feature);
      c.feature_wide_bytes.push_back(wide_rx.payload_bytes());

      c.vehicle_dets.push_back(system_.vehicle.detect(fr.vehicle_cloud, eval));
      c.infra_dets.push_back(system_.infra.detect(fr.infra_cloud, send));
    }
    cache_.push_back(std::move(c));
  }
}

std::vector<GroundTruthBox> SweepRunner::ground_truth(std::size_t s, int frame) const {
  const FrameData& fr = scenarios_.at(s).frames.at(static_cast<std::size_t>(frame));
  return boxes_in_frame(fr.boxes, fr.vehicle_pose, config_.region, Visibility::Any);
}

VariantOutput SweepRunner::run_frame(Variant variant, std::size_t s, int frame, double latency) const {
  const Scenario& sc = scenarios_.at(s);
  const ScenarioCache& c = cache_.at(s);
  const auto j = static_cast<std::size_t>(frame);
  const FrameData& fr = sc.frames.at(j);
  const ChannelModel channel = ChannelModel::fixed(latency);
  const DetectOptions eval{config_.score_threshold, config_.nms_iou};
  const auto& ffnet = system_.ffnet;
  const AnchorConfig& anchors = ffnet.config().anchors;
  const BevGrid fgrid = ffnet.config().feature_grid();

  auto delivered = [&](const std::vector<std::size_t>& bytes) {
    const auto log = transmissions(bytes, sc, frame);
    return latest_delivered(log, channel, fr.timestamp);
  };
  auto middle = [&](const CooperativeModel& model, const FeatureMap& vfeat, const std::optional<FeatureMap>& infra,
                    std::optional<std::size_t> k) {
    const Pose infra_pose = k ? sc.frames[*k].infra_pose : fr.infra_pose;
    const Tensor out = model.fuse_and_head(vfeat, infra, infra_pose, fr.vehicle_pose);
    return decode_detections(out, anchors, fgrid, eval);
  };

  VariantOutput out;
  switch (variant) {
    case Variant::NonFusion:
      out.detections = c.vehicle_dets[j];
      break;
    case Variant::EarlyFusion: {
      std::vector<std::size_t> bytes;
      for (std::size_t k = 0; k <= j; ++k) bytes.push_back(early_fusion_bytes(sc.frames[k].infra_cloud.points.size()));
      const auto k = delivered(bytes);
      PointCloud cloud = fr.vehicle_cloud;
      if (k) {
        cloud = merge_clouds(fr.vehicle_cloud, sc.frames[*k].infra_cloud, sc.frames[*k].infra_pose, fr.vehicle_pose);
        out.bytes = bytes[*k];
      }
      out.detections = system_.early.detect(cloud, eval);
      break;
    }
    case Variant::LateFusion: {
      std::vector<std::size_t> bytes;
      for (std::size_t k = 0; k <= j; ++k) bytes.push_back(late_fusion_bytes(c.infra_dets[k].size()));
      const auto k = delivered(bytes);
      std::vector<DetectionBox> merged = c.vehicle_dets[j];
      if (k) {
        for (const auto& d : c.infra_dets[*k]) {
          merged.push_back(transform_detection(d, sc.frames[*k].infra_pose, fr.vehicle_pose));
        }
        out.bytes = bytes[*k];
      }
      out.detections = nms(std::move(merged), config_.nms_iou);
      break;
    }
    case Variant::MiddleNoPred: {
      const auto k = delivered(c.feature_only_bytes);
      std::optional<FeatureMap> infra;
      if (k) {
        infra = c.feature_only[*k];
        out.bytes = c.feature_only_bytes[*k];
      }
      out.detections = middle(ffnet, c.vehicle_feature[j], infra, k);
      break;
    }
    case Variant::MiddleNoPredWide: {
      const auto k = delivered(c.feature_wide_bytes);
      std::optional<FeatureMap> infra;
      if (k) {
        infra = c.feature_wide[*k];
        out.bytes = c.feature_wide_bytes[*k];
      }
      out.detections = middle(system_.wide, c.vehicle_feature_wide[j], infra, k);
      break;
    }
    case Variant::FFNet: {
      const auto k = delivered(c.flow_bytes);
      std::optional<FeatureMap> infra;
      if (k) {
        infra = ffnet.predict_infra(c.flow[*k], fr.timestamp, true);
        out.bytes = c.flow_bytes[*k];
      }
      out.detections = middle(ffnet, c.vehicle_feature[j], infra, k);
      break;
    }
    case Variant::FFNetV: {
      const auto k = delivered(c.feature_only_bytes);
      std::optional<FeatureMap> infra;
      if (k) {
        // The previous message always arrives first under a fixed latency.
        if (*k > 0) {
          infra = ffnet.predict_infra_vehicle_side(c.feature_only[*k - 1], c.feature_only[*k], fr.timestamp,
                                                   sc.config.frame_interval);
        } else {
          infra = c.feature_only[*k];
        }
        out.bytes = c.feature_only_bytes[*k];
      }
      out.detections = middle(ffnet, c.vehicle_feature[j], infra, k);
      break;
    }
  }
  out.detections = clip_to_region(out.detections, config_.region);
  return out;
}

SweepRunner::Cell SweepRunner::evaluate(Variant variant, double latency_ms) const {
  std::vector<ApAccumulator> acc;
  for (double t : config_.iou_thresholds) acc.emplace_back(t);
  std::vector<std::size_t> bytes;
  Cell cell{variant, latency_ms, {}, 0.0, 0};
  for (std::size_t s = 0; s < scenarios_.size(); ++s) {
    const int n = static_cast<int>(scenarios_[s].frames.size());
    for (int j = config_.first_frame; j < n; ++j) {
      const VariantOutput o = run_frame(variant, s, j, latency_ms / 1000.0);
      const auto gts = ground_truth(s, j);
      for (auto& a : acc) a.add_frame(o.detections, gts);
      if (o.bytes) bytes.push_back(*o.bytes);
      ++cell.frames;
    }
  }
  for (const auto& a : acc) cell.map.push_back(a.ap());
  cell.avg_byte = average_byte(bytes);
  return cell;
}

std::vector<SweepRow> run_latency_sweep(const TrainedSystem& system, const std::vector<Scenario>& scenarios,
                                        const std::vector<Variant>& variants, const std::vector<double>& latencies_ms,
                                        std::uint64_t channel_seed, const EvalConfig& config) {
  for (double l : latencies_ms) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("latencies must be finite and >= 0");
  }
  const SweepRunner runner(system, scenarios, config);
  std::vector<SweepRow> rows;
  for (Variant v : variants) {
    for (double l : latencies_ms) {
      const auto cell = runner.evaluate(v, l);
      SweepRow row;
      row.variant = to_string(v);
      row.latency_ms = l;
      row.map_bev_50 = cell.map.size() > 0 ? cell.map[0] : 0.0;
      row.map_bev_70 = cell.map.size() > 1 ? cell.map[1] : 0.0;
      row.avg_byte = cell.avg_byte;
      row.frames = cell.frames;
      row.seed = channel_seed;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& spec_hash) {
  std::string out = "# spec_hash=" + spec_hash + "\n";
  out += "variant,latency_ms,map_bev_50,map_bev_70,avg_byte,frames,seed\n";
  char buf[192];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), ",%g,%.6f,%.6f,%.1f,%d,%llu\n", r.latency_ms, r.map_bev_50, r.map_bev_70,
                  r.avg_byte, r.frames, static_cast<unsigned long long>(r.seed));
    out += r.variant;
    out += buf;
  }
  return out;
}

std::string latency_curve(const std::vector<SweepRow>& rows, const std::string& variant, const std::string& spec_hash) {
  std::string out = "# spec_hash=" + spec_hash + " variant=" + variant + "\n# latency_ms map_bev_50\n";
  char buf[64];
  for (const auto& r : rows) {
    if (r.variant != variant) continue;
    std::snprintf(buf, sizeof(buf), "%g %.6f\n", r.latency_ms, r.map_bev_50);
    out += buf;
  }
  return out;
}

}  // namespace coflow
