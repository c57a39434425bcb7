#include "coflow/model.hpp"

#include "coflow/bytes.hpp"
#include "coflow/errors.hpp"
#include "coflow/rng.hpp"

namespace coflow {

SingleDetector::SingleDetector(const ModelConfig& config, const std::string& name)
    : config_(config),
      pillar_(config.grid, name + ".pillar", mix_seed(config.seed, fnv1a64(name) + 1)),
      extractor_(config.grid.channels, config.feature_channels, name + ".extractor",
                 mix_seed(config.seed, fnv1a64(name) + 2)),
      head_(config.feature_channels, mix_seed(config.seed, fnv1a64(name) + 3)) {}

Tensor SingleDetector::head_output(const PointCloud& cloud) const {
  const FeatureMap f = extractor_.extract(pillarize(cloud, config_.grid, pillar_));
  return head_.forward(f);
}

std::vector<DetectionBox> SingleDetector::detect(const PointCloud& cloud, DetectOptions options) const {
  return decode_detections(head_output(cloud), config_.anchors, config_.feature_grid(), options);
}

ParamSet SingleDetector::params() const {
  ParamSet p;
  p.merge(pillar_.params);
  p.merge(extractor_.params());
  p.merge(head_.params());
  return p;
}

CooperativeModel::CooperativeModel(const ModelConfig& config)
    : vehicle_pillar(config.grid, "vehicle.pillar", mix_seed(config.seed, 11)),
      infra_pillar(config.grid, "infra.pillar", mix_seed(config.seed, 12)),
      vehicle_extractor(config.grid.channels, config.feature_channels, "vehicle.extractor", mix_seed(config.seed, 13)),
      infra_extractor(config.grid.channels, config.feature_channels, "infra.extractor", mix_seed(config.seed, 14)),
      infra_derivative(BackboneConfig{2 * config.grid.channels, config.feature_channels, {2, 1, 1, 1}},
                       config.feature_channels, "infra.flow", mix_seed(config.seed, 15)),
      vehicle_derivative(BackboneConfig{2 * config.feature_channels, config.feature_channels, {1, 1, 1, 1}},
                         config.feature_channels, "vehicle.flow", mix_seed(config.seed, 16)),
      codec(config.codec, mix_seed(config.seed, 17)),
      fusion(config.feature_channels, mix_seed(config.seed, 18)),
      head(config.feature_channels, mix_seed(config.seed, 19)),
      config_(config) {
  if (config.codec.feature_channels != config.feature_channels) {
    throw ConfigError("codec feature channels must equal the extractor width");
  }
}

ParamSet CooperativeModel::stage1_params() const {
  ParamSet p;
  p.merge(vehicle_pillar.params);
  p.merge(infra_pillar.params);
  p.merge(vehicle_extractor.params());
  p.merge(infra_extractor.params());
  p.merge(codec.feature_params());
  p.merge(fusion.params());
  p.merge(head.params());
  return p;
}

ParamSet CooperativeModel::flow_params() const {
  ParamSet p;
  p.merge(infra_derivative.params());
  p.merge(codec.derivative_params());
  return p;
}

ParamSet CooperativeModel::vehicle_flow_params() const {
  ParamSet p;
  p.merge(vehicle_derivative.params());
  return p;
}

ParamSet CooperativeModel::all_params() const {
  ParamSet p = stage1_params();
  p.merge(flow_params());
  p.merge(vehicle_flow_params());
  return p;
}

PseudoImage CooperativeModel::infra_image(const PointCloud& cloud) const {
  return pillarize(cloud, config_.grid, infra_pillar);
}

PseudoImage CooperativeModel::vehicle_image(const PointCloud& cloud) const {
  return pillarize(cloud, config_.grid, vehicle_pillar);
}

FeatureMap CooperativeModel::vehicle_feature(const PointCloud& cloud) const {
  return vehicle_extractor.extract(vehicle_image(cloud));
}

InfraFrameOutput CooperativeModel::infra_step(const PointCloud* prev, const PointCloud& curr, const Pose& calib,
                                              bool send_derivative) const {
  InfraFrameOutput out;
  const PseudoImage img = infra_image(curr);
  out.flow.feature = infra_extractor.extract(img);
  out.flow.t_i = curr.timestamp;
  const bool with_derivative = send_derivative && prev != nullptr;
  if (with_derivative) {
    const PseudoImage img_prev = infra_image(*prev);
    out.flow.derivative = estimate_derivative(img_prev, img, infra_derivative, curr.timestamp - prev->timestamp);
  } else {
    out.flow.derivative = Tensor(out.flow.feature.tensor.shape(), 0.0f);
  }
  out.message = compress(out.flow, codec, calib, with_derivative);
  return out;
}

FeatureMap CooperativeModel::predict_infra(const FeatureFlow& flow, double t_v, bool predict_flag) const {
  if (!predict_flag) return flow.feature;
  return predict(flow, t_v);
}

FeatureMap CooperativeModel::predict_infra_vehicle_side(const FeatureMap& prev, const FeatureMap& curr, double t_v,
                                                        double frame_interval) const {
  FeatureFlow flow;
  flow.feature = curr;
  flow.t_i = curr.timestamp;
  flow.derivative = vehicle_derivative.forward(prev.tensor, curr.tensor, frame_interval);
  return predict(flow, t_v);
}

Tensor CooperativeModel::fuse_and_head(const FeatureMap& vehicle_feat, const std::optional<FeatureMap>& infra,
                                       const Pose& infra_pose, const Pose& vehicle_pose) const {
  const BevGrid fgrid = config_.feature_grid();
  FeatureMap warped;
  if (infra) {
    warped = warp_to_vehicle(*infra, infra_pose, vehicle_pose, fgrid);
  } else {
    warped = {Tensor(vehicle_feat.tensor.shape(), 0.0f), Frame::Vehicle, vehicle_feat.timestamp};
  }
  return head.forward(fusion.fuse(vehicle_feat, warped));
}

void load_params(ParamSet& dst, const ParamSet& src) { dst.assign(src); }

}  // namespace coflow
