#include "coflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "coflow/errors.hpp"
#include "coflow/rng.hpp"

namespace coflow {
namespace {

struct FrameRef {
  int scenario;
  int frame;
};

std::vector<FrameRef> all_frames(const std::vector<Scenario>& scenarios) {
  std::vector<FrameRef> refs;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    for (std::size_t f = 0; f < scenarios[s].frames.size(); ++f) {
      refs.push_back({static_cast<int>(s), static_cast<int>(f)});
    }
  }
  return refs;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

void ensure_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) {
    p.zero_grad();
    p.mutable_grad();
  }
}

// Shared minibatch loop: `sample_loss(i)` builds the loss of sample i on the
// active tape, or returns an undefined tensor to skip it.
template <typename SampleLoss>
void run_epochs(const std::string& stage, std::vector<Tensor> params, AdamConfig adam_cfg, int epochs, int batch,
                std::size_t n_samples, std::uint64_t seed, TrainReport& report, SampleLoss sample_loss) {
  if (n_samples == 0) throw ConfigError(stage + ": no training samples");
  Adam adam(params, adam_cfg);
  std::vector<std::size_t> order(n_samples);
  int step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    for (std::size_t start = 0; start < n_samples; start += static_cast<std::size_t>(batch)) {
      ensure_grads(params);
      const std::size_t end = std::min(n_samples, start + static_cast<std::size_t>(batch));
      double total = 0.0;
      int used = 0;
      for (std::size_t i = start; i < end; ++i) {
        Tape tape;
        Tensor loss;
        {
          Tape::Recording rec(tape);
          loss = sample_loss(order[i]);
        }
        if (!loss.defined()) continue;
        const double value = loss.item();
        if (!std::isfinite(value)) throw TrainingError(stage + ": non-finite loss", step);
        tape.backward(loss);
        total += value;
        ++used;
      }
      if (used == 0) continue;
      adam.step(1.0f / static_cast<float>(used));
      for (const Tensor& p : params) {
        for (float v : p.data()) {
          if (!std::isfinite(v)) throw TrainingError(stage + ": non-finite parameter", step);
        }
      }
      report.log.push_back({stage, epoch, step, total / used});
      ++step;
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (stage1.epochs <= 0 || stage2.epochs <= 0) throw ConfigError("epochs must be positive");
  if (!(stage1.lr > 0) || !(stage2.lr > 0)) throw ConfigError("learning rates must be positive");
  if (stage1.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (stage1.batch <= 0 || stage2.batch <= 0) throw ConfigError("batch must be positive");
  if (stage2.k_min < 1 || stage2.k_max < stage2.k_min) throw ConfigError("k_range must satisfy 1 <= k_min <= k_max");
}

std::string training_log_csv(const std::vector<LogRow>& log) {
  std::string out = "stage,epoch,step,loss\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), ",%d,%d,%.9g\n", r.epoch, r.step, r.loss);
    out += r.stage;
    out += buf;
  }
  return out;
}

std::vector<TrainPair> build_pairs(int scenario_index, int frame_count, int k_min, int k_max, std::uint64_t seed) {
  if (k_min < 1 || k_max < k_min) throw ConfigError("k_range must satisfy 1 <= k_min <= k_max");
  if (frame_count < k_max + 2) {
    throw ConfigError("scenario has " + std::to_string(frame_count) + " frames, need at least " +
                      std::to_string(k_max + 2));
  }
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(scenario_index)));
  std::vector<TrainPair> pairs;
  for (int t = 1; t <= frame_count - 1 - k_max; ++t) {
    pairs.push_back({scenario_index, t, static_cast<int>(rng.integer(k_min, k_max))});
  }
  return pairs;
}

std::vector<TrainPair> build_pairs(const std::vector<Scenario>& scenarios, int k_min, int k_max,
                                   std::uint64_t seed) {
  std::vector<TrainPair> all;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    auto p = build_pairs(static_cast<int>(s), static_cast<int>(scenarios[s].frames.size()), k_min, k_max, seed);
    all.insert(all.end(), p.begin(), p.end());
  }
  return all;
}

std::vector<GroundTruthBox> vehicle_labels(const FrameData& frame, const BevGrid& grid) {
  return boxes_in_frame(frame.boxes, frame.vehicle_pose, grid_region(grid), Visibility::Any);
}

Tensor cooperative_head_output(const CooperativeModel& model, const FrameData& frame) {
  const FeatureMap fv = model.vehicle_feature(frame.vehicle_cloud);
  FeatureMap fi = model.infra_extractor.extract(model.infra_image(frame.infra_cloud));
  fi.tensor = model.codec.decompress_feature(model.codec.compress_feature(fi.tensor));
  return model.fuse_and_head(fv, fi, frame.infra_pose, frame.vehicle_pose);
}

Tensor cooperative_loss(const CooperativeModel& model, const FrameData& frame, LossBreakdown* breakdown) {
  const auto& cfg = model.config();
  return detection_loss(cooperative_head_output(model, frame), vehicle_labels(frame, cfg.grid), cfg.anchors,
                        cfg.feature_grid(), cfg.loss, breakdown);
}

TrainReport train_stage1(CooperativeModel& model, const std::vector<Scenario>& scenarios, const TrainConfig& config) {
  config.validate();
  const auto refs = all_frames(scenarios);
  TrainReport report;
  AdamConfig adam{static_cast<float>(config.stage1.lr), 0.9f, 0.999f, 1e-8f,
                  static_cast<float>(config.stage1.weight_decay)};
  run_epochs("stage1", model.stage1_params().tensors(), adam, config.stage1.epochs, config.stage1.batch, refs.size(),
             mix_seed(config.seed, 101), report, [&](std::size_t i) {
               const auto& r = refs[i];
               return cooperative_loss(model, scenarios[r.scenario].frames[r.frame]);
             });
  return report;
}

PointCloud merge_clouds(const PointCloud& vehicle_cloud, const PointCloud& infra_cloud, const Pose& infra_pose,
                        const Pose& vehicle_pose) {
  PointCloud merged = vehicle_cloud;
  const PointCloud moved = transform_cloud(infra_cloud, vehicle_pose.inverse().compose(infra_pose), Frame::Vehicle);
  merged.points.insert(merged.points.end(), moved.points.begin(), moved.points.end());
  return merged;
}

PointCloud detector_input(DetectorRole role, const FrameData& frame) {
  switch (role) {
    case DetectorRole::Vehicle: return frame.vehicle_cloud;
    case DetectorRole::Infra: return frame.infra_cloud;
    case DetectorRole::Early:
      return merge_clouds(frame.vehicle_cloud, frame.infra_cloud, frame.infra_pose, frame.vehicle_pose);
  }
  return frame.vehicle_cloud;
}

std::vector<GroundTruthBox> detector_labels(DetectorRole role, const FrameData& frame, const BevGrid& grid) {
  switch (role) {
    case DetectorRole::Vehicle:
      return boxes_in_frame(frame.boxes, frame.vehicle_pose, grid_region(grid), Visibility::Vehicle);
    case DetectorRole::Infra:
      return boxes_in_frame(frame.boxes, frame.infra_pose, grid_region(grid), Visibility::Infra);
    case DetectorRole::Early:
      return vehicle_labels(frame, grid);
  }
  return {};
}

Tensor detector_loss(const SingleDetector& det, DetectorRole role, const FrameData& frame) {
  const auto& cfg = det.config();
  return detection_loss(det.head_output(detector_input(role, frame)), detector_labels(role, frame, cfg.grid),
                        cfg.anchors, cfg.feature_grid(), cfg.loss);
}

TrainReport train_detector(SingleDetector& det, DetectorRole role, const std::vector<Scenario>& scenarios,
                           const TrainConfig& config) {
  config.validate();
  const auto refs = all_frames(scenarios);
  TrainReport report;
  AdamConfig adam{static_cast<float>(config.stage1.lr), 0.9f, 0.999f, 1e-8f,
                  static_cast<float>(config.stage1.weight_decay)};
  const char* stage = role == DetectorRole::Vehicle ? "detector_vehicle"
                      : role == DetectorRole::Early ? "detector_early"
                                                    : "detector_infra";
  run_epochs(stage, det.params().tensors(), adam, config.stage1.epochs, config.stage1.batch, refs.size(),
             mix_seed(config.seed, 102 + static_cast<int>(role)), report, [&](std::size_t i) {
               const auto& r = refs[i];
               return detector_loss(det, role, scenarios[r.scenario].frames[r.frame]);
             });
  return report;
}

Tensor flow_loss(const Tensor& feature, const Tensor& derivative, const Tensor& target, double dt) {
  const Tensor predicted = scale_correct(add(feature, scale(derivative, static_cast<float>(dt))), feature);
  return add_scalar(scale(cosine_similarity(predicted, target), -1.0f), 1.0f);
}

FlowCache build_flow_cache(const CooperativeModel& model, const std::vector<Scenario>& scenarios) {
  FlowCache cache;
  for (const auto& sc : scenarios) {
    auto& imgs = cache.infra_image.emplace_back();
    auto& feats = cache.feature.emplace_back();
    auto& decs = cache.decompressed.emplace_back();
    for (const auto& fr : sc.frames) {
      const PseudoImage img = model.infra_image(fr.infra_cloud);
      const FeatureMap f = model.infra_extractor.extract(img);
      imgs.push_back(img.tensor.detach());
      feats.push_back(f.tensor.detach());
      decs.push_back(model.codec.decompress_feature(model.codec.compress_feature(f.tensor)).detach());
    }
    cache.frame_interval.push_back(sc.config.frame_interval);
  }
  return cache;
}

Tensor stage2_pair_loss(const CooperativeModel& model, const FlowCache& cache, const TrainPair& pair, FlowSide side,
                        FlowSpace space) {
  const auto s = static_cast<std::size_t>(pair.scenario);
  const double interval = cache.frame_interval.at(s);
  const auto t = static_cast<std::size_t>(pair.t_index);
  const auto p = static_cast<std::size_t>(pair.prev_index());
  const auto f = static_cast<std::size_t>(pair.future_index());
  const bool dec = space == FlowSpace::Decompressed;
  const Tensor& target = dec ? cache.decompressed.at(s).at(f) : cache.feature.at(s).at(f);
  if (side == FlowSide::Infra) {
    const Tensor d = model.infra_derivative.forward(cache.infra_image[s].at(p), cache.infra_image[s][t], interval);
    const Tensor d_hat = model.codec.decompress_derivative(model.codec.compress_derivative(d));
    return flow_loss(dec ? cache.decompressed[s][t] : cache.feature[s][t], d_hat, target, pair.k * interval);
  }
  const Tensor d = model.vehicle_derivative.forward(cache.decompressed[s].at(p), cache.decompressed[s][t], interval);
  return flow_loss(cache.decompressed[s][t], d, target, pair.k * interval);
}

double stage2_mean_loss(const CooperativeModel& model, const FlowCache& cache, const std::vector<TrainPair>& pairs,
                        FlowSide side, FlowSpace space) {
  double total = 0.0;
  int n = 0;
  for (const auto& pair : pairs) {
    try {
      total += stage2_pair_loss(model, cache, pair, side, space).item();
      ++n;
    } catch (const DegenerateInputError&) {
    }
  }
  return n > 0 ? total / n : 0.0;
}

TrainReport train_stage2(CooperativeModel& model, const FlowCache& cache, const std::vector<TrainPair>& pairs,
                         const TrainConfig& config, FlowSide side) {
  config.validate();
  TrainReport report;
  const ParamSet trainable = side == FlowSide::Infra ? model.flow_params() : model.vehicle_flow_params();
  AdamConfig adam{static_cast<float>(config.stage2.lr), 0.9f, 0.999f, 1e-8f, 0.0f};
  const std::string stage = side == FlowSide::Infra ? "stage2" : "stage2_vehicle";
  run_epochs(stage, trainable.tensors(), adam, config.stage2.epochs, config.stage2.batch, pairs.size(),
             mix_seed(config.seed, side == FlowSide::Infra ? 201 : 202), report, [&](std::size_t i) -> Tensor {
               try {
                 return stage2_pair_loss(model, cache, pairs[i], side, config.stage2.space);
               } catch (const DegenerateInputError& e) {
                 const auto& pr = pairs[i];
                 report.warnings.push_back("skipped pair (scenario " + std::to_string(pr.scenario) + ", t " +
                                           std::to_string(pr.t_index) + ", k " + std::to_string(pr.k) +
                                           "): " + e.what());
                 return Tensor();
               }
             });
  return report;
}

}  // namespace coflow
