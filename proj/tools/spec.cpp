#include "spec.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "coflow/bytes.hpp"
#include "coflow/errors.hpp"

namespace coflow::cli {
namespace {

std::string where(const YAML::Node& n) { return "line " + std::to_string(n.Mark().line + 1); }

// A mapping whose keys must all be consumed by read() calls.
class Section {
 public:
  Section(YAML::Node node, std::string name) : node_(std::move(node)), name_(std::move(name)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError(where(node_) + ": " + name_ + " must be a mapping");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!present()) return;
    const YAML::Node v = node_[key];
    if (!v) return;
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(v) + ": bad value for " + name_ + "." + key);
    }
  }

  void read_list(const std::string& key, std::vector<double>& out, std::size_t exact = 0) {
    seen_.insert(key);
    if (!present()) return;
    const YAML::Node v = node_[key];
    if (!v) return;
    if (!v.IsSequence()) throw ConfigError(where(v) + ": " + name_ + "." + key + " must be a list");
    std::vector<double> vals;
    for (const auto& e : v) {
      try {
        vals.push_back(e.as<double>());
      } catch (const YAML::Exception&) {
        throw ConfigError(where(e) + ": bad number in " + name_ + "." + key);
      }
    }
    if (exact != 0 && vals.size() != exact) {
      throw ConfigError(where(v) + ": " + name_ + "." + key + " needs " + std::to_string(exact) + " values");
    }
    out = std::move(vals);
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(present() ? node_[key] : YAML::Node(), name_ + "." + key);
  }

  YAML::Node raw(const std::string& key) {
    seen_.insert(key);
    return present() ? node_[key] : YAML::Node();
  }

  void finish() const {
    if (!present()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError(where(kv.first) + ": unknown key '" + key + "' in " + name_);
    }
  }

 private:
  bool present() const { return node_ && node_.IsMap(); }

  YAML::Node node_;
  std::string name_;
  std::set<std::string> seen_;
};

Rect to_rect(const std::vector<double>& v) { return {v[0], v[1], v[2], v[3]}; }
std::vector<double> from_rect(const Rect& r) { return {r.x_min, r.x_max, r.y_min, r.y_max}; }

void parse_world(Section s, WorldConfig& w) {
  s.read("frame_interval", w.frame_interval);
  s.read("duration", w.duration);
  s.read("n_objects", w.n_objects);
  std::vector<double> speed{w.object_speed_range[0], w.object_speed_range[1]};
  s.read_list("object_speed_range", speed, 2);
  w.object_speed_range = {speed[0], speed[1]};
  auto spawn = from_rect(w.spawn_region);
  s.read_list("spawn_region", spawn, 4);
  w.spawn_region = to_rect(spawn);
  auto bounds = from_rect(w.world_bounds);
  s.read_list("world_bounds", bounds, 4);
  w.world_bounds = to_rect(bounds);

  Section infra = s.child("infra_pose");
  double x = w.infra_pose.translation.x(), y = w.infra_pose.translation.y(), z = w.infra_pose.translation.z();
  double yaw = w.infra_pose.yaw();
  infra.read("x", x);
  infra.read("y", y);
  infra.read("z", z);
  infra.read("yaw", yaw);
  infra.finish();
  w.infra_pose = Pose::from_yaw(yaw, {x, y, z});

  const YAML::Node wps = s.raw("vehicle_waypoints");
  if (wps) {
    if (!wps.IsSequence()) throw ConfigError(where(wps) + ": world.vehicle_waypoints must be a list of [x, y]");
    w.vehicle_waypoints.clear();
    for (const auto& p : wps) {
      if (!p.IsSequence() || p.size() != 2) throw ConfigError(where(p) + ": waypoint must be [x, y]");
      w.vehicle_waypoints.emplace_back(p[0].as<double>(), p[1].as<double>());
    }
  }
  s.read("vehicle_speed", w.vehicle_speed);
  s.read("vehicle_sensor_height", w.vehicle_sensor_height);
  s.read("sensor_range_infra", w.sensor_range_infra);
  s.read("sensor_range_vehicle", w.sensor_range_vehicle);
  s.read("points_per_object", w.points_per_object);
  s.read("reference_distance", w.reference_distance);
  s.read("ground_noise_points", w.ground_noise_points);
  s.finish();
}

void parse_model(Section s, ModelConfig& m) {
  Section g = s.child("grid");
  g.read("x_min", m.grid.x_min);
  g.read("x_max", m.grid.x_max);
  g.read("y_min", m.grid.y_min);
  g.read("y_max", m.grid.y_max);
  g.read("z_min", m.grid.z_min);
  g.read("z_max", m.grid.z_max);
  g.read("nx", m.grid.nx);
  g.read("ny", m.grid.ny);
  g.read("channels", m.grid.channels);
  g.finish();
  s.read("feature_channels", m.feature_channels);
  m.codec.feature_channels = m.feature_channels;
  s.read("code_channels", m.codec.code_channels);
  s.read("hidden_channels", m.codec.hidden_channels);
  Section a = s.child("anchor");
  a.read("w", m.anchors.w);
  a.read("l", m.anchors.l);
  a.read("h", m.anchors.h);
  a.read("z_center", m.anchors.z_center);
  a.read("pos_iou", m.anchors.pos_iou);
  a.read("neg_iou", m.anchors.neg_iou);
  a.finish();
  Section l = s.child("loss");
  l.read("cls", m.loss.cls);
  l.read("reg", m.loss.reg);
  l.read("focal_alpha", m.loss.focal_alpha);
  l.read("focal_gamma", m.loss.focal_gamma);
  l.read("smooth_l1_beta", m.loss.smooth_l1_beta);
  l.finish();
  s.finish();
}

void parse_train(Section s, ExperimentConfig& cfg) {
  s.read("scenarios", cfg.train_scenarios);
  Section a = s.child("stage1");
  a.read("epochs", cfg.train.stage1.epochs);
  a.read("lr", cfg.train.stage1.lr);
  a.read("weight_decay", cfg.train.stage1.weight_decay);
  a.read("batch", cfg.train.stage1.batch);
  a.finish();
  Section b = s.child("stage2");
  b.read("epochs", cfg.train.stage2.epochs);
  b.read("lr", cfg.train.stage2.lr);
  b.read("batch", cfg.train.stage2.batch);
  std::vector<double> k{static_cast<double>(cfg.train.stage2.k_min), static_cast<double>(cfg.train.stage2.k_max)};
  b.read_list("k_range", k, 2);
  cfg.train.stage2.k_min = static_cast<int>(k[0]);
  cfg.train.stage2.k_max = static_cast<int>(k[1]);
  std::string space = cfg.train.stage2.space == FlowSpace::Decompressed ? "decompressed" : "extractor";
  b.read("feature_space", space);
  if (space == "decompressed") {
    cfg.train.stage2.space = FlowSpace::Decompressed;
  } else if (space == "extractor") {
    cfg.train.stage2.space = FlowSpace::Extractor;
  } else {
    throw ConfigError("train.stage2.feature_space must be 'decompressed' or 'extractor', got '" + space + "'");
  }
  b.finish();
  s.finish();
}

void parse_channel(Section s, ExperimentConfig& cfg) {
  s.read_list("latencies_ms", cfg.latencies_ms);
  s.read("seed", cfg.channel_seed);
  s.finish();
}

void parse_eval(Section s, ExperimentConfig& cfg) {
  s.read("scenarios", cfg.eval_scenarios);
  auto region = from_rect(cfg.eval.region);
  s.read_list("region", region, 4);
  cfg.eval.region = to_rect(region);
  s.read_list("iou_thresholds", cfg.eval.iou_thresholds);
  s.read("score_threshold", cfg.eval.score_threshold);
  s.read("nms_iou", cfg.eval.nms_iou);
  s.read("late_send_threshold", cfg.eval.late_send_threshold);
  s.read("first_frame", cfg.eval.first_frame);
  s.finish();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

LoadedSpec parse_spec(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (!root.IsMap()) throw ConfigError("spec must be a mapping with a seed");
  LoadedSpec out;
  ExperimentConfig& cfg = out.config;
  Section top(root, "spec");
  if (!root["seed"]) throw ConfigError("spec: missing mandatory key 'seed'");
  top.read("seed", cfg.seed);
  parse_world(top.child("world"), cfg.world);
  parse_model(top.child("model"), cfg.model);
  parse_train(top.child("train"), cfg);
  parse_channel(top.child("channel"), cfg);
  parse_eval(top.child("eval"), cfg);
  top.finish();
  cfg.validate();
  out.hash = hex64(fnv1a64(text));
  return out;
}

LoadedSpec load_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read spec " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

}  // namespace coflow::cli
