#include "coflow/scene.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "coflow/bytes.hpp"
#include "coflow/errors.hpp"
#include "coflow/rng.hpp"

namespace coflow {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct ObjectTrack {
  int id;
  Eigen::Vector2d center_mid;
  Eigen::Vector2d velocity;
  double yaw, w, l, h;
  double reflectivity;
};

struct Face {
  Eigen::Vector3d center;  // box frame, z measured from the ground
  Eigen::Vector3d normal;
  Eigen::Vector3d u, v;    // half-extent axes
  double area;
};

std::array<Face, 5> box_faces(double w, double l, double h) {
  const Eigen::Vector3d ex(1, 0, 0), ey(0, 1, 0), ez(0, 0, 1);
  return {{
      {{l / 2, 0, h / 2}, ex, ey * (w / 2), ez * (h / 2), w * h},
      {{-l / 2, 0, h / 2}, -ex, ey * (w / 2), ez * (h / 2), w * h},
      {{0, w / 2, h / 2}, ey, ex * (l / 2), ez * (h / 2), l * h},
      {{0, -w / 2, h / 2}, -ey, ex * (l / 2), ez * (h / 2), l * h},
      {{0, 0, h}, ez, ex * (l / 2), ey * (w / 2), w * l},
  }};
}

GroundTruthBox box_at(const ObjectTrack& obj, double dt_from_mid) {
  GroundTruthBox b;
  b.object_id = obj.id;
  const Eigen::Vector2d c = obj.center_mid + obj.velocity * dt_from_mid;
  b.cx = c.x();
  b.cy = c.y();
  b.cz = obj.h / 2.0;
  b.w = obj.w;
  b.l = obj.l;
  b.h = obj.h;
  b.yaw = obj.yaw;
  b.velocity = obj.velocity;
  return b;
}

// Samples one sensor's cloud at one instant and records per-object point
// counts in `boxes`. Surface positions and ground returns follow a fixed
// pattern per sensor (per object face, per ground return) so an unchanged
// scene yields the same cloud up to small per-frame range jitter.
PointCloud sample_sensor(const WorldConfig& cfg, const Pose& sensor_pose, double range, Frame frame,
                         double t, const std::vector<ObjectTrack>& objects,
                         std::vector<GroundTruthBox>& boxes, bool is_infra, std::uint64_t pattern_seed,
                         std::uint64_t stream) {
  Rng rng(stream);
  PointCloud cloud;
  cloud.frame = frame;
  cloud.timestamp = t;
  const Pose world_to_sensor = sensor_pose.inverse();
  const Eigen::Vector3d s_world = sensor_pose.translation;

  for (std::size_t k = 0; k < objects.size(); ++k) {
    const ObjectTrack& obj = objects[k];
    GroundTruthBox& box = boxes[k];
    const Eigen::Vector2d c(box.cx, box.cy);
    const double d = (c - s_world.head<2>()).norm();
    if (d > range + obj.l) continue;
    const double budget = cfg.points_per_object *
                          std::min(1.0, std::pow(cfg.reference_distance / std::max(d, 1e-3), 2.0));

    const Pose box_pose = Pose::from_yaw(obj.yaw, {box.cx, box.cy, 0.0});
    const Eigen::Vector3d s_box = box_pose.inverse().apply(s_world);
    const auto faces = box_faces(obj.w, obj.l, obj.h);
    double visible_area = 0.0;
    std::array<bool, 5> visible{};
    for (std::size_t f = 0; f < faces.size(); ++f) {
      visible[f] = (s_box - faces[f].center).dot(faces[f].normal) > 0.0;
      if (visible[f]) visible_area += faces[f].area;
    }
    int count = 0;
    for (std::size_t f = 0; f < faces.size() && visible_area > 0.0; ++f) {
      if (!visible[f]) continue;
      const int n = static_cast<int>(std::lround(budget * faces[f].area / visible_area));
      Rng pattern(mix_seed(pattern_seed, static_cast<std::uint64_t>(obj.id) * 8 + f));
      for (int i = 0; i < n; ++i) {
        const double a = pattern.uniform(-1.0, 1.0), b = pattern.uniform(-1.0, 1.0);
        const double reflect = obj.reflectivity + 0.05 * pattern.normal();
        Eigen::Vector3d p = faces[f].center + a * faces[f].u + b * faces[f].v;
        p += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.02;
        const float intensity = static_cast<float>(std::clamp(reflect + 0.01 * rng.normal(), 0.0, 1.0));
        const Eigen::Vector3d ps = world_to_sensor.apply(box_pose.apply(p));
        if (ps.head<2>().norm() > range) continue;
        cloud.points.push_back({static_cast<float>(ps.x()), static_cast<float>(ps.y()),
                                static_cast<float>(ps.z()), intensity});
        ++count;
      }
    }
    if (count == 0 && d <= range) {
      const Eigen::Vector3d ps = world_to_sensor.apply(box_pose.apply(Eigen::Vector3d(0, 0, obj.h)));
      cloud.points.push_back({static_cast<float>(ps.x()), static_cast<float>(ps.y()),
                              static_cast<float>(ps.z()), static_cast<float>(obj.reflectivity)});
      count = 1;
    }
    (is_infra ? box.infra_points : box.vehicle_points) = count;
  }

  const double ground_z = -sensor_pose.translation.z();
  Rng ground(mix_seed(pattern_seed, 0xffff));
  for (int i = 0; i < cfg.ground_noise_points; ++i) {
    const double r = range * std::sqrt(ground.uniform());
    const double th = ground.uniform(-kPi, kPi);
    const double inten = ground.uniform(0.05, 0.25);
    const double z = ground_z + 0.03 * rng.normal();
    cloud.points.push_back({static_cast<float>(r * std::cos(th)), static_cast<float>(r * std::sin(th)),
                            static_cast<float>(z), static_cast<float>(inten)});
  }
  return cloud;
}

nlohmann::json pose_json(const Pose& p) { return p.to_matrix34(); }

Pose pose_from_json(const nlohmann::json& j) {
  return Pose::from_matrix34(j.get<std::array<float, 12>>());
}

}  // namespace

std::string to_string(Frame f) {
  switch (f) {
    case Frame::Infra: return "infra";
    case Frame::Vehicle: return "vehicle";
    case Frame::World: return "world";
  }
  return "unknown";
}

Pose Pose::from_yaw(double yaw, const Eigen::Vector3d& translation) {
  Pose p;
  p.rotation = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  p.translation = translation;
  return p;
}

Pose Pose::compose(const Pose& inner) const {
  Pose p;
  p.rotation = rotation * inner.rotation;
  p.translation = rotation * inner.translation + translation;
  return p;
}

Pose Pose::inverse() const {
  Pose p;
  p.rotation = rotation.transpose();
  p.translation = -(p.rotation * translation);
  return p;
}

double Pose::yaw() const { return std::atan2(rotation(1, 0), rotation(0, 0)); }

std::array<float, 12> Pose::to_matrix34() const {
  std::array<float, 12> m{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[r * 4 + c] = static_cast<float>(rotation(r, c));
    m[r * 4 + 3] = static_cast<float>(translation(r));
  }
  return m;
}

Pose Pose::from_matrix34(const std::array<float, 12>& m) {
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = m[r * 4 + c];
    p.translation(r) = m[r * 4 + 3];
  }
  return p;
}

PointCloud transform_cloud(const PointCloud& cloud, const Pose& pose, Frame target) {
  PointCloud out;
  out.frame = target;
  out.timestamp = cloud.timestamp;
  out.points.reserve(cloud.points.size());
  const Eigen::Matrix3f r = pose.rotation.cast<float>();
  const Eigen::Vector3f t = pose.translation.cast<float>();
  for (const Point& p : cloud.points) {
    const Eigen::Vector3f q = r * Eigen::Vector3f(p.x, p.y, p.z) + t;
    out.points.push_back({q.x(), q.y(), q.z(), p.intensity});
  }
  return out;
}

GroundTruthBox transform_box(const GroundTruthBox& box, const Pose& pose) {
  GroundTruthBox out = box;
  const Eigen::Vector3d c = pose.apply({box.cx, box.cy, box.cz});
  out.cx = c.x();
  out.cy = c.y();
  out.cz = c.z();
  out.yaw = box.yaw + pose.yaw();
  out.velocity = pose.rotation.topLeftCorner<2, 2>() * box.velocity;
  return out;
}

bool box_contains(const GroundTruthBox& box, const Eigen::Vector3d& p_world, double margin) {
  const Pose box_pose = Pose::from_yaw(box.yaw, {box.cx, box.cy, box.cz});
  const Eigen::Vector3d q = box_pose.inverse().apply(p_world);
  return std::abs(q.x()) <= box.l / 2 + margin && std::abs(q.y()) <= box.w / 2 + margin &&
         std::abs(q.z()) <= box.h / 2 + margin;
}

int WorldConfig::frame_count() const {
  return static_cast<int>(std::lround(duration / frame_interval));
}

void WorldConfig::validate() const {
  if (!(frame_interval > 0.0)) throw ConfigError("world.frame_interval must be positive");
  if (!(duration > 0.0) || frame_count() < 1) throw ConfigError("world.duration must cover at least one frame");
  if (n_objects < 0 || points_per_object < 0 || ground_noise_points < 0) {
    throw ConfigError("world object/point counts must be non-negative");
  }
  if (n_objects == 0 && ground_noise_points == 0) {
    throw ConfigError("degenerate world: no objects and no ground points");
  }
  if (object_speed_range[0] < 0.0 || object_speed_range[1] < object_speed_range[0]) {
    throw ConfigError("world.object_speed_range must be a non-negative [lo, hi]");
  }
  if (!(sensor_range_infra > 0.0) || !(sensor_range_vehicle > 0.0) || !(reference_distance > 0.0)) {
    throw ConfigError("sensor ranges must be positive");
  }
  if (spawn_region.x_max <= spawn_region.x_min || spawn_region.y_max <= spawn_region.y_min) {
    throw ConfigError("world.spawn_region is empty");
  }
  if (vehicle_waypoints.empty()) throw ConfigError("world.vehicle_waypoints is empty");
  if (vehicle_speed < 0.0) throw ConfigError("world.vehicle_speed must be non-negative");
  for (const auto& wp : vehicle_waypoints) {
    if (!world_bounds.contains(wp.x(), wp.y())) throw ConfigError("vehicle path leaves world bounds");
  }
}

Pose vehicle_pose_at(const WorldConfig& config, double t) {
  const auto& wps = config.vehicle_waypoints;
  double remaining = config.vehicle_speed * t;
  Eigen::Vector2d pos = wps.front();
  double yaw = 0.0;
  if (wps.size() >= 2) {
    const Eigen::Vector2d d0 = wps[1] - wps[0];
    yaw = std::atan2(d0.y(), d0.x());
  }
  for (std::size_t i = 0; i + 1 < wps.size(); ++i) {
    const Eigen::Vector2d seg = wps[i + 1] - wps[i];
    const double len = seg.norm();
    if (len <= 0.0) continue;
    yaw = std::atan2(seg.y(), seg.x());
    if (remaining <= len) {
      pos = wps[i] + seg * (remaining / len);
      remaining = 0.0;
      break;
    }
    remaining -= len;
    pos = wps[i + 1];
  }
  return Pose::from_yaw(yaw, {pos.x(), pos.y(), config.vehicle_sensor_height});
}

Scenario simulate(const WorldConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int n_frames = config.frame_count();
  const double t_mid = 0.5 * (n_frames - 1) * config.frame_interval;

  std::vector<ObjectTrack> objects;
  for (int i = 0; i < config.n_objects; ++i) {
    ObjectTrack obj{};
    obj.id = i;
    for (int attempt = 0; attempt < 64; ++attempt) {
      obj.center_mid = {rng.uniform(config.spawn_region.x_min, config.spawn_region.x_max),
                        rng.uniform(config.spawn_region.y_min, config.spawn_region.y_max)};
      bool clear = true;
      for (const auto& o : objects) {
        if ((o.center_mid - obj.center_mid).norm() < 5.0) clear = false;
      }
      if (clear) break;
    }
    obj.yaw = rng.uniform(-kPi, kPi);
    const double speed = rng.uniform(config.object_speed_range[0], config.object_speed_range[1]);
    obj.velocity = Eigen::Vector2d(std::cos(obj.yaw), std::sin(obj.yaw)) * speed;
    obj.w = rng.uniform(1.5, 1.8);
    obj.l = rng.uniform(3.6, 4.4);
    obj.h = rng.uniform(1.4, 1.7);
    obj.reflectivity = rng.uniform(0.4, 0.9);
    objects.push_back(obj);
  }

  const std::uint64_t infra_pattern = mix_seed(config.seed, 0x1f0000);
  const std::uint64_t vehicle_pattern = mix_seed(config.seed, 0x2f0000);
  Scenario sc;
  sc.config = config;
  sc.frames.reserve(static_cast<std::size_t>(n_frames));
  for (int k = 0; k < n_frames; ++k) {
    FrameData f;
    f.index = k;
    f.timestamp = k * config.frame_interval;
    f.infra_pose = config.infra_pose;
    f.vehicle_pose = vehicle_pose_at(config, f.timestamp);
    for (const auto& obj : objects) f.boxes.push_back(box_at(obj, f.timestamp - t_mid));
    f.infra_cloud = sample_sensor(config, f.infra_pose, config.sensor_range_infra, Frame::Infra,
                                  f.timestamp, objects, f.boxes, true, infra_pattern,
                                  mix_seed(config.seed, 2 * static_cast<std::uint64_t>(k)));
    f.vehicle_cloud = sample_sensor(config, f.vehicle_pose, config.sensor_range_vehicle, Frame::Vehicle,
                                    f.timestamp, objects, f.boxes, false, vehicle_pattern,
                                    mix_seed(config.seed, 2 * static_cast<std::uint64_t>(k) + 1));
    sc.frames.push_back(std::move(f));
  }
  return sc;
}

std::string encode_cloud(const PointCloud& cloud) {
  ByteWriter w;
  for (const Point& p : cloud.points) {
    w.put(p.x);
    w.put(p.y);
    w.put(p.z);
    w.put(p.intensity);
  }
  return w.take();
}

PointCloud decode_cloud(const std::string& bytes, Frame frame, double timestamp) {
  if (bytes.size() % 16 != 0) throw FormatError("cloud file is not a whole number of points", bytes.size());
  PointCloud c;
  c.frame = frame;
  c.timestamp = timestamp;
  ByteReader r(as_bytes(bytes));
  c.points.resize(bytes.size() / 16);
  for (Point& p : c.points) {
    p.x = r.get<float>("x");
    p.y = r.get<float>("y");
    p.z = r.get<float>("z");
    p.intensity = r.get<float>("intensity");
  }
  return c;
}

std::string cloud_file_name(Frame sensor, int frame_index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06d.bin", to_string(sensor).c_str(), frame_index);
  return buf;
}

std::string scenario_index_json(const Scenario& scenario, const std::string& spec_hash) {
  const WorldConfig& c = scenario.config;
  nlohmann::json j;
  j["spec_hash"] = spec_hash;
  j["seed"] = c.seed;
  j["frame_interval"] = c.frame_interval;
  j["duration"] = c.duration;
  j["frames"] = nlohmann::json::array();
  for (const FrameData& f : scenario.frames) {
    nlohmann::json jf;
    jf["index"] = f.index;
    jf["timestamp"] = f.timestamp;
    jf["infra_file"] = cloud_file_name(Frame::Infra, f.index);
    jf["vehicle_file"] = cloud_file_name(Frame::Vehicle, f.index);
    jf["infra_pose"] = pose_json(f.infra_pose);
    jf["vehicle_pose"] = pose_json(f.vehicle_pose);
    jf["boxes"] = nlohmann::json::array();
    for (const auto& b : f.boxes) {
      jf["boxes"].push_back({{"id", b.object_id}, {"center", {b.cx, b.cy, b.cz}},
                             {"size", {b.w, b.l, b.h}}, {"yaw", b.yaw},
                             {"velocity", {b.velocity.x(), b.velocity.y()}},
                             {"infra_points", b.infra_points}, {"vehicle_points", b.vehicle_points}});
    }
    j["frames"].push_back(std::move(jf));
  }
  return j.dump(1);
}

Scenario load_scenario(const std::string& dir) {
  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const auto j = nlohmann::json::parse(slurp(dir + "/index.json"));
  Scenario sc;
  sc.config.seed = j.at("seed").get<std::uint64_t>();
  sc.config.frame_interval = j.at("frame_interval").get<double>();
  sc.config.duration = j.at("duration").get<double>();
  for (const auto& jf : j.at("frames")) {
    FrameData f;
    f.index = jf.at("index").get<int>();
    f.timestamp = jf.at("timestamp").get<double>();
    f.infra_pose = pose_from_json(jf.at("infra_pose"));
    f.vehicle_pose = pose_from_json(jf.at("vehicle_pose"));
    f.infra_cloud = decode_cloud(slurp(dir + "/" + jf.at("infra_file").get<std::string>()), Frame::Infra,
                                 f.timestamp);
    f.vehicle_cloud = decode_cloud(slurp(dir + "/" + jf.at("vehicle_file").get<std::string>()),
                                   Frame::Vehicle, f.timestamp);
    for (const auto& jb : jf.at("boxes")) {
      GroundTruthBox b;
      b.object_id = jb.at("id").get<int>();
      const auto c = jb.at("center").get<std::array<double, 3>>();
      const auto s = jb.at("size").get<std::array<double, 3>>();
      const auto v = jb.at("velocity").get<std::array<double, 2>>();
      b.cx = c[0];
      b.cy = c[1];
      b.cz = c[2];
      b.w = s[0];
      b.l = s[1];
      b.h = s[2];
      b.yaw = jb.at("yaw").get<double>();
      b.velocity = {v[0], v[1]};
      b.infra_points = jb.at("infra_points").get<int>();
      b.vehicle_points = jb.at("vehicle_points").get<int>();
      f.boxes.push_back(b);
    }
    sc.frames.push_back(std::move(f));
  }
  return sc;
}

}  // namespace coflow
