#pragma once

// Deterministic synthetic world: constant-velocity box objects seen by a
// fixed roadside LiDAR and a LiDAR on a moving ego vehicle.

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace coflow {

enum class Frame : std::uint8_t { Infra = 0, Vehicle = 1, World = 2 };

std::string to_string(Frame f);

// Rigid transform mapping points from a local frame into a parent frame:
// p_parent = rotation * p_local + translation.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  static Pose from_yaw(double yaw, const Eigen::Vector3d& translation);

  Pose compose(const Pose& inner) const;  // this ∘ inner
  Pose inverse() const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  double yaw() const;

  // Row-major 3x4 [R | t].
  std::array<float, 12> to_matrix34() const;
  static Pose from_matrix34(const std::array<float, 12>& m);
};

struct Point {
  float x, y, z, intensity;
  bool operator==(const Point&) const = default;
};

struct PointCloud {
  Frame frame = Frame::World;
  double timestamp = 0.0;
  std::vector<Point> points;
};

PointCloud transform_cloud(const PointCloud& cloud, const Pose& pose, Frame target);

struct GroundTruthBox {
  int object_id = 0;
  double cx = 0, cy = 0, cz = 0;  // world frame
  double w = 1.6, l = 3.9, h = 1.56;
  double yaw = 0;  // heading of the length axis
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  // Sampled LiDAR returns on this object in each sensor for the frame.
  int infra_points = 0;
  int vehicle_points = 0;
};

// Box re-expressed in another frame through a planar transform.
GroundTruthBox transform_box(const GroundTruthBox& box, const Pose& pose);

struct Rect {
  double x_min, x_max, y_min, y_max;
  bool contains(double x, double y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
};

struct WorldConfig {
  std::uint64_t seed = 1;
  double frame_interval = 0.1;
  double duration = 2.0;
  int n_objects = 10;
  std::array<double, 2> object_speed_range{4.0, 10.0};
  // Objects are placed uniformly in this region at mid-scenario.
  Rect spawn_region{10.0, 44.0, -16.0, 16.0};
  Rect world_bounds{-20.0, 80.0, -40.0, 40.0};

  Pose infra_pose = Pose::from_yaw(3.14159265358979323846, {48.0, 0.0, 2.5});
  std::vector<Eigen::Vector2d> vehicle_waypoints{{-2.0, 0.0}, {30.0, 0.0}};
  double vehicle_speed = 4.0;
  double vehicle_sensor_height = 2.5;

  double sensor_range_infra = 45.0;
  double sensor_range_vehicle = 16.0;
  int points_per_object = 240;
  double reference_distance = 12.0;  // full point budget at or below this range
  int ground_noise_points = 1500;

  int frame_count() const;
  void validate() const;
};

struct FrameData {
  int index = 0;
  double timestamp = 0.0;
  PointCloud infra_cloud;    // infra sensor frame
  PointCloud vehicle_cloud;  // vehicle sensor frame
  Pose infra_pose;           // infra -> world
  Pose vehicle_pose;         // vehicle -> world
  std::vector<GroundTruthBox> boxes;  // world frame
};

struct Scenario {
  WorldConfig config;
  std::vector<FrameData> frames;
};

Scenario simulate(const WorldConfig& config);

// Pose of the vehicle sensor at time t along the waypoint path.
Pose vehicle_pose_at(const WorldConfig& config, double t);

// Axis-extruded box corners test in the box's own frame.
bool box_contains(const GroundTruthBox& box, const Eigen::Vector3d& p_world, double margin = 0.05);

// Scenario directory encoding. Clouds are raw little-endian f32
// (x, y, z, intensity) quadruplets; the index is JSON.
std::string encode_cloud(const PointCloud& cloud);
PointCloud decode_cloud(const std::string& bytes, Frame frame, double timestamp);
std::string cloud_file_name(Frame sensor, int frame_index);
std::string scenario_index_json(const Scenario& scenario, const std::string& spec_hash);
// Reads a directory written from scenario_index_json + encode_cloud.
Scenario load_scenario(const std::string& dir);

}  // namespace coflow
