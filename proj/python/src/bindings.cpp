#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "coflow/comm.hpp"
#include "coflow/errors.hpp"
#include "coflow/eval.hpp"
#include "coflow/trainer.hpp"
#include "coflow/verify.hpp"

namespace py = pybind11;
using namespace coflow;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.mutable_data().begin());
  return t;
}

FloatArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

py::dict frame_dict(const FrameData& f) {
  auto cloud = [](const PointCloud& c) {
    FloatArray a({static_cast<py::ssize_t>(c.points.size()), py::ssize_t{4}});
    std::memcpy(a.mutable_data(), c.points.data(), c.points.size() * sizeof(Point));
    return a;
  };
  py::list boxes;
  for (const auto& b : f.boxes) {
    py::dict d;
    d["id"] = b.object_id;
    d["center"] = py::make_tuple(b.cx, b.cy, b.cz);
    d["size"] = py::make_tuple(b.w, b.l, b.h);
    d["yaw"] = b.yaw;
    boxes.append(d);
  }
  py::dict d;
  d["index"] = f.index;
  d["timestamp"] = f.timestamp;
  d["infra_cloud"] = cloud(f.infra_cloud);
  d["vehicle_cloud"] = cloud(f.vehicle_cloud);
  d["boxes"] = boxes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_coflow, m) {
  m.doc() = "Cooperative detection with feature-flow latency compensation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def(
      "simulate",
      [](std::uint64_t seed, double duration, int n_objects, double speed_lo, double speed_hi) {
        WorldConfig w;
        w.seed = seed;
        w.duration = duration;
        w.n_objects = n_objects;
        w.object_speed_range = {speed_lo, speed_hi};
        py::list frames;
        for (const auto& f : simulate(w).frames) frames.append(frame_dict(f));
        return frames;
      },
      py::arg("seed") = 1, py::arg("duration") = 2.0, py::arg("n_objects") = 10, py::arg("speed_lo") = 4.0,
      py::arg("speed_hi") = 10.0, "Simulate one scenario; returns a list of frame dicts.");

  m.def("tensor_payload_bytes", [](const std::vector<int>& shape) { return tensor_payload_bytes(Shape(shape.begin(), shape.end())); });
  m.def("early_fusion_bytes", &early_fusion_bytes, py::arg("n_points"));
  m.def("late_fusion_bytes", &late_fusion_bytes, py::arg("n_detections"));

  m.def(
      "flow_loss",
      [](const FloatArray& feature, const FloatArray& derivative, const FloatArray& target, double dt) {
        return flow_loss(to_tensor(feature), to_tensor(derivative), to_tensor(target), dt).item();
      },
      py::arg("feature"), py::arg("derivative"), py::arg("target"), py::arg("dt"),
      "Scale-corrected 1 - cosine between feature + dt * derivative and target.");

  m.def(
      "message_roundtrip",
      [](const FloatArray& feature, std::optional<FloatArray> derivative, double t_i) {
        FlowMessage msg;
        msg.t_i = t_i;
        msg.calib = Pose{}.to_matrix34();
        msg.comp_feature = to_tensor(feature);
        if (derivative) msg.comp_derivative = to_tensor(*derivative);
        const std::string wire = serialize(msg);
        const FlowMessage back = deserialize(wire);
        py::dict d;
        d["bytes"] = py::bytes(wire);
        d["payload_bytes"] = back.payload_bytes();
        d["t_i"] = back.t_i;
        d["feature"] = to_array(back.comp_feature);
        d["derivative"] = back.comp_derivative ? py::object(to_array(*back.comp_derivative)) : py::none();
        return d;
      },
      py::arg("feature"), py::arg("derivative") = py::none(), py::arg("t_i") = 0.0,
      "Serialize a compressed flow message and parse it back.");
  m.def(
      "parse_message",
      [](const py::bytes& wire) { return deserialize(std::string(wire)).payload_bytes(); }, py::arg("wire"),
      "Parse wire bytes; returns the payload size or raises FormatError.");

  m.def(
      "average_precision",
      [](const std::vector<std::pair<double, bool>>& scored, std::size_t n_ground_truth) {
        return average_precision(pr_curve(scored, n_ground_truth));
      },
      py::arg("scored"), py::arg("n_ground_truth"), "11-point interpolated AP from (score, is_tp) pairs.");

  m.def("variants", [] {
    std::vector<std::string> out;
    for (Variant v : all_variants()) out.push_back(to_string(v));
    return out;
  });

  m.def("verify", [] {
    std::vector<std::tuple<std::string, bool, std::string>> out;
    for (const auto& r : run_verify_suite(ExperimentConfig{})) out.emplace_back(r.name, r.passed, r.detail);
    return out;
  }, "Run the built-in self-check suite; returns (name, passed, detail) tuples.");
}
