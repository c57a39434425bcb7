#pragma once

// Point cloud -> BEV pseudo-image through a single-layer pillar feature net.

#include <cstdint>

#include "coflow/scene.hpp"
#include "coflow/tensor.hpp"

namespace coflow {

struct BevGrid {
  double x_min = 0.0, x_max = 36.0;
  double y_min = -18.0, y_max = 18.0;
  double z_min = -3.0, z_max = 1.0;
  int nx = 72, ny = 72;
  int channels = 16;

  double cell_size() const { return (x_max - x_min) / nx; }
  void validate() const;
  // Same extent at a coarser resolution (e.g. feature map grids).
  BevGrid downsampled(int factor, int new_channels) const;

  // Cell containing (x, y), or false if outside the x/y range.
  bool cell_of(double x, double y, int& row, int& col) const;
  double cell_center_x(int col) const { return x_min + (col + 0.5) * cell_size(); }
  double cell_center_y(int row) const { return y_min + (row + 0.5) * cell_size(); }
};

struct PseudoImage {
  Tensor tensor;  // [channels, ny, nx]
  BevGrid grid;
  Frame frame = Frame::Vehicle;
  double timestamp = 0.0;
};

inline constexpr int kPillarPointFeatures = 7;
inline constexpr int kPillarPointCap = 32;

// Learned per-point embedding: weight [channels, 7], bias [channels].
struct PillarEncoder {
  ParamSet params;

  PillarEncoder() = default;
  PillarEncoder(const BevGrid& grid, const std::string& prefix, std::uint64_t seed);

  const Tensor& weight() const;
  const Tensor& bias() const;
};

// Bins points into pillars, embeds each point (normalized x, y, z,
// intensity, offsets from the pillar center and pillar mean height),
// applies relu and max-pools per pillar. Pillars over the cap keep a
// farthest-point subset chosen from a canonical ordering, so the result
// does not depend on input order. Differentiable w.r.t. the encoder.
PseudoImage pillarize(const PointCloud& cloud, const BevGrid& grid, const PillarEncoder& encoder);

}  // namespace coflow
