#include "coflow/pillar.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "coflow/errors.hpp"
#include "coflow/nn.hpp"

namespace coflow {

void BevGrid::validate() const {
  if (nx <= 0 || ny <= 0 || channels <= 0) throw ConfigError("grid cell counts and channels must be positive");
  if (!(x_max > x_min) || !(y_max > y_min) || !(z_max > z_min)) throw ConfigError("grid ranges must be non-empty");
  const double cx = (x_max - x_min) / nx;
  const double cy = (y_max - y_min) / ny;
  if (std::abs(cx - cy) > 1e-9) throw ConfigError("grid cells must be square");
}

BevGrid BevGrid::downsampled(int factor, int new_channels) const {
  if (factor <= 0 || nx % factor != 0 || ny % factor != 0) {
    throw ConfigError("grid does not divide by the downsampling factor");
  }
  BevGrid g = *this;
  g.nx = nx / factor;
  g.ny = ny / factor;
  g.channels = new_channels;
  return g;
}

bool BevGrid::cell_of(double x, double y, int& row, int& col) const {
  if (x < x_min || x >= x_max || y < y_min || y >= y_max) return false;
  const double cs = cell_size();
  col = std::min(nx - 1, static_cast<int>(std::floor((x - x_min) / cs)));
  row = std::min(ny - 1, static_cast<int>(std::floor((y - y_min) / cs)));
  return true;
}

PillarEncoder::PillarEncoder(const BevGrid& grid, const std::string& prefix, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / kPillarPointFeatures);
  params.add(prefix + ".weight", init_uniform({grid.channels, kPillarPointFeatures}, bound, rng));
  params.add(prefix + ".bias", Tensor({grid.channels}, 0.0f).set_requires_grad(true));
}

const Tensor& PillarEncoder::weight() const { return params.begin()->second; }
const Tensor& PillarEncoder::bias() const { return (params.begin() + 1)->second; }

namespace {

bool point_less(const Point& a, const Point& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  if (a.z != b.z) return a.z < b.z;
  return a.intensity < b.intensity;
}

float dist2(const Point& a, const Point& b) {
  const float dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

// Greedy farthest-point subset of `idx` (already canonically ordered).
std::vector<int> farthest_subset(const std::vector<Point>& pts, const std::vector<int>& idx, int cap) {
  std::vector<int> chosen{idx.front()};
  std::vector<float> best(idx.size(), std::numeric_limits<float>::max());
  std::vector<bool> used(idx.size(), false);
  used[0] = true;
  std::size_t last = 0;
  while (static_cast<int>(chosen.size()) < cap) {
    std::size_t arg = 0;
    float far = -1.0f;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (used[i]) continue;
      best[i] = std::min(best[i], dist2(pts[idx[i]], pts[idx[last]]));
      if (best[i] > far) {
        far = best[i];
        arg = i;
      }
    }
    used[arg] = true;
    last = arg;
    chosen.push_back(idx[arg]);
  }
  return chosen;
}

}  // namespace

PseudoImage pillarize(const PointCloud& cloud, const BevGrid& grid, const PillarEncoder& encoder) {
  grid.validate();
  const Tensor& weight = encoder.weight();
  const Tensor& bias = encoder.bias();
  const int channels = grid.channels;
  if (weight.rank() != 2 || weight.dim(0) != channels || weight.dim(1) != kPillarPointFeatures) {
    throw DimensionError("pillar encoder weight must be [" + std::to_string(channels) + ",7]");
  }

  const auto& pts = cloud.points;
  std::vector<int> cell(pts.size(), -1);
  std::vector<int> order;
  order.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Point& p = pts[i];
    if (!(p.z >= grid.z_min && p.z < grid.z_max)) continue;
    int row = 0, col = 0;
    if (!grid.cell_of(p.x, p.y, row, col)) continue;
    cell[i] = row * grid.nx + col;
    order.push_back(static_cast<int>(i));
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (cell[a] != cell[b]) return cell[a] < cell[b];
    return point_less(pts[a], pts[b]);
  });

  // Per kept point: its cell and 7 input features.
  std::vector<int> kept_cell;
  std::vector<float> feats;
  const double cs = grid.cell_size();
  const double sx = grid.x_max - grid.x_min, sy = grid.y_max - grid.y_min, sz = grid.z_max - grid.z_min;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    while (end < order.size() && cell[order[end]] == cell[order[start]]) ++end;
    std::vector<int> members(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
    if (static_cast<int>(members.size()) > kPillarPointCap) members = farthest_subset(pts, members, kPillarPointCap);
    const int c = cell[members.front()];
    const int row = c / grid.nx, col = c % grid.nx;
    double mean_z = 0.0;
    for (int m : members) mean_z += pts[m].z;
    mean_z /= static_cast<double>(members.size());
    for (int m : members) {
      const Point& p = pts[m];
      kept_cell.push_back(c);
      feats.push_back(static_cast<float>((p.x - grid.x_min) / sx));
      feats.push_back(static_cast<float>((p.y - grid.y_min) / sy));
      feats.push_back(static_cast<float>((p.z - grid.z_min) / sz));
      feats.push_back(p.intensity);
      feats.push_back(static_cast<float>((p.x - grid.cell_center_x(col)) / cs));
      feats.push_back(static_cast<float>((p.y - grid.cell_center_y(row)) / cs));
      feats.push_back(static_cast<float>(p.z - mean_z));
    }
    start = end;
  }

  const std::size_t plane = static_cast<std::size_t>(grid.nx) * grid.ny;
  Tensor out({channels, grid.ny, grid.nx});
  auto y = out.mutable_data();
  // argmax point per (channel, cell); -1 for empty cells.
  auto argmax = std::make_shared<std::vector<int>>(channels * plane, -1);
  auto pre = std::make_shared<std::vector<float>>(kept_cell.size() * channels);
  auto w = weight.data();
  for (std::size_t p = 0; p < kept_cell.size(); ++p) {
    const float* f = &feats[p * kPillarPointFeatures];
    for (int ch = 0; ch < channels; ++ch) {
      float a = bias[ch];
      for (int k = 0; k < kPillarPointFeatures; ++k) a += w[ch * kPillarPointFeatures + k] * f[k];
      (*pre)[p * channels + ch] = a;
      const float act = a > 0.0f ? a : 0.0f;
      const std::size_t at = ch * plane + kept_cell[p];
      int& am = (*argmax)[at];
      if (am < 0 || act > y[at]) {
        y[at] = act;
        am = static_cast<int>(p);
      }
    }
  }

  PseudoImage img;
  img.grid = grid;
  img.frame = cloud.frame;
  img.timestamp = cloud.timestamp;
  img.tensor = record_op(
      std::move(out), {weight, bias},
      [weight, bias, argmax, pre, feats = std::move(feats), channels, plane](const Tensor& out) mutable {
        auto g = out.grad();
        std::vector<float> dw(weight.numel(), 0.0f), db(bias.numel(), 0.0f);
        for (int ch = 0; ch < channels; ++ch) {
          for (std::size_t c = 0; c < plane; ++c) {
            const std::size_t at = ch * plane + c;
            const int p = (*argmax)[at];
            if (p < 0 || g[at] == 0.0f || !((*pre)[p * channels + ch] > 0.0f)) continue;
            db[ch] += g[at];
            for (int k = 0; k < kPillarPointFeatures; ++k) {
              dw[ch * kPillarPointFeatures + k] += g[at] * feats[p * kPillarPointFeatures + k];
            }
          }
        }
        accumulate_grad(weight, dw);
        accumulate_grad(bias, db);
      });
  return img;
}

}  // namespace coflow
