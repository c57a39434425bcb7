#include "coflow/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coflow/errors.hpp"
#include "coflow/nn.hpp"

namespace coflow {
namespace {

struct Hull {
  double x0, x1, y0, y1;
};

Hull hull_of(double cx, double cy, double w, double l, double yaw) {
  const double c = std::abs(std::cos(yaw)), s = std::abs(std::sin(yaw));
  const double ex = 0.5 * (c * l + s * w);
  const double ey = 0.5 * (s * l + c * w);
  return {cx - ex, cx + ex, cy - ey, cy + ey};
}

double hull_iou(const Hull& a, const Hull& b) {
  const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double ua = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  return ua > 0.0 ? inter / ua : 0.0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double smooth_l1(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta) {
  const double a = std::abs(x);
  if (a < beta) return x / beta;
  return x > 0 ? 1.0 : -1.0;
}

constexpr double kYawEps = 1e-6;

}  // namespace

double AnchorConfig::diagonal() const { return std::sqrt(w * w + l * l); }

void AnchorConfig::validate() const {
  if (!(w > 0 && l > 0 && h > 0)) throw ConfigError("anchor sizes must be positive");
  if (!(pos_iou > neg_iou)) throw ConfigError("anchor pos_iou must exceed neg_iou");
}

double bev_iou(double ax, double ay, double aw, double al, double ayaw, double bx, double by, double bw, double bl,
               double byaw) {
  return hull_iou(hull_of(ax, ay, aw, al, ayaw), hull_of(bx, by, bw, bl, byaw));
}

double bev_iou(const DetectionBox& a, const DetectionBox& b) {
  return bev_iou(a.cx, a.cy, a.w, a.l, a.yaw, b.cx, b.cy, b.w, b.l, b.yaw);
}

double bev_iou(const DetectionBox& a, const GroundTruthBox& b) {
  return bev_iou(a.cx, a.cy, a.w, a.l, a.yaw, b.cx, b.cy, b.w, b.l, b.yaw);
}

// ---------------------------------------------------------------------------

FeatureMap warp_to_vehicle(const FeatureMap& feature, const Pose& infra_pose, const Pose& vehicle_pose,
                           const BevGrid& grid) {
  const Tensor& src = feature.tensor;
  if (src.rank() != 3 || src.dim(1) != grid.ny || src.dim(2) != grid.nx) {
    throw DimensionError("warp: feature " + shape_str(src.shape()) + " does not match grid");
  }
  // vehicle frame -> infra frame, planar part only.
  const Pose rel = infra_pose.inverse().compose(vehicle_pose);
  const double yaw = rel.yaw();
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double tx = rel.translation.x(), ty = rel.translation.y();
  const double cs = grid.cell_size();

  const int channels = src.dim(0);
  const int plane = grid.nx * grid.ny;
  // Four taps per target cell: source index (or -1) and weight.
  auto taps_idx = std::make_shared<std::vector<int>>(4 * plane, -1);
  auto taps_w = std::make_shared<std::vector<float>>(4 * plane, 0.0f);
  for (int r = 0; r < grid.ny; ++r) {
    for (int q = 0; q < grid.nx; ++q) {
      const double xv = grid.cell_center_x(q), yv = grid.cell_center_y(r);
      const double xi = c * xv - s * yv + tx;
      const double yi = s * xv + c * yv + ty;
      const double u = (xi - grid.x_min) / cs - 0.5;
      const double v = (yi - grid.y_min) / cs - 0.5;
      // Snap near-integer coordinates so exact cell shifts stay exact.
      const double ur = std::abs(u - std::round(u)) < 1e-9 ? std::round(u) : u;
      const double vr = std::abs(v - std::round(v)) < 1e-9 ? std::round(v) : v;
      const int u0 = static_cast<int>(std::floor(ur)), v0 = static_cast<int>(std::floor(vr));
      const double fu = ur - u0, fv = vr - v0;
      const int cell = r * grid.nx + q;
      const int du[4] = {0, 1, 0, 1}, dv[4] = {0, 0, 1, 1};
      const double wt[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv};
      for (int k = 0; k < 4; ++k) {
        const int su = u0 + du[k], sv = v0 + dv[k];
        if (wt[k] == 0.0 || su < 0 || su >= grid.nx || sv < 0 || sv >= grid.ny) continue;
        (*taps_idx)[4 * cell + k] = sv * grid.nx + su;
        (*taps_w)[4 * cell + k] = static_cast<float>(wt[k]);
      }
    }
  }

  Tensor out(src.shape(), 0.0f);
  auto y = out.mutable_data();
  auto x = src.data();
  for (int ch = 0; ch < channels; ++ch) {
    const std::size_t off = static_cast<std::size_t>(ch) * plane;
    for (int cell = 0; cell < plane; ++cell) {
      float acc = 0.0f;
      for (int k = 0; k < 4; ++k) {
        const int si = (*taps_idx)[4 * cell + k];
        if (si >= 0) acc += (*taps_w)[4 * cell + k] * x[off + si];
      }
      y[off + cell] = acc;
    }
  }
  Tensor warped = record_op(std::move(out), {src}, [src, taps_idx, taps_w, channels, plane](const Tensor& out) mutable {
    auto g = out.grad();
    std::vector<float> gx(src.numel(), 0.0f);
    for (int ch = 0; ch < channels; ++ch) {
      const std::size_t off = static_cast<std::size_t>(ch) * plane;
      for (int cell = 0; cell < plane; ++cell) {
        const float gc = g[off + cell];
        if (gc == 0.0f) continue;
        for (int k = 0; k < 4; ++k) {
          const int si = (*taps_idx)[4 * cell + k];
          if (si >= 0) gx[off + si] += (*taps_w)[4 * cell + k] * gc;
        }
      }
    }
    accumulate_grad(src, gx);
  });
  return {warped, Frame::Vehicle, feature.timestamp};
}

FusionBlock::FusionBlock(int channels, std::uint64_t seed) {
  Rng rng(seed);
  add_conv(params_, "fusion.conv", channels, 2 * channels, 3, rng);
}

FeatureMap FusionBlock::fuse(const FeatureMap& vehicle_feat, const FeatureMap& infra_feat_warped) const {
  if (vehicle_feat.tensor.shape() != infra_feat_warped.tensor.shape()) {
    throw DimensionError("fuse: vehicle " + shape_str(vehicle_feat.tensor.shape()) + " vs infra " +
                         shape_str(infra_feat_warped.tensor.shape()));
  }
  Tensor cat = concat_channels(vehicle_feat.tensor, infra_feat_warped.tensor);
  return {conv_block(params_, "fusion.conv", cat, {1, 1}), Frame::Vehicle, vehicle_feat.timestamp};
}

DetectionHead::DetectionHead(int channels, std::uint64_t seed) {
  Rng rng(seed);
  add_conv(params_, "head.conv", channels, channels, 3, rng);
  add_conv(params_, "head.out", kHeadChannels, channels, 1, rng, 0.1);
  // Focal-loss prior: initial objectness probability 0.01.
  params_.get("head.out.bias").mutable_data()[kObjectness] = static_cast<float>(-std::log(99.0));
}

Tensor DetectionHead::forward(const FeatureMap& fused) const {
  Tensor h = conv_block(params_, "head.conv", fused.tensor, {1, 1});
  return conv_block(params_, "head.out", h, {1, 0}, false);
}

// ---------------------------------------------------------------------------

std::array<float, kHeadChannels> encode_box(const GroundTruthBox& box, int row, int col, const AnchorConfig& anchors,
                                            const BevGrid& grid) {
  const double diag = anchors.diagonal();
  std::array<float, kHeadChannels> t{};
  t[kObjectness] = 1.0f;
  t[kDx] = static_cast<float>((box.cx - grid.cell_center_x(col)) / diag);
  t[kDy] = static_cast<float>((box.cy - grid.cell_center_y(row)) / diag);
  t[kDz] = static_cast<float>((box.cz - anchors.z_center) / anchors.h);
  t[kLogW] = static_cast<float>(std::log(box.w / anchors.w));
  t[kLogL] = static_cast<float>(std::log(box.l / anchors.l));
  t[kLogH] = static_cast<float>(std::log(box.h / anchors.h));
  t[kSinYaw] = static_cast<float>(std::sin(box.yaw));
  t[kCosYaw] = static_cast<float>(std::cos(box.yaw));
  return t;
}

std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const DetectionBox& a, const DetectionBox& b) { return a.score > b.score; });
  std::vector<DetectionBox> kept;
  for (const auto& b : boxes) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (bev_iou(b, k) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

std::vector<DetectionBox> decode_detections(const Tensor& head_out, const AnchorConfig& anchors, const BevGrid& grid,
                                            DetectOptions options) {
  if (head_out.rank() != 3 || head_out.dim(0) != kHeadChannels || head_out.dim(1) != grid.ny ||
      head_out.dim(2) != grid.nx) {
    throw DimensionError("decode: head output " + shape_str(head_out.shape()) + " does not match grid");
  }
  const int plane = grid.nx * grid.ny;
  auto d = head_out.data();
  auto at = [&](int ch, int cell) { return static_cast<double>(d[static_cast<std::size_t>(ch) * plane + cell]); };
  const double diag = anchors.diagonal();
  std::vector<DetectionBox> boxes;
  for (int r = 0; r < grid.ny; ++r) {
    for (int q = 0; q < grid.nx; ++q) {
      const int cell = r * grid.nx + q;
      const double score = sigmoid(at(kObjectness, cell));
      if (!(score > options.score_threshold)) continue;
      DetectionBox b;
      b.cx = grid.cell_center_x(q) + at(kDx, cell) * diag;
      b.cy = grid.cell_center_y(r) + at(kDy, cell) * diag;
      b.cz = anchors.z_center + at(kDz, cell) * anchors.h;
      b.w = anchors.w * std::exp(std::clamp(at(kLogW, cell), -3.0, 3.0));
      b.l = anchors.l * std::exp(std::clamp(at(kLogL, cell), -3.0, 3.0));
      b.h = anchors.h * std::exp(std::clamp(at(kLogH, cell), -3.0, 3.0));
      b.yaw = std::atan2(at(kSinYaw, cell), at(kCosYaw, cell));
      b.score = score;
      boxes.push_back(b);
    }
  }
  return nms(std::move(boxes), options.nms_iou);
}

std::vector<DetectionBox> detect(const FeatureMap& fused, const DetectionHead& head, const AnchorConfig& anchors,
                                 const BevGrid& grid, DetectOptions options) {
  return decode_detections(head.forward(fused), anchors, grid, options);
}

AnchorTargets assign_anchors(const std::vector<GroundTruthBox>& gts, const AnchorConfig& anchors,
                             const BevGrid& grid) {
  const int plane = grid.nx * grid.ny;
  std::vector<double> best_iou(plane, 0.0);
  AnchorTargets t;
  t.matched.assign(plane, -1);
  std::vector<int> best_gt(plane, -1);
  const double cs = grid.cell_size();
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    const auto& g = gts[gi];
    const Hull gh = hull_of(g.cx, g.cy, g.w, g.l, g.yaw);
    const int c0 = std::max(0, static_cast<int>(std::floor((gh.x0 - anchors.l - grid.x_min) / cs)));
    const int c1 = std::min(grid.nx - 1, static_cast<int>(std::floor((gh.x1 + anchors.l - grid.x_min) / cs)));
    const int r0 = std::max(0, static_cast<int>(std::floor((gh.y0 - anchors.l - grid.y_min) / cs)));
    const int r1 = std::min(grid.ny - 1, static_cast<int>(std::floor((gh.y1 + anchors.l - grid.y_min) / cs)));
    double gt_best = 0.0;
    int gt_best_cell = -1;
    for (int r = r0; r <= r1; ++r) {
      for (int q = c0; q <= c1; ++q) {
        const int cell = r * grid.nx + q;
        const double iou = hull_iou(
            hull_of(grid.cell_center_x(q), grid.cell_center_y(r), anchors.w, anchors.l, g.yaw), gh);
        if (iou > best_iou[cell]) {
          best_iou[cell] = iou;
          best_gt[cell] = static_cast<int>(gi);
        }
        if (iou > gt_best) {
          gt_best = iou;
          gt_best_cell = cell;
        }
      }
    }
    if (gt_best_cell >= 0) {
      // Forced match; marked with an IoU above any real value.
      best_iou[gt_best_cell] = 2.0;
      best_gt[gt_best_cell] = static_cast<int>(gi);
    }
  }
  t.labels.assign(plane, AnchorLabel::Negative);
  for (int cell = 0; cell < plane; ++cell) {
    if (best_iou[cell] >= anchors.pos_iou) {
      t.labels[cell] = AnchorLabel::Positive;
      t.matched[cell] = best_gt[cell];
    } else if (best_iou[cell] >= anchors.neg_iou) {
      t.labels[cell] = AnchorLabel::Ignore;
    }
  }
  return t;
}

Tensor detection_loss(const Tensor& head_out, const std::vector<GroundTruthBox>& gts, const AnchorConfig& anchors,
                      const BevGrid& grid, const LossWeights& weights, LossBreakdown* breakdown) {
  if (head_out.rank() != 3 || head_out.dim(0) != kHeadChannels || head_out.dim(1) != grid.ny ||
      head_out.dim(2) != grid.nx) {
    throw DimensionError("detection_loss: head output " + shape_str(head_out.shape()) + " does not match grid");
  }
  const AnchorTargets targets = assign_anchors(gts, anchors, grid);
  const int plane = grid.nx * grid.ny;
  auto d = head_out.data();
  auto val = [&](int ch, int cell) { return static_cast<double>(d[static_cast<std::size_t>(ch) * plane + cell]); };

  const double alpha = weights.focal_alpha, gamma = weights.focal_gamma, beta = weights.smooth_l1_beta;
  auto grad = std::make_shared<std::vector<float>>(head_out.numel(), 0.0f);
  int npos = 0;
  for (auto l : targets.labels) npos += l == AnchorLabel::Positive;
  const double norm = 1.0 / std::max(1, npos);

  double cls = 0.0, reg = 0.0;
  for (int cell = 0; cell < plane; ++cell) {
    const AnchorLabel label = targets.labels[cell];
    if (label == AnchorLabel::Ignore) continue;
    const double x = val(kObjectness, cell);
    const double p = sigmoid(x);
    double gx = 0.0;
    if (label == AnchorLabel::Positive) {
      const double logp = -softplus(-x);
      cls += -alpha * std::pow(1 - p, gamma) * logp;
      gx = alpha * std::pow(1 - p, gamma) * (gamma * p * logp - (1 - p));
    } else {
      const double log1mp = -softplus(x);
      cls += -(1 - alpha) * std::pow(p, gamma) * log1mp;
      gx = (1 - alpha) * std::pow(p, gamma) * (p - gamma * (1 - p) * log1mp);
    }
    (*grad)[static_cast<std::size_t>(kObjectness) * plane + cell] = static_cast<float>(weights.cls * norm * gx);

    if (label != AnchorLabel::Positive) continue;
    const auto& g = gts[static_cast<std::size_t>(targets.matched[cell])];
    const auto tgt = encode_box(g, cell / grid.nx, cell % grid.nx, anchors, grid);
    for (int ch = kDx; ch <= kLogH; ++ch) {
      const double r = val(ch, cell) - tgt[ch];
      reg += smooth_l1(r, beta);
      (*grad)[static_cast<std::size_t>(ch) * plane + cell] =
          static_cast<float>(weights.reg * norm * smooth_l1_grad(r, beta));
    }
    // sin(yaw_pred - yaw_gt) with yaw_pred = atan2(s, c).
    const double s = val(kSinYaw, cell), c = val(kCosYaw, cell);
    const double sg = std::sin(g.yaw), cg = std::cos(g.yaw);
    const double n = std::sqrt(s * s + c * c + kYawEps);
    const double num = s * cg - c * sg;
    const double sd = num / n;
    reg += smooth_l1(sd, beta);
    const double gsd = weights.reg * norm * smooth_l1_grad(sd, beta);
    const double n3 = n * n * n;
    (*grad)[static_cast<std::size_t>(kSinYaw) * plane + cell] = static_cast<float>(gsd * (cg / n - num * s / n3));
    (*grad)[static_cast<std::size_t>(kCosYaw) * plane + cell] = static_cast<float>(gsd * (-sg / n - num * c / n3));
  }
  if (breakdown) {
    breakdown->classification = cls * norm;
    breakdown->regression = reg * norm;
    breakdown->positives = npos;
  }
  const double total = (weights.cls * cls + weights.reg * reg) * norm;
  return record_op(Tensor::scalar(static_cast<float>(total)), {head_out}, [head_out, grad](const Tensor& out) mutable {
    const float go = out.grad()[0];
    std::vector<float> g(grad->size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = go * (*grad)[i];
    accumulate_grad(head_out, g);
  });
}

std::vector<GroundTruthBox> boxes_in_frame(const std::vector<GroundTruthBox>& world_boxes, const Pose& sensor_pose,
                                           const Rect& region, Visibility visibility) {
  const Pose to_sensor = sensor_pose.inverse();
  std::vector<GroundTruthBox> out;
  for (const auto& b : world_boxes) {
    bool seen = true;
    switch (visibility) {
      case Visibility::Any: seen = b.infra_points > 0 || b.vehicle_points > 0; break;
      case Visibility::Infra: seen = b.infra_points > 0; break;
      case Visibility::Vehicle: seen = b.vehicle_points > 0; break;
      case Visibility::Unfiltered: break;
    }
    if (!seen) continue;
    GroundTruthBox local = transform_box(b, to_sensor);
    if (region.contains(local.cx, local.cy)) out.push_back(local);
  }
  return out;
}

}  // namespace coflow
