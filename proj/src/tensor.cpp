#include "coflow/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "coflow/bytes.hpp"
#include "coflow/errors.hpp"

namespace coflow {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_conv_calls = 0;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_single(const Tensor& t, const char* op) {
  if (t.numel() != 1) {
    throw DimensionError(std::string(op) + ": expected a single-element tensor, got " +
                         shape_str(t.shape()));
  }
}

struct ConvGeometry {
  int channels, height, width;
  int kh, kw, stride, pad;
  int out_h, out_w;
};

// cols[(c, i, j), (y, x)] = input[c, y*s - p + i, x*s - p + j], zero outside.
void im2col(const float* in, const ConvGeometry& g, float* cols) {
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        float* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * plane;
        for (int y = 0; y < g.out_h; ++y) {
          const int sy = y * g.stride - g.pad + i;
          float* dst = row + y * g.out_w;
          if (sy < 0 || sy >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = in + (static_cast<std::size_t>(c) * g.height + sy) * g.width;
          for (int x = 0; x < g.out_w; ++x) {
            const int sx = x * g.stride - g.pad + j;
            dst[x] = (sx >= 0 && sx < g.width) ? src[sx] : 0.0f;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds cols back into an image buffer.
void col2im(const float* cols, const ConvGeometry& g, float* out) {
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const float* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * plane;
        for (int y = 0; y < g.out_h; ++y) {
          const int sy = y * g.stride - g.pad + i;
          if (sy < 0 || sy >= g.height) continue;
          float* dst = out + (static_cast<std::size_t>(c) * g.height + sy) * g.width;
          const float* src = row + y * g.out_w;
          for (int x = 0; x < g.out_w; ++x) {
            const int sx = x * g.stride - g.pad + j;
            if (sx >= 0 && sx < g.width) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : node_(std::make_shared<TensorNode>()) {
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, const std::vector<float>& data) : Tensor(std::move(shape), FloatBuffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, FloatBuffer data) : node_(std::make_shared<TensorNode>()) {
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::scalar(float value) { return Tensor({1}, FloatBuffer{value}); }

float Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on a tensor with " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::span<float> Tensor::mutable_grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("reshape " + shape_str(this->shape()) + " -> " + shape_str(shape));
  }
  return record_op(Tensor(std::move(shape), node_->data), {*this}, [x = *this](const Tensor& out) mutable {
    accumulate_grad(x, out.grad());
  });
}

// ---------------------------------------------------------------------------

void Tape::record(std::function<void()> backward_rule) {
  if (consumed_) throw UsageError("recording onto a tape that already ran backward");
  rules_.push_back(std::move(backward_rule));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward called twice on the same tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss");
  }
  consumed_ = true;
  Tensor seed = loss;
  auto g = seed.mutable_grad();
  g[0] = 1.0f;
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  rules_.clear();
}

Tape* Tape::active() { return g_active_tape; }

Tape::Recording::Recording(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Recording::~Recording() { g_active_tape = previous_; }

Tensor record_op(Tensor out, std::initializer_list<Tensor> inputs,
                 std::function<void(const Tensor& out)> rule) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.set_requires_grad(true);
  tape->record([out, rule = std::move(rule)]() {
    if (out.has_grad()) rule(out);
  });
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const float> g) {
  if (!t.requires_grad()) return;
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

// ---------------------------------------------------------------------------

std::uint64_t conv_invocations() { return g_conv_calls; }

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec) {
  if (input.rank() != 3) throw DimensionError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be [O,C,kH,kW]");
  if (spec.stride < 1 || spec.padding < 0) throw DimensionError("conv2d: bad stride/padding");
  if (weight.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
  }
  const int out_c = weight.dim(0);
  if (bias.numel() != static_cast<std::size_t>(out_c)) throw DimensionError("conv2d: bias size");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), weight.dim(2), weight.dim(3),
                 spec.stride, spec.padding, 0, 0};
  const int span_h = g.height + 2 * g.pad - g.kh;
  const int span_w = g.width + 2 * g.pad - g.kw;
  if (span_h < 0 || span_w < 0) throw DimensionError("conv2d: kernel larger than padded input");
  g.out_h = span_h / g.stride + 1;
  g.out_w = span_w / g.stride + 1;
  ++g_conv_calls;

  const int k = g.channels * g.kh * g.kw;
  const int plane = g.out_h * g.out_w;
  auto cols = std::make_shared<FloatBuffer>();
  const float* cols_ptr = input.data().data();
  if (!is_pointwise(g)) {
    cols->resize(static_cast<std::size_t>(k) * plane);
    im2col(input.data().data(), g, cols->data());
    cols_ptr = cols->data();
  }
  Tensor out({out_c, g.out_h, g.out_w});
  MapMat y(out.mutable_data().data(), out_c, plane);
  y.noalias() = CMapMat(weight.data().data(), out_c, k) * CMapMat(cols_ptr, k, plane);
  for (int o = 0; o < out_c; ++o) y.row(o).array() += bias[o];

  return record_op(std::move(out), {input, weight, bias},
                   [input, weight, bias, cols, g, out_c, k, plane](const Tensor& out) mutable {
                     CMapMat gy(out.grad().data(), out_c, plane);
                     const float* cp = cols->empty() ? input.data().data() : cols->data();
                     if (weight.requires_grad()) {
                       MapMat(weight.mutable_grad().data(), out_c, k).noalias() +=
                           gy * CMapMat(cp, k, plane).transpose();
                     }
                     if (bias.requires_grad()) {
                       auto db = bias.mutable_grad();
                       for (int o = 0; o < out_c; ++o) db[o] += gy.row(o).sum();
                     }
                     if (input.requires_grad()) {
                       auto dx = input.mutable_grad();
                       if (cols->empty()) {
                         MapMat(dx.data(), k, plane).noalias() +=
                             CMapMat(weight.data().data(), out_c, k).transpose() * gy;
                       } else {
                         RowMat dcols = CMapMat(weight.data().data(), out_c, k).transpose() * gy;
                         col2im(dcols.data(), g, dx.data());
                       }
                     }
                   });
}

Tensor deconv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec) {
  if (input.rank() != 3) throw DimensionError("deconv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw DimensionError("deconv2d: weight must be [C_in,C_out,kH,kW]");
  if (spec.stride < 1 || spec.padding < 0) throw DimensionError("deconv2d: bad stride/padding");
  if (weight.dim(0) != input.dim(0)) {
    throw DimensionError("deconv2d: weight expects " + std::to_string(weight.dim(0)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
  }
  const int in_c = input.dim(0);
  const int out_c = weight.dim(1);
  if (bias.numel() != static_cast<std::size_t>(out_c)) throw DimensionError("deconv2d: bias size");
  const int out_h = (input.dim(1) - 1) * spec.stride - 2 * spec.padding + weight.dim(2);
  const int out_w = (input.dim(2) - 1) * spec.stride - 2 * spec.padding + weight.dim(3);
  if (out_h < 1 || out_w < 1) throw DimensionError("deconv2d: empty output");
  // Geometry of the forward conv this op is the adjoint of.
  ConvGeometry g{out_c, out_h, out_w, weight.dim(2), weight.dim(3), spec.stride, spec.padding,
                 input.dim(1), input.dim(2)};
  ++g_conv_calls;

  const int k = out_c * g.kh * g.kw;
  const int plane = g.out_h * g.out_w;
  Tensor out({out_c, out_h, out_w});
  {
    RowMat cols = CMapMat(weight.data().data(), in_c, k).transpose() *
                  CMapMat(input.data().data(), in_c, plane);
    col2im(cols.data(), g, out.mutable_data().data());
    auto y = out.mutable_data();
    const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;
    for (int o = 0; o < out_c; ++o) {
      for (std::size_t i = 0; i < hw; ++i) y[o * hw + i] += bias[o];
    }
  }

  return record_op(std::move(out), {input, weight, bias},
                   [input, weight, bias, g, in_c, out_c, k, plane](const Tensor& out) mutable {
                     FloatBuffer gcols(static_cast<std::size_t>(k) * plane);
                     im2col(out.grad().data(), g, gcols.data());
                     CMapMat gc(gcols.data(), k, plane);
                     if (input.requires_grad()) {
                       MapMat(input.mutable_grad().data(), in_c, plane).noalias() +=
                           CMapMat(weight.data().data(), in_c, k) * gc;
                     }
                     if (weight.requires_grad()) {
                       MapMat(weight.mutable_grad().data(), in_c, k).noalias() +=
                           CMapMat(input.data().data(), in_c, plane) * gc.transpose();
                     }
                     if (bias.requires_grad()) {
                       auto db = bias.mutable_grad();
                       const std::size_t hw = static_cast<std::size_t>(g.height) * g.width;
                       auto go = out.grad();
                       for (int o = 0; o < out_c; ++o) {
                         double s = 0.0;
                         for (std::size_t i = 0; i < hw; ++i) s += go[o * hw + i];
                         db[o] += static_cast<float>(s);
                       }
                     }
                   });
}

Tensor relu(const Tensor& x) {
  FloatBuffer y(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  return record_op(Tensor(x.shape(), std::move(y)), {x}, [x](const Tensor& out) mutable {
    FloatBuffer g(out.grad().begin(), out.grad().end());
    auto xd = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(xd[i] > 0.0f)) g[i] = 0.0f;
    }
    accumulate_grad(x, g);
  });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2) throw DimensionError("linear: expects rank-2 input and weight");
  const int n = input.dim(0), in = input.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: inner dimension " + std::to_string(in) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.numel() != static_cast<std::size_t>(out_f)) throw DimensionError("linear: bias size");
  Tensor out({n, out_f});
  MapMat y(out.mutable_data().data(), n, out_f);
  y.noalias() = CMapMat(input.data().data(), n, in) * CMapMat(weight.data().data(), out_f, in).transpose();
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < out_f; ++c) y(r, c) += bias[c];
  }
  return record_op(std::move(out), {input, weight, bias},
                   [input, weight, bias, n, in, out_f](const Tensor& out) mutable {
                     CMapMat gy(out.grad().data(), n, out_f);
                     if (input.requires_grad()) {
                       MapMat(input.mutable_grad().data(), n, in).noalias() +=
                           gy * CMapMat(weight.data().data(), out_f, in);
                     }
                     if (weight.requires_grad()) {
                       MapMat(weight.mutable_grad().data(), out_f, in).noalias() +=
                           gy.transpose() * CMapMat(input.data().data(), n, in);
                     }
                     if (bias.requires_grad()) {
                       auto db = bias.mutable_grad();
                       for (int c = 0; c < out_f; ++c) db[c] += gy.col(c).sum();
                     }
                   });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  FloatBuffer y;
  y.reserve(a.numel() + b.numel());
  y.insert(y.end(), a.data().begin(), a.data().end());
  y.insert(y.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.numel();
  return record_op(Tensor({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(y)), {a, b},
                   [a, b, na](const Tensor& out) mutable {
                     auto g = out.grad();
                     accumulate_grad(a, g.subspan(0, na));
                     accumulate_grad(b, g.subspan(na));
                   });
}

Tensor scale(const Tensor& x, float s) {
  FloatBuffer y(x.data().begin(), x.data().end());
  if (s != 1.0f) {
    for (float& v : y) v *= s;
  }
  return record_op(Tensor(x.shape(), std::move(y)), {x}, [x, s](const Tensor& out) mutable {
    FloatBuffer g(out.grad().begin(), out.grad().end());
    for (float& v : g) v *= s;
    accumulate_grad(x, g);
  });
}

Tensor add_scalar(const Tensor& x, float c) {
  FloatBuffer y(x.data().begin(), x.data().end());
  for (float& v : y) v += c;
  return record_op(Tensor(x.shape(), std::move(y)), {x},
                   [x](const Tensor& out) mutable { accumulate_grad(x, out.grad()); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  FloatBuffer y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return record_op(Tensor(a.shape(), std::move(y)), {a, b}, [a, b](const Tensor& out) mutable {
    accumulate_grad(a, out.grad());
    accumulate_grad(b, out.grad());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  FloatBuffer y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return record_op(Tensor(a.shape(), std::move(y)), {a, b}, [a, b](const Tensor& out) mutable {
    accumulate_grad(a, out.grad());
    FloatBuffer g(out.grad().begin(), out.grad().end());
    for (float& v : g) v = -v;
    accumulate_grad(b, g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  FloatBuffer y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return record_op(Tensor(a.shape(), std::move(y)), {a, b}, [a, b](const Tensor& out) mutable {
    auto go = out.grad();
    FloatBuffer g(go.size());
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] * b[i];
      accumulate_grad(a, g);
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] * a[i];
      accumulate_grad(b, g);
    }
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  require_single(s, "scale_by");
  const float sv = s[0];
  FloatBuffer y(x.data().begin(), x.data().end());
  for (float& v : y) v *= sv;
  return record_op(Tensor(x.shape(), std::move(y)), {x, s}, [x, s, sv](const Tensor& out) mutable {
    auto go = out.grad();
    if (x.requires_grad()) {
      FloatBuffer g(go.begin(), go.end());
      for (float& v : g) v *= sv;
      accumulate_grad(x, g);
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) acc += static_cast<double>(go[i]) * x[i];
      const float gs = static_cast<float>(acc);
      accumulate_grad(s, std::span<const float>(&gs, 1));
    }
  });
}

Tensor div_scalar(const Tensor& num, const Tensor& den) {
  require_single(num, "div_scalar");
  require_single(den, "div_scalar");
  if (den[0] == 0.0f) throw DegenerateInputError("div_scalar: zero denominator");
  const float q = num[0] / den[0];
  return record_op(Tensor::scalar(q), {num, den}, [num, den](const Tensor& out) mutable {
    const float go = out.grad()[0];
    const float d = den[0];
    const float gn = go / d;
    const float gd = -go * num[0] / (d * d);
    accumulate_grad(num, std::span<const float>(&gn, 1));
    accumulate_grad(den, std::span<const float>(&gd, 1));
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return record_op(Tensor::scalar(static_cast<float>(acc)), {x}, [x](const Tensor& out) mutable {
    FloatBuffer g(x.numel(), out.grad()[0]);
    accumulate_grad(x, g);
  });
}

float dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(acc);
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_similarity");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double c = std::clamp(ab / (na * nb), -1.0, 1.0);
  return record_op(Tensor::scalar(static_cast<float>(c)), {a, b},
                   [a, b, na, nb, c](const Tensor& out) mutable {
                     const double go = out.grad()[0];
                     FloatBuffer g(a.numel());
                     if (a.requires_grad()) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] = static_cast<float>(go * (b[i] / (na * nb) - c * a[i] / (na * na)));
                       }
                       accumulate_grad(a, g);
                     }
                     if (b.requires_grad()) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] = static_cast<float>(go * (a[i] / (na * nb) - c * b[i] / (nb * nb)));
                       }
                       accumulate_grad(b, g);
                     }
                   });
}

Tensor l1_norm(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += std::fabs(v);
  return record_op(Tensor::scalar(static_cast<float>(acc)), {x}, [x](const Tensor& out) mutable {
    const float go = out.grad()[0];
    FloatBuffer g(x.numel());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0.0f ? go : (x[i] < 0.0f ? -go : 0.0f);
    accumulate_grad(x, g);
  });
}

Tensor l2_norm(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  const double n = std::sqrt(acc);
  return record_op(Tensor::scalar(static_cast<float>(n)), {x}, [x, n](const Tensor& out) mutable {
    if (n == 0.0) return;
    const double go = out.grad()[0];
    FloatBuffer g(x.numel());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(go * x[i] / n);
    accumulate_grad(x, g);
  });
}

// ---------------------------------------------------------------------------

Tensor& ParamSet::add(std::string name, Tensor t) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.emplace_back(std::move(name), std::move(t));
  return entries_.back().second;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

Tensor& ParamSet::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamSet&>(*this).get(name));
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& [n, t] : other) add(n, t);
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [n, t] : entries_) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    out.add(n, c);
  }
  return out;
}

void ParamSet::assign(const ParamSet& src) {
  for (auto& [n, t] : entries_) {
    if (!src.contains(n)) continue;
    const Tensor& s = src.get(n);
    if (s.shape() != t.shape()) {
      throw DimensionError("assign " + n + ": " + shape_str(s.shape()) + " vs " + shape_str(t.shape()));
    }
    std::copy(s.data().begin(), s.data().end(), t.mutable_data().begin());
  }
}

namespace {
constexpr char kCheckpointMagic[4] = {'C', 'F', 'W', 'T'};
constexpr std::uint8_t kCheckpointVersion = 1;
}  // namespace

std::string encode_checkpoint(const ParamSet& params) {
  ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put<std::uint8_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_floats(t.data());
  }
  return w.take();
}

ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto version = r.get<std::uint8_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version", 4);
  const auto count = r.get<std::uint32_t>("count");
  ParamSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.get_string(len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const std::size_t at = r.offset();
      const auto dim = r.get<std::uint32_t>("dim");
      if (dim == 0 || dim > (1u << 30)) throw FormatError("invalid dimension", at);
      numel *= dim;
      if (numel > r.remaining() / sizeof(float) + 1) throw FormatError("payload exceeds buffer", at);
      shape.push_back(static_cast<int>(dim));
    }
    FloatBuffer data(shape_numel(shape));
    r.get_floats(data, "payload");
    const std::size_t at = r.offset();
    try {
      out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what(), at);
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
  return out;
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void Adam::step(float grad_scale) {
  for (const auto& p : params_) {
    if (!p.has_grad()) throw UsageError("adam step on a parameter without gradient");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g[i] * grad_scale;
      m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double update = mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * w[i];
      w[i] = static_cast<float>(w[i] - config_.lr * update);
    }
  }
}

}  // namespace coflow
