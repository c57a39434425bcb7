#pragma once

// Double-precision replica of a derivative generator plus the stage-2 flow
// loss. float32 central differences cannot resolve the deep-layer gradients
// of an O(1) loss, so the generator's taped gradient is checked against
// central differences of this replica instead.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "coflow/rng.hpp"
#include "coflow/trainer.hpp"

namespace coflow::testing {

struct DTensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(int ci, int y, int x) { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
  double at(int ci, int y, int x) const { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
};

inline DTensor to_double(const Tensor& t) {
  DTensor d{t.dim(0), t.dim(1), t.dim(2), {}};
  d.v.assign(t.data().begin(), t.data().end());
  return d;
}

class GeneratorReplica {
 public:
  // Parameters are copied from a generator built with `prefix`.
  GeneratorReplica(const ParamSet& params, std::string prefix) : prefix_(std::move(prefix)) {
    for (const auto& [name, t] : params) {
      values_[name].assign(t.data().begin(), t.data().end());
      shapes_[name] = t.shape();
    }
  }

  std::map<std::string, std::vector<double>>& values() { return values_; }

  // Stride-1 backbone only, matching the toy configuration.
  DTensor forward(const DTensor& prev, const DTensor& curr, double frame_interval) const {
    DTensor x{prev.c + curr.c, prev.h, prev.w, prev.v};
    x.v.insert(x.v.end(), curr.v.begin(), curr.v.end());
    const DTensor first = conv(x, prefix_ + ".block0", 1, true);
    DTensor h = first;
    for (int i = 1; i < 4; ++i) h = conv(h, prefix_ + ".block" + std::to_string(i), 1, true);
    DTensor cat{first.c + h.c, first.h, first.w, first.v};
    cat.v.insert(cat.v.end(), h.v.begin(), h.v.end());
    DTensor out = conv(conv(cat, prefix_ + ".merge", 0, true), prefix_ + ".out", 0, false);
    for (double& v : out.v) v /= frame_interval;
    return out;
  }

  // 1 - cos(s * (f + dt * d), target), s = |f|_1 / |f + dt * d|_1.
  static double flow_loss(const DTensor& f, const DTensor& d, const DTensor& target, double dt) {
    double fl1 = 0.0, pl1 = 0.0;
    std::vector<double> p(f.v.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = f.v[i] + dt * d.v[i];
      fl1 += std::abs(f.v[i]);
      pl1 += std::abs(p[i]);
    }
    double pt = 0.0, pp = 0.0, tt = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double q = p[i] * fl1 / pl1;
      pt += q * target.v[i];
      pp += q * q;
      tt += target.v[i] * target.v[i];
    }
    return 1.0 - pt / std::sqrt(pp * tt);
  }

 private:
  DTensor conv(const DTensor& x, const std::string& name, int pad, bool relu) const {
    const auto& w = values_.at(name + ".weight");
    const auto& b = values_.at(name + ".bias");
    const Shape& s = shapes_.at(name + ".weight");
    const int co = s[0], ci = s[1], k = s[2];
    DTensor y{co, x.h + 2 * pad - k + 1, x.w + 2 * pad - k + 1, {}};
    y.v.assign(static_cast<std::size_t>(y.c) * y.h * y.w, 0.0);
    for (int o = 0; o < co; ++o)
      for (int r = 0; r < y.h; ++r)
        for (int c = 0; c < y.w; ++c) {
          double acc = b[o];
          for (int i = 0; i < ci; ++i)
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) {
                const int yy = r - pad + u, xx = c - pad + v;
                if (yy < 0 || yy >= x.h || xx < 0 || xx >= x.w) continue;
                acc += x.at(i, yy, xx) * w[((static_cast<std::size_t>(o) * ci + i) * k + u) * k + v];
              }
          y.at(o, r, c) = relu ? std::max(acc, 0.0) : acc;
        }
    return y;
  }

  std::string prefix_;
  std::map<std::string, std::vector<double>> values_;
  std::map<std::string, Shape> shapes_;
};

// Zero-initialized biases leave dead receptive fields exactly on the relu
// kink, where central differences see half a slope. Checks run at a generic
// point instead.
inline void randomize_biases(ParamSet& params, Rng& rng) {
  for (auto& [name, t] : params) {
    if (!name.ends_with(".bias")) continue;
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
  }
}

struct GeneratorCheck {
  double forward_error = 0.0;   // max |library - replica| of the generator output
  double gradient_error = 0.0;  // worst norm-wise relative error over parameter tensors
};

// Taped float gradient of the flow loss with respect to every generator
// parameter against double central differences (step h) of the replica.
inline GeneratorCheck check_generator_gradient(DerivativeGenerator& gen, const std::string& prefix, const Tensor& prev,
                                               const Tensor& curr, const Tensor& feature, const Tensor& target,
                                               double frame_interval, double dt, double h = 1e-6) {
  GeneratorCheck out;
  for (auto& [name, t] : gen.params()) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor d;
  {
    Tape tape;
    Tape::Recording rec(tape);
    d = gen.forward(prev, curr, frame_interval);
    tape.backward(coflow::flow_loss(feature, d, target, dt));
  }
  GeneratorReplica rep(gen.params(), prefix);
  const DTensor p = to_double(prev), c = to_double(curr), f = to_double(feature), tg = to_double(target);
  const DTensor dr = rep.forward(p, c, frame_interval);
  for (std::size_t i = 0; i < dr.v.size(); ++i) {
    out.forward_error = std::max(out.forward_error, std::abs(dr.v[i] - d[i]));
  }
  for (auto& [name, t] : gen.params()) {
    auto& x = rep.values()[name];
    double d2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      x[i] = v + h;
      const double fp = GeneratorReplica::flow_loss(f, rep.forward(p, c, frame_interval), tg, dt);
      x[i] = v - h;
      const double fm = GeneratorReplica::flow_loss(f, rep.forward(p, c, frame_interval), tg, dt);
      x[i] = v;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      d2 += (numeric - analytic) * (numeric - analytic);
      n2 += numeric * numeric;
    }
    out.gradient_error = std::max(out.gradient_error, std::sqrt(d2) / std::max(std::sqrt(n2), 1e-12));
  }
  return out;
}

}  // namespace coflow::testing
