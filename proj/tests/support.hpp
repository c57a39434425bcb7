#pragma once

// Test-side oracles: random tensors and a central-difference gradient check
// written independently of the library's verify suite.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "coflow/rng.hpp"
#include "coflow/tensor.hpp"

namespace coflow::testing {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Random signs with magnitudes in [lo, hi]: keeps every entry clear of the
// kinks of relu and |x|.
inline Tensor signed_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi) * (rng.integer(0, 1) ? 1.0 : -1.0));
  return t;
}

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Largest norm-wise relative error, over the inputs, between the taped
// gradient of sum(f(x) * probe) and the central difference with step h.
// The probe-weighted sum of the outputs is accumulated in double.
inline double max_gradient_error(const TensorFn& f, std::vector<Tensor> inputs, double h, Rng& rng) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor out;
  std::vector<float> probe;
  {
    Tape tape;
    Tape::Recording rec(tape);
    out = f(inputs);
    probe.resize(out.numel());
    for (float& p : probe) p = static_cast<float>(rng.uniform(-1.0, 1.0));
    tape.backward(sum(mul(out, Tensor(out.shape(), probe))));
  }
  auto objective = [&] {
    const Tensor y = f(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) s += static_cast<double>(probe[i]) * y[i];
    return s;
  };
  double worst = 0.0;
  for (Tensor& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    double d2 = 0.0, a2 = 0.0, n2 = 0.0;
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const float v = x[i];
      const float up = static_cast<float>(v + h), dn = static_cast<float>(v - h);
      x[i] = up;
      const double fp = objective();
      x[i] = dn;
      const double fm = objective();
      x[i] = v;
      const double numeric = (fp - fm) / (static_cast<double>(up) - dn);
      d2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(d2) / std::max(std::sqrt(std::max(a2, n2)), 1e-12));
  }
  return worst;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                                              [](float x, float y) { return std::memcmp(&x, &y, 4) == 0; });
}

// 1 - cos(s * (f + dt * d), target) with s = |f|_1 / |f + dt * d|_1, in double.
inline double hand_flow_loss(const Tensor& f, const Tensor& d, const Tensor& target, double dt) {
  double nf = 0.0, np = 0.0;
  std::vector<double> p(f.numel());
  for (std::size_t i = 0; i < f.numel(); ++i) {
    p[i] = static_cast<double>(f[i]) + dt * d[i];
    nf += std::abs(f[i]);
    np += std::abs(p[i]);
  }
  double pt = 0.0, pp = 0.0, tt = 0.0;
  for (std::size_t i = 0; i < f.numel(); ++i) {
    const double q = p[i] * nf / np;
    pt += q * target[i];
    pp += q * q;
    tt += static_cast<double>(target[i]) * target[i];
  }
  return 1.0 - pt / std::sqrt(pp * tt);
}

}  // namespace coflow::testing
