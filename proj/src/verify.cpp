#include "coflow/verify.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

#include "coflow/errors.hpp"
#include "coflow/rng.hpp"

namespace coflow {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-scale, scale));
  return t;
}

// Magnitudes in [0.02, 0.1] with random signs: clear of the |x| kink by
// far more than the step, and small enough that float32 rounding of the
// outputs stays well below the central-difference signal.
Tensor signed_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(0.02, 0.1) * (rng.integer(0, 1) ? 1 : -1));
  return t;
}

double probe_dot(const Tensor& out, const std::vector<double>& probe) {
  double s = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) s += probe[i] * out[i];
  return s;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

CheckResult check(std::string name, const std::function<std::string()>& body) {
  CheckResult r{std::move(name), false, {}};
  try {
    r.detail = body();
    r.passed = r.detail.empty() || r.detail.rfind("ok", 0) == 0;
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

}  // namespace

double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                      double h, std::uint64_t probe_seed) {
  for (Tensor& t : inputs) t.set_requires_grad(true);
  std::vector<double> probe;
  Tensor out;
  {
    Tape tape;
    Tape::Recording rec(tape);
    out = f(inputs);
    Rng rng(probe_seed);
    probe.resize(out.numel());
    std::vector<float> pf(out.numel());
    for (std::size_t i = 0; i < probe.size(); ++i) {
      pf[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
      probe[i] = pf[i];
    }
    const Tensor loss = sum(mul(out, Tensor(out.shape(), pf)));
    tape.backward(loss);
  }
  double worst = 0.0;
  for (Tensor& t : inputs) {
    std::vector<float> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.numel(), 0.0f);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float v = data[i];
      const float up = static_cast<float>(v + h);
      const float dn = static_cast<float>(v - h);
      data[i] = up;
      const double lp = probe_dot(f(inputs), probe);
      data[i] = dn;
      const double lm = probe_dot(f(inputs), probe);
      data[i] = v;
      const double numeric = (lp - lm) / (static_cast<double>(up) - static_cast<double>(dn));
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
    worst = std::max(worst, std::sqrt(diff2) / denom);
    t.zero_grad();
  }
  return worst;
}

std::vector<CheckResult> run_verify_suite(const ExperimentConfig& cfg) {
  std::vector<CheckResult> out;

  out.push_back(check("conv2d matches direct loops", [] {
    Rng rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const int cin = 1 + static_cast<int>(rng.integer(0, 2)), cout = 1 + static_cast<int>(rng.integer(0, 2));
      const int hgt = 4 + static_cast<int>(rng.integer(0, 3)), wid = 4 + static_cast<int>(rng.integer(0, 3));
      const int k = rng.integer(0, 1) ? 3 : 1, stride = 1 + static_cast<int>(rng.integer(0, 1));
      const int pad = static_cast<int>(rng.integer(0, 1));
      const Tensor x = random_tensor({cin, hgt, wid}, rng, 1.0), w = random_tensor({cout, cin, k, k}, rng, 1.0);
      const Tensor b = random_tensor({cout}, rng, 1.0);
      const Tensor y = conv2d(x, w, b, {stride, pad});
      const int ho = y.dim(1), wo = y.dim(2);
      for (int o = 0; o < cout; ++o)
        for (int r = 0; r < ho; ++r)
          for (int c = 0; c < wo; ++c) {
            double acc = b[o];
            for (int i = 0; i < cin; ++i)
              for (int u = 0; u < k; ++u)
                for (int v = 0; v < k; ++v) {
                  const int rr = r * stride - pad + u, cc = c * stride - pad + v;
                  if (rr < 0 || cc < 0 || rr >= hgt || cc >= wid) continue;
                  acc += static_cast<double>(x[(i * hgt + rr) * wid + cc]) * w[((o * cin + i) * k + u) * k + v];
                }
            worst = std::max(worst, std::abs(acc - y[(o * ho + r) * wo + c]));
          }
    }
    return worst < 1e-6 ? "ok max " + fmt(worst) : "max abs error " + fmt(worst);
  }));

  out.push_back(check("deconv2d is the adjoint of conv2d", [] {
    Rng rng(12);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor x = random_tensor({2, 7, 7}, rng, 1.0), w = random_tensor({3, 2, 3, 3}, rng, 1.0);
      const Tensor y = conv2d(x, w, Tensor({3}, 0.0f), {2, 1});
      const Tensor g = random_tensor(y.shape(), rng, 1.0);
      const Tensor back = deconv2d(g, w, Tensor({2}, 0.0f), {2, 1});
      if (back.shape() != x.shape()) return std::string("adjoint shape differs from input");
      double lhs = dot(y, g), rhs = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(x[i]) * back[i];
      worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    return worst < 1e-5 ? "ok rel " + fmt(worst) : "rel error " + fmt(worst);
  }));

  out.push_back(check("gradients match finite differences", [] {
    Rng rng(13);
    double worst = 0.0;
    auto run = [&](const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> in) {
      worst = std::max(worst, gradient_check(f, std::move(in), 1e-3, rng.bits()));
    };
    for (int trial = 0; trial < 5; ++trial) {
      run([](const auto& v) { return conv2d(v[0], v[1], v[2], {2, 1}); },
          {random_tensor({2, 5, 5}, rng, 0.1), random_tensor({3, 2, 3, 3}, rng, 0.1), random_tensor({3}, rng, 0.1)});
      run([](const auto& v) { return deconv2d(v[0], v[1], v[2], {2, 1}); },
          {random_tensor({2, 3, 3}, rng, 0.1), random_tensor({2, 3, 4, 4}, rng, 0.1), random_tensor({3}, rng, 0.1)});
      run([](const auto& v) { return cosine_similarity(v[0], v[1]); },
          {random_tensor({12}, rng, 0.3), random_tensor({12}, rng, 0.3)});
      run([](const auto& v) { return l1_norm(v[0]); }, {signed_tensor({10}, rng)});
      run([](const auto& v) { return l2_norm(v[0]); }, {signed_tensor({10}, rng)});
      run([](const auto& v) { return relu(v[0]); }, {signed_tensor({10}, rng)});
    }
    return worst < 1e-4 ? "ok worst " + fmt(worst) : "worst rel error " + fmt(worst);
  }));

  out.push_back(check("cosine similarity examples", [] {
    const double a = cosine_similarity(Tensor({3}, {1, 2, 3}), Tensor({3}, {2, 4, 6})).item();
    const double b = cosine_similarity(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})).item();
    bool threw = false;
    try {
      cosine_similarity(Tensor({2}, 0.0f), Tensor({2}, {1, 1}));
    } catch (const DegenerateInputError&) {
      threw = true;
    }
    return std::abs(a - 1.0) < 1e-6 && std::abs(b) < 1e-7 && threw ? std::string("ok") : std::string("mismatch");
  }));

  out.push_back(check("Adam single step", [] {
    Tensor p({1}, 1.0f);
    p.set_requires_grad(true);
    Adam adam({p}, AdamConfig{0.1f});
    p.mutable_grad()[0] = 1.0f;
    adam.step();
    return std::abs(p[0] - 0.9f) < 1e-6 ? std::string("ok") : "param " + fmt(p[0]);
  }));

  out.push_back(check("11-point AP oracle", [] {
    const std::vector<PRPoint> half{{0.1, 1}, {0.2, 1}, {0.3, 1}, {0.4, 1}, {0.5, 1}};
    const std::vector<PRPoint> perfect{{0.5, 1}, {1.0, 1}};
    const double a = average_precision(half), b = average_precision(perfect), c = average_precision({});
    return std::abs(a - 6.0 / 11.0) < 1e-12 && b == 1.0 && c == 0.0 ? std::string("ok") : "AP " + fmt(a);
  }));

  out.push_back(check("Average Byte worked examples", [] {
    const bool ok = early_fusion_bytes(100000) == 1600000 && late_fusion_bytes(10) == 320 &&
                    tensor_payload_bytes({100, 100, 100}) == 4000000 &&
                    2 * tensor_payload_bytes({12, 36, 36}) == 124416 && tensor_payload_bytes({12, 36, 36}) == 62208;
    return ok ? std::string("ok") : std::string("byte counts differ");
  }));

  out.push_back(check("wire round trip and mutation", [] {
    Rng rng(14);
    for (int i = 0; i < 500; ++i) {
      FlowMessage m;
      m.t_i = rng.uniform(0.0, 100.0);
      for (float& c : m.calib) c = static_cast<float>(rng.normal());
      const Shape s{1 + static_cast<int>(rng.integer(0, 4)), 1 + static_cast<int>(rng.integer(0, 4)),
                    1 + static_cast<int>(rng.integer(0, 4))};
      m.comp_feature = random_tensor(s, rng, 10.0);
      if (rng.integer(0, 1)) m.comp_derivative = random_tensor(s, rng, 10.0);
      const std::string bytes = serialize(m);
      if (serialize(deserialize(bytes)) != bytes) return std::string("round trip differs");
      std::string mutated = bytes;
      mutated[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(bytes.size()) - 1))] ^=
          static_cast<char>(1 + rng.integer(0, 254));
      if (rng.integer(0, 3) == 0) mutated.resize(static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(bytes.size()))));
      try {
        (void)deserialize(mutated);
      } catch (const FormatError&) {
      }
    }
    return std::string("ok");
  }));

  out.push_back(check("simulation is deterministic", [&] {
    WorldConfig w = cfg.world;
    w.duration = std::min(w.duration, 0.5);
    const Scenario a = simulate(w), b = simulate(w);
    for (std::size_t k = 0; k < a.frames.size(); ++k) {
      if (encode_cloud(a.frames[k].infra_cloud) != encode_cloud(b.frames[k].infra_cloud) ||
          encode_cloud(a.frames[k].vehicle_cloud) != encode_cloud(b.frames[k].vehicle_cloud)) {
        return std::string("clouds differ at frame ") + std::to_string(k);
      }
    }
    return std::string("ok");
  }));

  out.push_back(check("zero-latency prediction is the identity", [] {
    Rng rng(15);
    FeatureFlow f;
    f.feature = {random_tensor({2, 3, 3}, rng, 1.0), Frame::Infra, 1.0};
    f.derivative = random_tensor({2, 3, 3}, rng, 1.0);
    f.t_i = 1.0;
    const FeatureMap p = predict(f, 1.0);
    bool threw = false;
    try {
      predict(f, 0.9);
    } catch (const TemporalOrderError&) {
      threw = true;
    }
    const bool same = std::equal(p.tensor.data().begin(), p.tensor.data().end(), f.feature.tensor.data().begin());
    return same && threw ? std::string("ok") : std::string("mismatch");
  }));

  out.push_back(check("training pair construction", [] {
    const auto p = build_pairs(0, 10, 1, 1, 3);
    bool ok = p.size() == 8 && p.front().t_index == 1 && p.back().t_index == 8;
    for (const auto& q : build_pairs(0, 12, 1, 2, 4)) ok = ok && q.k >= 1 && q.k <= 2 && q.future_index() < 12;
    return ok ? std::string("ok") : std::string("pair indices wrong");
  }));

  return out;
}

}  // namespace coflow
