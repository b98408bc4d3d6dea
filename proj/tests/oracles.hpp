#pragma once

// Reference computations for the tests. Nothing here touches the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "lomo/lomo.hpp"

namespace oracle {

using lomo::Batch;
using lomo::Model;
using lomo::Tensor;

// --- binary16 by enumeration --------------------------------------------

// Value of a half bit pattern (no NaN/inf patterns are passed in).
inline double decode_half(std::uint16_t bits) {
  const int exp = (bits >> 10) & 0x1f;
  const int mant = bits & 0x3ff;
  const double sign = (bits & 0x8000) ? -1.0 : 1.0;
  if (exp == 0) return sign * std::ldexp(static_cast<double>(mant), -24);
  return sign * std::ldexp(1024.0 + mant, exp - 25);
}

// Every non-negative finite half, ascending, plus 65536 standing in for the
// first value past the top (its mantissa is even, so ties go there).
inline const std::vector<double>& half_grid() {
  static const std::vector<double> grid = [] {
    std::vector<double> g;
    for (std::uint16_t b = 0; b < 0x7c00; ++b) g.push_back(decode_half(b));
    g.push_back(65536.0);
    return g;
  }();
  return grid;
}

// Round to nearest, ties to the even bit pattern, by searching the grid.
inline double round_half_by_grid(double x) {
  if (std::isnan(x)) return x;
  const double a = std::fabs(x);
  const auto& g = half_grid();
  if (a >= g.back()) return std::copysign(INFINITY, x);
  const auto hi = std::lower_bound(g.begin(), g.end(), a);
  if (*hi == a) return std::copysign(a == 65536.0 ? INFINITY : a, x);
  const auto lo = hi - 1;
  double pick;
  const double dlo = a - *lo, dhi = *hi - a;
  if (dlo < dhi) {
    pick = *lo;
  } else if (dhi < dlo) {
    pick = *hi;
  } else {
    const auto idx = static_cast<std::size_t>(lo - g.begin());
    pick = (idx % 2 == 0) ? *lo : *hi;
  }
  if (pick == 65536.0) return std::copysign(INFINITY, x);
  return std::copysign(pick, x);
}

// --- straight-line MLP ---------------------------------------------------

struct MlpWeights {
  std::vector<std::vector<double>> w;  // [in * out], row-major
  std::vector<std::vector<double>> b;  // [out], empty when bias is off
  std::vector<std::size_t> in, out;
};

inline MlpWeights read_mlp(const Model& m) {
  const auto& cfg = m.config();
  MlpWeights r;
  std::size_t p = 0;
  const auto& ps = m.parameters();
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& w = ps[p++].value;
    r.in.push_back(w.dim(0));
    r.out.push_back(w.dim(1));
    r.w.emplace_back(w.data().begin(), w.data().end());
    if (cfg.bias) {
      const auto& b = ps[p++].value;
      r.b.emplace_back(b.data().begin(), b.data().end());
    } else {
      r.b.emplace_back();
    }
  }
  return r;
}

struct MlpPass {
  double loss = 0.0;
  MlpWeights grad;  // same layout as the weights
};

// Forward and backward for the tanh MLP with the half-sum-of-squares loss
// averaged over rows. Accumulates sequentially in the obvious loop order.
inline MlpPass mlp_pass(const MlpWeights& W, const Batch& batch) {
  const std::size_t L = W.w.size();
  const std::size_t rows = batch.inputs.dim(0);
  std::vector<std::vector<double>> acts;  // acts[l] is the input to layer l
  acts.emplace_back(batch.inputs.data().begin(), batch.inputs.data().end());
  std::vector<double> pred;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t k = W.in[l], n = W.out[l];
    std::vector<double> z(rows * n);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += acts[l][i * k + t] * W.w[l][t * n + j];
        z[i * n + j] = acc;
      }
    }
    if (!W.b[l].empty()) {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) z[i * n + j] = z[i * n + j] + W.b[l][j];
    }
    if (l + 1 < L) {
      for (auto& v : z) v = std::tanh(v);
      acts.push_back(std::move(z));
    } else {
      pred = std::move(z);
    }
  }

  MlpPass r;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - batch.targets[i];
    total += 0.5 * d * d;
  }
  r.loss = total / static_cast<double>(rows);

  const double coef = 1.0 / static_cast<double>(rows);
  std::vector<double> dz(pred.size());
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = coef * (pred[i] - batch.targets[i]);

  r.grad = W;
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t k = W.in[l], n = W.out[l];
    if (!W.b[l].empty()) {
      std::vector<double> db(n, 0.0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += dz[i * n + j];
      r.grad.b[l] = db;
    }
    std::vector<double> dw(k * n);
    for (std::size_t t = 0; t < k; ++t) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rows; ++i) acc += acts[l][i * k + t] * dz[i * n + j];
        dw[t * n + j] = acc;
      }
    }
    r.grad.w[l] = dw;
    if (l == 0) break;
    std::vector<double> dx(rows * k);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += dz[i * n + j] * W.w[l][t * n + j];
        dx[i * k + t] = acc;
      }
    }
    // through tanh, using the saved output
    for (std::size_t e = 0; e < dx.size(); ++e) {
      const double y = acts[l][e];
      dx[e] = dx[e] * (1.0 - y * y);
    }
    dz = std::move(dx);
  }
  return r;
}

// Sum over tensors of the per-tensor sum of squares, in parameter order
// (weight then bias per layer, matching the model's parameter list).
inline double mlp_grad_norm(const MlpWeights& g) {
  std::vector<double> per_tensor;
  for (std::size_t l = 0; l < g.w.size(); ++l) {
    double s = 0.0;
    for (double v : g.w[l]) s += v * v;
    per_tensor.push_back(s);
    if (!g.b[l].empty()) {
      s = 0.0;
      for (double v : g.b[l]) s += v * v;
      per_tensor.push_back(s);
    }
  }
  double total = 0.0;
  for (double s : per_tensor) total += s;
  return std::sqrt(total);
}

// Plain gradient descent, optionally with the gradient scaled by min(1, max/N).
inline MlpWeights mlp_sgd(const MlpWeights& W, const MlpWeights& g, double lr, double factor = 1.0) {
  MlpWeights r = W;
  auto step = [&](std::vector<double>& v, const std::vector<double>& gv) {
    for (std::size_t e = 0; e < v.size(); ++e) {
      const double ge = factor != 1.0 ? gv[e] * factor : gv[e];
      v[e] = v[e] - lr * ge;
    }
  };
  for (std::size_t l = 0; l < W.w.size(); ++l) {
    step(r.w[l], g.w[l]);
    if (!r.b[l].empty()) step(r.b[l], g.b[l]);
  }
  return r;
}

inline bool same_bits(const MlpWeights& a, const Model& m) {
  const MlpWeights b = read_mlp(m);
  auto eq = [](const std::vector<double>& x, const std::vector<double>& y) {
    return x.size() == y.size() &&
           (x.empty() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
  };
  for (std::size_t l = 0; l < a.w.size(); ++l) {
    if (!eq(a.w[l], b.w[l]) || !eq(a.b[l], b.b[l])) return false;
  }
  return true;
}

// --- generic helpers -------------------------------------------------------

// Gradients of every parameter at the current point, all retained.
inline std::vector<Tensor> materialized_gradients(Model& m, const Batch& batch) {
  lomo::Tape tape(m.precision(), lomo::CheckpointPolicy::StoreAll, nullptr);
  const lomo::Var loss = m.record_loss(tape, batch);
  tape.backward(loss, Tensor::scalar(1.0));
  std::vector<Tensor> out;
  for (auto& p : m.parameters()) {
    out.push_back(p.grad ? std::move(*p.grad) : Tensor(p.value.shape()));
    p.grad.reset();
  }
  return out;
}

// Materialize all gradients, compute the global norm the plain way, scale
// and update. Full precision.
inline void clipped_sgd_step(Model& m, const Batch& batch, double lr, double max_norm) {
  const auto g = materialized_gradients(m, batch);
  std::vector<double> per_tensor;
  for (const auto& t : g) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    per_tensor.push_back(s);
  }
  double total = 0.0;
  for (double s : per_tensor) total += s;
  const double norm = std::sqrt(total);
  const double factor = norm > max_norm ? max_norm / norm : 1.0;
  auto& ps = m.parameters();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    ps[k].value.update([&](std::size_t e, double old) {
      const double ge = factor != 1.0 ? g[k][e] * factor : g[k][e];
      return old - lr * ge;
    });
  }
}

// Central difference of the loss with respect to one parameter element.
inline double finite_difference(Model& m, const Batch& batch, std::size_t param,
                                std::size_t element, double h) {
  auto& v = m.parameters()[param].value;
  const double orig = v[element];
  v.set(element, orig + h);
  const double up = m.evaluate(batch);
  v.set(element, orig - h);
  const double down = m.evaluate(batch);
  v.set(element, orig);
  return (up - down) / (2.0 * h);
}

// Richardson extrapolation of two central differences: O(h^4) truncation
// while keeping h large enough that roundoff stays small.
inline double richardson_difference(Model& m, const Batch& batch, std::size_t param,
                                    std::size_t element, double h) {
  const double coarse = finite_difference(m, batch, param, element, h);
  const double fine = finite_difference(m, batch, param, element, h / 2.0);
  return (4.0 * fine - coarse) / 3.0;
}

inline std::vector<std::vector<double>> snapshot(const Model& m) {
  std::vector<std::vector<double>> s;
  for (const auto& p : m.parameters()) s.emplace_back(p.value.data().begin(), p.value.data().end());
  return s;
}

inline bool same_bits(const std::vector<std::vector<double>>& a,
                      const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].size() != b[k].size()) return false;
    if (std::memcmp(a[k].data(), b[k].data(), a[k].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

inline double max_abs_diff(const std::vector<std::vector<double>>& a,
                           const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t e = 0; e < a[k].size(); ++e) m = std::max(m, std::fabs(a[k][e] - b[k][e]));
  return m;
}

// Tiny configs used across suites.
inline lomo::ModelConfig mlp_config(int layers = 2, int hidden = 4, std::uint64_t seed = 7,
                                    int input_dim = 3) {
  lomo::ModelConfig c;
  c.kind = lomo::ModelKind::Mlp;
  c.layers = layers;
  c.hidden = hidden;
  c.input_dim = input_dim;
  c.output_dim = 1;
  c.seed = seed;
  return c;
}

inline lomo::ModelConfig transformer_config(int layers = 2, int hidden = 32, int heads = 4,
                                            int vocab = 64, std::uint64_t seed = 0) {
  lomo::ModelConfig c;
  c.kind = lomo::ModelKind::MiniTransformer;
  c.layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.vocab = vocab;
  c.seed = seed;
  return c;
}

inline lomo::SyntheticTask regression_task(int input_dim = 3, std::uint64_t seed = 0) {
  lomo::SyntheticTask t;
  t.kind = lomo::TaskKind::Regression;
  t.input_dim = input_dim;
  t.dataset_seed = seed;
  return t;
}

inline lomo::SyntheticTask copy_task(int seq_len = 8, int vocab = 64, std::uint64_t seed = 0) {
  lomo::SyntheticTask t;
  t.kind = lomo::TaskKind::SequenceCopy;
  t.seq_len = seq_len;
  t.vocab = vocab;
  t.dataset_seed = seed;
  return t;
}

// y = w x with a single 1x1 weight and the half-squared-error loss.
inline std::unique_ptr<Model> scalar_linear(double w) {
  lomo::ModelConfig c = mlp_config(1, 1, 0, 1);
  c.bias = false;
  auto m = lomo::build_model(c);
  m->parameters()[0].value.set(0, w);
  return m;
}

inline Batch scalar_batch(double x, double t) {
  return {Tensor({1, 1}, {x}), Tensor({1, 1}, {t})};
}

}  // namespace oracle
