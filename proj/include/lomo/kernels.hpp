#pragma once

// Forward and backward kernels for the ops the tape records. Every kernel
// accumulates in double with a fixed sequential order and rounds its results
// to the requested precision once, at the end.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lomo/error.hpp"
#include "lomo/tensor.hpp"

namespace lomo::kernels {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

inline void require_rank2(const Tensor& t, const char* op, const char* operand) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": " + operand + " must be rank 2, got " +
                     shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

inline void require_row_vector(const Tensor& x, const Tensor& v, const char* op) {
  require_rank2(x, op, "input");
  if (v.size() != x.dim(1)) {
    throw ShapeError(std::string(op) + ": row vector has " + std::to_string(v.size()) +
                     " elements, input has " + std::to_string(x.dim(1)) + " columns");
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

inline std::size_t token_id(double v, std::size_t vocab, const char* op) {
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(vocab)) {
    throw ShapeError(std::string(op) + ": token id " + std::to_string(v) + " outside [0, " +
                     std::to_string(vocab) + ")");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace detail

// y[M,N] = x[M,K] w[K,N]
inline Tensor matmul(const Tensor& x, const Tensor& w, Precision p) {
  detail::require_rank2(x, "matmul", "lhs");
  detail::require_rank2(w, "matmul", "rhs");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, lhs " + shape_string(x.shape()) + " rhs " +
                     shape_string(w.shape()));
  }
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += x[i * k + t] * w[t * n + j];
      y[i * n + j] = acc;
    }
  }
  return Tensor({m, n}, std::move(y), p);
}

inline Tensor matmul_grad_lhs(const Tensor& dy, const Tensor& w, Precision p) {
  const std::size_t m = dy.dim(0), n = dy.dim(1), k = w.dim(0);
  std::vector<double> dx(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += dy[i * n + j] * w[t * n + j];
      dx[i * k + t] = acc;
    }
  }
  return Tensor({m, k}, std::move(dx), p);
}

inline Tensor matmul_grad_rhs(const Tensor& x, const Tensor& dy, Precision p) {
  const std::size_t m = x.dim(0), k = x.dim(1), n = dy.dim(1);
  std::vector<double> dw(k * n);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += x[i * k + t] * dy[i * n + j];
      dw[t * n + j] = acc;
    }
  }
  return Tensor({k, n}, std::move(dw), p);
}

inline Tensor add(const Tensor& a, const Tensor& b, Precision p) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return Tensor(a.shape(), std::move(y), p);
}

inline Tensor mul(const Tensor& a, const Tensor& b, Precision p) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return Tensor(a.shape(), std::move(y), p);
}

// y[i,j] = x[i,j] + b[j]
inline Tensor add_row(const Tensor& x, const Tensor& b, Precision p) {
  detail::require_row_vector(x, b, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] + b[j];
  return Tensor(x.shape(), std::move(y), p);
}

// y[i,j] = x[i,j] * g[j]
inline Tensor mul_row(const Tensor& x, const Tensor& g, Precision p) {
  detail::require_row_vector(x, g, "mul_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] * g[j];
  return Tensor(x.shape(), std::move(y), p);
}

// Column sums of dy, shaped like the row vector `like`.
inline Tensor sum_rows(const Tensor& dy, const Tensor& like, Precision p) {
  const std::size_t m = dy.dim(0), n = dy.dim(1);
  std::vector<double> s(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) s[j] += dy[i * n + j];
  return Tensor(like.shape(), std::move(s), p);
}

inline Tensor mul_row_grad_input(const Tensor& dy, const Tensor& g, Precision p) {
  return mul_row(dy, g, p);
}

inline Tensor mul_row_grad_gain(const Tensor& x, const Tensor& dy, const Tensor& g,
                                Precision p) {
  const std::size_t m = dy.dim(0), n = dy.dim(1);
  std::vector<double> s(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) s[j] += dy[i * n + j] * x[i * n + j];
  return Tensor(g.shape(), std::move(s), p);
}

inline Tensor tanh(const Tensor& x, Precision p) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x[i]);
  return Tensor(x.shape(), std::move(y), p);
}

// Uses the saved output: d tanh = 1 - y^2.
inline Tensor tanh_grad(const Tensor& y, const Tensor& dy, Precision p) {
  std::vector<double> dx(y.size());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * (1.0 - y[i] * y[i]);
  return Tensor(y.shape(), std::move(dx), p);
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x, Precision p) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = detail::gelu(x[i]);
  return Tensor(x.shape(), std::move(y), p);
}

inline Tensor gelu_grad(const Tensor& x, const Tensor& dy, Precision p) {
  std::vector<double> dx(x.size());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * detail::gelu_grad(x[i]);
  return Tensor(x.shape(), std::move(dx), p);
}

// ids: any shape holding integral token ids; table: [V, H]. Output [numel(ids), H].
inline Tensor embedding(const Tensor& ids, const Tensor& table, Precision p) {
  detail::require_rank2(table, "embedding", "table");
  const std::size_t vocab = table.dim(0), h = table.dim(1), n = ids.size();
  std::vector<double> y(n * h);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t id = detail::token_id(ids[r], vocab, "embedding");
    for (std::size_t j = 0; j < h; ++j) y[r * h + j] = table[id * h + j];
  }
  return Tensor({n, h}, std::move(y), p);
}

inline Tensor embedding_grad(const Tensor& ids, const Tensor& table, const Tensor& dy,
                             Precision p) {
  const std::size_t vocab = table.dim(0), h = table.dim(1), n = ids.size();
  std::vector<double> dt(vocab * h, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t id = detail::token_id(ids[r], vocab, "embedding");
    for (std::size_t j = 0; j < h; ++j) dt[id * h + j] += dy[r * h + j];
  }
  return Tensor(table.shape(), std::move(dt), p);
}

// Row-wise normalization to zero mean and unit variance, no affine terms.
inline Tensor layer_norm(const Tensor& x, Precision p) {
  detail::require_rank2(x, "layer_norm", "input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (x[i * n + j] - mean) * inv;
  }
  return Tensor(x.shape(), std::move(y), p);
}

inline Tensor layer_norm_grad(const Tensor& x, const Tensor& dy, Precision p) {
  const std::size_t m = x.dim(0), n = x.dim(1);
  const double nn = static_cast<double>(n);
  std::vector<double> dx(m * n);
  std::vector<double> xhat(n);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j];
    mean /= nn;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[i * n + j] - mean;
      var += d * d;
    }
    var /= nn;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double mean_dy = 0.0, mean_dy_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[j] = (x[i * n + j] - mean) * inv;
      mean_dy += dy[i * n + j];
      mean_dy_xhat += dy[i * n + j] * xhat[j];
    }
    mean_dy /= nn;
    mean_dy_xhat /= nn;
    for (std::size_t j = 0; j < n; ++j) {
      dx[i * n + j] = inv * (dy[i * n + j] - mean_dy - xhat[j] * mean_dy_xhat);
    }
  }
  return Tensor(x.shape(), std::move(dx), p);
}

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
};

namespace detail {

inline void check_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionShape& s) {
  require_rank2(q, "causal_attention", "q");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  if (q.dim(0) != s.batch * s.seq) {
    throw ShapeError("causal_attention: " + std::to_string(q.dim(0)) + " rows, expected batch " +
                     std::to_string(s.batch) + " x seq " + std::to_string(s.seq));
  }
  if (s.heads == 0 || q.dim(1) % s.heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(q.dim(1)) +
                     " not divisible by heads " + std::to_string(s.heads));
  }
}

// Softmax probabilities of row t over keys 0..t for one (batch, head).
inline void attention_probs(const Tensor& q, const Tensor& k, std::size_t b, std::size_t head,
                            std::size_t t, const AttentionShape& s, std::size_t width,
                            std::vector<double>& probs) {
  const std::size_t dh = width / s.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t qrow = (b * s.seq + t) * width + head * dh;
  double mx = -INFINITY;
  for (std::size_t u = 0; u <= t; ++u) {
    const std::size_t krow = (b * s.seq + u) * width + head * dh;
    double dot = 0.0;
    for (std::size_t d = 0; d < dh; ++d) dot += q[qrow + d] * k[krow + d];
    probs[u] = dot * scale;
    if (probs[u] > mx) mx = probs[u];
  }
  double z = 0.0;
  for (std::size_t u = 0; u <= t; ++u) {
    probs[u] = std::exp(probs[u] - mx);
    z += probs[u];
  }
  for (std::size_t u = 0; u <= t; ++u) probs[u] /= z;
}

}  // namespace detail

// Multi-head causal self-attention over rows laid out as [batch*seq, width].
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionShape& s, Precision p) {
  detail::check_attention(q, k, v, s);
  const std::size_t width = q.dim(1), dh = width / s.heads;
  std::vector<double> out(q.size(), 0.0);
  std::vector<double> probs(s.seq);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t head = 0; head < s.heads; ++head) {
      for (std::size_t t = 0; t < s.seq; ++t) {
        detail::attention_probs(q, k, b, head, t, s, width, probs);
        const std::size_t orow = (b * s.seq + t) * width + head * dh;
        for (std::size_t d = 0; d < dh; ++d) {
          double acc = 0.0;
          for (std::size_t u = 0; u <= t; ++u) {
            acc += probs[u] * v[(b * s.seq + u) * width + head * dh + d];
          }
          out[orow + d] = acc;
        }
      }
    }
  }
  return Tensor(q.shape(), std::move(out), p);
}

struct AttentionGrads {
  Tensor dq, dk, dv;
};

inline AttentionGrads causal_attention_grad(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const Tensor& dout, const AttentionShape& s,
                                            Precision p) {
  const std::size_t width = q.dim(1), dh = width / s.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> dq(q.size(), 0.0), dk(q.size(), 0.0), dv(q.size(), 0.0);
  std::vector<double> probs(s.seq), dprobs(s.seq);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t head = 0; head < s.heads; ++head) {
      for (std::size_t t = 0; t < s.seq; ++t) {
        detail::attention_probs(q, k, b, head, t, s, width, probs);
        const std::size_t trow = (b * s.seq + t) * width + head * dh;
        double weighted = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const std::size_t urow = (b * s.seq + u) * width + head * dh;
          double dp = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            dp += dout[trow + d] * v[urow + d];
            dv[urow + d] += probs[u] * dout[trow + d];
          }
          dprobs[u] = dp;
          weighted += probs[u] * dp;
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const std::size_t urow = (b * s.seq + u) * width + head * dh;
          const double ds = probs[u] * (dprobs[u] - weighted) * scale;
          for (std::size_t d = 0; d < dh; ++d) {
            dq[trow + d] += ds * k[urow + d];
            dk[urow + d] += ds * q[trow + d];
          }
        }
      }
    }
  }
  return {Tensor(q.shape(), std::move(dq), p), Tensor(q.shape(), std::move(dk), p),
          Tensor(q.shape(), std::move(dv), p)};
}

// Mean over rows of -log softmax(logits)[target]. Computed in full precision.
inline Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& targets) {
  detail::require_rank2(logits, "softmax_cross_entropy", "logits");
  const std::size_t m = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != m) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(m) + " rows");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t y = detail::token_id(targets[i], vocab, "softmax_cross_entropy");
    double mx = -INFINITY;
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, logits[i * vocab + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits[i * vocab + j] - mx);
    total += std::log(z) + mx - logits[i * vocab + y];
  }
  return Tensor::scalar(total / static_cast<double>(m));
}

inline Tensor softmax_cross_entropy_grad(const Tensor& logits, const Tensor& targets,
                                         double dloss, Precision p) {
  const std::size_t m = logits.dim(0), vocab = logits.dim(1);
  std::vector<double> dx(m * vocab);
  const double coef = dloss / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t y = detail::token_id(targets[i], vocab, "softmax_cross_entropy");
    double mx = -INFINITY;
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, logits[i * vocab + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits[i * vocab + j] - mx);
    for (std::size_t j = 0; j < vocab; ++j) {
      const double prob = std::exp(logits[i * vocab + j] - mx) / z;
      dx[i * vocab + j] = coef * (prob - (j == y ? 1.0 : 0.0));
    }
  }
  return Tensor(logits.shape(), std::move(dx), p);
}

// (1/M) * sum over rows of 0.5 * ||pred_i - target_i||^2, in full precision.
inline Tensor mean_squared_error(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "mean_squared_error");
  const std::size_t m = pred.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    total += 0.5 * d * d;
  }
  return Tensor::scalar(total / static_cast<double>(m));
}

inline Tensor mean_squared_error_grad(const Tensor& pred, const Tensor& target, double dloss,
                                      Precision p) {
  const double coef = dloss / static_cast<double>(pred.dim(0));
  std::vector<double> dx(pred.size());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = coef * (pred[i] - target[i]);
  return Tensor(pred.shape(), std::move(dx), p);
}

}  // namespace lomo::kernels
