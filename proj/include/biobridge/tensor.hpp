#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major float64 tensor. `grad` accumulates across backward calls
// (+=); `adj` is per-backward scratch owned by Tape::backward.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  long node_id = -1;  // index of the tape node that produced it, -1 for leaves

  std::vector<double> adj;

  Tensor() = default;
  explicit Tensor(Shape s, bool rg = false)
      : shape(std::move(s)),
        values(shape_numel(shape), 0.0),
        grad(values.size(), 0.0),
        requires_grad(rg) {}

  std::size_t numel() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : 0); }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, bool rg = false) {
  return std::make_shared<Tensor>(std::move(s), rg);
}

inline TensorPtr make_tensor(Shape s, std::vector<double> vals, bool rg = false) {
  auto t = std::make_shared<Tensor>(std::move(s), rg);
  if (t->numel() != vals.size())
    throw std::invalid_argument("make_tensor: " + std::to_string(vals.size()) +
                                " values for shape " + shape_str(t->shape));
  t->values = std::move(vals);
  return t;
}

inline TensorPtr make_scalar(double v, bool rg = false) {
  auto t = std::make_shared<Tensor>(Shape{1}, rg);
  t->values[0] = v;
  return t;
}

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order by construction; backward replays them in reverse.
class Tape {
 public:
  struct Node {
    TensorPtr out;
    std::vector<TensorPtr> in;
    std::function<void()> back;
  };

  std::vector<Node> nodes;

  void clear() { nodes.clear(); }
  std::size_t size() const { return nodes.size(); }

  void record(TensorPtr out, std::vector<TensorPtr> in, std::function<void()> back) {
    out->node_id = static_cast<long>(nodes.size());
    nodes.push_back(Node{std::move(out), std::move(in), std::move(back)});
  }

  // Accumulates d(loss)/d(tensor) into .grad of every tensor on this tape
  // that requires grad. Adjoints are rebuilt from scratch each call, so
  // calling twice without zero_grad doubles every gradient exactly.
  void backward(const TensorPtr& loss) {
    if (loss->numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss->shape));
    for (auto& n : nodes) {
      n.out->adj.assign(n.out->numel(), 0.0);
      for (auto& i : n.in) i->adj.assign(i->numel(), 0.0);
    }
    loss->adj.assign(1, 1.0);
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
      if (it->back) it->back();
    }
    std::unordered_set<const Tensor*> flushed;
    auto flush = [&](const TensorPtr& t) {
      if (!t->requires_grad || t->adj.empty()) return;
      if (!flushed.insert(t.get()).second) return;
      for (std::size_t i = 0; i < t->numel(); ++i) t->grad[i] += t->adj[i];
    };
    flush(loss);
    for (auto& n : nodes) {
      flush(n.out);
      for (auto& i : n.in) flush(i);
    }
  }
};

namespace detail {

inline TensorPtr finish(Tape& tape, TensorPtr out, std::vector<TensorPtr> in,
                        std::function<void()> back) {
  bool rg = false;
  for (const auto& t : in) rg = rg || t->requires_grad;
  out->requires_grad = rg;
  if (rg) tape.record(out, std::move(in), std::move(back));
  return out;
}

// c[m x n] = a[m x k] * b[k x n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void acc_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                   std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void acc_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace detail

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->shape[1] != b->shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                                shape_str(b->shape));
  const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = make_tensor({m, n});
  detail::mm_nn(a->values.data(), b->values.data(), out->values.data(), m, k, n);
  return detail::finish(tape, out, {a, b}, [a, b, out, m, k, n] {
    detail::acc_nt(out->adj.data(), b->values.data(), a->adj.data(), m, n, k);
    detail::acc_tn(a->values.data(), out->adj.data(), b->adj.data(), k, m, n);
  });
}

inline TensorPtr transpose(Tape& tape, const TensorPtr& x) {
  if (x->rank() != 2)
    throw std::invalid_argument("transpose: need rank-2 tensor, got " + shape_str(x->shape));
  const std::size_t r = x->shape[0], c = x->shape[1];
  auto out = make_tensor({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out->values[j * r + i] = x->values[i * c + j];
  return detail::finish(tape, out, {x}, [x, out, r, c] {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) x->adj[i * c + j] += out->adj[j * r + i];
  });
}

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  auto out = make_tensor(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = a->values[i] + b->values[i];
  return detail::finish(tape, out, {a, b}, [a, b, out] {
    for (std::size_t i = 0; i < out->numel(); ++i) {
      a->adj[i] += out->adj[i];
      b->adj[i] += out->adj[i];
    }
  });
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  auto out = make_tensor(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = a->values[i] - b->values[i];
  return detail::finish(tape, out, {a, b}, [a, b, out] {
    for (std::size_t i = 0; i < out->numel(); ++i) {
      a->adj[i] += out->adj[i];
      b->adj[i] -= out->adj[i];
    }
  });
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  auto out = make_tensor(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = a->values[i] * b->values[i];
  return detail::finish(tape, out, {a, b}, [a, b, out] {
    for (std::size_t i = 0; i < out->numel(); ++i) {
      a->adj[i] += out->adj[i] * b->values[i];
      b->adj[i] += out->adj[i] * a->values[i];
    }
  });
}

inline TensorPtr scale(Tape& tape, const TensorPtr& x, double c) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->values[i] = x->values[i] * c;
  return detail::finish(tape, out, {x}, [x, out, c] {
    for (std::size_t i = 0; i < out->numel(); ++i) x->adj[i] += out->adj[i] * c;
  });
}

inline TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape target) {
  if (shape_numel(target) != x->numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x->shape) + " as " +
                                shape_str(target));
  auto out = make_tensor(std::move(target));
  out->values = x->values;
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) x->adj[i] += out->adj[i];
  });
}

// Multiplies every entry by a scalar tensor, so the factor stays trainable.
inline TensorPtr scale_by(Tape& tape, const TensorPtr& x, const TensorPtr& s) {
  if (s->numel() != 1)
    throw std::invalid_argument("scale_by: factor must be scalar, got " + shape_str(s->shape));
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i) out->values[i] = x->values[i] * s->values[0];
  return detail::finish(tape, out, {x, s}, [x, s, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) {
      x->adj[i] += out->adj[i] * s->values[0];
      s->adj[0] += out->adj[i] * x->values[i];
    }
  });
}

// [R x C] + [C], broadcast over rows
inline TensorPtr add_rowvec(Tape& tape, const TensorPtr& x, const TensorPtr& v) {
  if (x->rank() != 2 || v->rank() != 1 || x->shape[1] != v->shape[0])
    throw std::invalid_argument("add_rowvec: shapes " + shape_str(x->shape) + " and " +
                                shape_str(v->shape));
  const std::size_t r = x->shape[0], c = x->shape[1];
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out->values[i * c + j] = x->values[i * c + j] + v->values[j];
  return detail::finish(tape, out, {x, v}, [x, v, out, r, c] {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        x->adj[i * c + j] += out->adj[i * c + j];
        v->adj[j] += out->adj[i * c + j];
      }
  });
}

// Softmax over the last dimension, max-subtracted. Slices sum to 1.
inline TensorPtr softmax_lastdim(Tape& tape, const TensorPtr& x) {
  if (x->shape.empty() || x->shape.back() < 1)
    throw std::invalid_argument("softmax_lastdim: need a last dimension of size >= 1");
  if (!x->all_finite()) throw std::domain_error("softmax_lastdim: non-finite input");
  const std::size_t n = x->shape.back();
  const std::size_t slices = x->numel() / n;
  auto out = make_tensor(x->shape);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* xi = x->values.data() + s * n;
    double* yi = out->values.data() + s * n;
    double m = xi[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - m);
      sum += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) yi[j] /= sum;
  }
  return detail::finish(tape, out, {x}, [x, out, n, slices] {
    for (std::size_t s = 0; s < slices; ++s) {
      const double* y = out->values.data() + s * n;
      const double* dy = out->adj.data() + s * n;
      double* dx = x->adj.data() + s * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

inline TensorPtr log_softmax_lastdim(Tape& tape, const TensorPtr& x) {
  if (x->shape.empty() || x->shape.back() < 1)
    throw std::invalid_argument("log_softmax_lastdim: need a last dimension of size >= 1");
  if (!x->all_finite()) throw std::domain_error("log_softmax_lastdim: non-finite input");
  const std::size_t n = x->shape.back();
  const std::size_t slices = x->numel() / n;
  auto out = make_tensor(x->shape);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* xi = x->values.data() + s * n;
    double* yi = out->values.data() + s * n;
    double m = xi[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(xi[j] - m);
    const double lse = m + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) yi[j] = xi[j] - lse;
  }
  return detail::finish(tape, out, {x}, [x, out, n, slices] {
    for (std::size_t s = 0; s < slices; ++s) {
      const double* y = out->values.data() + s * n;
      const double* dy = out->adj.data() + s * n;
      double* dx = x->adj.data() + s * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) dx[j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

// Per-slice normalization to zero mean / unit variance, then affine.
inline TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain,
                            const TensorPtr& bias, double eps) {
  if (x->shape.empty()) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = x->shape.back();
  if (gain->numel() != d || bias->numel() != d)
    throw std::invalid_argument("layer_norm: gain/bias must have length " + std::to_string(d));
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t slices = x->numel() / d;
  auto out = make_tensor(x->shape);
  auto xhat = std::make_shared<std::vector<double>>(x->numel());
  auto inv_sd = std::make_shared<std::vector<double>>(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* xi = x->values.data() + s * d;
    double* yi = out->values.data() + s * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double isd = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[s] = isd;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mu) * isd;
      (*xhat)[s * d + j] = h;
      yi[j] = h * gain->values[j] + bias->values[j];
    }
  }
  return detail::finish(tape, out, {x, gain, bias}, [x, gain, bias, out, xhat, inv_sd, d, slices] {
    const double dd = static_cast<double>(d);
    for (std::size_t s = 0; s < slices; ++s) {
      const double* dy = out->adj.data() + s * d;
      const double* h = xhat->data() + s * d;
      double* dx = x->adj.data() + s * d;
      const double isd = (*inv_sd)[s];
      double sum_dh = 0.0, sum_dh_h = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dh = dy[j] * gain->values[j];
        sum_dh += dh;
        sum_dh_h += dh * h[j];
        gain->adj[j] += dy[j] * h[j];
        bias->adj[j] += dy[j];
      }
      for (std::size_t j = 0; j < d; ++j) {
        const double dh = dy[j] * gain->values[j];
        dx[j] += isd * (dh - sum_dh / dd - h[j] * sum_dh_h / dd);
      }
    }
  });
}

inline TensorPtr gelu(Tape& tape, const TensorPtr& x) {
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kBeta = 0.044715;
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i) {
    const double v = x->values[i];
    out->values[i] = 0.5 * v * (1.0 + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) {
      const double v = x->values[i];
      const double t = std::tanh(kAlpha * (v + kBeta * v * v * v));
      const double dt = (1.0 - t * t) * kAlpha * (1.0 + 3.0 * kBeta * v * v);
      x->adj[i] += out->adj[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

inline TensorPtr sigmoid(Tape& tape, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i) {
    const double v = x->values[i];
    out->values[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) {
      const double y = out->values[i];
      x->adj[i] += out->adj[i] * y * (1.0 - y);
    }
  });
}

inline TensorPtr logv(Tape& tape, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i) {
    if (x->values[i] <= 0.0) throw std::domain_error("logv: non-positive input");
    out->values[i] = std::log(x->values[i]);
  }
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) x->adj[i] += out->adj[i] / x->values[i];
  });
}

inline TensorPtr expv(Tape& tape, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i) out->values[i] = std::exp(x->values[i]);
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) x->adj[i] += out->adj[i] * out->values[i];
  });
}

inline TensorPtr recip(Tape& tape, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i) {
    if (x->values[i] == 0.0) throw std::domain_error("recip: division by zero");
    out->values[i] = 1.0 / x->values[i];
  }
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i)
      x->adj[i] -= out->adj[i] * out->values[i] * out->values[i];
  });
}

// Gradient passes only through strictly interior points.
inline TensorPtr clampv(Tape& tape, const TensorPtr& x, double lo, double hi) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->numel(); ++i)
    out->values[i] = std::min(std::max(x->values[i], lo), hi);
  return detail::finish(tape, out, {x}, [x, out, lo, hi] {
    for (std::size_t i = 0; i < x->numel(); ++i)
      if (x->values[i] > lo && x->values[i] < hi) x->adj[i] += out->adj[i];
  });
}

inline TensorPtr embedding_rows(Tape& tape, const TensorPtr& table,
                                const std::vector<int>& ids) {
  if (table->rank() != 2)
    throw std::invalid_argument("embedding_rows: table must be rank 2");
  const std::size_t v = table->shape[0], d = table->shape[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::out_of_range("embedding_rows: id " + std::to_string(id) + " outside table of " +
                              std::to_string(v));
  auto out = make_tensor({ids.size(), d});
  for (std::size_t l = 0; l < ids.size(); ++l)
    std::copy_n(table->values.data() + static_cast<std::size_t>(ids[l]) * d, d,
                out->values.data() + l * d);
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return detail::finish(tape, out, {table}, [table, out, ids_copy, d] {
    for (std::size_t l = 0; l < ids_copy->size(); ++l) {
      double* dst = table->adj.data() + static_cast<std::size_t>((*ids_copy)[l]) * d;
      const double* src = out->adj.data() + l * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

inline TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t c = parts[0]->cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->cols() != c)
      throw std::invalid_argument("concat_rows: inconsistent shapes");
    r += p->shape[0];
  }
  auto out = make_tensor({r, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->values.begin(), p->values.end(), out->values.begin() + off);
    off += p->numel();
  }
  return detail::finish(tape, out, parts, [parts, out] {
    std::size_t off = 0;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < p->numel(); ++i) p->adj[i] += out->adj[off + i];
      off += p->numel();
    }
  });
}

inline TensorPtr slice_rows(Tape& tape, const TensorPtr& x, std::size_t r0, std::size_t nrows) {
  if (x->rank() != 2 || r0 + nrows > x->shape[0])
    throw std::invalid_argument("slice_rows: rows [" + std::to_string(r0) + ", " +
                                std::to_string(r0 + nrows) + ") out of " + shape_str(x->shape));
  const std::size_t c = x->shape[1];
  auto out = make_tensor({nrows, c});
  std::copy_n(x->values.data() + r0 * c, nrows * c, out->values.data());
  return detail::finish(tape, out, {x}, [x, out, r0, nrows, c] {
    for (std::size_t i = 0; i < nrows * c; ++i) x->adj[r0 * c + i] += out->adj[i];
  });
}

inline TensorPtr slice_cols(Tape& tape, const TensorPtr& x, std::size_t c0, std::size_t ncols) {
  if (x->rank() != 2 || c0 + ncols > x->shape[1])
    throw std::invalid_argument("slice_cols: cols out of range for " + shape_str(x->shape));
  const std::size_t r = x->shape[0], c = x->shape[1];
  auto out = make_tensor({r, ncols});
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x->values.data() + i * c + c0, ncols, out->values.data() + i * ncols);
  return detail::finish(tape, out, {x}, [x, out, c0, ncols, r, c] {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < ncols; ++j) x->adj[i * c + c0 + j] += out->adj[i * ncols + j];
  });
}

inline TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t r = parts[0]->rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->shape[0] != r)
      throw std::invalid_argument("concat_cols: inconsistent shapes");
    c += p->shape[1];
  }
  auto out = make_tensor({r, c});
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p->shape[1];
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p->values.data() + i * pc, pc, out->values.data() + i * c + coff);
    coff += pc;
  }
  return detail::finish(tape, out, parts, [parts, out, r, c] {
    std::size_t coff = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p->shape[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < pc; ++j) p->adj[i * pc + j] += out->adj[i * c + coff + j];
      coff += pc;
    }
  });
}

inline TensorPtr mean_rows(Tape& tape, const TensorPtr& x) {
  if (x->rank() != 2) throw std::invalid_argument("mean_rows: need rank-2 tensor");
  const std::size_t r = x->shape[0], c = x->shape[1];
  auto out = make_tensor({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out->values[j] += x->values[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out->values[j] /= static_cast<double>(r);
  return detail::finish(tape, out, {x}, [x, out, r, c] {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) x->adj[i * c + j] += out->adj[j] / static_cast<double>(r);
  });
}

inline TensorPtr sum_all(Tape& tape, const TensorPtr& x) {
  auto out = make_tensor({1});
  double s = 0.0;
  for (double v : x->values) s += v;
  out->values[0] = s;
  return detail::finish(tape, out, {x}, [x, out] {
    for (std::size_t i = 0; i < x->numel(); ++i) x->adj[i] += out->adj[0];
  });
}

inline TensorPtr mean_all(Tape& tape, const TensorPtr& x) {
  if (x->numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  auto out = make_tensor({1});
  double s = 0.0;
  for (double v : x->values) s += v;
  out->values[0] = s / static_cast<double>(x->numel());
  return detail::finish(tape, out, {x}, [x, out] {
    const double inv = 1.0 / static_cast<double>(x->numel());
    for (std::size_t i = 0; i < x->numel(); ++i) x->adj[i] += out->adj[0] * inv;
  });
}

inline TensorPtr stack_scalars(Tape& tape, const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_scalars: empty list");
  auto out = make_tensor({xs.size()});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->numel() != 1) throw std::invalid_argument("stack_scalars: inputs must be scalars");
    out->values[i] = xs[i]->values[0];
  }
  return detail::finish(tape, out, xs, [xs, out] {
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i]->adj[0] += out->adj[i];
  });
}

// Max of a vector; subgradient goes to the first argmax.
inline TensorPtr maxv(Tape& tape, const TensorPtr& x) {
  if (x->numel() == 0) throw std::invalid_argument("maxv: empty tensor");
  std::size_t arg = 0;
  for (std::size_t i = 1; i < x->numel(); ++i)
    if (x->values[i] > x->values[arg]) arg = i;
  auto out = make_scalar(x->values[arg]);
  return detail::finish(tape, out, {x}, [x, out, arg] { x->adj[arg] += out->adj[0]; });
}

// Picks x[r][c] for each (r, c) pair into a vector.
inline TensorPtr select_entries(Tape& tape, const TensorPtr& x,
                                const std::vector<std::pair<std::size_t, std::size_t>>& idx) {
  if (x->rank() != 2) throw std::invalid_argument("select_entries: need rank-2 tensor");
  const std::size_t c = x->shape[1];
  auto out = make_tensor({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i].first >= x->shape[0] || idx[i].second >= c)
      throw std::out_of_range("select_entries: index out of range");
    out->values[i] = x->values[idx[i].first * c + idx[i].second];
  }
  auto idx_copy = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(idx);
  return detail::finish(tape, out, {x}, [x, out, idx_copy, c] {
    for (std::size_t i = 0; i < idx_copy->size(); ++i)
      x->adj[(*idx_copy)[i].first * c + (*idx_copy)[i].second] += out->adj[i];
  });
}

// a . b / (|a| |b|), both treated as flat vectors.
inline TensorPtr cosine_sim(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->numel() != b->numel())
    throw std::invalid_argument("cosine_sim: size mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < a->numel(); ++i) {
    dot += a->values[i] * b->values[i];
    na2 += a->values[i] * a->values[i];
    nb2 += b->values[i] * b->values[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) throw std::invalid_argument("cosine_sim: zero-norm input");
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double cosv = dot / (na * nb);
  auto out = make_scalar(cosv);
  return detail::finish(tape, out, {a, b}, [a, b, out, na, nb, cosv] {
    const double g = out->adj[0];
    for (std::size_t i = 0; i < a->numel(); ++i) {
      a->adj[i] += g * (b->values[i] / (na * nb) - cosv * a->values[i] / (na * na));
      b->adj[i] += g * (a->values[i] / (na * nb) - cosv * b->values[i] / (nb * nb));
    }
  });
}

// Scaled dot-product attention. Mask rows follow queries, columns follow
// keys; true = attend. A row with no allowed key is an error.
inline TensorPtr attention(Tape& tape, const TensorPtr& queries, const TensorPtr& keys,
                           const TensorPtr& vals, const std::vector<std::uint8_t>* mask = nullptr) {
  if (queries->rank() != 2 || keys->rank() != 2 || vals->rank() != 2)
    throw std::invalid_argument("attention: inputs must be rank 2");
  if (queries->shape[1] != keys->shape[1])
    throw std::invalid_argument("attention: query/key dim mismatch " + shape_str(queries->shape) +
                                " vs " + shape_str(keys->shape));
  if (keys->shape[0] != vals->shape[0])
    throw std::invalid_argument("attention: key/value count mismatch");
  const std::size_t lq = queries->shape[0], lk = keys->shape[0], d = queries->shape[1];
  bool use_mask = false;
  if (mask != nullptr) {
    if (mask->size() != lq * lk) throw std::invalid_argument("attention: mask size mismatch");
    for (std::size_t i = 0; i < lq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < lk; ++j) any = any || (*mask)[i * lk + j];
      if (!any)
        throw std::invalid_argument("attention: fully masked query row " + std::to_string(i));
    }
    for (std::size_t i = 0; i < lq * lk && !use_mask; ++i) use_mask = !(*mask)[i];
  }
  auto logits = scale(tape, matmul(tape, queries, transpose(tape, keys)),
                      1.0 / std::sqrt(static_cast<double>(d)));
  if (use_mask) {
    auto bias = make_tensor({lq, lk});
    for (std::size_t i = 0; i < lq * lk; ++i) bias->values[i] = (*mask)[i] ? 0.0 : -1e30;
    logits = add(tape, logits, bias);
  }
  auto weights = softmax_lastdim(tape, logits);
  return matmul(tape, weights, vals);
}

// Central-difference gradient check. Rebuilds the graph per evaluation, so
// the builder must be a pure function of x's values.
using LossBuilder = std::function<TensorPtr(Tape&, const TensorPtr&)>;

inline double fd_check(const LossBuilder& f, const TensorPtr& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("fd_check: step must be positive");
  const bool saved_rg = x->requires_grad;
  x->requires_grad = true;
  std::vector<double> saved_grad = x->grad;
  x->zero_grad();
  {
    Tape tape;
    auto loss = f(tape, x);
    tape.backward(loss);
  }
  std::vector<double> analytic = x->grad;
  x->grad = std::move(saved_grad);
  x->requires_grad = saved_rg;

  auto eval = [&](std::size_t i, double delta) {
    const double keep = x->values[i];
    x->values[i] = keep + delta;
    Tape tape;
    double v = f(tape, x)->values[0];
    x->values[i] = keep;
    return v;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < x->numel(); ++i) {
    const double fp = eval(i, step);
    const double fm = eval(i, -step);
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace bb
