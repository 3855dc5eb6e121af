#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "icllab/errors.hpp"
#include "icllab/numerics/tensor.hpp"

// Differentiable primitives. Every op computes its value eagerly and, when a
// tape is active on this thread and at least one input requires a gradient,
// records a local gradient rule on that tape. Broadcasting is limited to
// scalar multiplication and the explicit row-wise `add_bias`.
namespace icl::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, const char* op, bool tracked) {
  check_finite(values, op);
  return Tensor<T>(std::move(shape), std::move(values), tracked);
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> grad_matrix(const std::shared_ptr<TensorNode<T>>& node, std::size_t rows,
                      std::size_t cols) {
  node->ensure_grad();
  return MatMap<T>(node->grad.data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

template <typename T>
void require_rank2(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const auto m = a.rows(), n = b.cols(), k = a.cols();
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
  auto* tape = detail::recording({&a, &b});
  auto y = detail::make_output<T>({m, n}, std::move(out), "matmul", tape != nullptr);
  if (tape) {
    tape->record("matmul", y.node(), [an = a.node(), bn = b.node(), yn = y.node(), m, n, k] {
      detail::ConstMatMap<T> g(yn->grad.data(), m, n);
      if (an->requires_grad) {
        detail::grad_matrix(an, m, k).noalias() +=
            g * detail::ConstMatMap<T>(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        detail::grad_matrix(bn, k, n).noalias() +=
            detail::ConstMatMap<T>(an->data.data(), m, k).transpose() * g;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank2(a, "transpose");
  const auto m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), n, m) = detail::as_matrix(a).transpose();
  auto* tape = detail::recording({&a});
  auto y = detail::make_output<T>({n, m}, std::move(out), "transpose", tape != nullptr);
  if (tape) {
    tape->record("transpose", y.node(), [an = a.node(), yn = y.node(), m, n] {
      detail::grad_matrix(an, m, n) += detail::ConstMatMap<T>(yn->grad.data(), n, m).transpose();
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto* tape = detail::recording({&a});
  auto y = Tensor<T>(std::move(shape), a.values(), tape != nullptr);
  if (tape) {
    tape->record("reshape", y.node(), [an = a.node(), yn = y.node()] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
    });
  }
  return y;
}

namespace detail {

// Shared driver for same-shape binary elementwise ops with derivative rules
// da = g * dfa(a, b), db = g * dfb(a, b).
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA dfa, DB dfb) {
  require_same_shape(a, b, op);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  auto* tape = recording({&a, &b});
  auto y = make_output<T>(a.shape(), std::move(out), op, tape != nullptr);
  if (tape) {
    tape->record(op, y.node(), [an = a.node(), bn = b.node(), yn = y.node(), dfa, dfb] {
      const auto& g = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * dfa(an->data[i], bn->data[i]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * dfb(an->data[i], bn->data[i]);
      }
    });
  }
  return y;
}

// Elementwise unary op; the derivative may use the input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, const char* op, F f, D df) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto* tape = recording({&a});
  auto y = make_output<T>(a.shape(), std::move(out), op, tape != nullptr);
  if (tape) {
    tape->record(op, y.node(), [an = a.node(), yn = y.node(), df] {
      an->ensure_grad();
      const auto& g = yn->grad;
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * df(an->data[i], yn->data[i]);
    });
  }
  return y;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(
      a, "scale", [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid", [](T x) { return T{1} / (T{1} + std::exp(-x)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary(
      a, "silu", [](T x) { return x / (T{1} + std::exp(-x)); },
      [](T x, T) {
        const T s = T{1} / (T{1} + std::exp(-x));
        return s * (T{1} + x * (T{1} - s));
      });
}

/// Adds the row vector `bias` to every row of `x`. This is the only
/// broadcasting op besides `scale`.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const auto m = x.rows(), n = x.cols();
  std::vector<T> out(x.values());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.values()[c];
  auto* tape = detail::recording({&x, &bias});
  auto y = detail::make_output<T>(x.shape(), std::move(out), "add_bias", tape != nullptr);
  if (tape) {
    tape->record("add_bias", y.node(), [xn = x.node(), bn = bias.node(), yn = y.node(), m, n] {
      const auto& g = yn->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) bn->grad[c] += g[r * n + c];
      }
    });
  }
  return y;
}

/// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int max_axis = static_cast<int>(x.rank()) - 1;
  if (axis < 0 || axis > max_axis) throw DimensionError("softmax: invalid axis");
  const auto m = x.rows(), n = x.cols();
  const bool along_rows = (x.rank() == 1) || axis == 1;
  // Slices: along_rows -> m slices of length n with stride 1; else n slices of length m, stride n.
  const std::size_t n_slices = along_rows ? m : n;
  const std::size_t len = along_rows ? n : m;
  const std::size_t stride = along_rows ? 1 : n;
  auto base = [&](std::size_t s) { return along_rows ? s * n : s; };
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t s = 0; s < n_slices; ++s) {
    const std::size_t b = base(s);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[b + i * stride]);
    T z = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const T e = std::exp(xv[b + i * stride] - mx);
      out[b + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[b + i * stride] /= z;
  }
  auto* tape = detail::recording({&x});
  auto y = detail::make_output<T>(x.shape(), std::move(out), "softmax", tape != nullptr);
  if (tape) {
    tape->record("softmax", y.node(), [xn = x.node(), yn = y.node(), n_slices, len, stride, along_rows, n] {
      xn->ensure_grad();
      const auto& g = yn->grad;
      const auto& p = yn->data;
      for (std::size_t s = 0; s < n_slices; ++s) {
        const std::size_t b = along_rows ? s * n : s;
        T dot = 0;
        for (std::size_t i = 0; i < len; ++i) dot += g[b + i * stride] * p[b + i * stride];
        for (std::size_t i = 0; i < len; ++i) {
          const auto j = b + i * stride;
          xn->grad[j] += p[j] * (g[j] - dot);
        }
      }
    });
  }
  return y;
}

/// Mean negative log-softmax probability of `targets` under row-wise logits.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  const auto b = logits.rows(), v = logits.cols();
  if (targets.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(b) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(v) + ")");
    }
  }
  const auto& lv = logits.values();
  std::vector<T> probs(lv.size());
  T total = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = lv.data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::size_t c = 0; c < v; ++c) z += (probs[r * v + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    total += -(row[targets[r]] - mx - std::log(z));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  auto* tape = detail::recording({&logits});
  auto y = detail::make_output<T>({1}, {total / static_cast<T>(b)}, "cross_entropy", tape != nullptr);
  if (tape) {
    tape->record("cross_entropy", y.node(),
                 [ln = logits.node(), yn = y.node(), probs = std::move(probs), tgt = std::move(tgt), b, v] {
                   ln->ensure_grad();
                   const T g = yn->grad[0] / static_cast<T>(b);
                   for (std::size_t r = 0; r < b; ++r) {
                     for (std::size_t c = 0; c < v; ++c) ln->grad[r * v + c] += g * probs[r * v + c];
                     ln->grad[r * v + tgt[r]] -= g;
                   }
                 });
  }
  return y;
}

/// Row-wise RMS normalization followed by a per-column gain.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
  if (gain.rank() != 1 || gain.cols() != x.cols()) {
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const auto m = x.rows(), n = x.cols();
  const auto& xv = x.values();
  const auto& gv = gain.values();
  std::vector<T> out(xv.size());
  std::vector<T> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    T ms = 0;
    for (std::size_t c = 0; c < n; ++c) ms += xv[r * n + c] * xv[r * n + c];
    inv[r] = T{1} / std::sqrt(ms / static_cast<T>(n) + eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] * inv[r] * gv[c];
  }
  auto* tape = detail::recording({&x, &gain});
  auto y = detail::make_output<T>(x.shape(), std::move(out), "rmsnorm", tape != nullptr);
  if (tape) {
    tape->record("rmsnorm", y.node(), [xn = x.node(), gn = gain.node(), yn = y.node(), inv = std::move(inv), m, n] {
      const auto& g = yn->grad;
      const auto& xv = xn->data;
      const auto& gv = gn->data;
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) gn->grad[c] += g[r * n + c] * xv[r * n + c] * inv[r];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < m; ++r) {
          // y_c = x_c * s * g_c with s = (mean(x^2) + eps)^-1/2
          T dot = 0;
          for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * gv[c] * xv[r * n + c];
          const T s = inv[r];
          const T coeff = s * s * s * dot / static_cast<T>(n);
          for (std::size_t c = 0; c < n; ++c)
            xn->grad[r * n + c] += g[r * n + c] * gv[c] * s - coeff * xv[r * n + c];
        }
      }
    });
  }
  return y;
}

/// Gathers rows of `table` ([vocab x d]) for each id.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const auto v = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(v) + ")");
    }
    std::copy_n(table.values().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  auto* tape = detail::recording({&table});
  auto y = detail::make_output<T>({ids.size(), d}, std::move(out), "embedding", tape != nullptr);
  if (tape) {
    tape->record("embedding", y.node(), [tn = table.node(), yn = y.node(), idv = std::move(idv), d] {
      tn->ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) tn->grad[idv[i] * d + c] += yn->grad[i * d + c];
    });
  }
  return y;
}

/// Rows `rows` of x, in order (duplicates allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  detail::require_rank2(x, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  const auto m = x.rows(), n = x.cols();
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw IndexError("gather_rows: row out of range");
    std::copy_n(x.values().begin() + rows[i] * n, n, out.begin() + i * n);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  auto* tape = detail::recording({&x});
  auto y = detail::make_output<T>({rows.size(), n}, std::move(out), "gather_rows", tape != nullptr);
  if (tape) {
    tape->record("gather_rows", y.node(), [xn = x.node(), yn = y.node(), rv = std::move(rv), n] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < rv.size(); ++i)
        for (std::size_t c = 0; c < n; ++c) xn->grad[rv[i] * n + c] += yn->grad[i * n + c];
    });
  }
  return y;
}

/// Half-open range [begin, end) along `axis` of a matrix (axis 0 = rows).
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  detail::require_rank2(x, "slice");
  const auto m = x.rows(), n = x.cols();
  const auto extent = axis == 0 ? m : n;
  if ((axis != 0 && axis != 1) || begin >= end || end > extent) {
    throw DimensionError("slice: invalid range on " + shape_str(x.shape()));
  }
  const auto om = axis == 0 ? end - begin : m;
  const auto on = axis == 1 ? end - begin : n;
  const auto r0 = axis == 0 ? begin : 0;
  const auto c0 = axis == 1 ? begin : 0;
  std::vector<T> out(om * on);
  for (std::size_t r = 0; r < om; ++r)
    std::copy_n(x.values().begin() + (r + r0) * n + c0, on, out.begin() + r * on);
  auto* tape = detail::recording({&x});
  auto y = detail::make_output<T>({om, on}, std::move(out), "slice", tape != nullptr);
  if (tape) {
    tape->record("slice", y.node(), [xn = x.node(), yn = y.node(), om, on, r0, c0, n] {
      xn->ensure_grad();
      for (std::size_t r = 0; r < om; ++r)
        for (std::size_t c = 0; c < on; ++c) xn->grad[(r + r0) * n + c + c0] += yn->grad[r * on + c];
    });
  }
  return y;
}

/// Concatenates matrices along `axis`.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != 1) throw DimensionError("concat: invalid axis");
  for (const auto& p : parts) detail::require_rank2(p, "concat");
  const auto fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if ((axis == 0 ? p.cols() : p.rows()) != fixed) throw DimensionError("concat: mismatched extents");
    total += axis == 0 ? p.rows() : p.cols();
  }
  const auto om = axis == 0 ? total : fixed;
  const auto on = axis == 1 ? total : fixed;
  std::vector<T> out(om * on);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const auto dst = axis == 0 ? (off + r) * on : r * on + off;
      std::copy_n(p.values().begin() + r * p.cols(), p.cols(), out.begin() + dst);
    }
    off += axis == 0 ? p.rows() : p.cols();
  }
  auto* tape = Tape<T>::active();
  const bool tracked =
      tape && std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
  auto y = detail::make_output<T>({om, on}, std::move(out), "concat", tracked);
  if (tracked) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record("concat", y.node(), [nodes = std::move(nodes), offsets = std::move(offsets), yn = y.node(), axis, on] {
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        auto& p = *nodes[i];
        if (!p.requires_grad) continue;
        p.ensure_grad();
        const auto pr = p.shape[0], pc = p.shape[1];
        for (std::size_t r = 0; r < pr; ++r)
          for (std::size_t c = 0; c < pc; ++c) {
            const auto src = axis == 0 ? (offsets[i] + r) * on + c : r * on + offsets[i] + c;
            p.grad[r * pc + c] += yn->grad[src];
          }
      }
    });
  }
  return y;
}

/// Mean along `axis`; a matrix [m x n] reduces to [n] (axis 0) or [m] (axis 1).
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  const auto m = x.rows(), n = x.cols();
  const bool over_rows = x.rank() == 2 && axis == 0;
  if (axis < 0 || axis >= static_cast<int>(x.rank())) throw DimensionError("mean: invalid axis");
  const auto out_n = x.rank() == 1 ? 1 : (over_rows ? n : m);
  std::vector<T> out(out_n, T{0});
  const auto& xv = x.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[x.rank() == 1 ? 0 : (over_rows ? c : r)] += xv[r * n + c];
  const T denom = static_cast<T>(x.rank() == 1 ? n : (over_rows ? m : n));
  for (auto& v : out) v /= denom;
  auto* tape = detail::recording({&x});
  auto y = detail::make_output<T>({out_n}, std::move(out), "mean", tape != nullptr);
  if (tape) {
    const bool vec = x.rank() == 1;
    tape->record("mean", y.node(), [xn = x.node(), yn = y.node(), m, n, over_rows, vec, denom] {
      xn->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c)
          xn->grad[r * n + c] += yn->grad[vec ? 0 : (over_rows ? c : r)] / denom;
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  auto* tape = detail::recording({&x});
  auto y = detail::make_output<T>({1}, {total}, "sum", tape != nullptr);
  if (tape) {
    tape->record("sum", y.node(), [xn = x.node(), yn = y.node()] {
      xn->ensure_grad();
      for (auto& g : xn->grad) g += yn->grad[0];
    });
  }
  return y;
}

enum class PatchMode { replace, add };

template <typename T>
struct PatchDirective {
  std::size_t row;
  std::size_t col_begin;
  std::vector<T> values;
  PatchMode mode;
};

/// Copy of x with row segments replaced by, or incremented by, constant
/// vectors. Replaced entries receive no gradient.
template <typename T>
Tensor<T> patch(const Tensor<T>& x, const std::vector<PatchDirective<T>>& directives) {
  detail::require_rank2(x, "patch");
  const auto m = x.rows(), n = x.cols();
  std::vector<T> out(x.values());
  std::vector<char> blocked;
  for (const auto& d : directives) {
    if (d.row >= m || d.col_begin + d.values.size() > n) throw DimensionError("patch: out of range");
    for (std::size_t i = 0; i < d.values.size(); ++i) {
      auto& o = out[d.row * n + d.col_begin + i];
      o = d.mode == PatchMode::replace ? d.values[i] : o + d.values[i];
    }
  }
  auto* tape = detail::recording({&x});
  if (tape) {
    blocked.assign(m * n, 0);
    for (const auto& d : directives)
      if (d.mode == PatchMode::replace)
        for (std::size_t i = 0; i < d.values.size(); ++i) blocked[d.row * n + d.col_begin + i] = 1;
  }
  auto y = detail::make_output<T>(x.shape(), std::move(out), "patch", tape != nullptr);
  if (tape) {
    tape->record("patch", y.node(), [xn = x.node(), yn = y.node(), blocked = std::move(blocked)] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < blocked.size(); ++i)
        if (!blocked[i]) xn->grad[i] += yn->grad[i];
    });
  }
  return y;
}

/// Depthwise causal convolution: y[t,c] = sum_j w[j,c] * x[t-j,c].
template <typename T>
Tensor<T> causal_conv(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require_rank2(x, "causal_conv");
  detail::require_rank2(w, "causal_conv");
  if (w.cols() != x.cols()) throw DimensionError("causal_conv: channel mismatch");
  const auto len = x.rows(), ch = x.cols(), width = w.rows();
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<T> out(len * ch, T{0});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < width && j <= t; ++j)
      for (std::size_t c = 0; c < ch; ++c) out[t * ch + c] += wv[j * ch + c] * xv[(t - j) * ch + c];
  auto* tape = detail::recording({&x, &w});
  auto y = detail::make_output<T>({len, ch}, std::move(out), "causal_conv", tape != nullptr);
  if (tape) {
    tape->record("causal_conv", y.node(), [xn = x.node(), wn = w.node(), yn = y.node(), len, ch, width] {
      const auto& g = yn->grad;
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < width && j <= t; ++j)
          for (std::size_t c = 0; c < ch; ++c) {
            const T gt = g[t * ch + c];
            if (xn->requires_grad) xn->grad[(t - j) * ch + c] += gt * wn->data[j * ch + c];
            if (wn->requires_grad) wn->grad[j * ch + c] += gt * xn->data[(t - j) * ch + c];
          }
    });
  }
  return y;
}

/// Fused causal multi-head attention over pre-projected q, k, v ([len x d]).
/// Head h owns columns [h*d/heads, (h+1)*d/heads). Row t attends to keys
/// max(0, t-window+1)..t (all earlier keys when window == 0). The result is
/// the concatenation of per-head context vectors, before any output
/// projection.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t heads, std::size_t window = 0) {
  detail::require_same_shape(q, k, "causal_attention");
  detail::require_same_shape(q, v, "causal_attention");
  detail::require_rank2(q, "causal_attention");
  const auto len = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: heads must divide width");
  const auto hd = d / heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(hd));
  const auto L = static_cast<Eigen::Index>(len);
  const auto H = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  auto lo = [window](std::size_t t) { return window == 0 || t + 1 < window ? std::size_t{0} : t + 1 - window; };

  std::vector<T> out(len * d);
  auto* tape = detail::recording({&q, &k, &v});
  std::vector<T> probs(tape ? heads * len * len : 0);
  detail::RowMat<T> s(L, L);
  for (std::size_t h = 0; h < heads; ++h) {
    detail::ConstStridedMap<T> qh(q.data().data() + h * hd, L, H, stride);
    detail::ConstStridedMap<T> kh(k.data().data() + h * hd, L, H, stride);
    detail::ConstStridedMap<T> vh(v.data().data() + h * hd, L, H, stride);
    s.noalias() = qh * kh.transpose();
    for (std::size_t t = 0; t < len; ++t) {
      const auto a = lo(t);
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = a; j <= t; ++j) mx = std::max(mx, s(t, j) * sc);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        if (j < a || j > t) {
          s(t, j) = 0;
        } else {
          s(t, j) = std::exp(s(t, j) * sc - mx);
          z += s(t, j);
        }
      }
      for (std::size_t j = a; j <= t; ++j) s(t, j) /= z;
    }
    detail::StridedMap<T>(out.data() + h * hd, L, H, stride).noalias() = s * vh;
    if (tape) std::copy_n(s.data(), len * len, probs.begin() + h * len * len);
  }
  auto y = detail::make_output<T>({len, d}, std::move(out), "causal_attention", tape != nullptr);
  if (tape) {
    tape->record("causal_attention", y.node(),
                 [qn = q.node(), kn = k.node(), vn = v.node(), yn = y.node(), probs = std::move(probs),
                  len, d, hd, heads, sc] {
                   const auto L = static_cast<Eigen::Index>(len);
                   const auto H = static_cast<Eigen::Index>(hd);
                   const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
                   qn->ensure_grad();
                   kn->ensure_grad();
                   vn->ensure_grad();
                   detail::RowMat<T> dp(L, L);
                   for (std::size_t h = 0; h < heads; ++h) {
                     detail::ConstMatMap<T> p(probs.data() + h * len * len, L, L);
                     detail::ConstStridedMap<T> g(yn->grad.data() + h * hd, L, H, stride);
                     detail::ConstStridedMap<T> qh(qn->data.data() + h * hd, L, H, stride);
                     detail::ConstStridedMap<T> kh(kn->data.data() + h * hd, L, H, stride);
                     detail::ConstStridedMap<T> vh(vn->data.data() + h * hd, L, H, stride);
                     detail::StridedMap<T>(vn->grad.data() + h * hd, L, H, stride).noalias() +=
                         p.transpose() * g;
                     dp.noalias() = g * vh.transpose();
                     // dS = P ⊙ (dP - rowsum(P ⊙ dP)); masked entries have P = 0.
                     for (Eigen::Index t = 0; t < L; ++t) {
                       const T dot = p.row(t).dot(dp.row(t));
                       dp.row(t) = (p.row(t).array() * (dp.row(t).array() - dot)).matrix() * sc;
                     }
                     detail::StridedMap<T>(qn->grad.data() + h * hd, L, H, stride).noalias() += dp * kh;
                     detail::StridedMap<T>(kn->grad.data() + h * hd, L, H, stride).noalias() +=
                         dp.transpose() * qh;
                   }
                 });
  }
  return y;
}

}  // namespace icl::ops
