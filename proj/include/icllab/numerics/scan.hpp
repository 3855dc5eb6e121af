#pragma once

#include <cstddef>
#include <vector>

#include "icllab/numerics/ops.hpp"

namespace icl::ops {

namespace detail {

struct ScanDims {
  std::size_t len, channels, heads, state, head_width;
};

template <typename T>
ScanDims scan_dims(const Tensor<T>& u, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                   std::size_t heads) {
  require_rank2(u, "selective_scan");
  require_same_shape(u, a, "selective_scan");
  require_same_shape(b, c, "selective_scan");
  require_rank2(b, "selective_scan");
  if (b.rows() != u.rows()) throw DimensionError("selective_scan: B/C rows differ from input rows");
  if (heads == 0 || u.cols() % heads != 0 || b.cols() % heads != 0) {
    throw DimensionError("selective_scan: heads must divide channels and B/C width");
  }
  return {u.rows(), u.cols(), heads, b.cols() / heads, u.cols() / heads};
}

}  // namespace detail

/// Selective diagonal recurrence, evaluated sequentially:
///
///   h[t,c,:] = a[t,c] * h[t-1,c,:] + B[t,head(c),:] * u[t,c]
///   y[t,c]   = <C[t,head(c),:], h[t,c,:]>
///
/// u, a: [len x channels]; B, C: [len x heads*state]; channel c belongs to
/// head c / (channels/heads). The initial state is zero.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& a, const Tensor<T>& b,
                         const Tensor<T>& c, std::size_t heads) {
  const auto dm = detail::scan_dims(u, a, b, c, heads);
  const auto len = dm.len, ch = dm.channels, ns = dm.state, hw = dm.head_width, bw = heads * ns;
  auto* tape = detail::recording({&u, &a, &b, &c});
  // With a tape the full state history is kept for the backward pass.
  std::vector<T> states(tape ? len * ch * ns : ch * ns, T{0});
  std::vector<T> out(len * ch);
  const auto& uv = u.values();
  const auto& av = a.values();
  const auto& bv = b.values();
  const auto& cv = c.values();
  for (std::size_t t = 0; t < len; ++t) {
    T* cur = tape ? states.data() + t * ch * ns : states.data();
    const T* prev = tape ? (t ? states.data() + (t - 1) * ch * ns : nullptr) : states.data();
    for (std::size_t k = 0; k < ch; ++k) {
      const std::size_t hb = t * bw + (k / hw) * ns;
      const T decay = av[t * ch + k];
      const T in = uv[t * ch + k];
      T acc = 0;
      for (std::size_t n = 0; n < ns; ++n) {
        const T p = prev ? prev[k * ns + n] : T{0};
        const T h = decay * p + bv[hb + n] * in;
        cur[k * ns + n] = h;
        acc += cv[hb + n] * h;
      }
      out[t * ch + k] = acc;
    }
  }
  auto y = detail::make_output<T>({len, ch}, std::move(out), "selective_scan", tape != nullptr);
  if (tape) {
    tape->record("selective_scan", y.node(),
                 [un = u.node(), an = a.node(), bn = b.node(), cn = c.node(), yn = y.node(),
                  states = std::move(states), len, ch, ns, hw, bw] {
                   un->ensure_grad();
                   an->ensure_grad();
                   bn->ensure_grad();
                   cn->ensure_grad();
                   const auto& g = yn->grad;
                   // lam holds dLoss/dh[t] while walking t backwards.
                   std::vector<T> lam(ch * ns, T{0});
                   for (std::size_t ti = len; ti-- > 0;) {
                     const T* h = states.data() + ti * ch * ns;
                     const T* hp = ti ? states.data() + (ti - 1) * ch * ns : nullptr;
                     for (std::size_t k = 0; k < ch; ++k) {
                       const std::size_t hb = ti * bw + (k / hw) * ns;
                       const T gy = g[ti * ch + k];
                       const T next_decay = ti + 1 < len ? an->data[(ti + 1) * ch + k] : T{0};
                       const T in = un->data[ti * ch + k];
                       T da = 0, du = 0;
                       for (std::size_t n = 0; n < ns; ++n) {
                         T& l = lam[k * ns + n];
                         l = l * next_decay + gy * cn->data[hb + n];
                         cn->grad[hb + n] += gy * h[k * ns + n];
                         if (hp) da += l * hp[k * ns + n];
                         bn->grad[hb + n] += l * in;
                         du += l * bn->data[hb + n];
                       }
                       an->grad[ti * ch + k] += da;
                       un->grad[ti * ch + k] += du;
                     }
                   }
                 });
  }
  return y;
}

/// Same recurrence as `selective_scan`, evaluated in two passes over
/// fixed-size chunks: each chunk's local states are computed from a zero
/// start together with its cumulative decay, chunk boundary states are then
/// propagated, and outputs are corrected with the carried-in state. Values
/// only; used as an independent evaluation order.
template <typename T>
std::vector<T> selective_scan_chunked(const Tensor<T>& u, const Tensor<T>& a, const Tensor<T>& b,
                                      const Tensor<T>& c, std::size_t heads, std::size_t chunk) {
  const auto dm = detail::scan_dims(u, a, b, c, heads);
  if (chunk == 0) throw ContractError("selective_scan_chunked: chunk must be positive");
  const auto len = dm.len, ch = dm.channels, ns = dm.state, hw = dm.head_width, bw = heads * ns;
  const auto& uv = u.values();
  const auto& av = a.values();
  const auto& bv = b.values();
  const auto& cv = c.values();
  const std::size_t n_chunks = (len + chunk - 1) / chunk;

  // Pass 1: per-chunk local states (zero start) and cumulative decays.
  std::vector<T> local(len * ch * ns);
  std::vector<T> decay(len * ch);
  for (std::size_t ci = 0; ci < n_chunks; ++ci) {
    const auto s = ci * chunk, e = std::min(len, s + chunk);
    for (std::size_t t = s; t < e; ++t)
      for (std::size_t k = 0; k < ch; ++k) {
        const std::size_t hb = t * bw + (k / hw) * ns;
        const T at = av[t * ch + k];
        decay[t * ch + k] = (t == s ? T{1} : decay[(t - 1) * ch + k]) * at;
        for (std::size_t n = 0; n < ns; ++n) {
          const T p = t == s ? T{0} : local[((t - 1) * ch + k) * ns + n];
          local[(t * ch + k) * ns + n] = at * p + bv[hb + n] * uv[t * ch + k];
        }
      }
  }
  // Boundary states entering each chunk.
  std::vector<T> carry(n_chunks * ch * ns, T{0});
  for (std::size_t ci = 1; ci < n_chunks; ++ci) {
    const auto last = ci * chunk - 1;
    for (std::size_t k = 0; k < ch; ++k)
      for (std::size_t n = 0; n < ns; ++n)
        carry[(ci * ch + k) * ns + n] = decay[last * ch + k] * carry[((ci - 1) * ch + k) * ns + n] +
                                        local[(last * ch + k) * ns + n];
  }
  // Pass 2: outputs with the carried-in state.
  std::vector<T> out(len * ch);
  for (std::size_t t = 0; t < len; ++t) {
    const auto ci = t / chunk;
    for (std::size_t k = 0; k < ch; ++k) {
      const std::size_t hb = t * bw + (k / hw) * ns;
      T acc = 0;
      for (std::size_t n = 0; n < ns; ++n) {
        const T h = local[(t * ch + k) * ns + n] + decay[t * ch + k] * carry[(ci * ch + k) * ns + n];
        acc += cv[hb + n] * h;
      }
      out[t * ch + k] = acc;
    }
  }
  return out;
}

}  // namespace icl::ops
