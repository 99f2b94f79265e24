#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mvar/mat.hpp"
#include "mvar/opcount.hpp"
#include "mvar/parallel.hpp"
#include "mvar/schedule.hpp"

namespace mvar {

// Multi-head attention projections, all d x d, no biases. Heads split the
// embedding into n_heads contiguous slices. The kernels add no positional
// information of their own -- position enters through the inputs.
template <typename T>
struct AttnParams {
  Mat<T> w_q, w_k, w_v, w_o;
  int n_heads = 1;
};

template <typename T>
AttnParams<T> make_attn_params(int d, int n_heads) {
  if (d < 1 || n_heads < 1 || d % n_heads != 0)
    throw std::invalid_argument("attention: d must be a positive multiple of n_heads");
  AttnParams<T> p;
  p.w_q = Mat<T>(d, d);
  p.w_k = Mat<T>(d, d);
  p.w_v = Mat<T>(d, d);
  p.w_o = Mat<T>(d, d);
  p.n_heads = n_heads;
  return p;
}

// Accumulates, per layer, how much softmax mass each query row spends inside
// its own scale block. One observation per (query, head).
struct AttnMassAccum {
  std::vector<double> intra_sum;
  std::vector<uint64_t> rows;

  void ensure(int n_layers) {
    if ((int)intra_sum.size() < n_layers) {
      intra_sum.resize((size_t)n_layers, 0.0);
      rows.resize((size_t)n_layers, 0);
    }
  }
  void observe(int layer, double intra_frac) {
    ensure(layer + 1);
    intra_sum[(size_t)layer] += intra_frac;
    rows[(size_t)layer] += 1;
  }
  // pooled intra fraction; layer = -1 averages over everything
  double fraction(int layer = -1) const {
    double s = 0;
    uint64_t n = 0;
    for (size_t l = 0; l < intra_sum.size(); ++l) {
      if (layer >= 0 && (int)l != layer) continue;
      s += intra_sum[l];
      n += rows[l];
    }
    return n ? s / (double)n : 0.0;
  }
};

namespace detail {

// softmax with max subtraction; logits in, probabilities out (double accum)
template <typename T>
inline void softmax_row(T* s, int n) {
  T mx = s[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, s[i]);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    s[i] = std::exp(s[i] - mx);
    sum += (double)s[i];
  }
  T inv = (T)(1.0 / sum);
  for (int i = 0; i < n; ++i) s[i] *= inv;
}

// Bidirectional attention restricted to rows [r0, r1) of pre-projected
// Q/K/V; writes the mixed values (pre output projection) into the same rows
// of `mixed`. Counts 2*m*d MACs per query row.
template <typename T>
void attn_core_block(const Mat<T>& Q, const Mat<T>& K, const Mat<T>& V, int r0, int r1,
                     int n_heads, Mat<T>& mixed) {
  int d = Q.cols;
  int hd = d / n_heads;
  T scale = (T)(1.0 / std::sqrt((double)hd));
  int m = r1 - r0;
  std::vector<T> s((size_t)m);
  for (int q = r0; q < r1; ++q) {
    for (int h = 0; h < n_heads; ++h) {
      int e0 = h * hd;
      const T* qr = Q.row(q) + e0;
      for (int k = r0; k < r1; ++k) {
        const T* kr = K.row(k) + e0;
        double acc = 0;
        for (int e = 0; e < hd; ++e) acc += double(qr[e]) * kr[e];
        s[(size_t)(k - r0)] = (T)acc * scale;
      }
      softmax_row(s.data(), m);
      T* out = mixed.row(q) + e0;
      for (int e = 0; e < hd; ++e) out[e] = T(0);
      for (int k = r0; k < r1; ++k) {
        T p = s[(size_t)(k - r0)];
        const T* vr = V.row(k) + e0;
        for (int e = 0; e < hd; ++e) out[e] += p * vr[e];
      }
    }
    opcount::add(2ull * (uint64_t)m * (uint64_t)d);
  }
}

// Scale-causal attention over the whole flattened sequence: a query in block
// b sees every key in blocks <= b (bidirectional inside its own block).
// Masked keys are never touched, so the MAC count is exactly
// sum_i 2*k_i*P_i*d. When mass != nullptr the per-row intra-block softmax
// mass is recorded under layer_idx.
template <typename T>
void attn_core_causal(const Mat<T>& Q, const Mat<T>& K, const Mat<T>& V,
                      const SequenceLayout& layout, int n_heads, Mat<T>& mixed,
                      AttnMassAccum* mass = nullptr, int layer_idx = 0) {
  int d = Q.cols;
  int hd = d / n_heads;
  T scale = (T)(1.0 / std::sqrt((double)hd));
  std::vector<T> s((size_t)layout.total_len);
  for (int b = 0; b < layout.num_blocks(); ++b) {
    int r0 = layout.block_offsets[b];
    int r1 = layout.block_end(b);
    int nk = r1;  // keys 0..block_end(b)
    for (int q = r0; q < r1; ++q) {
      for (int h = 0; h < n_heads; ++h) {
        int e0 = h * hd;
        const T* qr = Q.row(q) + e0;
        for (int k = 0; k < nk; ++k) {
          const T* kr = K.row(k) + e0;
          double acc = 0;
          for (int e = 0; e < hd; ++e) acc += double(qr[e]) * kr[e];
          s[(size_t)k] = (T)acc * scale;
        }
        softmax_row(s.data(), nk);
        if (mass) {
          double intra = 0;
          for (int k = r0; k < r1; ++k) intra += (double)s[(size_t)k];
          mass->observe(layer_idx, intra);
        }
        T* out = mixed.row(q) + e0;
        for (int e = 0; e < hd; ++e) out[e] = T(0);
        for (int k = 0; k < nk; ++k) {
          T p = s[(size_t)k];
          const T* vr = V.row(k) + e0;
          for (int e = 0; e < hd; ++e) out[e] += p * vr[e];
        }
      }
      opcount::add(2ull * (uint64_t)nk * (uint64_t)d);
    }
  }
}

// Backward of attn_core_block for rows [r0, r1): recomputes each softmax row
// and accumulates into gQ/gK/gV.
template <typename T>
void attn_core_block_backward(const Mat<T>& Q, const Mat<T>& K, const Mat<T>& V, int r0, int r1,
                              int n_heads, const Mat<T>& gmixed, Mat<T>& gQ, Mat<T>& gK,
                              Mat<T>& gV) {
  int d = Q.cols;
  int hd = d / n_heads;
  T scale = (T)(1.0 / std::sqrt((double)hd));
  int m = r1 - r0;
  std::vector<T> p((size_t)m), gp((size_t)m);
  for (int q = r0; q < r1; ++q) {
    for (int h = 0; h < n_heads; ++h) {
      int e0 = h * hd;
      const T* qr = Q.row(q) + e0;
      for (int k = r0; k < r1; ++k) {
        const T* kr = K.row(k) + e0;
        double acc = 0;
        for (int e = 0; e < hd; ++e) acc += double(qr[e]) * kr[e];
        p[(size_t)(k - r0)] = (T)acc * scale;
      }
      softmax_row(p.data(), m);

      const T* go = gmixed.row(q) + e0;
      // dV and dP
      double dot = 0;
      for (int k = r0; k < r1; ++k) {
        T pk = p[(size_t)(k - r0)];
        T* gv = gV.row(k) + e0;
        const T* vr = V.row(k) + e0;
        double g = 0;
        for (int e = 0; e < hd; ++e) {
          gv[e] += pk * go[e];
          g += double(go[e]) * vr[e];
        }
        gp[(size_t)(k - r0)] = (T)g;
        dot += (double)pk * g;
      }
      // softmax backward, then dQ / dK
      T* gq = gQ.row(q) + e0;
      for (int k = r0; k < r1; ++k) {
        T gs = p[(size_t)(k - r0)] * (T)((double)gp[(size_t)(k - r0)] - dot) * scale;
        const T* kr = K.row(k) + e0;
        T* gk = gK.row(k) + e0;
        for (int e = 0; e < hd; ++e) {
          gq[e] += gs * kr[e];
          gk[e] += gs * qr[e];
        }
      }
    }
  }
}

// Backward of attn_core_causal; same structure with the widened key range.
template <typename T>
void attn_core_causal_backward(const Mat<T>& Q, const Mat<T>& K, const Mat<T>& V,
                               const SequenceLayout& layout, int n_heads, const Mat<T>& gmixed,
                               Mat<T>& gQ, Mat<T>& gK, Mat<T>& gV) {
  int d = Q.cols;
  int hd = d / n_heads;
  T scale = (T)(1.0 / std::sqrt((double)hd));
  std::vector<T> p((size_t)layout.total_len), gp((size_t)layout.total_len);
  for (int b = 0; b < layout.num_blocks(); ++b) {
    int r0 = layout.block_offsets[b];
    int r1 = layout.block_end(b);
    int nk = r1;
    for (int q = r0; q < r1; ++q) {
      for (int h = 0; h < n_heads; ++h) {
        int e0 = h * hd;
        const T* qr = Q.row(q) + e0;
        for (int k = 0; k < nk; ++k) {
          const T* kr = K.row(k) + e0;
          double acc = 0;
          for (int e = 0; e < hd; ++e) acc += double(qr[e]) * kr[e];
          p[(size_t)k] = (T)acc * scale;
        }
        softmax_row(p.data(), nk);

        const T* go = gmixed.row(q) + e0;
        double dot = 0;
        for (int k = 0; k < nk; ++k) {
          T pk = p[(size_t)k];
          T* gv = gV.row(k) + e0;
          const T* vr = V.row(k) + e0;
          double g = 0;
          for (int e = 0; e < hd; ++e) {
            gv[e] += pk * go[e];
            g += double(go[e]) * vr[e];
          }
          gp[(size_t)k] = (T)g;
          dot += (double)pk * g;
        }
        T* gq = gQ.row(q) + e0;
        for (int k = 0; k < nk; ++k) {
          T gs = p[(size_t)k] * (T)((double)gp[(size_t)k] - dot) * scale;
          const T* kr = K.row(k) + e0;
          T* gk = gK.row(k) + e0;
          for (int e = 0; e < hd; ++e) {
            gq[e] += gs * kr[e];
            gk[e] += gs * qr[e];
          }
        }
      }
    }
  }
}

template <typename T>
void check_attn_input(const Mat<T>& x, const AttnParams<T>& p) {
  int d = p.w_q.rows;
  if (x.cols != d) throw std::invalid_argument("attention: input width does not match params");
  if (d % p.n_heads != 0) throw std::invalid_argument("attention: d not divisible by n_heads");
  if (!all_finite(x)) throw std::invalid_argument("attention: non-finite input");
}

}  // namespace detail

// Bidirectional attention over one scale block (no mask, no positional
// encoding, no dropout).
template <typename T>
Mat<T> attend_block(const Mat<T>& x, const AttnParams<T>& p) {
  detail::check_attn_input(x, p);
  int d = x.cols;
  Mat<T> Q(x.rows, d), K(x.rows, d), V(x.rows, d), mixed(x.rows, d), out(x.rows, d);
  matmul(x, p.w_q, Q);
  matmul(x, p.w_k, K);
  matmul(x, p.w_v, V);
  detail::attn_core_block(Q, K, V, 0, x.rows, p.n_heads, mixed);
  matmul(mixed, p.w_o, out);
  return out;
}

// Block-diagonal attention over a flattened multi-scale sequence: each block
// attends only within itself, all blocks share the same parameters. Equal to
// running attend_block on every block independently.
template <typename T>
Mat<T> attend_sequence(const Mat<T>& x, const SequenceLayout& layout, const AttnParams<T>& p) {
  detail::check_attn_input(x, p);
  if (x.rows != layout.total_len)
    throw std::invalid_argument("attend_sequence: sequence length does not match layout");
  int d = x.cols;
  Mat<T> Q(x.rows, d), K(x.rows, d), V(x.rows, d), mixed(x.rows, d), out(x.rows, d);
  matmul(x, p.w_q, Q);
  matmul(x, p.w_k, K);
  matmul(x, p.w_v, V);
  parallel_for(layout.num_blocks(), [&](int b) {
    detail::attn_core_block(Q, K, V, layout.block_offsets[b], layout.block_end(b), p.n_heads,
                            mixed);
  });
  matmul(mixed, p.w_o, out);
  return out;
}

// Scale-causal dense attention over the whole sequence (the coupled
// baseline): bidirectional inside a block, causal across blocks.
template <typename T>
Mat<T> attend_scale_causal(const Mat<T>& x, const SequenceLayout& layout, const AttnParams<T>& p,
                           AttnMassAccum* mass = nullptr, int layer_idx = 0) {
  detail::check_attn_input(x, p);
  if (x.rows != layout.total_len)
    throw std::invalid_argument("attend_scale_causal: sequence length does not match layout");
  int d = x.cols;
  Mat<T> Q(x.rows, d), K(x.rows, d), V(x.rows, d), mixed(x.rows, d), out(x.rows, d);
  matmul(x, p.w_q, Q);
  matmul(x, p.w_k, K);
  matmul(x, p.w_v, V);
  detail::attn_core_causal(Q, K, V, layout, p.n_heads, mixed, mass, layer_idx);
  matmul(mixed, p.w_o, out);
  return out;
}

// Shared backward driver; `causal` selects the mask. Parameter gradients
// accumulate (+=) into `grads`, input gradients accumulate into gx.
template <typename T>
void attend_backward_impl(const Mat<T>& x, const SequenceLayout& layout, const AttnParams<T>& p,
                          const Mat<T>& gout, bool causal, Mat<T>& gx, AttnParams<T>& grads) {
  detail::check_attn_input(x, p);
  int d = x.cols;
  Mat<T> Q(x.rows, d), K(x.rows, d), V(x.rows, d), mixed(x.rows, d);
  matmul(x, p.w_q, Q);
  matmul(x, p.w_k, K);
  matmul(x, p.w_v, V);
  if (causal)
    detail::attn_core_causal(Q, K, V, layout, p.n_heads, mixed);
  else
    parallel_for(layout.num_blocks(), [&](int b) {
      detail::attn_core_block(Q, K, V, layout.block_offsets[b], layout.block_end(b), p.n_heads,
                              mixed);
    });

  // out = mixed * w_o
  matmul_acc_tA(mixed, gout, grads.w_o);
  Mat<T> gmixed(x.rows, d);
  matmul_acc_tB(gout, p.w_o, gmixed);

  Mat<T> gQ(x.rows, d), gK(x.rows, d), gV(x.rows, d);
  if (causal) {
    detail::attn_core_causal_backward(Q, K, V, layout, p.n_heads, gmixed, gQ, gK, gV);
  } else {
    for (int b = 0; b < layout.num_blocks(); ++b)
      detail::attn_core_block_backward(Q, K, V, layout.block_offsets[b], layout.block_end(b),
                                       p.n_heads, gmixed, gQ, gK, gV);
  }

  matmul_acc_tA(x, gQ, grads.w_q);
  matmul_acc_tA(x, gK, grads.w_k);
  matmul_acc_tA(x, gV, grads.w_v);
  matmul_acc_tB(gQ, p.w_q, gx);
  matmul_acc_tB(gK, p.w_k, gx);
  matmul_acc_tB(gV, p.w_v, gx);
}

// Backward of attend_block.
template <typename T>
void attend_block_backward(const Mat<T>& x, const AttnParams<T>& p, const Mat<T>& gout,
                           Mat<T>& gx, AttnParams<T>& grads) {
  SequenceLayout one;
  one.block_lengths = {x.rows};
  one.block_offsets = {0};
  one.total_len = x.rows;
  attend_backward_impl(x, one, p, gout, /*causal=*/false, gx, grads);
}

template <typename T>
void attend_sequence_backward(const Mat<T>& x, const SequenceLayout& layout,
                              const AttnParams<T>& p, const Mat<T>& gout, Mat<T>& gx,
                              AttnParams<T>& grads) {
  attend_backward_impl(x, layout, p, gout, /*causal=*/false, gx, grads);
}

template <typename T>
void attend_scale_causal_backward(const Mat<T>& x, const SequenceLayout& layout,
                                  const AttnParams<T>& p, const Mat<T>& gout, Mat<T>& gx,
                                  AttnParams<T>& grads) {
  attend_backward_impl(x, layout, p, gout, /*causal=*/true, gx, grads);
}

}  // namespace mvar
