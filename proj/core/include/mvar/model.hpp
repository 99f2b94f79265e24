#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mvar/attention.hpp"
#include "mvar/mat.hpp"
#include "mvar/rng.hpp"
#include "mvar/schedule.hpp"
#include "mvar/ssm.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

// Per-layer wiring. Decoupled runs block-local attention followed by the
// cross-scale scan; GlobalAttention runs one dense scale-causal attention
// sub-layer instead (the coupled baseline).
enum class LayerMode { kDecoupled, kGlobalAttention };

LayerMode parse_layer_mode(const std::string& s);
const char* layer_mode_name(LayerMode m);

struct ModelConfig {
  ScaleSchedule schedule;
  int d = 64;
  int n_layers = 4;
  int n_heads = 0;  // 0 resolves to max(1, d/64)
  int d_inner = 0;  // 0 resolves to 2*d
  int n_state = 16;
  int vocab = 64;
  int n_classes = 8;
  std::vector<LayerMode> layer_modes;  // empty resolves to all-decoupled
  bool attn_enabled = true;            // decoupled layers: intra-scale attention sub-layer
  bool scan_enabled = true;            // decoupled layers: inter-scale scan sub-layer
  bool use_conv = false;               // depth-wise conv ahead of the scan
  bool use_ffn = false;                // extra FFN sub-layer per layer
  uint64_t seed = 42;

  bool all_decoupled() const;
  bool all_global() const;
};

// Resolves defaulted fields and validates; throws std::invalid_argument.
void finalize_config(ModelConfig& cfg);

template <typename T>
struct LayerParams {
  AttnParams<T> attn;
  SsmParams<T> ssm;
  Mat<T> ln1_g, ln1_b;  // ahead of attention
  Mat<T> ln2_g, ln2_b;  // ahead of the scan
  Mat<T> ln3_g, ln3_b;  // ahead of the FFN (when enabled)
  Mat<T> ffn_w1, ffn_w2;
};

template <typename T>
struct ModelParams {
  Mat<T> token_embed;              // V x d
  Mat<T> class_embed;              // n_classes x d
  std::vector<Mat<T>> pos_embed;   // per scale, k_i x d
  std::vector<LayerParams<T>> layers;
  Mat<T> final_g, final_b;
  Mat<T> head;                     // d x V
};

// Allocates all tensors zero-filled (also serves as the gradient holder).
template <typename T>
ModelParams<T> make_model_params(const ModelConfig& cfg) {
  ModelParams<T> p;
  p.token_embed = Mat<T>(cfg.vocab, cfg.d);
  p.class_embed = Mat<T>(cfg.n_classes, cfg.d);
  for (int s : cfg.schedule.sides) p.pos_embed.push_back(Mat<T>(s * s, cfg.d));
  p.layers.resize((size_t)cfg.n_layers);
  for (auto& l : p.layers) {
    l.attn = make_attn_params<T>(cfg.d, cfg.n_heads);
    l.ssm = make_ssm_params<T>(cfg.d, cfg.d_inner, cfg.n_state, cfg.use_conv);
    l.ln1_g = Mat<T>(1, cfg.d);
    l.ln1_b = Mat<T>(1, cfg.d);
    l.ln2_g = Mat<T>(1, cfg.d);
    l.ln2_b = Mat<T>(1, cfg.d);
    if (cfg.use_ffn) {
      l.ln3_g = Mat<T>(1, cfg.d);
      l.ln3_b = Mat<T>(1, cfg.d);
      l.ffn_w1 = Mat<T>(cfg.d, 4 * cfg.d);
      l.ffn_w2 = Mat<T>(4 * cfg.d, cfg.d);
    }
  }
  p.final_g = Mat<T>(1, cfg.d);
  p.final_b = Mat<T>(1, cfg.d);
  p.head = Mat<T>(cfg.d, cfg.vocab);
  return p;
}

// Visits every parameter tensor in a fixed order; the order defines the
// checkpoint manifest and the optimizer slot layout.
template <typename T, typename F>
void visit_params(ModelParams<T>& p, const ModelConfig& cfg, F&& f) {
  f("token_embed", p.token_embed);
  f("class_embed", p.class_embed);
  for (size_t i = 0; i < p.pos_embed.size(); ++i)
    f("pos_embed." + std::to_string(i), p.pos_embed[i]);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    auto& lay = p.layers[l];
    std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "attn.w_q", lay.attn.w_q);
    f(pre + "attn.w_k", lay.attn.w_k);
    f(pre + "attn.w_v", lay.attn.w_v);
    f(pre + "attn.w_o", lay.attn.w_o);
    f(pre + "ssm.a_log", lay.ssm.a_log);
    f(pre + "ssm.w_in", lay.ssm.w_in);
    f(pre + "ssm.w_b", lay.ssm.w_b);
    f(pre + "ssm.w_c", lay.ssm.w_c);
    f(pre + "ssm.w_delta", lay.ssm.w_delta);
    f(pre + "ssm.delta_bias", lay.ssm.delta_bias);
    f(pre + "ssm.w_out", lay.ssm.w_out);
    if (cfg.use_conv) {
      f(pre + "ssm.conv_w", lay.ssm.conv_w);
      f(pre + "ssm.conv_b", lay.ssm.conv_b);
    }
    f(pre + "ln1_g", lay.ln1_g);
    f(pre + "ln1_b", lay.ln1_b);
    f(pre + "ln2_g", lay.ln2_g);
    f(pre + "ln2_b", lay.ln2_b);
    if (cfg.use_ffn) {
      f(pre + "ln3_g", lay.ln3_g);
      f(pre + "ln3_b", lay.ln3_b);
      f(pre + "ffn_w1", lay.ffn_w1);
      f(pre + "ffn_w2", lay.ffn_w2);
    }
  }
  f("final_g", p.final_g);
  f("final_b", p.final_b);
  f("head", p.head);
}

// Seeded initialization. The output head starts at zero so an untrained
// model emits uniform logits and its loss sits exactly at ln(vocab).
template <typename T>
ModelParams<T> init_model_params(const ModelConfig& cfg, uint64_t seed) {
  ModelParams<T> p = make_model_params<T>(cfg);
  Rng rng(derive_seed(seed, 0x1));
  auto fill = [&](Mat<T>& m, double std) {
    for (auto& x : m.v) x = (T)(rng.normal() * std);
  };
  auto ones = [](Mat<T>& m) {
    for (auto& x : m.v) x = T(1);
  };

  fill(p.token_embed, 0.02);
  fill(p.class_embed, 0.02);
  for (auto& pe : p.pos_embed) fill(pe, 0.02);
  double res_scale = 1.0 / std::sqrt(2.0 * std::max(1, cfg.n_layers));
  for (auto& l : p.layers) {
    fill(l.attn.w_q, 1.0 / std::sqrt((double)cfg.d));
    fill(l.attn.w_k, 1.0 / std::sqrt((double)cfg.d));
    fill(l.attn.w_v, 1.0 / std::sqrt((double)cfg.d));
    fill(l.attn.w_o, res_scale / std::sqrt((double)cfg.d));
    for (int c = 0; c < cfg.d_inner; ++c)
      for (int j = 0; j < cfg.n_state; ++j) l.ssm.a_log(c, j) = (T)std::log(1.0 + j);
    fill(l.ssm.w_in, 1.0 / std::sqrt((double)cfg.d));
    fill(l.ssm.w_b, 1.0 / std::sqrt((double)cfg.d_inner));
    fill(l.ssm.w_c, 1.0 / std::sqrt((double)cfg.d_inner));
    fill(l.ssm.w_delta, 1.0 / std::sqrt((double)cfg.d_inner));
    // step sizes start log-uniform in [0.01, 0.1]
    for (int c = 0; c < cfg.d_inner; ++c) {
      double dt = std::exp(std::log(0.01) + rng.uniform() * (std::log(0.1) - std::log(0.01)));
      l.ssm.delta_bias(c, 0) = (T)std::log(std::expm1(dt));
    }
    fill(l.ssm.w_out, res_scale / std::sqrt((double)cfg.d_inner));
    if (cfg.use_conv) {
      fill(l.ssm.conv_w, 0.5);
      l.ssm.conv_b.zero();
    }
    ones(l.ln1_g);
    ones(l.ln2_g);
    if (cfg.use_ffn) {
      ones(l.ln3_g);
      fill(l.ffn_w1, 1.0 / std::sqrt((double)cfg.d));
      fill(l.ffn_w2, res_scale / std::sqrt(4.0 * cfg.d));
    }
  }
  ones(p.final_g);
  // head stays zero
  return p;
}

// Flat tensor list in visit order, for optimizers and finite differencing.
template <typename T>
std::vector<Mat<T>*> param_tensors(ModelParams<T>& p, const ModelConfig& cfg) {
  std::vector<Mat<T>*> out;
  visit_params(p, cfg, [&](const std::string&, Mat<T>& m) { out.push_back(&m); });
  return out;
}

// ---------------------------------------------------------------------------
// layer norm

constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& out) {
  int d = x.cols;
  for (int r = 0; r < x.rows; ++r) {
    const T* xr = x.row(r);
    T* o = out.row(r);
    double mu = 0;
    for (int k = 0; k < d; ++k) mu += xr[k];
    mu /= d;
    double var = 0;
    for (int k = 0; k < d; ++k) {
      double c = xr[k] - mu;
      var += c * c;
    }
    double inv = 1.0 / std::sqrt(var / d + kLnEps);
    for (int k = 0; k < d; ++k)
      o[k] = (T)((xr[k] - mu) * inv * double(gain(0, k)) + double(bias(0, k)));
  }
}

template <typename T>
void layer_norm_backward(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& gout, Mat<T>& gx,
                         Mat<T>& ggain, Mat<T>& gbias) {
  int d = x.cols;
  for (int r = 0; r < x.rows; ++r) {
    const T* xr = x.row(r);
    const T* go = gout.row(r);
    T* gxr = gx.row(r);
    double mu = 0;
    for (int k = 0; k < d; ++k) mu += xr[k];
    mu /= d;
    double var = 0;
    for (int k = 0; k < d; ++k) {
      double c = xr[k] - mu;
      var += c * c;
    }
    double inv = 1.0 / std::sqrt(var / d + kLnEps);
    double mean_t = 0, mean_tx = 0;
    for (int k = 0; k < d; ++k) {
      double xh = (xr[k] - mu) * inv;
      double t = double(go[k]) * double(gain(0, k));
      ggain(0, k) += (T)(double(go[k]) * xh);
      gbias(0, k) += (T)go[k];
      mean_t += t;
      mean_tx += t * xh;
    }
    mean_t /= d;
    mean_tx /= d;
    for (int k = 0; k < d; ++k) {
      double xh = (xr[k] - mu) * inv;
      double t = double(go[k]) * double(gain(0, k));
      gxr[k] += (T)((t - mean_t - xh * mean_tx) * inv);
    }
  }
}

// ---------------------------------------------------------------------------
// input sequence assembly

// Input block for scale i: scale 0 is the class embedding (condition slot),
// scale i>0 is the embedded previous-scale token map upsampled to side_i.
// Every block gets its per-scale positional table added.
template <typename T>
Mat<T> build_input_block(int scale_idx, const std::vector<int>* prev_ids, int class_id,
                         const ModelParams<T>& p, const ModelConfig& cfg) {
  if (class_id < 0 || class_id >= cfg.n_classes)
    throw std::invalid_argument("class id " + std::to_string(class_id) + " outside [0, " +
                                std::to_string(cfg.n_classes) + ")");
  int side = cfg.schedule.sides[(size_t)scale_idx];
  Mat<T> block;
  if (scale_idx == 0) {
    block = Mat<T>(1, cfg.d);
    const T* ce = p.class_embed.row(class_id);
    for (int k = 0; k < cfg.d; ++k) block(0, k) = ce[k];
  } else {
    int prev_side = cfg.schedule.sides[(size_t)scale_idx - 1];
    if (!prev_ids || (int)prev_ids->size() != prev_side * prev_side)
      throw std::invalid_argument("input block " + std::to_string(scale_idx) +
                                  ": previous map has wrong cell count");
    Mat<T> grid(prev_side * prev_side, cfg.d);
    for (int cell = 0; cell < prev_side * prev_side; ++cell) {
      int id = (*prev_ids)[(size_t)cell];
      if (id < 0 || id >= cfg.vocab)
        throw std::invalid_argument("token id " + std::to_string(id) + " outside vocab");
      const T* te = p.token_embed.row(id);
      T* gr = grid.row(cell);
      for (int k = 0; k < cfg.d; ++k) gr[k] = te[k];
    }
    block = upsample_grid(grid, prev_side, side);
  }
  const Mat<T>& pe = p.pos_embed[(size_t)scale_idx];
  for (int r = 0; r < block.rows; ++r) {
    T* br = block.row(r);
    const T* pr = pe.row(r);
    for (int k = 0; k < cfg.d; ++k) br[k] += pr[k];
  }
  return block;
}

// Full teacher-forcing input: [class] s_1 ... s_{n-1}, each block upsampled
// to the next scale's side.
template <typename T>
Mat<T> build_input_sequence(const TokenMapPyramid& pyr, int class_id, const ModelParams<T>& p,
                            const ModelConfig& cfg) {
  SequenceLayout lay = build_layout(cfg.schedule);
  if ((int)pyr.maps.size() != cfg.schedule.num_scales())
    throw std::invalid_argument("pyramid scale count does not match model schedule");
  Mat<T> x(lay.total_len, cfg.d);
  for (int i = 0; i < cfg.schedule.num_scales(); ++i) {
    const std::vector<int>* prev = i > 0 ? &pyr.maps[(size_t)i - 1] : nullptr;
    Mat<T> block = build_input_block(i, prev, class_id, p, cfg);
    for (int r = 0; r < block.rows; ++r) {
      T* xr = x.row(lay.block_offsets[i] + r);
      const T* br = block.row(r);
      for (int k = 0; k < cfg.d; ++k) xr[k] = br[k];
    }
  }
  return x;
}

// Adjoint of build_input_sequence into the embedding tables.
template <typename T>
void build_input_backward(const Mat<T>& gx, const TokenMapPyramid& pyr, int class_id,
                          const ModelConfig& cfg, ModelParams<T>& grads) {
  SequenceLayout lay = build_layout(cfg.schedule);
  for (int i = 0; i < cfg.schedule.num_scales(); ++i) {
    int side = cfg.schedule.sides[(size_t)i];
    int off = lay.block_offsets[i];
    Mat<T>& pe = grads.pos_embed[(size_t)i];
    for (int r = 0; r < side * side; ++r) {
      const T* g = gx.row(off + r);
      T* per = pe.row(r);
      for (int k = 0; k < cfg.d; ++k) per[k] += g[k];
    }
    if (i == 0) {
      const T* g = gx.row(off);
      T* ce = grads.class_embed.row(class_id);
      for (int k = 0; k < cfg.d; ++k) ce[k] += g[k];
    } else {
      int prev_side = cfg.schedule.sides[(size_t)i - 1];
      Mat<T> gblock(side * side, cfg.d);
      for (int r = 0; r < side * side; ++r) {
        const T* g = gx.row(off + r);
        T* gb = gblock.row(r);
        for (int k = 0; k < cfg.d; ++k) gb[k] = g[k];
      }
      Mat<T> gcoarse(prev_side * prev_side, cfg.d);
      upsample_grid_backward(gblock, prev_side, side, gcoarse);
      const auto& ids = pyr.maps[(size_t)i - 1];
      for (int cell = 0; cell < prev_side * prev_side; ++cell) {
        const T* g = gcoarse.row(cell);
        T* te = grads.token_embed.row(ids[(size_t)cell]);
        for (int k = 0; k < cfg.d; ++k) te[k] += g[k];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// FFN sub-layer (silu MLP)

template <typename T>
void ffn_forward(const Mat<T>& x, const Mat<T>& w1, const Mat<T>& w2, Mat<T>& out) {
  Mat<T> h(x.rows, w1.cols);
  matmul(x, w1, h);
  for (auto& v : h.v) v = (T)detail::silu(v);
  matmul(h, w2, out);
}

template <typename T>
void ffn_backward(const Mat<T>& x, const Mat<T>& w1, const Mat<T>& w2, const Mat<T>& gout,
                  Mat<T>& gx, Mat<T>& gw1, Mat<T>& gw2) {
  Mat<T> pre(x.rows, w1.cols);
  matmul(x, w1, pre);
  Mat<T> act = pre;
  for (auto& v : act.v) v = (T)detail::silu(v);
  matmul_acc_tA(act, gout, gw2);
  Mat<T> gact(x.rows, w1.cols);
  matmul_acc_tB(gout, w2, gact);
  for (size_t i = 0; i < gact.v.size(); ++i) {
    double z = pre.v[i];
    double s = detail::sigmoid(z);
    gact.v[i] = (T)(double(gact.v[i]) * (s * (1.0 + z * (1.0 - s))));
  }
  matmul_acc_tA(x, gact, gw1);
  matmul_acc_tB(gact, w1, gx);
}

// ---------------------------------------------------------------------------
// forward / backward over the residual stream

// Residual-stream snapshots kept for the backward pass. Normed inputs are
// recomputed on the way back; only the stream states are stored.
template <typename T>
struct LayerCache {
  Mat<T> x_in;    // stream entering the layer
  Mat<T> h_attn;  // after the attention residual (== x_in when skipped)
  Mat<T> h_scan;  // after the scan residual (== h_attn when skipped)
};

template <typename T>
struct ForwardCache {
  Mat<T> input;
  std::vector<LayerCache<T>> layers;
  Mat<T> h_final;       // stream after the last layer
  Mat<T> normed_final;  // after the final norm
};

template <typename T>
void check_stream_finite(const Mat<T>& h, int layer, const char* stage) {
  if (!all_finite(h))
    throw std::runtime_error("non-finite activations after layer " + std::to_string(layer) +
                             " (" + stage + ")");
}

// Runs the stack over an already-built input sequence and returns logits
// (L x V). `mass`, when given, accumulates in-block attention mass for
// global-attention layers.
template <typename T>
Mat<T> model_forward(const Mat<T>& x, const ModelConfig& cfg, const ModelParams<T>& p,
                     ForwardCache<T>* cache, AttnMassAccum* mass = nullptr) {
  SequenceLayout lay = build_layout(cfg.schedule);
  if (x.rows != lay.total_len || x.cols != cfg.d)
    throw std::invalid_argument("model input must be " + std::to_string(lay.total_len) + " x " +
                                std::to_string(cfg.d));
  if (cache) {
    cache->input = x;
    cache->layers.assign((size_t)cfg.n_layers, LayerCache<T>{});
  }
  Mat<T> h = x;
  Mat<T> normed(h.rows, h.cols), delta(h.rows, h.cols);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<T>& lp = p.layers[(size_t)l];
    if (cache) cache->layers[(size_t)l].x_in = h;
    if (cfg.layer_modes[(size_t)l] == LayerMode::kGlobalAttention) {
      layer_norm(h, lp.ln1_g, lp.ln1_b, normed);
      delta = attend_scale_causal(normed, lay, lp.attn, mass, l);
      for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta.v[i];
      check_stream_finite(h, l, "global attention");
      if (cache) {
        cache->layers[(size_t)l].h_attn = h;
        cache->layers[(size_t)l].h_scan = h;
      }
    } else {
      if (cfg.attn_enabled) {
        layer_norm(h, lp.ln1_g, lp.ln1_b, normed);
        delta = attend_sequence(normed, lay, lp.attn);
        for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta.v[i];
        check_stream_finite(h, l, "intra attention");
      }
      if (cache) cache->layers[(size_t)l].h_attn = h;
      if (cfg.scan_enabled) {
        layer_norm(h, lp.ln2_g, lp.ln2_b, normed);
        delta = scan_sequence(normed, lp.ssm);
        for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta.v[i];
        check_stream_finite(h, l, "scan");
      }
      if (cache) cache->layers[(size_t)l].h_scan = h;
    }
    if (cfg.use_ffn) {
      layer_norm(h, lp.ln3_g, lp.ln3_b, normed);
      ffn_forward(normed, lp.ffn_w1, lp.ffn_w2, delta);
      for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta.v[i];
      check_stream_finite(h, l, "ffn");
    }
  }
  if (cache) cache->h_final = h;
  layer_norm(h, p.final_g, p.final_b, normed);
  if (cache) cache->normed_final = normed;
  Mat<T> logits(h.rows, cfg.vocab);
  matmul(normed, p.head, logits);
  return logits;
}

// ---------------------------------------------------------------------------
// loss

// Mean cross-entropy (nats per position) of logits against the flattened
// pyramid: position t in block i is scored against pyramid map i, cell t.
inline std::vector<int> flatten_targets(const TokenMapPyramid& pyr) {
  std::vector<int> t;
  for (const auto& m : pyr.maps) t.insert(t.end(), m.begin(), m.end());
  return t;
}

template <typename T>
double sequence_loss(const Mat<T>& logits, const std::vector<int>& targets,
                     Mat<T>* glogits = nullptr) {
  if ((int)targets.size() != logits.rows)
    throw std::invalid_argument("target count does not match sequence length");
  int V = logits.cols;
  double total = 0;
  for (int r = 0; r < logits.rows; ++r) {
    const T* lr = logits.row(r);
    int tgt = targets[(size_t)r];
    if (tgt < 0 || tgt >= V) throw std::invalid_argument("target id outside vocab");
    double mx = lr[0];
    for (int k = 1; k < V; ++k) mx = std::max(mx, (double)lr[k]);
    double sum = 0;
    for (int k = 0; k < V; ++k) sum += std::exp(double(lr[k]) - mx);
    double lse = mx + std::log(sum);
    total += lse - double(lr[tgt]);
    if (glogits) {
      T* gr = glogits->row(r);
      double inv_l = 1.0 / logits.rows;
      for (int k = 0; k < V; ++k) {
        double pk = std::exp(double(lr[k]) - mx) / sum;
        gr[k] = (T)((pk - (k == tgt ? 1.0 : 0.0)) * inv_l);
      }
    }
  }
  return total / logits.rows;
}

// Full backward from logits gradient to parameter + input gradients.
template <typename T>
void model_backward(const Mat<T>& glogits, const ForwardCache<T>& cache, const ModelConfig& cfg,
                    const ModelParams<T>& p, ModelParams<T>& grads, Mat<T>* ginput = nullptr) {
  SequenceLayout lay = build_layout(cfg.schedule);
  int L = cache.input.rows;
  // head
  matmul_acc_tA(cache.normed_final, glogits, grads.head);
  Mat<T> gh(L, cfg.d);
  matmul_acc_tB(glogits, p.head, gh);
  // final norm
  Mat<T> gstream(L, cfg.d);
  layer_norm_backward(cache.h_final, p.final_g, gh, gstream, grads.final_g, grads.final_b);
  // layers in reverse
  Mat<T> normed(L, cfg.d), gn(L, cfg.d);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerParams<T>& lp = p.layers[(size_t)l];
    LayerParams<T>& gl = grads.layers[(size_t)l];
    const LayerCache<T>& lc = cache.layers[(size_t)l];
    if (cfg.use_ffn) {
      layer_norm(lc.h_scan, lp.ln3_g, lp.ln3_b, normed);
      gn.zero();
      ffn_backward(normed, lp.ffn_w1, lp.ffn_w2, gstream, gn, gl.ffn_w1, gl.ffn_w2);
      layer_norm_backward(lc.h_scan, lp.ln3_g, gn, gstream, gl.ln3_g, gl.ln3_b);
    }
    if (cfg.layer_modes[(size_t)l] == LayerMode::kGlobalAttention) {
      layer_norm(lc.x_in, lp.ln1_g, lp.ln1_b, normed);
      gn.zero();
      attend_scale_causal_backward(normed, lay, lp.attn, gstream, gn, gl.attn);
      layer_norm_backward(lc.x_in, lp.ln1_g, gn, gstream, gl.ln1_g, gl.ln1_b);
    } else {
      if (cfg.scan_enabled) {
        layer_norm(lc.h_attn, lp.ln2_g, lp.ln2_b, normed);
        gn.zero();
        scan_backward(normed, lp.ssm, gstream, gn, gl.ssm);
        layer_norm_backward(lc.h_attn, lp.ln2_g, gn, gstream, gl.ln2_g, gl.ln2_b);
      }
      if (cfg.attn_enabled) {
        layer_norm(lc.x_in, lp.ln1_g, lp.ln1_b, normed);
        gn.zero();
        attend_sequence_backward(normed, lay, lp.attn, gstream, gn, gl.attn);
        layer_norm_backward(lc.x_in, lp.ln1_g, gn, gstream, gl.ln1_g, gl.ln1_b);
      }
    }
  }
  if (ginput)
    for (size_t i = 0; i < gstream.v.size(); ++i) ginput->v[i] += gstream.v[i];
}

// Teacher-forcing loss for one sample; accumulates parameter gradients when
// `grads` is given.
template <typename T>
double loss_and_grad(const TokenMapPyramid& pyr, int class_id, const ModelConfig& cfg,
                     const ModelParams<T>& p, ModelParams<T>* grads,
                     AttnMassAccum* mass = nullptr) {
  Mat<T> x = build_input_sequence(pyr, class_id, p, cfg);
  std::vector<int> targets = flatten_targets(pyr);
  ForwardCache<T> cache;
  Mat<T> logits = model_forward(x, cfg, p, grads ? &cache : nullptr, mass);
  if (!grads) return sequence_loss(logits, targets, (Mat<T>*)nullptr);
  Mat<T> glogits(logits.rows, logits.cols);
  double loss = sequence_loss(logits, targets, &glogits);
  Mat<T> gx(x.rows, x.cols);
  model_backward(glogits, cache, cfg, p, *grads, &gx);
  build_input_backward(gx, pyr, class_id, cfg, *grads);
  return loss;
}

}  // namespace mvar
