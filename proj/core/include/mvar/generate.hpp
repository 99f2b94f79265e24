#pragma once

#include <functional>

#include "mvar/model.hpp"

namespace mvar {

struct SamplingParams {
  double temperature = 1.0;
  int top_k = 0;  // 0 means no truncation (full vocab)
  uint64_t seed = 0;
};

inline void validate_sampling(const SamplingParams& sp, int vocab) {
  if (!(sp.temperature > 0))
    throw std::invalid_argument("temperature must be > 0, got " + std::to_string(sp.temperature));
  if (sp.top_k < 0 || sp.top_k > vocab)
    throw std::invalid_argument("top_k must lie in [0, " + std::to_string(vocab) + "], got " +
                                std::to_string(sp.top_k));
}

// Temperature + top-k sampling from one logits row via inverse CDF.
// Candidates are ordered by (logit desc, index asc) so ties break low.
template <typename T>
int sample_token(const T* logits, int vocab, double temperature, int top_k, Rng& rng) {
  int k = (top_k == 0) ? vocab : top_k;
  std::vector<std::pair<double, int>> cand((size_t)vocab);
  for (int i = 0; i < vocab; ++i) cand[(size_t)i] = {double(logits[i]), i};
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  double mx = cand[0].first;
  std::vector<double> w((size_t)k);
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    w[(size_t)i] = std::exp((cand[(size_t)i].first - mx) / temperature);
    sum += w[(size_t)i];
  }
  double u = rng.uniform() * sum;
  double acc = 0;
  for (int i = 0; i < k; ++i) {
    acc += w[(size_t)i];
    if (u < acc) return cand[(size_t)i].second;
  }
  return cand[(size_t)k - 1].second;
}

// Incremental decoder for all-decoupled stacks: attention is block-local so
// each scale's block is processed alone, and the scans carry per-layer
// recurrent state across blocks. Global-attention layers need the full
// prefix and are not supported here.
template <typename T>
struct StreamingModel {
  const ModelConfig& cfg;
  const ModelParams<T>& p;
  std::vector<ScanState<T>> states;
  std::vector<std::vector<T>> neg_a;  // per layer, cached -exp(a_log)

  StreamingModel(const ModelConfig& c, const ModelParams<T>& params) : cfg(c), p(params) {
    if (!c.all_decoupled())
      throw std::invalid_argument("streaming decode requires an all-decoupled stack");
    for (int l = 0; l < c.n_layers; ++l) {
      states.push_back(make_scan_state(p.layers[(size_t)l].ssm));
      neg_a.push_back(neg_a_of(p.layers[(size_t)l].ssm));
    }
  }

  // Feeds one scale's input block; returns that block's logits.
  Mat<T> process_block(int scale_idx, const Mat<T>& block) {
    int side = cfg.schedule.sides[(size_t)scale_idx];
    if (block.rows != side * side || block.cols != cfg.d)
      throw std::invalid_argument("streaming block has wrong shape for scale " +
                                  std::to_string(scale_idx));
    Mat<T> h = block;
    Mat<T> normed(h.rows, h.cols), delta(h.rows, h.cols);
    std::vector<T> y((size_t)cfg.d);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const LayerParams<T>& lp = p.layers[(size_t)l];
      if (cfg.attn_enabled) {
        layer_norm(h, lp.ln1_g, lp.ln1_b, normed);
        delta = attend_block(normed, lp.attn);
        for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta.v[i];
        check_stream_finite(h, l, "intra attention");
      }
      if (cfg.scan_enabled) {
        layer_norm(h, lp.ln2_g, lp.ln2_b, normed);
        for (int r = 0; r < h.rows; ++r) {
          scan_step(normed.row(r), states[(size_t)l], lp.ssm, y.data(), neg_a[(size_t)l].data());
          T* hr = h.row(r);
          for (int k = 0; k < cfg.d; ++k) hr[k] += y[(size_t)k];
        }
        check_stream_finite(h, l, "scan");
      }
      if (cfg.use_ffn) {
        layer_norm(h, lp.ln3_g, lp.ln3_b, normed);
        ffn_forward(normed, lp.ffn_w1, lp.ffn_w2, delta);
        for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta.v[i];
        check_stream_finite(h, l, "ffn");
      }
    }
    layer_norm(h, p.final_g, p.final_b, normed);
    Mat<T> logits(h.rows, cfg.vocab);
    matmul(normed, p.head, logits);
    return logits;
  }
};

namespace gen_detail {

template <typename T>
void sample_block(const Mat<T>& logits, const SamplingParams& sp, Rng& rng, int vocab,
                  std::vector<int>& out) {
  out.resize((size_t)logits.rows);
  for (int r = 0; r < logits.rows; ++r)
    out[(size_t)r] = sample_token(logits.row(r), vocab, sp.temperature, sp.top_k, rng);
}

}  // namespace gen_detail

// Scale-by-scale ancestral sampling. All-decoupled stacks run the O(L)
// streaming path; stacks with global-attention layers re-run the growing
// prefix each scale (same distribution, quadratic cost). Both paths draw
// the same RNG stream, so for a given seed they agree exactly.
template <typename T>
TokenMapPyramid generate(int class_id, const ModelConfig& cfg, const ModelParams<T>& p,
                         const SamplingParams& sp) {
  validate_sampling(sp, cfg.vocab);
  Rng rng(derive_seed(sp.seed, 0x5eed));
  TokenMapPyramid pyr;
  pyr.schedule = cfg.schedule;
  int n = cfg.schedule.num_scales();
  pyr.maps.resize((size_t)n);
  if (cfg.all_decoupled()) {
    StreamingModel<T> sm(cfg, p);
    for (int i = 0; i < n; ++i) {
      const std::vector<int>* prev = i > 0 ? &pyr.maps[(size_t)i - 1] : nullptr;
      Mat<T> block = build_input_block(i, prev, class_id, p, cfg);
      Mat<T> logits = sm.process_block(i, block);
      gen_detail::sample_block(logits, sp, rng, cfg.vocab, pyr.maps[(size_t)i]);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      ModelConfig pre = cfg;
      pre.schedule.sides.assign(cfg.schedule.sides.begin(), cfg.schedule.sides.begin() + i + 1);
      TokenMapPyramid partial;
      partial.schedule = pre.schedule;
      partial.maps.assign(pyr.maps.begin(), pyr.maps.begin() + i + 1);  // last map still empty
      // build_input_sequence only reads maps[0..i-1]; give the empty tail a
      // placeholder of the right size so validation passes
      partial.maps[(size_t)i].assign((size_t)pre.schedule.sides.back() *
                                         pre.schedule.sides.back(),
                                     0);
      Mat<T> x = build_input_sequence(partial, class_id, p, pre);
      Mat<T> logits = model_forward(x, pre, p, (ForwardCache<T>*)nullptr);
      SequenceLayout lay = build_layout(pre.schedule);
      int off = lay.block_offsets[(size_t)i];
      int len = lay.block_lengths[(size_t)i];
      Mat<T> blk(len, cfg.vocab);
      for (int r = 0; r < len; ++r)
        for (int k = 0; k < cfg.vocab; ++k) blk(r, k) = logits(off + r, k);
      gen_detail::sample_block(blk, sp, rng, cfg.vocab, pyr.maps[(size_t)i]);
    }
  }
  return pyr;
}

// Draws `n_candidates` pyramids from per-candidate derived seeds, scores
// each decode with `scorer`, and keeps the best (ties break toward the
// earlier candidate).
template <typename T>
TokenMapPyramid generate_with_rejection(
    int class_id, int n_candidates, const ModelConfig& cfg, const ModelParams<T>& p,
    const Codebook& cb, const SamplingParams& sp,
    const std::function<double(const Mat<float>&, int)>& scorer, double* best_score_out = nullptr,
    int* best_index_out = nullptr) {
  if (n_candidates < 1) throw std::invalid_argument("rejection needs at least one candidate");
  TokenMapPyramid best;
  double best_score = 0;
  int best_idx = -1;
  for (int i = 0; i < n_candidates; ++i) {
    SamplingParams spi = sp;
    spi.seed = derive_seed(sp.seed, (uint64_t)i);
    TokenMapPyramid cand = generate(class_id, cfg, p, spi);
    Mat<float> feats = decode_multiscale(cand, cb);
    double score = scorer(feats, class_id);
    if (best_idx < 0 || score > best_score) {
      best_score = score;
      best_idx = i;
      best = cand;
    }
  }
  if (best_score_out) *best_score_out = best_score;
  if (best_index_out) *best_index_out = best_idx;
  return best;
}

}  // namespace mvar
