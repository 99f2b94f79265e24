// Microbenchmarks for the three sequence kernels. Inputs are pre-projected
// activations so the timed region is the mixing work itself: dense
// scale-causal-style attention should come out quadratic in L, the
// block-diagonal intra-scale variant and the selective scan linear.
#include <benchmark/benchmark.h>

#include <cstdint>

#include "mvar/attention.hpp"
#include "mvar/parallel.hpp"
#include "mvar/rng.hpp"
#include "mvar/ssm.hpp"

namespace {

constexpr int kDim = 64;
constexpr int kHeads = 1;
constexpr int kBlockLen = 256;

mvar::Mat<float> random_mat(int rows, int cols, uint64_t stream, double scale) {
  mvar::Rng rng(mvar::derive_seed(0xbe9c4, stream));
  mvar::Mat<float> m(rows, cols);
  for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = (float)(rng.normal() * scale);
  return m;
}

mvar::SequenceLayout uniform_layout(int total, int block) {
  mvar::SequenceLayout lay;
  lay.total_len = total;
  for (int off = 0; off < total; off += block) {
    lay.block_offsets.push_back(off);
    lay.block_lengths.push_back(block);
  }
  return lay;
}

}  // namespace

static void bm_global_attention(benchmark::State& state) {
  int L = (int)state.range(0);
  auto Q = random_mat(L, kDim, 1, 0.5);
  auto K = random_mat(L, kDim, 2, 0.5);
  auto V = random_mat(L, kDim, 3, 0.5);
  mvar::Mat<float> mixed(L, kDim);
  for (auto _ : state) {
    mvar::detail::attn_core_block(Q, K, V, 0, L, kHeads, mixed);
    benchmark::DoNotOptimize(mixed.v.data());
    benchmark::ClobberMemory();
  }
  state.SetComplexityN(L);
}
BENCHMARK(bm_global_attention)->RangeMultiplier(2)->Range(256, 4096)->Complexity(benchmark::oNSquared);

static void bm_intra_attention(benchmark::State& state) {
  int L = (int)state.range(0);
  auto Q = random_mat(L, kDim, 4, 0.5);
  auto K = random_mat(L, kDim, 5, 0.5);
  auto V = random_mat(L, kDim, 6, 0.5);
  mvar::Mat<float> mixed(L, kDim);
  auto lay = uniform_layout(L, kBlockLen);
  for (auto _ : state) {
    for (int b = 0; b < lay.num_blocks(); ++b)
      mvar::detail::attn_core_block(Q, K, V, lay.block_offsets[b], lay.block_end(b), kHeads,
                                    mixed);
    benchmark::DoNotOptimize(mixed.v.data());
    benchmark::ClobberMemory();
  }
  state.SetComplexityN(L);
}
BENCHMARK(bm_intra_attention)->RangeMultiplier(2)->Range(256, 4096)->Complexity(benchmark::oN);

static void bm_inter_scan(benchmark::State& state) {
  int L = (int)state.range(0);
  auto x = random_mat(L, kDim, 7, 0.5);
  auto p = mvar::make_ssm_params<float>(kDim, 2 * kDim, 16);
  mvar::Rng rng(mvar::derive_seed(0xbe9c4, 8));
  for (size_t i = 0; i < p.w_in.v.size(); ++i) p.w_in.v[i] = (float)(rng.normal() * 0.05);
  for (size_t i = 0; i < p.w_b.v.size(); ++i) p.w_b.v[i] = (float)(rng.normal() * 0.05);
  for (size_t i = 0; i < p.w_c.v.size(); ++i) p.w_c.v[i] = (float)(rng.normal() * 0.05);
  for (size_t i = 0; i < p.w_out.v.size(); ++i) p.w_out.v[i] = (float)(rng.normal() * 0.05);
  for (int c = 0; c < p.d_inner; ++c) {
    p.w_delta(c, 0) = (float)(rng.normal() * 0.05);
    p.delta_bias(c, 0) = -2.0f;
    for (int j = 0; j < p.n_state; ++j) p.a_log(c, j) = (float)std::log(1.0 + j);
  }
  for (auto _ : state) {
    auto y = mvar::scan_sequence(x, p);
    benchmark::DoNotOptimize(y.v.data());
    benchmark::ClobberMemory();
  }
  state.SetComplexityN(L);
}
BENCHMARK(bm_inter_scan)->RangeMultiplier(2)->Range(256, 4096)->Complexity(benchmark::oN);

int main(int argc, char** argv) {
  mvar::force_single_worker(true);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
