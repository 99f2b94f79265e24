#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvar/model.hpp"
#include "mvar/schedule.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

// Where a query's softmax mass and the attention compute land: inside the
// query's own scale block (intra) vs earlier blocks (inter).
struct CostReport {
  ScaleSchedule schedule;
  int d = 0;
  int n_heads = 0;
  double intra_score_mass = 0;  // measured on a model, averaged over rows/heads/layers
  double inter_score_mass = 0;
  uint64_t intra_flops = 0;  // analytic MACs, score+mix terms only
  uint64_t inter_flops = 0;
  double intra_flops_frac = 0;
  double inter_flops_frac = 0;
  double chance_intra_mass = 0;  // uniform-softmax level for this schedule
  // Reference figures from the original large-scale report (256x256):
  // displayed next to the measurements, never asserted against them.
  double ref_intra_mass = 0.796;
  double ref_intra_compute = 0.239;
};

// Score-matrix MAC model: counts Q.K^T and P.V multiplies only, the terms
// that are quadratic in sequence length; projections are linear in L and
// identical across designs, so they are excluded. Returns {intra, inter}
// for one pass of one attention layer under the scale-causal mask.
std::pair<uint64_t, uint64_t> analytic_attention_flops(const ScaleSchedule& schedule, int d);

// Plain dense (unmasked) attention MACs over one block of L tokens.
uint64_t analytic_plain_attention_flops(int L, int d);

// In-block softmax mass a uniform-attention model would show: the average
// over positions of block_len / prefix_len.
double uniform_chance_intra_mass(const ScaleSchedule& schedule);

// Runs forward passes over the batch and averages the in-block softmax
// mass over rows, heads, layers and samples. The model must be all
// global-attention: block-local attention has intra mass 1 by construction
// and would make the measurement meaningless.
std::pair<double, double> measure_attention_mass(const ModelConfig& cfg,
                                                 const ModelParams<float>& params,
                                                 const std::vector<TokenMapPyramid>& batch,
                                                 const std::vector<int>& classes);

// ---------------------------------------------------------------------------
// kernel timing

enum class BenchKernel { kGlobalAttention, kIntraAttention, kInterScan };

const char* bench_kernel_name(BenchKernel k);

struct KernelTiming {
  BenchKernel kernel;
  int L = 0;
  uint64_t ops = 0;  // instrumented MACs for one pass
  double median_ns = 0;
  double min_ns = 0;
};

// Times one kernel pass over seeded random inputs, single worker, with
// warmup 3 then `repeats` timed runs. Attention kernels time the
// score+softmax+mix core (the quadratic part); the scan times its full
// step pipeline (all linear). Plain-L form: global attention runs dense
// over one block; the scan runs L steps. Schedule form: global applies the
// scale-causal mask, intra the block-diagonal one.
KernelTiming measured_kernel_cost(BenchKernel k, int L, int d, int repeats, uint64_t seed);
KernelTiming measured_kernel_cost(BenchKernel k, const ScaleSchedule& schedule, int d,
                                  int repeats, uint64_t seed);

// Least-squares slope of log(min_ns) against log(L).
double loglog_slope(const std::vector<KernelTiming>& points);

// ---------------------------------------------------------------------------
// report assembly

// Measures mass on the given model/batch, fills the analytic fields for
// its schedule, and sanity-checks the fraction invariants.
CostReport build_cost_report(const ModelConfig& cfg, const ModelParams<float>& params,
                             const std::vector<TokenMapPyramid>& batch,
                             const std::vector<int>& classes);

// One key=value per line, keys matching the field names.
std::string cost_report_kv(const CostReport& r);

// Appends one row (with a header when the file is new) for plotting.
void append_cost_csv(const std::string& path, const CostReport& r);

void append_timing_csv(const std::string& path, const KernelTiming& t);

}  // namespace mvar
