#include "mvar/cost.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <sys/stat.h>

#include "mvar/attention.hpp"
#include "mvar/opcount.hpp"
#include "mvar/parallel.hpp"
#include "mvar/rng.hpp"
#include "mvar/ssm.hpp"

namespace mvar {

std::pair<uint64_t, uint64_t> analytic_attention_flops(const ScaleSchedule& schedule, int d) {
  validate_schedule(schedule);
  if (d < 1) throw std::invalid_argument("d must be positive");
  SequenceLayout lay = build_layout(schedule);
  uint64_t intra = 0, total = 0;
  uint64_t prefix = 0;
  for (int i = 0; i < lay.num_blocks(); ++i) {
    uint64_t len = (uint64_t)lay.block_lengths[(size_t)i];
    prefix += len;
    intra += 2ull * len * len * (uint64_t)d;
    total += 2ull * len * prefix * (uint64_t)d;
  }
  return {intra, total - intra};
}

uint64_t analytic_plain_attention_flops(int L, int d) {
  return 2ull * (uint64_t)L * (uint64_t)L * (uint64_t)d;
}

double uniform_chance_intra_mass(const ScaleSchedule& schedule) {
  validate_schedule(schedule);
  SequenceLayout lay = build_layout(schedule);
  double num = 0;
  uint64_t prefix = 0;
  for (int i = 0; i < lay.num_blocks(); ++i) {
    double len = lay.block_lengths[(size_t)i];
    prefix += (uint64_t)len;
    num += len * (len / (double)prefix);
  }
  return num / lay.total_len;
}

std::pair<double, double> measure_attention_mass(const ModelConfig& cfg,
                                                 const ModelParams<float>& params,
                                                 const std::vector<TokenMapPyramid>& batch,
                                                 const std::vector<int>& classes) {
  if (!cfg.all_global())
    throw std::invalid_argument(
        "attention-mass measurement needs an all-global-attention model; block-local attention "
        "has intra mass 1 by construction");
  if (batch.empty() || batch.size() != classes.size())
    throw std::invalid_argument("mass measurement needs a non-empty batch with one class each");
  AttnMassAccum mass;
  for (size_t i = 0; i < batch.size(); ++i) {
    Mat<float> x = build_input_sequence(batch[i], classes[i], params, cfg);
    model_forward(x, cfg, params, (ForwardCache<float>*)nullptr, &mass);
  }
  double intra = mass.fraction();
  return {intra, 1.0 - intra};
}

// ---------------------------------------------------------------------------
// kernel timing

const char* bench_kernel_name(BenchKernel k) {
  switch (k) {
    case BenchKernel::kGlobalAttention: return "global_attention";
    case BenchKernel::kIntraAttention: return "intra_attention";
    case BenchKernel::kInterScan: return "inter_scan";
  }
  return "?";
}

namespace {

struct AttnBuffers {
  Mat<float> q, k, v, mixed;
};

AttnBuffers random_qkv(int L, int d, uint64_t seed) {
  AttnBuffers b{Mat<float>(L, d), Mat<float>(L, d), Mat<float>(L, d), Mat<float>(L, d)};
  Rng rng(seed);
  for (auto* m : {&b.q, &b.k, &b.v})
    for (auto& x : m->v) x = (float)rng.normal();
  return b;
}

template <typename F>
KernelTiming run_timed(BenchKernel k, int L, int repeats, const F& pass) {
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  bool was_single = single_worker_forced();
  force_single_worker(true);
  opcount::reset();
  pass();
  uint64_t ops = opcount::get();
  for (int i = 0; i < 2; ++i) pass();  // remaining warmup
  std::vector<double> ns((size_t)repeats);
  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    pass();
    auto t1 = std::chrono::steady_clock::now();
    ns[(size_t)r] = (double)std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
  }
  force_single_worker(was_single);
  std::sort(ns.begin(), ns.end());
  KernelTiming t;
  t.kernel = k;
  t.L = L;
  t.ops = ops;
  t.min_ns = ns.front();
  t.median_ns = repeats % 2 ? ns[(size_t)repeats / 2]
                            : 0.5 * (ns[(size_t)repeats / 2 - 1] + ns[(size_t)repeats / 2]);
  return t;
}

}  // namespace

KernelTiming measured_kernel_cost(BenchKernel k, int L, int d, int repeats, uint64_t seed) {
  if (L < 1 || d < 1) throw std::invalid_argument("kernel size must be positive");
  int heads = std::max(1, d / 64);
  if (k == BenchKernel::kInterScan) {
    SsmParams<float> p = make_ssm_params<float>(d, 2 * d, 16, false);
    Rng rng(seed);
    for (auto* m : {&p.w_in, &p.w_b, &p.w_c, &p.w_delta, &p.w_out})
      for (auto& x : m->v) x = (float)(rng.normal() * 0.05);
    for (int c = 0; c < p.d_inner; ++c) {
      for (int j = 0; j < p.n_state; ++j) p.a_log(c, j) = (float)std::log(1.0 + j);
      p.delta_bias(c, 0) = (float)std::log(std::expm1(0.05));
    }
    Mat<float> x(L, d);
    for (auto& v : x.v) v = (float)rng.normal();
    return run_timed(k, L, repeats, [&] { scan_sequence(x, p); });
  }
  if (k == BenchKernel::kIntraAttention)
    throw std::invalid_argument("intra_attention timing needs a schedule, not a bare length");
  AttnBuffers b = random_qkv(L, d, seed);
  return run_timed(k, L, repeats,
                   [&] { detail::attn_core_block(b.q, b.k, b.v, 0, L, heads, b.mixed); });
}

KernelTiming measured_kernel_cost(BenchKernel k, const ScaleSchedule& schedule, int d,
                                  int repeats, uint64_t seed) {
  validate_schedule(schedule);
  SequenceLayout lay = build_layout(schedule);
  int L = lay.total_len;
  if (k == BenchKernel::kInterScan) return measured_kernel_cost(k, L, d, repeats, seed);
  int heads = std::max(1, d / 64);
  AttnBuffers b = random_qkv(L, d, seed);
  if (k == BenchKernel::kGlobalAttention)
    return run_timed(k, L, repeats,
                     [&] { detail::attn_core_causal(b.q, b.k, b.v, lay, heads, b.mixed,
                                                    nullptr, 0); });
  return run_timed(k, L, repeats, [&] {
    for (int i = 0; i < lay.num_blocks(); ++i)
      detail::attn_core_block(b.q, b.k, b.v, lay.block_offsets[(size_t)i],
                              lay.block_end(i), heads, b.mixed);
  });
}

double loglog_slope(const std::vector<KernelTiming>& points) {
  if (points.size() < 2) throw std::invalid_argument("slope fit needs at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : points) {
    double x = std::log((double)p.L), y = std::log(p.min_ns);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double n = (double)points.size();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// report assembly

CostReport build_cost_report(const ModelConfig& cfg, const ModelParams<float>& params,
                             const std::vector<TokenMapPyramid>& batch,
                             const std::vector<int>& classes) {
  CostReport r;
  r.schedule = cfg.schedule;
  r.d = cfg.d;
  r.n_heads = cfg.n_heads;
  auto [intra_m, inter_m] = measure_attention_mass(cfg, params, batch, classes);
  r.intra_score_mass = intra_m;
  r.inter_score_mass = inter_m;
  auto [fi, fe] = analytic_attention_flops(cfg.schedule, cfg.d);
  r.intra_flops = fi;
  r.inter_flops = fe;
  r.intra_flops_frac = (double)fi / (double)(fi + fe);
  r.inter_flops_frac = (double)fe / (double)(fi + fe);
  r.chance_intra_mass = uniform_chance_intra_mass(cfg.schedule);
  if (std::abs(r.intra_score_mass + r.inter_score_mass - 1.0) > 1e-9)
    throw std::runtime_error("mass fractions failed to sum to 1");
  if (std::abs(r.intra_flops_frac + r.inter_flops_frac - 1.0) > 1e-12)
    throw std::runtime_error("flops fractions failed to sum to 1");
  return r;
}

static std::string sides_csv(const ScaleSchedule& s) {
  std::string out;
  for (size_t i = 0; i < s.sides.size(); ++i)
    out += (i ? "," : "") + std::to_string(s.sides[i]);
  return out;
}

std::string cost_report_kv(const CostReport& r) {
  std::ostringstream o;
  o << std::setprecision(12);
  o << "schedule=" << sides_csv(r.schedule) << "\n";
  o << "d=" << r.d << "\n";
  o << "n_heads=" << r.n_heads << "\n";
  o << "intra_score_mass=" << r.intra_score_mass << "\n";
  o << "inter_score_mass=" << r.inter_score_mass << "\n";
  o << "intra_flops=" << r.intra_flops << "\n";
  o << "inter_flops=" << r.inter_flops << "\n";
  o << "intra_flops_frac=" << r.intra_flops_frac << "\n";
  o << "inter_flops_frac=" << r.inter_flops_frac << "\n";
  o << "chance_intra_mass=" << r.chance_intra_mass << "\n";
  o << "ref_intra_mass=" << r.ref_intra_mass << "\n";
  o << "ref_intra_compute=" << r.ref_intra_compute << "\n";
  return o.str();
}

static bool file_exists(const std::string& path) {
  struct stat st;
  return stat(path.c_str(), &st) == 0;
}

void append_cost_csv(const std::string& path, const CostReport& r) {
  bool fresh = !file_exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open " + path + " for appending");
  if (fresh)
    f << "schedule,d,n_heads,intra_score_mass,inter_score_mass,intra_flops,inter_flops,"
         "intra_flops_frac,inter_flops_frac,chance_intra_mass\n";
  f << std::setprecision(12) << '"' << sides_csv(r.schedule) << '"' << ',' << r.d << ','
    << r.n_heads << ',' << r.intra_score_mass << ',' << r.inter_score_mass << ','
    << r.intra_flops << ',' << r.inter_flops << ',' << r.intra_flops_frac << ','
    << r.inter_flops_frac << ',' << r.chance_intra_mass << "\n";
  if (!f) throw std::runtime_error("write failed for " + path);
}

void append_timing_csv(const std::string& path, const KernelTiming& t) {
  bool fresh = !file_exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open " + path + " for appending");
  if (fresh) f << "kernel,L,ops,median_ns,min_ns\n";
  f << bench_kernel_name(t.kernel) << ',' << t.L << ',' << t.ops << ','
    << (uint64_t)t.median_ns << ',' << (uint64_t)t.min_ns << "\n";
  if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace mvar
