#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mvar/cost.hpp"
#include "mvar/gradcheck.hpp"
#include "mvar/opcount.hpp"
#include "mvar/rng.hpp"

using namespace mvar;

namespace {

const std::vector<int> kTenScales = {1, 2, 3, 4, 5, 6, 8, 10, 13, 16};

ModelConfig small_global(std::vector<int> sides) {
  ModelConfig cfg;
  cfg.schedule = ScaleSchedule::from_sides(std::move(sides));
  cfg.d = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_inner = 24;
  cfg.n_state = 4;
  cfg.vocab = 13;
  cfg.n_classes = 3;
  cfg.layer_modes.assign(2, LayerMode::kGlobalAttention);
  finalize_config(cfg);
  return cfg;
}

TokenMapPyramid random_pyramid(const ModelConfig& cfg, Rng& rng) {
  TokenMapPyramid pyr;
  pyr.schedule = cfg.schedule;
  for (int s : cfg.schedule.sides) {
    std::vector<int> m((size_t)s * s);
    for (auto& id : m) id = rng.uniform_int(cfg.vocab);
    pyr.maps.push_back(std::move(m));
  }
  return pyr;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("analytic split for the ten-scale schedule") {
  ScaleSchedule ten = ScaleSchedule::from_sides(kTenScales);
  // sum of squared block lengths and of length*prefix, checked by raw sums
  uint64_t sum_ll = 0, sum_lp = 0, pfx = 0;
  for (int s : kTenScales) {
    uint64_t l = (uint64_t)s * s;
    pfx += l;
    sum_ll += l * l;
    sum_lp += l * pfx;
  }
  CHECK(sum_ll == 110468);
  CHECK(sum_lp == 286434);
  for (int d : {4, 64}) {
    auto [intra, inter] = analytic_attention_flops(ten, d);
    CHECK(intra == 2ull * (uint64_t)d * sum_ll);
    CHECK(intra + inter == 2ull * (uint64_t)d * sum_lp);
    double frac = (double)inter / (double)(intra + inter);
    CHECK(frac == doctest::Approx(0.6143335).epsilon(1e-6));  // 175966 / 286434
    CHECK(frac >= 0.60);
  }
  CHECK(analytic_plain_attention_flops(680, 64) == 2ull * 64 * 680 * 680);
}

TEST_CASE("uniform-attention chance mass") {
  CHECK(uniform_chance_intra_mass(ScaleSchedule::from_sides({1, 2})) ==
        doctest::Approx(0.84).epsilon(1e-12));
  // (1 + 16/5 + 81/14 + 256/30) / 30
  CHECK(uniform_chance_intra_mass(ScaleSchedule::from_sides({1, 2, 3, 4})) ==
        doctest::Approx(0.6173015873).epsilon(1e-9));
  CHECK(uniform_chance_intra_mass(ScaleSchedule::from_sides({1})) == doctest::Approx(1.0));
}

TEST_CASE("instrumented attention cost equals the closed form") {
  Rng rng(71);
  const int d = 16;
  for (auto sides : {std::vector<int>{1, 2, 3, 4}, kTenScales}) {
    ScaleSchedule sch = ScaleSchedule::from_sides(sides);
    SequenceLayout lay = build_layout(sch);
    AttnParams<float> p = make_attn_params<float>(d, 2);
    for (auto* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o})
      for (auto& x : m->v) x = (float)(rng.normal() * 0.1);
    Mat<float> x(lay.total_len, d);
    for (auto& v : x.v) v = (float)rng.normal();

    auto [intra, inter] = analytic_attention_flops(sch, d);
    opcount::reset();
    attend_scale_causal(x, lay, p);
    CHECK(opcount::get() == intra + inter);  // integer equality, no slack
    opcount::reset();
    attend_sequence(x, lay, p);
    CHECK(opcount::get() == intra);
  }
}

TEST_CASE("dense attention cost is quadratic, the scan linear") {
  Rng rng(72);
  const int d = 8, L = 40;
  AttnParams<float> p = make_attn_params<float>(d, 1);
  for (auto* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o})
    for (auto& x : m->v) x = (float)(rng.normal() * 0.1);
  auto dense_macs = [&](int len) {
    Mat<float> x(len, d);
    for (auto& v : x.v) v = (float)rng.normal();
    Mat<float> Q(len, d), K(len, d), V(len, d), mixed(len, d);
    matmul(x, p.w_q, Q);
    matmul(x, p.w_k, K);
    matmul(x, p.w_v, V);
    opcount::reset();
    detail::attn_core_block(Q, K, V, 0, len, 1, mixed);
    return opcount::get();
  };
  CHECK(dense_macs(L) == analytic_plain_attention_flops(L, d));
  CHECK(dense_macs(2 * L) == 4 * dense_macs(L));  // doubling L quadruples the core

  SsmParams<float> sp = make_ssm_params<float>(d, 2 * d, 4);
  for (auto& v : sp.w_in.v) v = (float)(rng.normal() * 0.1);
  auto scan_macs = [&](int len) {
    Mat<float> x(len, d);
    for (auto& v : x.v) v = (float)(rng.normal() * 0.1);
    opcount::reset();
    scan_sequence(x, sp);
    return opcount::get();
  };
  CHECK(scan_macs(2 * L) == 2 * scan_macs(L));  // doubling L doubles the scan
}

TEST_CASE("uniform attention measures exactly chance mass") {
  ModelConfig cfg = small_global({1, 2, 3, 4});
  ModelParams<float> p = init_model_params<float>(cfg, 73);
  for (auto& l : p.layers) l.attn.w_q.zero();  // scores all zero -> uniform
  Rng rng(74);
  std::vector<TokenMapPyramid> batch;
  std::vector<int> classes;
  for (int i = 0; i < 3; ++i) {
    batch.push_back(random_pyramid(cfg, rng));
    classes.push_back(rng.uniform_int(cfg.n_classes));
  }
  auto [intra, inter] = measure_attention_mass(cfg, p, batch, classes);
  double chance = uniform_chance_intra_mass(cfg.schedule);
  // probabilities pass through float(1/prefix_len), so ~1e-8 rounding remains
  CHECK(intra == doctest::Approx(chance).epsilon(1e-6));
  CHECK(intra + inter == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("untrained attention sits near chance mass") {
  ModelConfig cfg = small_global({1, 2, 3, 4});
  ModelParams<float> p = init_model_params<float>(cfg, 75);
  Rng rng(76);
  std::vector<TokenMapPyramid> batch;
  std::vector<int> classes;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(random_pyramid(cfg, rng));
    classes.push_back(rng.uniform_int(cfg.n_classes));
  }
  CostReport r = build_cost_report(cfg, p, batch, classes);
  CHECK(std::fabs(r.intra_score_mass - r.chance_intra_mass) < 0.05);
  CHECK(r.intra_score_mass + r.inter_score_mass == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.intra_flops_frac + r.inter_flops_frac == doctest::Approx(1.0).epsilon(1e-12));
  auto [ia, ie] = analytic_attention_flops(cfg.schedule, cfg.d);
  CHECK(r.intra_flops == ia);
  CHECK(r.inter_flops == ie);
  CHECK(r.ref_intra_mass == doctest::Approx(0.796));
  CHECK(r.ref_intra_compute == doctest::Approx(0.239));

  std::string kv = cost_report_kv(r);
  CHECK(kv.find("intra_score_mass=") != std::string::npos);
  CHECK(kv.find("chance_intra_mass=") != std::string::npos);
  CHECK(kv.find("schedule=1,2,3,4") != std::string::npos);
}

TEST_CASE("mass measurement insists on a global stack") {
  ModelConfig cfg = small_global({1, 2});
  cfg.layer_modes.assign(2, LayerMode::kDecoupled);
  finalize_config(cfg);
  ModelParams<float> p = init_model_params<float>(cfg, 77);
  Rng rng(78);
  std::vector<TokenMapPyramid> batch{random_pyramid(cfg, rng)};
  std::vector<int> classes{0};
  CHECK_THROWS_AS(measure_attention_mass(cfg, p, batch, classes), std::invalid_argument);
}

TEST_CASE("kernel timings report exact op counts") {
  const int d = 16, L = 48;
  KernelTiming g = measured_kernel_cost(BenchKernel::kGlobalAttention, L, d, 3, 1);
  CHECK(g.ops == analytic_plain_attention_flops(L, d));
  CHECK(g.min_ns > 0);
  CHECK(g.median_ns >= g.min_ns);

  KernelTiming s = measured_kernel_cost(BenchKernel::kInterScan, L, d, 3, 1);
  CHECK(s.ops == scan_step_macs(d, 2 * d, 16, false) * (uint64_t)L);

  CHECK_THROWS_AS(measured_kernel_cost(BenchKernel::kIntraAttention, L, d, 3, 1),
                  std::invalid_argument);

  ScaleSchedule sch = ScaleSchedule::from_sides({1, 2, 3});
  auto [ia, ie] = analytic_attention_flops(sch, d);
  KernelTiming gs = measured_kernel_cost(BenchKernel::kGlobalAttention, sch, d, 3, 1);
  CHECK(gs.ops == ia + ie);
  CHECK(gs.L == 14);
  KernelTiming is = measured_kernel_cost(BenchKernel::kIntraAttention, sch, d, 3, 1);
  CHECK(is.ops == ia);
  KernelTiming ss = measured_kernel_cost(BenchKernel::kInterScan, sch, d, 3, 1);
  CHECK(ss.ops == scan_step_macs(d, 2 * d, 16, false) * 14ull);
}

TEST_CASE("log-log slope recovers known growth laws") {
  std::vector<KernelTiming> quad, lin;
  for (int L : {256, 512, 1024, 2048}) {
    KernelTiming q;
    q.L = L;
    q.min_ns = 3.0 * L * L;
    quad.push_back(q);
    KernelTiming l;
    l.L = L;
    l.min_ns = 7.0 * L;
    lin.push_back(l);
  }
  CHECK(loglog_slope(quad) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(loglog_slope(lin) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("cost and timing csv appenders") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "mvar_cost_csv_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  ModelConfig cfg = small_global({1, 2});
  ModelParams<float> p = init_model_params<float>(cfg, 79);
  Rng rng(80);
  std::vector<TokenMapPyramid> batch{random_pyramid(cfg, rng)};
  std::vector<int> classes{1};
  CostReport r = build_cost_report(cfg, p, batch, classes);

  std::string cpath = (dir / "cost.csv").string();
  append_cost_csv(cpath, r);
  append_cost_csv(cpath, r);
  std::string ctext = slurp(cpath);
  size_t first = ctext.find("intra_score_mass");
  CHECK(first != std::string::npos);  // header appears exactly once
  CHECK(ctext.find("intra_score_mass", first + 1) == std::string::npos);
  int lines = 0;
  for (char ch : ctext)
    if (ch == '\n') ++lines;
  CHECK(lines == 3);  // header + two rows

  KernelTiming t = measured_kernel_cost(BenchKernel::kInterScan, 16, 8, 2, 3);
  std::string tpath = (dir / "timing.csv").string();
  append_timing_csv(tpath, t);
  std::string ttext = slurp(tpath);
  CHECK(ttext.find("kernel,L,ops,median_ns,min_ns") == 0);
  CHECK(ttext.find("inter_scan,16,") != std::string::npos);

  fs::remove_all(dir);
}
