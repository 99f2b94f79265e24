#include "mvar/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "mvar/checkpoint.hpp"
#include "mvar/config.hpp"
#include "mvar/cost.hpp"
#include "mvar/dataset.hpp"
#include "mvar/gradcheck.hpp"
#include "mvar/parallel.hpp"
#include "mvar/train.hpp"

namespace mvar {

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config_path, "key=value config file");
  sub->add_option("--set", a.sets, "override, e.g. --set steps=50 (repeatable)");
  sub->add_option("--seed", a.seed, "override the config seed")
      ->each([&a](const std::string&) { a.seed_given = true; });
  sub->add_flag("--deterministic", a.deterministic, "force single-worker execution");
}

TrainConfig load_train_config(const CommonArgs& a) {
  KvMap kv;
  if (!a.config_path.empty()) kv = parse_config_file(a.config_path);
  apply_overrides(kv, a.sets);
  if (a.seed_given) kv["seed"] = std::to_string(a.seed);
  TrainConfig tc = make_train_config(kv);
  if (a.deterministic) force_single_worker(true);
  return tc;
}

void write_metrics_csv(const std::string& path, const TrainStats& stats) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "step,train_nll,val_nll\n";
  char line[96];
  for (const auto& e : stats.log) {
    std::snprintf(line, sizeof line, "%d,%.9f,%.9f\n", e.step, e.train_nll, e.val_nll);
    f << line;
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

int cmd_gen_data(const CommonArgs& a, const std::string& out) {
  TrainConfig tc = load_train_config(a);
  ToyDataset ds = generate_toy_dataset(tc.per_class + tc.val_per_class, tc.model.n_classes,
                                       tc.image_side(), derive_seed(tc.seed, 0xda7a));
  save_dataset(out, ds);
  std::printf("wrote %s: %d images (%dx%d, %d classes)\n", out.c_str(), ds.count, ds.height,
              ds.width, ds.n_classes);
  return 0;
}

int cmd_train(const CommonArgs& a, const std::string& out_flag) {
  TrainConfig tc = load_train_config(a);
  if (!out_flag.empty()) tc.out_path = out_flag;
  PreparedData data = prepare_data(tc);
  ModelParams<float> params = init_model_params<float>(tc.model, derive_seed(tc.seed, 0x0d31));
  TrainStats stats = train_model(tc, data, params);
  Checkpoint ck{tc, std::move(params), data.codebook, data.lift};
  save_checkpoint(tc.out_path, ck);
  write_metrics_csv(tc.out_path + ".metrics.csv", stats);
  std::printf("ran %d steps: train nll %.5f", stats.steps_run, stats.final_train_nll);
  if (!data.val_pyr.empty()) std::printf(", val nll %.5f", stats.val_nll);
  std::printf("\nwrote %s and %s.metrics.csv\n", tc.out_path.c_str(), tc.out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, int samples, int candidates,
             double temperature, int top_k, uint64_t seed, bool deterministic) {
  if (deterministic) force_single_worker(true);
  Checkpoint ck = load_checkpoint(ckpt);
  ToyDataset ds;
  if (!data_path.empty()) {
    ds = load_dataset(data_path);
  } else {
    // regenerate this run's data and evaluate on its val split
    ToyDataset all = dataset_for_config(ck.train);
    auto [train_idx, val_idx] = split_train_val(all, ck.train);
    ds = dataset_subset(all, val_idx.empty() ? train_idx : val_idx);
  }
  SamplingParams sp;
  sp.temperature = temperature;
  sp.top_k = top_k;
  sp.seed = seed;
  validate_sampling(sp, ck.train.model.vocab);
  EvalReport r = evaluate_model(ck, ds, samples, candidates, sp);
  std::printf("val_nll=%.6f\n", r.val_nll);
  std::printf("codebook_utilization=%.6f\n", r.codebook_utilization);
  std::printf("class_fidelity=%.6f\n", r.class_fidelity);
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& prefix, int cls, int n,
               int candidates, double temperature, int top_k, uint64_t seed,
               bool deterministic) {
  if (deterministic) force_single_worker(true);
  Checkpoint ck = load_checkpoint(ckpt);
  const ModelConfig& cfg = ck.train.model;
  if (cls >= cfg.n_classes)
    throw std::invalid_argument("--class " + std::to_string(cls) + " outside [0, " +
                                std::to_string(cfg.n_classes) + ")");
  SamplingParams sp;
  sp.temperature = temperature;
  sp.top_k = top_k;
  validate_sampling(sp, cfg.vocab);
  int side = cfg.schedule.finest();
  int px = ck.train.image_side();
  std::vector<uint8_t> rgb((size_t)px * px * 3);
  ClassColors protos;
  for (int c = 0; c < cfg.n_classes; ++c) {
    auto col = class_color(c);
    protos.push_back({(double)col[0], (double)col[1], (double)col[2]});
  }
  auto scorer = make_class_color_scorer(ck.lift, side, protos);
  int c0 = cls < 0 ? 0 : cls;
  int c1 = cls < 0 ? cfg.n_classes : cls + 1;
  for (int c = c0; c < c1; ++c) {
    for (int i = 0; i < n; ++i) {
      SamplingParams spi = sp;
      spi.seed = derive_seed(seed, (uint64_t)(c * n + i));
      TokenMapPyramid pyr =
          candidates > 1
              ? generate_with_rejection(c, candidates, cfg, ck.params, ck.codebook, spi, scorer)
              : generate(c, cfg, ck.params, spi);
      Mat<float> feats = decode_multiscale(pyr, ck.codebook);
      ck.lift.unlift(feats, side, rgb.data());
      std::string path = prefix + "_c" + std::to_string(c) + "_" + std::to_string(i) + ".ppm";
      write_ppm(path, rgb.data(), px, px);
      std::printf("wrote %s\n", path.c_str());
    }
  }
  return 0;
}

int cmd_bench(const std::string& out, int repeats, int d, const std::string& scales_csv,
              uint64_t seed) {
  ScaleSchedule sched = parse_scales(scales_csv);
  std::vector<KernelTiming> global_pts, scan_pts;
  for (int L : {256, 512, 1024, 2048, 4096}) {
    KernelTiming g =
        measured_kernel_cost(BenchKernel::kGlobalAttention, L, d, repeats, derive_seed(seed, L));
    KernelTiming s =
        measured_kernel_cost(BenchKernel::kInterScan, L, d, repeats, derive_seed(seed, L + 1));
    append_timing_csv(out, g);
    append_timing_csv(out, s);
    global_pts.push_back(g);
    scan_pts.push_back(s);
    std::printf("L=%4d  attention %12.0f ns (%llu MACs)   scan %12.0f ns (%llu MACs)\n", L,
                g.min_ns, (unsigned long long)g.ops, s.min_ns, (unsigned long long)s.ops);
  }
  for (BenchKernel k : {BenchKernel::kGlobalAttention, BenchKernel::kIntraAttention,
                        BenchKernel::kInterScan}) {
    KernelTiming t = measured_kernel_cost(k, sched, d, repeats, derive_seed(seed, 99));
    append_timing_csv(out, t);
    std::printf("schedule %-16s %12.0f ns (%llu MACs)\n", bench_kernel_name(k), t.min_ns,
                (unsigned long long)t.ops);
  }
  std::printf("log-log slope: attention %.3f, scan %.3f\n", loglog_slope(global_pts),
              loglog_slope(scan_pts));
  std::printf("appended %s\n", out.c_str());
  return 0;
}

int cmd_analyze_cost(const std::string& ckpt, const std::string& out, const std::string& csv) {
  Checkpoint ck = load_checkpoint(ckpt);
  PreparedData data = prepare_data(ck.train);
  const auto& pyrs = data.val_pyr.empty() ? data.train_pyr : data.val_pyr;
  const auto& cls = data.val_pyr.empty() ? data.train_cls : data.val_cls;
  CostReport r = build_cost_report(ck.train.model, ck.params, pyrs, cls);
  std::string kv = cost_report_kv(r);
  if (out.empty()) {
    std::fputs(kv.c_str(), stdout);
  } else {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + out + " for writing");
    f << kv;
    std::printf("wrote %s\n", out.c_str());
  }
  if (!csv.empty()) {
    append_cost_csv(csv, r);
    std::printf("appended %s\n", csv.c_str());
  }
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  auto run = [&](const char* label, ModelConfig cfg) {
    auto entries = gradcheck_model(cfg, seed);
    bool ok = true;
    for (const auto& e : entries) {
      std::printf("  %-22s rel err %.3e %s\n", e.tensor.c_str(), e.rel_err,
                  e.ok ? "ok" : "FAIL");
      ok = ok && e.ok;
    }
    std::printf("%s: %s\n", label, ok ? "pass" : "FAIL");
    return ok;
  };
  ModelConfig dec;
  dec.schedule = ScaleSchedule::from_sides({1, 2});
  dec.d = 8;
  dec.n_layers = 1;
  dec.n_heads = 2;
  dec.d_inner = 16;
  dec.n_state = 4;
  dec.vocab = 10;
  dec.n_classes = 3;
  dec.use_conv = true;
  dec.use_ffn = true;

  ModelConfig glob = dec;
  glob.use_conv = false;
  glob.layer_modes.assign(1, LayerMode::kGlobalAttention);

  bool ok = run("decoupled layer (conv+ffn)", dec);
  ok = run("global-attention layer", glob) && ok;
  return ok ? 0 : 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"scale-wise autoregressive toy image model"};
  app.require_subcommand(1);

  CommonArgs gen_a, train_a;
  std::string gen_out = "data.mvds", train_out;
  auto* gen = app.add_subcommand("gen-data", "generate the toy dataset file");
  add_common(gen, gen_a);
  gen->add_option("--out", gen_out, "output .mvds path");

  auto* train = app.add_subcommand("train", "fit tokenizer + model, write a checkpoint");
  add_common(train, train_a);
  train->add_option("--out", train_out, "checkpoint path (overrides config 'out')");

  std::string eval_ckpt, eval_data;
  int eval_samples = 64, eval_cand = 1, eval_topk = 0;
  double eval_temp = 1.0;
  uint64_t eval_seed = 7;
  bool eval_det = false;
  auto* ev = app.add_subcommand("eval", "NLL, codebook use and class fidelity of a checkpoint");
  ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--data", eval_data, "dataset to evaluate on (default: the run's val split)");
  ev->add_option("--samples", eval_samples, "generation count for fidelity");
  ev->add_option("--candidates", eval_cand, "rejection candidates per sample");
  ev->add_option("--temperature", eval_temp, "sampling temperature");
  ev->add_option("--top-k", eval_topk, "top-k truncation (0 = off)");
  ev->add_option("--seed", eval_seed, "sampling seed");
  ev->add_flag("--deterministic", eval_det, "force single-worker execution");

  std::string smp_ckpt, smp_prefix = "sample";
  int smp_cls = -1, smp_n = 1, smp_cand = 1, smp_topk = 0;
  double smp_temp = 1.0;
  uint64_t smp_seed = 7;
  bool smp_det = false;
  auto* smp = app.add_subcommand("sample", "decode generations to PPM images");
  smp->add_option("--ckpt", smp_ckpt, "checkpoint path")->required();
  smp->add_option("--out", smp_prefix, "output filename prefix");
  smp->add_option("--class", smp_cls, "class id (default: every class)");
  smp->add_option("--n", smp_n, "samples per class");
  smp->add_option("--candidates", smp_cand, "rejection candidates per sample");
  smp->add_option("--temperature", smp_temp, "sampling temperature");
  smp->add_option("--top-k", smp_topk, "top-k truncation (0 = off)");
  smp->add_option("--seed", smp_seed, "sampling seed");
  smp->add_flag("--deterministic", smp_det, "force single-worker execution");

  std::string bench_out = "bench.csv";
  std::string bench_scales = "1,2,3,4,5,6,8,10,13,16";
  int bench_repeats = 11, bench_d = 64;
  uint64_t bench_seed = 7;
  auto* bench = app.add_subcommand("bench", "time the attention and scan kernels");
  bench->add_option("--out", bench_out, "CSV to append");
  bench->add_option("--repeats", bench_repeats, "timed repeats per kernel");
  bench->add_option("--d", bench_d, "model width for the kernels");
  bench->add_option("--scales", bench_scales, "schedule for the masked variants");
  bench->add_option("--seed", bench_seed, "input seed");

  std::string ac_ckpt, ac_out, ac_csv;
  auto* ac = app.add_subcommand("analyze-cost",
                                "attention-mass and compute accounting of a checkpoint");
  ac->add_option("--ckpt", ac_ckpt, "checkpoint path (must be all global-attention)")->required();
  ac->add_option("--out", ac_out, "write the key=value report here instead of stdout");
  ac->add_option("--csv", ac_csv, "also append a CSV row");

  uint64_t gc_seed = 42;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  gc->add_option("--seed", gc_seed, "parameter/input seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_a, gen_out);
    if (train->parsed()) return cmd_train(train_a, train_out);
    if (ev->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_samples, eval_cand, eval_temp, eval_topk,
                      eval_seed, eval_det);
    if (smp->parsed())
      return cmd_sample(smp_ckpt, smp_prefix, smp_cls, smp_n, smp_cand, smp_temp, smp_topk,
                        smp_seed, smp_det);
    if (bench->parsed()) return cmd_bench(bench_out, bench_repeats, bench_d, bench_scales,
                                          bench_seed);
    if (ac->parsed()) return cmd_analyze_cost(ac_ckpt, ac_out, ac_csv);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace mvar
