#include "mvar/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "mvar/parallel.hpp"
#include "mvar/rng.hpp"

namespace mvar {

TokenMapPyramid encode_image(const uint8_t* rgb, const TrainConfig& tc, const PixelLift& lift,
                             const Codebook& cb) {
  int side = tc.model.schedule.finest();
  Mat<float> feats = lift.lift(rgb, tc.image_side(), tc.image_side(), side);
  return encode_multiscale(feats, tc.model.schedule, cb);
}

namespace {

// Pooled residuals of an error-free multi-scale decomposition: what the
// quantizer would see if every earlier scale had quantized exactly. Gives
// the k-means corpus a realistic coarse-to-fine spread without needing a
// codebook to exist yet.
void ideal_residual_rows(const Mat<float>& feats, const ScaleSchedule& sched,
                         std::vector<float>& out) {
  int finest = sched.finest();
  Mat<float> resid = feats;
  for (int i = 0; i < sched.num_scales(); ++i) {
    int side = sched.sides[(size_t)i];
    Mat<float> pooled = mean_pool(resid, finest, side);
    out.insert(out.end(), pooled.v.begin(), pooled.v.end());
    Mat<float> up = upsample_grid(pooled, side, finest);
    for (size_t k = 0; k < resid.v.size(); ++k) resid.v[k] -= up.v[k];
  }
}

}  // namespace

ToyDataset dataset_for_config(const TrainConfig& tc) {
  if (tc.data_path.empty())
    return generate_toy_dataset(tc.per_class + tc.val_per_class, tc.model.n_classes,
                                tc.image_side(), derive_seed(tc.seed, 0xda7a));
  ToyDataset ds = load_dataset(tc.data_path);
  if (ds.n_classes != tc.model.n_classes)
    throw std::invalid_argument(tc.data_path + " has " + std::to_string(ds.n_classes) +
                                " classes, config expects " +
                                std::to_string(tc.model.n_classes));
  if (ds.height != tc.image_side() || ds.width != tc.image_side())
    throw std::invalid_argument(tc.data_path + " images are " + std::to_string(ds.height) +
                                "x" + std::to_string(ds.width) + ", config expects " +
                                std::to_string(tc.image_side()) + " square");
  return ds;
}

std::pair<std::vector<int>, std::vector<int>> split_train_val(const ToyDataset& ds,
                                                              const TrainConfig& tc) {
  std::vector<std::vector<int>> by_class((size_t)ds.n_classes);
  for (int i = 0; i < ds.count; ++i) by_class[(size_t)ds.labels[(size_t)i]].push_back(i);
  std::vector<int> train_idx, val_idx;
  for (int c = 0; c < ds.n_classes; ++c) {
    const auto& idx = by_class[(size_t)c];
    if ((int)idx.size() < tc.per_class)
      throw std::invalid_argument("class " + std::to_string(c) + " has only " +
                                  std::to_string(idx.size()) + " images, per_class needs " +
                                  std::to_string(tc.per_class));
    for (size_t s = 0; s < idx.size(); ++s) {
      if ((int)s < tc.per_class) train_idx.push_back(idx[s]);
      else if ((int)s < tc.per_class + tc.val_per_class) val_idx.push_back(idx[s]);
    }
  }
  return {train_idx, val_idx};
}

ToyDataset dataset_subset(const ToyDataset& ds, const std::vector<int>& indices) {
  ToyDataset out;
  out.count = (int)indices.size();
  out.height = ds.height;
  out.width = ds.width;
  out.channels = ds.channels;
  out.n_classes = ds.n_classes;
  size_t img_bytes = (size_t)ds.height * ds.width * 3;
  for (int i : indices) {
    const uint8_t* img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img, img + img_bytes);
    out.labels.push_back(ds.labels[(size_t)i]);
  }
  return out;
}

PreparedData prepare_data(const TrainConfig& tc) {
  PreparedData d;
  d.images = dataset_for_config(tc);
  d.lift = PixelLift::create(tc.code_dim(), tc.patch, derive_seed(tc.seed, 0x11f7));

  int side = tc.model.schedule.finest();
  auto [train_idx, val_idx] = split_train_val(d.images, tc);

  std::vector<float> corpus_rows;
  std::vector<Mat<float>> train_feats(train_idx.size());
  for (size_t i = 0; i < train_idx.size(); ++i) {
    train_feats[i] =
        d.lift.lift(d.images.image(train_idx[i]), tc.image_side(), tc.image_side(), side);
    ideal_residual_rows(train_feats[i], tc.model.schedule, corpus_rows);
  }
  Mat<float> corpus((int)(corpus_rows.size() / (size_t)tc.code_dim()), tc.code_dim());
  corpus.v = std::move(corpus_rows);
  d.codebook = fit_codebook(corpus, tc.model.vocab, derive_seed(tc.seed, 0xc0de));

  for (size_t i = 0; i < train_idx.size(); ++i) {
    d.train_pyr.push_back(encode_multiscale(train_feats[i], tc.model.schedule, d.codebook));
    d.train_cls.push_back(d.images.labels[(size_t)train_idx[i]]);
  }
  for (int idx : val_idx) {
    d.val_pyr.push_back(encode_image(d.images.image(idx), tc, d.lift, d.codebook));
    d.val_cls.push_back(d.images.labels[(size_t)idx]);
  }
  return d;
}

double mean_nll(const ModelConfig& cfg, const ModelParams<float>& params,
                const std::vector<TokenMapPyramid>& pyrs, const std::vector<int>& classes) {
  if (pyrs.empty()) throw std::invalid_argument("mean_nll over an empty set");
  std::vector<double> per((size_t)pyrs.size());
  parallel_for((int)pyrs.size(), [&](int i) {
    per[(size_t)i] = loss_and_grad<float>(pyrs[(size_t)i], classes[(size_t)i], cfg, params,
                                          nullptr);
  });
  return std::accumulate(per.begin(), per.end(), 0.0) / (double)per.size();
}

double argmax_accuracy(const ModelConfig& cfg, const ModelParams<float>& params,
                       const std::vector<TokenMapPyramid>& pyrs,
                       const std::vector<int>& classes) {
  if (pyrs.empty()) throw std::invalid_argument("accuracy over an empty set");
  std::vector<int64_t> hit((size_t)pyrs.size()), tot((size_t)pyrs.size());
  parallel_for((int)pyrs.size(), [&](int i) {
    Mat<float> x = build_input_sequence(pyrs[(size_t)i], classes[(size_t)i], params, cfg);
    Mat<float> logits = model_forward(x, cfg, params, (ForwardCache<float>*)nullptr);
    std::vector<int> tgt = flatten_targets(pyrs[(size_t)i]);
    for (int r = 0; r < logits.rows; ++r) {
      const float* lr = logits.row(r);
      int best = 0;
      for (int k = 1; k < logits.cols; ++k)
        if (lr[k] > lr[best]) best = k;
      hit[(size_t)i] += best == tgt[(size_t)r];
      tot[(size_t)i] += 1;
    }
  });
  double h = (double)std::accumulate(hit.begin(), hit.end(), (int64_t)0);
  double t = (double)std::accumulate(tot.begin(), tot.end(), (int64_t)0);
  return h / t;
}

double codebook_utilization(const std::vector<TokenMapPyramid>& pyrs, int vocab) {
  std::vector<char> used((size_t)vocab, 0);
  for (const auto& p : pyrs)
    for (const auto& m : p.maps)
      for (int id : m) used.at((size_t)id) = 1;
  int n = 0;
  for (char u : used) n += u;
  return (double)n / (double)vocab;
}

TrainStats train_model(const TrainConfig& tc, const PreparedData& data,
                       ModelParams<float>& params, const TrainOptions& opt) {
  const ModelConfig& cfg = tc.model;
  if (data.train_pyr.empty()) throw std::invalid_argument("training set is empty");
  int n_train = (int)data.train_pyr.size();
  int batch = std::min(tc.batch, n_train);

  std::vector<Mat<float>*> theta = param_tensors(params, cfg);
  ModelParams<float> vel = make_model_params<float>(cfg);
  std::vector<Mat<float>*> vel_t = param_tensors(vel, cfg);
  std::vector<ModelParams<float>> item_grads;
  for (int b = 0; b < batch; ++b) item_grads.push_back(make_model_params<float>(cfg));
  std::vector<std::vector<Mat<float>*>> item_t;
  for (auto& g : item_grads) item_t.push_back(param_tensors(g, cfg));
  ModelParams<float> grad = make_model_params<float>(cfg);
  std::vector<Mat<float>*> grad_t = param_tensors(grad, cfg);

  Rng batch_rng(derive_seed(tc.seed, 0xba7c4));
  TrainStats stats;
  double lr_min = tc.lr * tc.lr_min_frac;
  std::vector<double> item_loss((size_t)batch);

  for (int step = 0; step < tc.steps; ++step) {
    std::vector<int> pick((size_t)batch);
    for (int b = 0; b < batch; ++b) pick[(size_t)b] = batch_rng.uniform_int(n_train);

    parallel_for(batch, [&](int b) {
      for (auto* m : item_t[(size_t)b]) m->zero();
      int i = pick[(size_t)b];
      item_loss[(size_t)b] = loss_and_grad<float>(data.train_pyr[(size_t)i],
                                                  data.train_cls[(size_t)i], cfg, params,
                                                  &item_grads[(size_t)b]);
    });

    double batch_nll = std::accumulate(item_loss.begin(), item_loss.end(), 0.0) / batch;
    if (!std::isfinite(batch_nll))
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step));

    // index-ordered reduction keeps the update identical at any worker count
    for (size_t t = 0; t < grad_t.size(); ++t) {
      Mat<float>& g = *grad_t[t];
      g.zero();
      for (int b = 0; b < batch; ++b) {
        const Mat<float>& ig = *item_t[(size_t)b][t];
        for (size_t k = 0; k < g.v.size(); ++k) g.v[k] += ig.v[k];
      }
      for (auto& v : g.v) v /= (float)batch;
    }

    if (tc.clip > 0) {
      double sq = 0;
      for (auto* g : grad_t)
        for (float v : g->v) sq += (double)v * v;
      double norm = std::sqrt(sq);
      if (norm > tc.clip) {
        float s = (float)(tc.clip / norm);
        for (auto* g : grad_t)
          for (auto& v : g->v) v *= s;
      }
    }

    double lr_t =
        tc.steps > 1
            ? lr_min + 0.5 * (tc.lr - lr_min) * (1.0 + std::cos(M_PI * step / (tc.steps - 1)))
            : tc.lr;
    for (size_t t = 0; t < theta.size(); ++t) {
      Mat<float>& th = *theta[t];
      Mat<float>& ve = *vel_t[t];
      const Mat<float>& g = *grad_t[t];
      for (size_t k = 0; k < th.v.size(); ++k) {
        ve.v[k] = (float)(tc.momentum * ve.v[k] - lr_t * g.v[k]);
        th.v[k] += ve.v[k];
      }
    }
    stats.steps_run = step + 1;

    if ((step + 1) % tc.log_every == 0 || step + 1 == tc.steps) {
      LogEntry e;
      e.step = step + 1;
      e.train_nll = batch_nll;
      if (!data.val_pyr.empty()) e.val_nll = mean_nll(cfg, params, data.val_pyr, data.val_cls);
      stats.log.push_back(e);
      if (opt.on_log) opt.on_log(e);
      if (opt.verbose)
        std::printf("step %5d  lr %.5f  train nll %.5f  val nll %.5f\n", e.step, lr_t,
                    e.train_nll, e.val_nll);
    }
    if (opt.stop_at_full_accuracy_every > 0 &&
        (step + 1) % opt.stop_at_full_accuracy_every == 0) {
      if (argmax_accuracy(cfg, params, data.train_pyr, data.train_cls) >= 1.0) break;
    }
  }

  stats.final_train_nll = mean_nll(cfg, params, data.train_pyr, data.train_cls);
  if (!data.val_pyr.empty()) stats.val_nll = mean_nll(cfg, params, data.val_pyr, data.val_cls);
  return stats;
}

std::function<double(const Mat<float>&, int)> make_class_color_scorer(const PixelLift& lift,
                                                                      int side,
                                                                      ClassColors prototypes) {
  return [lift, side, prototypes = std::move(prototypes)](const Mat<float>& feats, int cls) {
    auto mean = lift.mean_color(feats, side);
    const auto& want = prototypes.at((size_t)cls);
    double d2 = 0;
    for (int ch = 0; ch < 3; ++ch) {
      double diff = mean[(size_t)ch] - want[(size_t)ch];
      d2 += diff * diff;
    }
    return -d2;
  };
}

int nearest_class_color(const std::array<double, 3>& mean, const ClassColors& prototypes) {
  if (prototypes.empty()) throw std::invalid_argument("no prototype colours");
  int best = 0;
  double best_d = 0;
  for (size_t c = 0; c < prototypes.size(); ++c) {
    double d2 = 0;
    for (int ch = 0; ch < 3; ++ch) {
      double diff = mean[(size_t)ch] - prototypes[c][(size_t)ch];
      d2 += diff * diff;
    }
    if (c == 0 || d2 < best_d) {
      best_d = d2;
      best = (int)c;
    }
  }
  return best;
}

std::vector<int> fidelity_trials(const ModelConfig& cfg, const ModelParams<float>& params,
                                 const Codebook& cb, const PixelLift& lift,
                                 const ClassColors& prototypes, int per_class, int n_candidates,
                                 const SamplingParams& sp) {
  if ((int)prototypes.size() != cfg.n_classes)
    throw std::invalid_argument("need one prototype colour per class");
  int side = cfg.schedule.finest();
  auto scorer = make_class_color_scorer(lift, side, prototypes);
  std::vector<int> correct;
  for (int c = 0; c < cfg.n_classes; ++c) {
    for (int s = 0; s < per_class; ++s) {
      SamplingParams spi = sp;
      spi.seed = derive_seed(sp.seed, (uint64_t)(c * per_class + s));
      TokenMapPyramid pyr =
          n_candidates > 1
              ? generate_with_rejection(c, n_candidates, cfg, params, cb, spi, scorer)
              : generate(c, cfg, params, spi);
      Mat<float> feats = decode_multiscale(pyr, cb);
      auto mean = lift.mean_color(feats, side);
      correct.push_back(nearest_class_color(mean, prototypes) == c ? 1 : 0);
    }
  }
  return correct;
}

EvalReport evaluate_model(const Checkpoint& ck, const ToyDataset& ds, int fidelity_samples,
                          int n_candidates, const SamplingParams& sp) {
  const TrainConfig& tc = ck.train;
  if (ds.height != tc.image_side() || ds.width != tc.image_side())
    throw std::invalid_argument("dataset images are " + std::to_string(ds.height) + "px, model expects " +
                                std::to_string(tc.image_side()) + "px");
  if (ds.n_classes != tc.model.n_classes)
    throw std::invalid_argument("dataset has " + std::to_string(ds.n_classes) +
                                " classes, model expects " +
                                std::to_string(tc.model.n_classes));
  std::vector<TokenMapPyramid> pyrs;
  std::vector<int> classes;
  for (int i = 0; i < ds.count; ++i) {
    pyrs.push_back(encode_image(ds.image(i), tc, ck.lift, ck.codebook));
    classes.push_back(ds.labels[(size_t)i]);
  }
  EvalReport r;
  r.val_nll = mean_nll(tc.model, ck.params, pyrs, classes);
  r.codebook_utilization = codebook_utilization(pyrs, tc.model.vocab);
  int per_class = std::max(1, fidelity_samples / tc.model.n_classes);
  auto trials = fidelity_trials(tc.model, ck.params, ck.codebook, ck.lift,
                                class_mean_colors(ds), per_class, n_candidates, sp);
  double hits = std::accumulate(trials.begin(), trials.end(), 0);
  r.class_fidelity = hits / (double)trials.size();
  return r;
}

}  // namespace mvar
