#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mvar/checkpoint.hpp"
#include "mvar/config.hpp"
#include "mvar/dataset.hpp"
#include "mvar/generate.hpp"
#include "mvar/model.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

// Dataset, lift, codebook and all pre-encoded pyramids for one run.
struct PreparedData {
  ToyDataset images;  // train followed by val, class-major within each part
  PixelLift lift;
  Codebook codebook;
  std::vector<TokenMapPyramid> train_pyr, val_pyr;
  std::vector<int> train_cls, val_cls;
};

// Loads (data= in the config) or regenerates the toy images, fits the
// lift + codebook on the training part, and encodes everything. The
// codebook is fit with k-means over the pooled residual vectors an ideal
// (error-free) multi-scale encoder would emit. Per class, the first
// per_class images are the train split and the next val_per_class the val
// split.
PreparedData prepare_data(const TrainConfig& tc);

// Split indices in dataset order: per class, first per_class -> train,
// next up to val_per_class -> val. Throws when a class is short.
std::pair<std::vector<int>, std::vector<int>> split_train_val(const ToyDataset& ds,
                                                              const TrainConfig& tc);

ToyDataset dataset_subset(const ToyDataset& ds, const std::vector<int>& indices);

// The dataset a run trains on: loaded from tc.data_path when set, else
// regenerated deterministically from the seed.
ToyDataset dataset_for_config(const TrainConfig& tc);

// Encodes one image with an existing lift/codebook.
TokenMapPyramid encode_image(const uint8_t* rgb, const TrainConfig& tc, const PixelLift& lift,
                             const Codebook& cb);

struct LogEntry {
  int step = 0;
  double train_nll = 0;  // batch NLL at this step
  double val_nll = 0;    // val-set NLL (0 when there is no val split)
};

struct TrainOptions {
  bool verbose = true;
  std::function<void(const LogEntry&)> on_log;  // fires every log_every steps
  int stop_at_full_accuracy_every = 0;          // >0: poll train accuracy, stop at 1.0
};

struct TrainStats {
  std::vector<LogEntry> log;
  double final_train_nll = 0;  // whole-train-set teacher-forcing NLL
  double val_nll = 0;          // 0 when there is no val split
  int steps_run = 0;
};

// SGD with momentum and cosine learning-rate decay; per-sample gradients
// are reduced in index order so results do not depend on the worker count.
// Throws on a non-finite batch loss, naming the step.
TrainStats train_model(const TrainConfig& tc, const PreparedData& data,
                       ModelParams<float>& params, const TrainOptions& opt = {});

// Mean teacher-forcing NLL (nats/position) over a set.
double mean_nll(const ModelConfig& cfg, const ModelParams<float>& params,
                const std::vector<TokenMapPyramid>& pyrs, const std::vector<int>& classes);

// Per-position argmax accuracy under teacher forcing.
double argmax_accuracy(const ModelConfig& cfg, const ModelParams<float>& params,
                       const std::vector<TokenMapPyramid>& pyrs, const std::vector<int>& classes);

// Fraction of codebook rows actually used by a set of pyramids.
double codebook_utilization(const std::vector<TokenMapPyramid>& pyrs, int vocab);

using ClassColors = std::vector<std::array<double, 3>>;

// Scores a decoded feature grid by how close its mean colour lands to the
// class's prototype colour (negated squared distance, higher is better).
// Prototypes are the per-class dataset mean colours.
std::function<double(const Mat<float>&, int)> make_class_color_scorer(const PixelLift& lift,
                                                                      int side,
                                                                      ClassColors prototypes);

// Index of the nearest prototype colour (L2).
int nearest_class_color(const std::array<double, 3>& mean, const ClassColors& prototypes);

// Generates per_class samples for every class and returns per-sample
// correctness (decoded mean colour lands nearest the conditioning class's
// prototype). n_candidates > 1 wraps generation in best-of-n rejection with
// the class colour scorer.
std::vector<int> fidelity_trials(const ModelConfig& cfg, const ModelParams<float>& params,
                                 const Codebook& cb, const PixelLift& lift,
                                 const ClassColors& prototypes, int per_class, int n_candidates,
                                 const SamplingParams& sp);

struct EvalReport {
  double val_nll = 0;
  double codebook_utilization = 0;  // over the evaluated pyramids
  double class_fidelity = 0;
};

// Teacher-forcing NLL + utilization over the given dataset's encodings,
// plus class fidelity over `fidelity_samples` generations split evenly
// across classes (prototypes come from this dataset's per-class means).
EvalReport evaluate_model(const Checkpoint& ck, const ToyDataset& ds, int fidelity_samples,
                          int n_candidates, const SamplingParams& sp);

}  // namespace mvar
