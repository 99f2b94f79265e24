#pragma once

#include <map>
#include <string>
#include <vector>

#include "mvar/model.hpp"

namespace mvar {

// Flat key=value config ('#' starts a comment, blank lines ignored).
using KvMap = std::map<std::string, std::string>;

KvMap parse_config_text(const std::string& text);
KvMap parse_config_file(const std::string& path);

// Applies "key=value" strings on top of a parsed file.
void apply_overrides(KvMap& kv, const std::vector<std::string>& sets);

// Everything one training run needs. Unknown keys are rejected so typos
// fail loudly instead of silently training the default.
struct TrainConfig {
  ModelConfig model;           // finalized
  int patch = 2;               // pixel patch edge per token cell
  int per_class = 32;          // training images per class
  int val_per_class = 8;
  int steps = 200;
  int batch = 8;
  double lr = 0.05;
  double lr_min_frac = 0.01;   // cosine decay floor, as a fraction of lr
  double momentum = 0.9;
  double clip = 0.0;           // global grad-norm clip; 0 disables
  int log_every = 20;          // metrics (train + eval NLL) interval
  uint64_t seed = 42;
  std::string data_path;       // dataset file; empty synthesizes in memory
  std::string out_path = "model.mvar";

  int image_side() const { return model.schedule.finest() * patch; }
  int code_dim() const { return 3 * patch * patch; }
};

// Builds a TrainConfig from key=value pairs; missing keys keep defaults.
TrainConfig make_train_config(const KvMap& kv);

// Inverse of make_train_config for checkpoint/provenance round-trips.
KvMap train_config_to_kv(const TrainConfig& tc);

// The full key list with defaults, for --help style dumps.
std::string config_reference();

}  // namespace mvar
