#pragma once

#include <string>

#include "mvar/config.hpp"
#include "mvar/model.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

// Everything needed to sample images: config, model weights, the codebook,
// and the pixel lift basis.
struct Checkpoint {
  TrainConfig train;
  ModelParams<float> params;
  Codebook codebook;
  PixelLift lift;
};

// Container layout: magic "MVAR", u32 version (LE), u64 header length (LE),
// JSON header {config, tensor manifest with name/rows/cols/byte offset},
// then raw float32 LE tensor data. Writes go through a temp file and a
// rename so a crash can't leave a half-written checkpoint behind.
void save_checkpoint(const std::string& path, const Checkpoint& ck);

// Loads and validates; mismatched magic, version, manifest entries, or
// truncated data all throw with the offending field named.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mvar
