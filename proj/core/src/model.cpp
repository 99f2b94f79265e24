#include "mvar/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace mvar {

LayerMode parse_layer_mode(const std::string& s) {
  if (s == "decoupled") return LayerMode::kDecoupled;
  if (s == "global") return LayerMode::kGlobalAttention;
  throw std::invalid_argument("unknown layer mode '" + s + "' (want decoupled|global)");
}

const char* layer_mode_name(LayerMode m) {
  return m == LayerMode::kDecoupled ? "decoupled" : "global";
}

bool ModelConfig::all_decoupled() const {
  return std::all_of(layer_modes.begin(), layer_modes.end(),
                     [](LayerMode m) { return m == LayerMode::kDecoupled; });
}

bool ModelConfig::all_global() const {
  return std::all_of(layer_modes.begin(), layer_modes.end(),
                     [](LayerMode m) { return m == LayerMode::kGlobalAttention; });
}

void finalize_config(ModelConfig& cfg) {
  validate_schedule(cfg.schedule);
  if (cfg.d <= 0) throw std::invalid_argument("d must be positive");
  if (cfg.n_layers < 0) throw std::invalid_argument("n_layers must be non-negative");
  if (cfg.n_heads == 0) cfg.n_heads = std::max(1, cfg.d / 64);
  if (cfg.n_heads < 0 || cfg.d % cfg.n_heads != 0)
    throw std::invalid_argument("d (" + std::to_string(cfg.d) + ") must be divisible by n_heads (" +
                                std::to_string(cfg.n_heads) + ")");
  if (cfg.d_inner == 0) cfg.d_inner = 2 * cfg.d;
  if (cfg.d_inner <= 0) throw std::invalid_argument("d_inner must be positive");
  if (cfg.n_state <= 0) throw std::invalid_argument("n_state must be positive");
  if (cfg.vocab < 2) throw std::invalid_argument("vocab must be at least 2");
  if (cfg.n_classes < 1) throw std::invalid_argument("n_classes must be at least 1");
  if (cfg.layer_modes.empty())
    cfg.layer_modes.assign((size_t)cfg.n_layers, LayerMode::kDecoupled);
  if ((int)cfg.layer_modes.size() != cfg.n_layers)
    throw std::invalid_argument("layer_modes lists " + std::to_string(cfg.layer_modes.size()) +
                                " modes for " + std::to_string(cfg.n_layers) + " layers");
  if (!cfg.attn_enabled && !cfg.scan_enabled)
    throw std::invalid_argument("attention and scan sub-layers cannot both be disabled");
}

}  // namespace mvar
