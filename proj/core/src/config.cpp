#include "mvar/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace mvar {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::pair<std::string, std::string> split_kv(const std::string& line, const std::string& where) {
  size_t eq = line.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument(where + ": expected key=value, got '" + line + "'");
  std::string k = trim(line.substr(0, eq));
  std::string v = trim(line.substr(eq + 1));
  if (k.empty()) throw std::invalid_argument(where + ": empty key in '" + line + "'");
  return {k, v};
}

int to_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not an integer");
  }
}

double to_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a number");
  }
}

uint64_t to_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': '" + v + "' is not an unsigned int");
  }
}

bool to_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<LayerMode> to_modes(const std::string& v, int n_layers) {
  std::vector<LayerMode> modes;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) modes.push_back(parse_layer_mode(trim(tok)));
  if (modes.size() == 1) modes.assign((size_t)n_layers, modes[0]);
  return modes;
}

}  // namespace

KvMap parse_config_text(const std::string& text) {
  KvMap kv;
  std::stringstream ss(text);
  std::string line;
  int ln = 0;
  while (std::getline(ss, line)) {
    ++ln;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto [k, v] = split_kv(line, "config line " + std::to_string(ln));
    kv[k] = v;
  }
  return kv;
}

KvMap parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

void apply_overrides(KvMap& kv, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    auto [k, v] = split_kv(s, "--set");
    kv[k] = v;
  }
}

TrainConfig make_train_config(const KvMap& kv) {
  TrainConfig tc;
  tc.model.schedule = ScaleSchedule::from_sides({1, 2, 3, 4});
  std::string modes_raw;
  for (const auto& [k, v] : kv) {
    if (k == "scales") tc.model.schedule = parse_scales(v);
    else if (k == "d") tc.model.d = to_int(v, k);
    else if (k == "n_layers") tc.model.n_layers = to_int(v, k);
    else if (k == "n_heads") tc.model.n_heads = to_int(v, k);
    else if (k == "d_inner") tc.model.d_inner = to_int(v, k);
    else if (k == "n_state") tc.model.n_state = to_int(v, k);
    else if (k == "vocab") tc.model.vocab = to_int(v, k);
    else if (k == "n_classes") tc.model.n_classes = to_int(v, k);
    else if (k == "layer_modes") modes_raw = v;
    else if (k == "attn_enabled") tc.model.attn_enabled = to_bool(v, k);
    else if (k == "scan_enabled") tc.model.scan_enabled = to_bool(v, k);
    else if (k == "use_conv") tc.model.use_conv = to_bool(v, k);
    else if (k == "use_ffn") tc.model.use_ffn = to_bool(v, k);
    else if (k == "patch") tc.patch = to_int(v, k);
    else if (k == "per_class") tc.per_class = to_int(v, k);
    else if (k == "val_per_class") tc.val_per_class = to_int(v, k);
    else if (k == "steps") tc.steps = to_int(v, k);
    else if (k == "batch") tc.batch = to_int(v, k);
    else if (k == "lr") tc.lr = to_double(v, k);
    else if (k == "lr_min_frac") tc.lr_min_frac = to_double(v, k);
    else if (k == "momentum") tc.momentum = to_double(v, k);
    else if (k == "clip") tc.clip = to_double(v, k);
    else if (k == "log_every") tc.log_every = to_int(v, k);
    else if (k == "seed") tc.seed = to_u64(v, k);
    else if (k == "data") tc.data_path = v;
    else if (k == "out") tc.out_path = v;
    else throw std::invalid_argument("unknown config key '" + k + "'");
  }
  if (!modes_raw.empty()) tc.model.layer_modes = to_modes(modes_raw, tc.model.n_layers);
  tc.model.seed = tc.seed;
  finalize_config(tc.model);
  if (tc.patch < 1) throw std::invalid_argument("patch must be at least 1");
  if (tc.per_class < 1 || tc.val_per_class < 0)
    throw std::invalid_argument("per_class must be >= 1 and val_per_class >= 0");
  if (tc.steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (tc.batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (!(tc.lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (tc.lr_min_frac < 0 || tc.lr_min_frac > 1)
    throw std::invalid_argument("lr_min_frac must lie in [0, 1]");
  if (tc.momentum < 0 || tc.momentum >= 1)
    throw std::invalid_argument("momentum must lie in [0, 1)");
  if (tc.clip < 0) throw std::invalid_argument("clip must be >= 0");
  if (tc.log_every < 1) throw std::invalid_argument("log_every must be >= 1");
  return tc;
}

KvMap train_config_to_kv(const TrainConfig& tc) {
  KvMap kv;
  std::string scales;
  for (size_t i = 0; i < tc.model.schedule.sides.size(); ++i)
    scales += (i ? "," : "") + std::to_string(tc.model.schedule.sides[i]);
  kv["scales"] = scales;
  kv["d"] = std::to_string(tc.model.d);
  kv["n_layers"] = std::to_string(tc.model.n_layers);
  kv["n_heads"] = std::to_string(tc.model.n_heads);
  kv["d_inner"] = std::to_string(tc.model.d_inner);
  kv["n_state"] = std::to_string(tc.model.n_state);
  kv["vocab"] = std::to_string(tc.model.vocab);
  kv["n_classes"] = std::to_string(tc.model.n_classes);
  std::string modes;
  for (size_t i = 0; i < tc.model.layer_modes.size(); ++i)
    modes += std::string(i ? "," : "") + layer_mode_name(tc.model.layer_modes[i]);
  kv["layer_modes"] = modes;
  kv["attn_enabled"] = tc.model.attn_enabled ? "1" : "0";
  kv["scan_enabled"] = tc.model.scan_enabled ? "1" : "0";
  kv["use_conv"] = tc.model.use_conv ? "1" : "0";
  kv["use_ffn"] = tc.model.use_ffn ? "1" : "0";
  kv["patch"] = std::to_string(tc.patch);
  kv["per_class"] = std::to_string(tc.per_class);
  kv["val_per_class"] = std::to_string(tc.val_per_class);
  kv["steps"] = std::to_string(tc.steps);
  kv["batch"] = std::to_string(tc.batch);
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  kv["lr"] = num(tc.lr);
  kv["lr_min_frac"] = num(tc.lr_min_frac);
  kv["momentum"] = num(tc.momentum);
  kv["clip"] = num(tc.clip);
  kv["log_every"] = std::to_string(tc.log_every);
  kv["seed"] = std::to_string(tc.seed);
  if (!tc.data_path.empty()) kv["data"] = tc.data_path;
  kv["out"] = tc.out_path;
  return kv;
}

std::string config_reference() {
  return
      "scales=1,2,3,4        # token-map sides, first must be 1, strictly increasing\n"
      "d=64                  # model width\n"
      "n_layers=4\n"
      "n_heads=0             # 0 -> max(1, d/64)\n"
      "d_inner=0             # scan inner width, 0 -> 2*d\n"
      "n_state=16            # scan state size per channel\n"
      "vocab=64              # codebook size (<= 255)\n"
      "n_classes=8\n"
      "layer_modes=decoupled # 'decoupled' | 'global' | per-layer CSV\n"
      "attn_enabled=1        # decoupled layers: in-block attention sub-layer\n"
      "scan_enabled=1        # decoupled layers: cross-scale scan sub-layer\n"
      "use_conv=0            # short causal conv ahead of the scan\n"
      "use_ffn=0             # extra FFN sub-layer\n"
      "patch=2               # pixels per token cell edge\n"
      "per_class=32          # training images per class\n"
      "val_per_class=8\n"
      "steps=200\n"
      "batch=8\n"
      "lr=0.05\n"
      "lr_min_frac=0.01      # cosine floor as fraction of lr\n"
      "momentum=0.9\n"
      "clip=0                # global grad-norm clip, 0 = off\n"
      "log_every=20          # metrics interval (train + eval NLL)\n"
      "seed=42\n"
      "data=                 # dataset file; empty regenerates from seed\n"
      "out=model.mvar        # checkpoint path\n";
}

}  // namespace mvar
