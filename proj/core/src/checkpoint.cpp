#include "mvar/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mvar {

namespace {

using nlohmann::json;

constexpr uint32_t kVersion = 1;

void put_bytes(std::ofstream& f, const void* p, size_t n) {
  f.write((const char*)p, (std::streamsize)n);
}

// float32 little-endian; this codebase only targets LE hosts and the tests
// would catch a flip, but keep the byte order explicit anyway.
void put_floats(std::ofstream& f, const float* p, size_t n) {
  static_assert(sizeof(float) == 4);
  for (size_t i = 0; i < n; ++i) {
    uint32_t u;
    std::memcpy(&u, p + i, 4);
    uint8_t b[4] = {(uint8_t)(u & 0xff), (uint8_t)(u >> 8 & 0xff), (uint8_t)(u >> 16 & 0xff),
                    (uint8_t)(u >> 24 & 0xff)};
    f.write((const char*)b, 4);
  }
}

void get_floats(std::ifstream& f, float* p, size_t n, const std::string& what) {
  std::vector<uint8_t> buf(n * 4);
  if (!f.read((char*)buf.data(), (std::streamsize)buf.size()))
    throw std::runtime_error("checkpoint truncated reading tensor " + what);
  for (size_t i = 0; i < n; ++i) {
    uint32_t u = (uint32_t)buf[4 * i] | (uint32_t)buf[4 * i + 1] << 8 |
                 (uint32_t)buf[4 * i + 2] << 16 | (uint32_t)buf[4 * i + 3] << 24;
    std::memcpy(p + i, &u, 4);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  // collect the manifest first so offsets are known before writing
  struct Entry {
    std::string name;
    const Mat<float>* m;
  };
  std::vector<Entry> entries;
  auto& params = const_cast<ModelParams<float>&>(ck.params);
  visit_params(params, ck.train.model,
               [&](const std::string& name, Mat<float>& m) { entries.push_back({name, &m}); });
  entries.push_back({"codebook", &ck.codebook.vectors});
  entries.push_back({"lift_basis", &ck.lift.basis});

  json manifest = json::array();
  uint64_t offset = 0;
  for (const auto& e : entries) {
    manifest.push_back({{"name", e.name},
                        {"rows", e.m->rows},
                        {"cols", e.m->cols},
                        {"offset", offset}});
    offset += (uint64_t)e.m->v.size() * 4;
  }
  json cfg = json::object();
  for (const auto& [k, v] : train_config_to_kv(ck.train)) cfg[k] = v;
  json header = {{"config", cfg},
                 {"lift_patch", ck.lift.patch},
                 {"tensors", manifest}};
  std::string htext = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write("MVAR", 4);
    uint8_t vb[4] = {kVersion & 0xff, 0, 0, 0};
    put_bytes(f, vb, 4);
    uint64_t hl = htext.size();
    uint8_t hb[8];
    for (int i = 0; i < 8; ++i) hb[i] = (uint8_t)(hl >> (8 * i) & 0xff);
    put_bytes(f, hb, 8);
    put_bytes(f, htext.data(), htext.size());
    for (const auto& e : entries) put_floats(f, e.m->v.data(), e.m->v.size());
    if (!f) throw std::runtime_error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open checkpoint " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::string(magic, 4) != "MVAR")
    throw std::runtime_error(path + " is not a checkpoint (bad magic)");
  uint8_t vb[4];
  if (!f.read((char*)vb, 4)) throw std::runtime_error("checkpoint truncated reading version");
  uint32_t ver = (uint32_t)vb[0] | (uint32_t)vb[1] << 8 | (uint32_t)vb[2] << 16 |
                 (uint32_t)vb[3] << 24;
  if (ver != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(ver));
  uint8_t hb[8];
  if (!f.read((char*)hb, 8)) throw std::runtime_error("checkpoint truncated reading header size");
  uint64_t hl = 0;
  for (int i = 0; i < 8; ++i) hl |= (uint64_t)hb[i] << (8 * i);
  std::string htext(hl, '\0');
  if (!f.read(htext.data(), (std::streamsize)hl))
    throw std::runtime_error("checkpoint truncated reading header");

  json header;
  try {
    header = json::parse(htext);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("tensors") || !header.contains("lift_patch"))
    throw std::runtime_error("checkpoint header is missing config/tensors/lift_patch");

  KvMap kv;
  for (auto& [k, v] : header["config"].items()) {
    if (!v.is_string())
      throw std::runtime_error("checkpoint config field '" + k + "' must be a string");
    kv[k] = v.get<std::string>();
  }
  Checkpoint ck;
  ck.train = make_train_config(kv);
  ck.lift.patch = header["lift_patch"].get<int>();
  if (ck.lift.patch != ck.train.patch)
    throw std::runtime_error("checkpoint lift_patch disagrees with config patch");

  // index the manifest by name
  struct Loc {
    int rows, cols;
    uint64_t offset;
  };
  std::map<std::string, Loc> locs;
  for (const auto& t : header["tensors"]) {
    for (const char* field : {"name", "rows", "cols", "offset"})
      if (!t.contains(field))
        throw std::runtime_error(std::string("checkpoint manifest entry missing '") + field + "'");
    locs[t["name"].get<std::string>()] = {t["rows"].get<int>(), t["cols"].get<int>(),
                                          t["offset"].get<uint64_t>()};
  }

  uint64_t data_base = 4 + 4 + 8 + hl;
  auto read_tensor = [&](const std::string& name, Mat<float>& m) {
    auto it = locs.find(name);
    if (it == locs.end())
      throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (it->second.rows != m.rows || it->second.cols != m.cols)
      throw std::runtime_error("checkpoint tensor '" + name + "' is " +
                               std::to_string(it->second.rows) + "x" +
                               std::to_string(it->second.cols) + ", expected " +
                               std::to_string(m.rows) + "x" + std::to_string(m.cols));
    f.seekg((std::streamoff)(data_base + it->second.offset));
    get_floats(f, m.v.data(), m.v.size(), name);
  };

  ck.params = make_model_params<float>(ck.train.model);
  visit_params(ck.params, ck.train.model, read_tensor);

  ck.codebook.vectors = Mat<float>(ck.train.model.vocab, ck.train.code_dim());
  read_tensor("codebook", ck.codebook.vectors);
  validate_codebook(ck.codebook);

  ck.lift.basis = Mat<float>(ck.train.code_dim(), 3 * ck.train.patch * ck.train.patch);
  read_tensor("lift_basis", ck.lift.basis);
  return ck;
}

}  // namespace mvar
