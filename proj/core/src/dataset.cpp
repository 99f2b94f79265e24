#include "mvar/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mvar/rng.hpp"

namespace mvar {

std::array<uint8_t, 3> class_color(int cls) {
  // corners of the RGB cube pulled in from the walls so noise can't clip
  uint8_t lo = 40, hi = 215;
  return {(uint8_t)((cls & 1) ? hi : lo), (uint8_t)((cls & 2) ? hi : lo),
          (uint8_t)((cls & 4) ? hi : lo)};
}

ToyDataset generate_toy_dataset(int per_class, int n_classes, int side_px, uint64_t seed) {
  if (per_class < 1) throw std::invalid_argument("per_class must be at least 1");
  if (n_classes < 2 || n_classes > 8)
    throw std::invalid_argument("n_classes must lie in [2, 8], got " + std::to_string(n_classes));
  if (side_px < 4) throw std::invalid_argument("side_px must be at least 4");

  ToyDataset ds;
  ds.count = per_class * n_classes;
  ds.height = ds.width = side_px;
  ds.n_classes = n_classes;
  ds.pixels.resize((size_t)ds.count * side_px * side_px * 3);
  ds.labels.resize((size_t)ds.count);

  int H = side_px;
  for (int c = 0; c < n_classes; ++c) {
    auto base = class_color(c);
    uint8_t flip[3] = {(uint8_t)(255 - base[0]), (uint8_t)(255 - base[1]),
                       (uint8_t)(255 - base[2])};
    for (int s = 0; s < per_class; ++s) {
      int idx = c * per_class + s;
      ds.labels[(size_t)idx] = c;
      uint8_t* img = ds.pixels.data() + (size_t)idx * H * H * 3;
      for (int p = 0; p < H * H; ++p)
        for (int ch = 0; ch < 3; ++ch) img[p * 3 + ch] = base[(size_t)ch];

      Rng rng(derive_seed(seed, (uint64_t)idx));
      // class-fixed structure (even classes a rectangle, odd a stripe) at a
      // class-anchored position with small per-sample jitter; area <= 1/4
      int jitter = std::max(1, H / 8);
      if (c % 2 == 0) {
        int w = H / 4 + (c % 3) * H / 16;
        int h = H / 4 + ((c / 2) % 3) * H / 16;
        int x0 = std::min((c * 7) % (H - w + 1) + rng.uniform_int(jitter), H - w);
        int y0 = std::min((c * 13) % (H - h + 1) + rng.uniform_int(jitter), H - h);
        for (int y = y0; y < y0 + h; ++y)
          for (int x = x0; x < x0 + w; ++x)
            for (int ch = 0; ch < 3; ++ch) img[(y * H + x) * 3 + ch] = flip[ch];
      } else {
        int th = std::max(1, H / 8 + ((c / 2) % 2) * H / 16);
        bool horiz = ((c + 1) / 2) % 2 == 0;
        int off = std::min((c * 5) % (H - th + 1) + rng.uniform_int(jitter), H - th);
        for (int a = off; a < off + th; ++a)
          for (int b = 0; b < H; ++b) {
            int p = horiz ? (a * H + b) : (b * H + a);
            for (int ch = 0; ch < 3; ++ch) img[p * 3 + ch] = flip[ch];
          }
      }
      for (int p = 0; p < H * H * 3; ++p) {
        double v = img[p] + rng.normal() * 8.0;
        img[p] = (uint8_t)std::clamp((int)std::lround(v), 0, 255);
      }
    }
  }
  return ds;
}

std::vector<std::array<double, 3>> class_mean_colors(const ToyDataset& ds) {
  std::vector<std::array<double, 3>> sums((size_t)ds.n_classes, {0, 0, 0});
  std::vector<int64_t> counts((size_t)ds.n_classes, 0);
  for (int i = 0; i < ds.count; ++i) {
    int c = ds.labels[(size_t)i];
    const uint8_t* img = ds.image(i);
    for (int p = 0; p < ds.height * ds.width; ++p)
      for (int ch = 0; ch < 3; ++ch) sums[(size_t)c][(size_t)ch] += img[p * 3 + ch];
    counts[(size_t)c] += ds.height * ds.width;
  }
  for (int c = 0; c < ds.n_classes; ++c) {
    if (!counts[(size_t)c]) throw std::runtime_error("class " + std::to_string(c) + " is empty");
    for (int ch = 0; ch < 3; ++ch) sums[(size_t)c][(size_t)ch] /= (double)counts[(size_t)c];
  }
  return sums;
}

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  uint8_t b[4] = {(uint8_t)(v & 0xff), (uint8_t)(v >> 8 & 0xff), (uint8_t)(v >> 16 & 0xff),
                  (uint8_t)(v >> 24 & 0xff)};
  f.write((const char*)b, 4);
}

uint32_t get_u32(std::ifstream& f, const std::string& what) {
  uint8_t b[4];
  if (!f.read((char*)b, 4)) throw std::runtime_error("dataset file truncated reading " + what);
  return (uint32_t)b[0] | (uint32_t)b[1] << 8 | (uint32_t)b[2] << 16 | (uint32_t)b[3] << 24;
}

}  // namespace

void save_dataset(const std::string& path, const ToyDataset& ds) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write("MVDS", 4);
    put_u32(f, 1);
    put_u32(f, (uint32_t)ds.count);
    put_u32(f, (uint32_t)ds.height);
    put_u32(f, (uint32_t)ds.width);
    put_u32(f, (uint32_t)ds.channels);
    put_u32(f, (uint32_t)ds.n_classes);
    f.write((const char*)ds.pixels.data(), (std::streamsize)ds.pixels.size());
    for (int i = 0; i < ds.count; ++i) {
      uint8_t l = (uint8_t)ds.labels[(size_t)i];
      f.write((const char*)&l, 1);
    }
    if (!f) throw std::runtime_error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place");
}

ToyDataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open dataset " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::string(magic, 4) != "MVDS")
    throw std::runtime_error(path + " is not a dataset file (bad magic)");
  uint32_t ver = get_u32(f, "version");
  if (ver != 1) throw std::runtime_error("unsupported dataset version " + std::to_string(ver));
  ToyDataset ds;
  ds.count = (int)get_u32(f, "count");
  ds.height = (int)get_u32(f, "height");
  ds.width = (int)get_u32(f, "width");
  ds.channels = (int)get_u32(f, "channels");
  ds.n_classes = (int)get_u32(f, "n_classes");
  if (ds.channels != 3) throw std::runtime_error("dataset must be 3-channel");
  if (ds.count < 0 || ds.height < 1 || ds.width < 1)
    throw std::runtime_error("dataset header has nonsense dimensions");
  ds.pixels.resize((size_t)ds.count * ds.height * ds.width * 3);
  if (!f.read((char*)ds.pixels.data(), (std::streamsize)ds.pixels.size()))
    throw std::runtime_error("dataset file truncated reading pixels");
  ds.labels.resize((size_t)ds.count);
  for (int i = 0; i < ds.count; ++i) {
    uint8_t l;
    if (!f.read((char*)&l, 1)) throw std::runtime_error("dataset file truncated reading labels");
    if ((int)l >= ds.n_classes) throw std::runtime_error("label outside class range");
    ds.labels[(size_t)i] = l;
  }
  return ds;
}

void write_ppm(const std::string& path, const uint8_t* rgb, int H, int W) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "P6\n" << W << " " << H << "\n255\n";
  f.write((const char*)rgb, (std::streamsize)H * W * 3);
  if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace mvar
