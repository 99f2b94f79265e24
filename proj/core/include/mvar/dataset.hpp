#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mvar {

// In-memory RGB image set, class-major order (all class-0 samples first).
struct ToyDataset {
  int count = 0;
  int height = 0;
  int width = 0;
  int channels = 3;
  int n_classes = 0;
  std::vector<uint8_t> pixels;  // count * H * W * 3
  std::vector<int> labels;      // count

  const uint8_t* image(int i) const { return pixels.data() + (size_t)i * height * width * 3; }
};

// The 8 saturated/dim corner colours used as class identities.
std::array<uint8_t, 3> class_color(int cls);

// Deterministic toy set: per class, images carry the class colour as
// background plus one rectangle or stripe of the channel-flipped colour
// covering at most a quarter of the area, plus clamped gaussian pixel
// noise. Mean colour stays nearest the class corner by construction.
ToyDataset generate_toy_dataset(int per_class, int n_classes, int side_px, uint64_t seed);

// Mean colour of each class over the set (255-scale doubles, n x 3).
std::vector<std::array<double, 3>> class_mean_colors(const ToyDataset& ds);

// Binary container: magic "MVDS", u32 version, then count/H/W/C/n_classes
// as u32 LE, raw pixels, one u8 label per image.
void save_dataset(const std::string& path, const ToyDataset& ds);
ToyDataset load_dataset(const std::string& path);

// Plain P6 image dump.
void write_ppm(const std::string& path, const uint8_t* rgb, int H, int W);

}  // namespace mvar
