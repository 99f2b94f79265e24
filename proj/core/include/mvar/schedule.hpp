#pragma once

#include <string>
#include <vector>

#include "mvar/mat.hpp"

namespace mvar {

// Coarse-to-fine list of square token-map sides, e.g. {1,2,3,4}. The first
// scale is always a single cell; in the flattened sequence its slot carries
// the condition token.
struct ScaleSchedule {
  std::vector<int> sides;

  int num_scales() const { return (int)sides.size(); }
  int finest() const { return sides.back(); }

  static ScaleSchedule from_sides(std::vector<int> sides);
};

// Throws std::invalid_argument unless sides is non-empty, starts at 1 and is
// strictly increasing.
void validate_schedule(const ScaleSchedule& s);

// Parses a comma-separated side list, e.g. "1,2,3,4".
ScaleSchedule parse_scales(const std::string& text);

// Layout of the flattened token sequence: one contiguous block of sides[i]^2
// positions per scale, concatenated coarse to fine.
struct SequenceLayout {
  std::vector<int> block_lengths;
  std::vector<int> block_offsets;
  int total_len = 0;

  int num_blocks() const { return (int)block_lengths.size(); }
  int block_end(int i) const { return block_offsets[i] + block_lengths[i]; }
};

SequenceLayout build_layout(const ScaleSchedule& schedule);

// Index of the block that owns flattened position pos; throws when out of
// range.
int block_of_position(const SequenceLayout& layout, int pos);

// Per-position block index table, size total_len.
std::vector<int> position_blocks(const SequenceLayout& layout);

// Nearest-neighbour upsampling of a square grid of embedding rows. Cell
// (r,c) of the destination copies cell (floor(r*src/dst), floor(c*src/dst))
// of the source; values are copied, never interpolated, so subsampling the
// result at rows/cols ceil(i*dst/src) recovers the source exactly.
template <typename T>
Mat<T> upsample_grid(const Mat<T>& src, int src_side, int dst_side) {
  if (src_side < 1 || src.rows != src_side * src_side)
    throw std::invalid_argument("upsample_grid: source is not a square grid of the stated side");
  if (dst_side < src_side)
    throw std::invalid_argument("upsample_grid: destination side is smaller than source side");
  Mat<T> out(dst_side * dst_side, src.cols);
  for (int r = 0; r < dst_side; ++r) {
    int sr = (int)((long long)r * src_side / dst_side);
    for (int c = 0; c < dst_side; ++c) {
      int sc = (int)((long long)c * src_side / dst_side);
      const T* s = src.row(sr * src_side + sc);
      T* d = out.row(r * dst_side + c);
      for (int k = 0; k < src.cols; ++k) d[k] = s[k];
    }
  }
  return out;
}

// Adjoint of upsample_grid: accumulates every destination row's gradient
// into the source cell it was copied from.
template <typename T>
void upsample_grid_backward(const Mat<T>& gout, int src_side, int dst_side, Mat<T>& gsrc) {
  if (gsrc.rows != src_side * src_side || gout.rows != dst_side * dst_side ||
      gsrc.cols != gout.cols)
    throw std::invalid_argument("upsample_grid_backward: shape mismatch");
  for (int r = 0; r < dst_side; ++r) {
    int sr = (int)((long long)r * src_side / dst_side);
    for (int c = 0; c < dst_side; ++c) {
      int sc = (int)((long long)c * src_side / dst_side);
      const T* g = gout.row(r * dst_side + c);
      T* d = gsrc.row(sr * src_side + sc);
      for (int k = 0; k < gout.cols; ++k) d[k] += g[k];
    }
  }
}

}  // namespace mvar
