#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "mvar/mat.hpp"
#include "mvar/schedule.hpp"

namespace mvar {

// Shared vector-quantization codebook, one d-dimensional row per id. The
// training harness always reserves the last row for the zero vector so that
// quantizing an already-explained residual can leave it unchanged.
struct Codebook {
  Mat<float> vectors;  // V x d

  int size() const { return vectors.rows; }
  int dim() const { return vectors.cols; }
};

void validate_codebook(const Codebook& cb);

// Multi-scale token maps for one image, coarse to fine; maps[i] holds
// sides[i]^2 ids in row-major cell order.
struct TokenMapPyramid {
  ScaleSchedule schedule;
  std::vector<std::vector<int>> maps;
};

// Nearest codebook row by L2; ties resolve to the lowest index. Returns the
// id and the quantized vector. Throws on non-finite input or empty codebook.
std::pair<int, std::vector<float>> quantize_nearest(const float* vec, int d, const Codebook& cb);

// Mean-pools a square feature grid down to dst_side. Pooling groups are the
// replication groups of upsample_grid, i.e. fine cell (r,c) contributes to
// coarse cell (floor(r*dst/src), floor(c*dst/src)), which makes the pair of
// ops adjoint and keeps residual energy non-increasing.
Mat<float> mean_pool(const Mat<float>& src, int src_side, int dst_side);

// Greedy residual quantization across the schedule: pool the residual to
// scale i, quantize each cell, upsample the quantized grid back to full
// resolution and subtract. Deterministic.
TokenMapPyramid encode_multiscale(const Mat<float>& features, const ScaleSchedule& schedule,
                                  const Codebook& cb);

// Sum of upsampled codebook rows over all scales.
Mat<float> decode_multiscale(const TokenMapPyramid& pyr, const Codebook& cb);

// Squared L2 norm of the residual after encoding the first prefix_len scales
// (prefix_len in [0, num_scales]). Non-increasing in prefix_len whenever the
// codebook contains the zero vector.
double residual_energy(const Mat<float>& features, const ScaleSchedule& schedule,
                       const Codebook& cb, int prefix_len);

// Plain k-means (25 Lloyd iterations, seeded start from distinct samples)
// over the given feature vectors, fitting n_codes-1 centroids; the last row
// of the result is the zero vector. Empty clusters keep their previous
// centroid.
Codebook fit_codebook(const Mat<float>& samples, int n_codes, uint64_t seed);

// Fixed random linear lift between raw pixel patches and the d-dimensional
// feature space the tokenizer quantizes. Rows are orthonormalized so the
// transpose is an exact right inverse: unlift(lift(x)) projects x onto the
// span, and lift(unlift(f)) == f.
struct PixelLift {
  Mat<float> basis;  // code_dim x (3*patch*patch), orthonormal rows
  int patch = 0;

  static PixelLift create(int code_dim, int patch, uint64_t seed);

  // image is H x W x 3 bytes with H == W == side*patch; returns side^2 rows
  // of code_dim features. Pixels are mapped to [-0.5, 0.5] before lifting.
  Mat<float> lift(const uint8_t* image, int H, int W, int side) const;

  // Inverse map back to bytes (clamped). out must hold side*patch squared *3.
  void unlift(const Mat<float>& grid, int side, uint8_t* out_rgb) const;

  // Mean colour (0..255 per channel) of the decoded image for a feature
  // grid; same clamping as unlift.
  std::array<double, 3> mean_color(const Mat<float>& grid, int side) const;
};

}  // namespace mvar
