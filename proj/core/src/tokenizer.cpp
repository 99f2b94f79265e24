#include "mvar/tokenizer.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "mvar/rng.hpp"

namespace mvar {

void validate_codebook(const Codebook& cb) {
  if (cb.size() < 2) throw std::invalid_argument("codebook needs at least 2 rows");
  if (!all_finite(cb.vectors)) throw std::invalid_argument("codebook contains non-finite values");
}

std::pair<int, std::vector<float>> quantize_nearest(const float* vec, int d, const Codebook& cb) {
  if (cb.size() == 0) throw std::invalid_argument("quantize_nearest: empty codebook");
  if (cb.dim() != d) throw std::invalid_argument("quantize_nearest: dimension mismatch");
  for (int k = 0; k < d; ++k)
    if (!std::isfinite(vec[k])) throw std::invalid_argument("quantize_nearest: non-finite input");

  int best = 0;
  double best_d = 0;
  for (int i = 0; i < cb.size(); ++i) {
    const float* row = cb.vectors.row(i);
    double dist = 0;
    for (int k = 0; k < d; ++k) {
      double diff = double(vec[k]) - row[k];
      dist += diff * diff;
    }
    if (i == 0 || dist < best_d) {  // strict < keeps the lowest index on ties
      best = i;
      best_d = dist;
    }
  }
  const float* row = cb.vectors.row(best);
  return {best, std::vector<float>(row, row + d)};
}

Mat<float> mean_pool(const Mat<float>& src, int src_side, int dst_side) {
  if (src.rows != src_side * src_side)
    throw std::invalid_argument("mean_pool: source is not a square grid of the stated side");
  if (dst_side < 1 || dst_side > src_side)
    throw std::invalid_argument("mean_pool: destination side out of range");
  int d = src.cols;
  Mat<double> acc(dst_side * dst_side, d);
  std::vector<int> counts((size_t)dst_side * dst_side, 0);
  for (int r = 0; r < src_side; ++r) {
    int dr = (int)((long long)r * dst_side / src_side);
    for (int c = 0; c < src_side; ++c) {
      int dc = (int)((long long)c * dst_side / src_side);
      double* a = acc.row(dr * dst_side + dc);
      const float* s = src.row(r * src_side + c);
      for (int k = 0; k < d; ++k) a[k] += s[k];
      counts[(size_t)(dr * dst_side + dc)]++;
    }
  }
  Mat<float> out(dst_side * dst_side, d);
  for (int i = 0; i < out.rows; ++i) {
    double inv = 1.0 / counts[(size_t)i];
    const double* a = acc.row(i);
    float* o = out.row(i);
    for (int k = 0; k < d; ++k) o[k] = (float)(a[k] * inv);
  }
  return out;
}

// Runs the residual loop for the first n_scales scales, collecting ids when
// pyr != nullptr. Returns the residual left in place of `work`.
static double encode_prefix(const Mat<float>& features, const ScaleSchedule& schedule,
                            const Codebook& cb, int n_scales, TokenMapPyramid* pyr) {
  validate_schedule(schedule);
  validate_codebook(cb);
  int side = schedule.finest();
  if (features.rows != side * side)
    throw std::invalid_argument("encode: feature grid does not match finest side " +
                                std::to_string(side));
  if (features.cols != cb.dim())
    throw std::invalid_argument("encode: feature dim " + std::to_string(features.cols) +
                                " != codebook dim " + std::to_string(cb.dim()));
  if (!all_finite(features)) throw std::invalid_argument("encode: non-finite features");

  Mat<float> resid = features;
  int d = features.cols;
  for (int i = 0; i < n_scales; ++i) {
    int s = schedule.sides[(size_t)i];
    Mat<float> pooled = mean_pool(resid, side, s);
    Mat<float> quant(s * s, d);
    std::vector<int> ids((size_t)s * s);
    for (int cell = 0; cell < s * s; ++cell) {
      auto [id, q] = quantize_nearest(pooled.row(cell), d, cb);
      ids[(size_t)cell] = id;
      std::memcpy(quant.row(cell), q.data(), sizeof(float) * (size_t)d);
    }
    if (pyr) pyr->maps.push_back(std::move(ids));
    Mat<float> up = upsample_grid(quant, s, side);
    for (size_t k = 0; k < resid.size(); ++k) resid.v[k] -= up.v[k];
  }
  double energy = 0;
  for (float x : resid.v) energy += double(x) * x;
  return energy;
}

TokenMapPyramid encode_multiscale(const Mat<float>& features, const ScaleSchedule& schedule,
                                  const Codebook& cb) {
  TokenMapPyramid pyr{schedule, {}};
  encode_prefix(features, schedule, cb, schedule.num_scales(), &pyr);
  return pyr;
}

Mat<float> decode_multiscale(const TokenMapPyramid& pyr, const Codebook& cb) {
  validate_schedule(pyr.schedule);
  validate_codebook(cb);
  if ((int)pyr.maps.size() != pyr.schedule.num_scales())
    throw std::invalid_argument("decode: pyramid has " + std::to_string(pyr.maps.size()) +
                                " maps for " + std::to_string(pyr.schedule.num_scales()) +
                                " scales");
  int side = pyr.schedule.finest();
  int d = cb.dim();
  Mat<float> out(side * side, d);
  for (int i = 0; i < pyr.schedule.num_scales(); ++i) {
    int s = pyr.schedule.sides[(size_t)i];
    const auto& ids = pyr.maps[(size_t)i];
    if ((int)ids.size() != s * s)
      throw std::invalid_argument("decode: map " + std::to_string(i) + " has wrong cell count");
    Mat<float> grid(s * s, d);
    for (int cell = 0; cell < s * s; ++cell) {
      int id = ids[(size_t)cell];
      if (id < 0 || id >= cb.size())
        throw std::invalid_argument("decode: id " + std::to_string(id) + " outside codebook");
      std::memcpy(grid.row(cell), cb.vectors.row(id), sizeof(float) * (size_t)d);
    }
    Mat<float> up = upsample_grid(grid, s, side);
    for (size_t k = 0; k < out.size(); ++k) out.v[k] += up.v[k];
  }
  return out;
}

double residual_energy(const Mat<float>& features, const ScaleSchedule& schedule,
                       const Codebook& cb, int prefix_len) {
  if (prefix_len < 0 || prefix_len > schedule.num_scales())
    throw std::invalid_argument("residual_energy: prefix_len out of range");
  return encode_prefix(features, schedule, cb, prefix_len, nullptr);
}

Codebook fit_codebook(const Mat<float>& samples, int n_codes, uint64_t seed) {
  if (n_codes < 2) throw std::invalid_argument("fit_codebook: need at least 2 codes");
  if (samples.rows < 1) throw std::invalid_argument("fit_codebook: no samples");
  if (!all_finite(samples)) throw std::invalid_argument("fit_codebook: non-finite samples");

  const int kIters = 25;
  int k = n_codes - 1;  // last row is reserved for the zero vector
  int d = samples.cols;
  Rng rng(seed);

  // start from k distinct sample indices where possible
  Mat<float> cent(k, d);
  std::vector<int> order((size_t)samples.rows);
  for (int i = 0; i < samples.rows; ++i) order[(size_t)i] = i;
  for (int i = samples.rows - 1; i > 0; --i)
    std::swap(order[(size_t)i], order[(size_t)rng.uniform_int(i + 1)]);
  for (int c = 0; c < k; ++c)
    std::memcpy(cent.row(c), samples.row(order[(size_t)(c % samples.rows)]),
                sizeof(float) * (size_t)d);

  std::vector<int> assign((size_t)samples.rows, 0);
  for (int iter = 0; iter < kIters; ++iter) {
    for (int i = 0; i < samples.rows; ++i) {
      const float* x = samples.row(i);
      int best = 0;
      double best_d = 0;
      for (int c = 0; c < k; ++c) {
        const float* m = cent.row(c);
        double dist = 0;
        for (int e = 0; e < d; ++e) {
          double diff = double(x[e]) - m[e];
          dist += diff * diff;
        }
        if (c == 0 || dist < best_d) {
          best = c;
          best_d = dist;
        }
      }
      assign[(size_t)i] = best;
    }
    Mat<double> sum(k, d);
    std::vector<int> counts((size_t)k, 0);
    for (int i = 0; i < samples.rows; ++i) {
      double* s = sum.row(assign[(size_t)i]);
      const float* x = samples.row(i);
      for (int e = 0; e < d; ++e) s[e] += x[e];
      counts[(size_t)assign[(size_t)i]]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[(size_t)c] == 0) continue;  // empty cluster keeps its centroid
      double inv = 1.0 / counts[(size_t)c];
      const double* s = sum.row(c);
      float* m = cent.row(c);
      for (int e = 0; e < d; ++e) m[e] = (float)(s[e] * inv);
    }
  }

  Codebook cb{Mat<float>(n_codes, d)};
  for (int c = 0; c < k; ++c)
    std::memcpy(cb.vectors.row(c), cent.row(c), sizeof(float) * (size_t)d);
  // row n_codes-1 stays zero
  return cb;
}

PixelLift PixelLift::create(int code_dim, int patch, uint64_t seed) {
  if (patch < 1) throw std::invalid_argument("PixelLift: patch must be >= 1");
  int n = 3 * patch * patch;
  if (code_dim < 1 || code_dim > n)
    throw std::invalid_argument("PixelLift: code_dim must be in [1, 3*patch^2]");

  // Gram-Schmidt over seeded gaussian rows; the orthonormal basis makes the
  // transpose an exact inverse on the span.
  Rng rng(seed);
  Mat<double> b(code_dim, n);
  for (int r = 0; r < code_dim; ++r) {
    for (;;) {
      for (int c = 0; c < n; ++c) b(r, c) = rng.normal();
      for (int p = 0; p < r; ++p) {
        double dot = 0;
        for (int c = 0; c < n; ++c) dot += b(r, c) * b(p, c);
        for (int c = 0; c < n; ++c) b(r, c) -= dot * b(p, c);
      }
      double norm = 0;
      for (int c = 0; c < n; ++c) norm += b(r, c) * b(r, c);
      if (norm > 1e-8) {  // retry the astronomically unlikely degenerate draw
        norm = 1.0 / std::sqrt(norm);
        for (int c = 0; c < n; ++c) b(r, c) *= norm;
        break;
      }
    }
  }
  PixelLift lift;
  lift.patch = patch;
  lift.basis = Mat<float>(code_dim, n);
  for (size_t i = 0; i < b.size(); ++i) lift.basis.v[i] = (float)b.v[i];
  return lift;
}

Mat<float> PixelLift::lift(const uint8_t* image, int H, int W, int side) const {
  if (H != side * patch || W != side * patch)
    throw std::invalid_argument("PixelLift::lift: image size does not match side*patch");
  int n = 3 * patch * patch;
  int d = basis.rows;
  Mat<float> grid(side * side, d);
  std::vector<float> px((size_t)n);
  for (int gr = 0; gr < side; ++gr) {
    for (int gc = 0; gc < side; ++gc) {
      int i = 0;
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c)
          for (int ch = 0; ch < 3; ++ch)
            px[(size_t)i++] =
                image[(((gr * patch + r) * W) + gc * patch + c) * 3 + ch] / 255.0f - 0.5f;
      float* out = grid.row(gr * side + gc);
      for (int e = 0; e < d; ++e) {
        const float* brow = basis.row(e);
        double acc = 0;
        for (int k = 0; k < n; ++k) acc += double(brow[k]) * px[(size_t)k];
        out[e] = (float)acc;
      }
    }
  }
  return grid;
}

void PixelLift::unlift(const Mat<float>& grid, int side, uint8_t* out_rgb) const {
  if (grid.rows != side * side || grid.cols != basis.rows)
    throw std::invalid_argument("PixelLift::unlift: grid shape mismatch");
  int n = 3 * patch * patch;
  int W = side * patch;
  std::vector<float> px((size_t)n);
  for (int gr = 0; gr < side; ++gr) {
    for (int gc = 0; gc < side; ++gc) {
      const float* f = grid.row(gr * side + gc);
      for (int k = 0; k < n; ++k) {
        double acc = 0;
        for (int e = 0; e < basis.rows; ++e) acc += double(basis(e, k)) * f[e];
        px[(size_t)k] = (float)acc;
      }
      int i = 0;
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c)
          for (int ch = 0; ch < 3; ++ch) {
            float v = (px[(size_t)i++] + 0.5f) * 255.0f;
            v = std::min(255.0f, std::max(0.0f, v));
            out_rgb[(((gr * patch + r) * W) + gc * patch + c) * 3 + ch] =
                (uint8_t)std::lround(v);
          }
    }
  }
}

std::array<double, 3> PixelLift::mean_color(const Mat<float>& grid, int side) const {
  int H = side * patch;
  std::vector<uint8_t> img((size_t)H * H * 3);
  unlift(grid, side, img.data());
  std::array<double, 3> mean{0, 0, 0};
  for (size_t i = 0; i < img.size(); i += 3)
    for (int ch = 0; ch < 3; ++ch) mean[(size_t)ch] += img[i + (size_t)ch];
  double inv = 1.0 / ((double)H * H);
  for (int ch = 0; ch < 3; ++ch) mean[(size_t)ch] *= inv;
  return mean;
}

}  // namespace mvar
