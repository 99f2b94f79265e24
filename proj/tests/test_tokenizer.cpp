#include <cmath>
#include <vector>

#include "doctest.h"
#include "mvar/rng.hpp"
#include "mvar/tokenizer.hpp"

using namespace mvar;

namespace {

Codebook make_codebook(std::vector<std::vector<float>> rows) {
  Codebook cb;
  cb.vectors = Mat<float>((int)rows.size(), (int)rows[0].size());
  for (int r = 0; r < cb.vectors.rows; ++r)
    for (int c = 0; c < cb.vectors.cols; ++c) cb.vectors(r, c) = rows[(size_t)r][(size_t)c];
  return cb;
}

Mat<float> random_features(int rows, int d, Rng& rng, double scale = 1.0) {
  Mat<float> f(rows, d);
  for (auto& x : f.v) x = (float)(rng.normal() * scale);
  return f;
}

}  // namespace

TEST_CASE("nearest-code lookup and tie break") {
  Codebook cb = make_codebook({{1, 0}, {0, 1}, {-1, 0}});
  float a[2] = {0.9f, 0.1f};
  auto [id_a, vec_a] = quantize_nearest(a, 2, cb);
  CHECK(id_a == 0);
  CHECK(vec_a == std::vector<float>{1, 0});

  // equidistant from rows 0 and 1: the lower index wins
  float t[2] = {0.5f, 0.5f};
  CHECK(quantize_nearest(t, 2, cb).first == 0);

  float bad[2] = {std::nanf(""), 0.0f};
  CHECK_THROWS_AS(quantize_nearest(bad, 2, cb), std::invalid_argument);
  Codebook empty;
  empty.vectors = Mat<float>(0, 2);
  CHECK_THROWS_AS(quantize_nearest(a, 2, empty), std::invalid_argument);
}

TEST_CASE("mean pool splits cells like upsample replicates them") {
  Rng rng(3);
  for (auto [ss, ds] : {std::pair{1, 2}, {2, 4}, {3, 5}, {2, 3}}) {
    Mat<float> coarse = random_features(ss * ss, 4, rng);
    Mat<float> fine = upsample_grid(coarse, ss, ds);
    Mat<float> back = mean_pool(fine, ds, ss);
    REQUIRE(back.rows == coarse.rows);
    for (size_t i = 0; i < back.v.size(); ++i)
      CHECK(back.v[i] == doctest::Approx(coarse.v[i]).epsilon(1e-6));
  }
  // pooling to the same side is the identity
  Mat<float> x = random_features(9, 2, rng);
  Mat<float> same = mean_pool(x, 3, 3);
  for (size_t i = 0; i < x.v.size(); ++i) CHECK(same.v[i] == x.v[i]);
}

TEST_CASE("two-scale residual encoding matches a hand oracle") {
  // schedule [1,2], d=2. Scale 1 sees the global mean, scale 2 the residual.
  Codebook cb = make_codebook({{2, 0}, {0, 2}, {1, 1}, {-1, -1}, {0, 0}});
  Mat<float> f(4, 2);
  float cells[4][2] = {{3, 1}, {1, 3}, {3, 3}, {1, 1}};
  for (int i = 0; i < 4; ++i) {
    f(i, 0) = cells[i][0];
    f(i, 1) = cells[i][1];
  }
  // mean = (2,2): distances^2 to rows are 4,4,2,18,8 -> id 2 = (1,1)
  // residuals: (2,0),(0,2),(2,2),(0,0) -> ids 0,1,2,4
  ScaleSchedule sch = ScaleSchedule::from_sides({1, 2});
  TokenMapPyramid pyr = encode_multiscale(f, sch, cb);
  REQUIRE(pyr.maps.size() == 2);
  CHECK(pyr.maps[0] == std::vector<int>{2});
  CHECK(pyr.maps[1] == std::vector<int>{0, 1, 2, 4});

  // decode == sum of upsampled selections; cell 2's residual (2,2) lands on
  // codebook row (1,1), so its reconstruction is (2,2), one unit off
  Mat<float> dec = decode_multiscale(pyr, cb);
  float want[4][2] = {{3, 1}, {1, 3}, {2, 2}, {1, 1}};
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 2; ++k) CHECK(dec(i, k) == doctest::Approx(want[i][k]));
}

TEST_CASE("constructed inputs round-trip exactly") {
  // features = up(anchor) + a finer pattern whose cells pool to zero and sit
  // in the codebook; both scales then quantize with zero error
  Codebook cb = make_codebook({{3, -1}, {-3, 1}, {0, 0}, {7, 5}});
  ScaleSchedule sch = ScaleSchedule::from_sides({1, 2});
  Mat<float> f(4, 2);
  float pat[4][2] = {{3, -1}, {-3, 1}, {-3, 1}, {3, -1}};
  for (int i = 0; i < 4; ++i) {
    f(i, 0) = 7.0f + pat[i][0];
    f(i, 1) = 5.0f + pat[i][1];
  }
  TokenMapPyramid pyr = encode_multiscale(f, sch, cb);
  CHECK(pyr.maps[0] == std::vector<int>{3});
  CHECK(pyr.maps[1] == std::vector<int>{0, 1, 1, 0});
  Mat<float> dec = decode_multiscale(pyr, cb);
  for (size_t i = 0; i < f.v.size(); ++i) CHECK(dec.v[i] == doctest::Approx(f.v[i]));
  CHECK(residual_energy(f, sch, cb, 2) == doctest::Approx(0.0));
}

TEST_CASE("residual energy never grows with more scales") {
  Rng rng(21);
  ScaleSchedule sch = ScaleSchedule::from_sides({1, 2, 3, 4});
  const int d = 6;
  Mat<float> corpus = random_features(256, d, rng);
  Codebook cb = fit_codebook(corpus, 17, 5);
  for (int trial = 0; trial < 20; ++trial) {
    Mat<float> f = random_features(16, d, rng);
    double total = 0;
    for (auto x : f.v) total += (double)x * x;
    double prev = residual_energy(f, sch, cb, 0);
    CHECK(prev == doctest::Approx(total));
    for (int k = 1; k <= sch.num_scales(); ++k) {
      double cur = residual_energy(f, sch, cb, k);
      CHECK(cur <= prev + 1e-4);
      prev = cur;
    }
  }
}

TEST_CASE("codebook fitting reserves the zero row") {
  Rng rng(9);
  Mat<float> corpus = random_features(300, 4, rng);
  Codebook cb = fit_codebook(corpus, 12, 77);
  REQUIRE(cb.size() == 12);
  REQUIRE(cb.dim() == 4);
  for (int k = 0; k < 4; ++k) CHECK(cb.vectors(11, k) == 0.0f);
  CHECK(all_finite(cb.vectors));
  // fitting is deterministic in the seed
  Codebook again = fit_codebook(corpus, 12, 77);
  CHECK(again.vectors.v == cb.vectors.v);
  Codebook other = fit_codebook(corpus, 12, 78);
  CHECK(other.vectors.v != cb.vectors.v);

  // quantizing the corpus with the fit should beat quantizing with a 1-code
  // (zero-only) book
  double fit_err = 0, zero_err = 0;
  for (int r = 0; r < corpus.rows; ++r) {
    auto [id, vec] = quantize_nearest(corpus.row(r), 4, cb);
    for (int k = 0; k < 4; ++k) {
      double dfit = corpus(r, k) - vec[(size_t)k];
      fit_err += dfit * dfit;
      zero_err += (double)corpus(r, k) * corpus(r, k);
    }
  }
  CHECK(fit_err < zero_err);
}

TEST_CASE("pixel lift has orthonormal rows and inverts itself") {
  const int patch = 2, code_dim = 12;  // full-rank: 3*2*2 == 12
  PixelLift lift = PixelLift::create(code_dim, patch, 123);
  REQUIRE(lift.basis.rows == code_dim);
  REQUIRE(lift.basis.cols == 12);
  for (int i = 0; i < code_dim; ++i)
    for (int j = 0; j < code_dim; ++j) {
      double dot = 0;
      for (int k = 0; k < 12; ++k) dot += (double)lift.basis(i, k) * lift.basis(j, k);
      CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-5).scale(1.0));
    }

  // byte image -> lift -> unlift reproduces every byte (rank-complete basis)
  const int side = 3, H = side * patch;
  std::vector<uint8_t> img((size_t)H * H * 3), back(img.size());
  Rng rng(5);
  for (auto& b : img) b = (uint8_t)rng.uniform_int(256);
  Mat<float> feats = lift.lift(img.data(), H, H, side);
  REQUIRE(feats.rows == side * side);
  lift.unlift(feats, side, back.data());
  int worst = 0;
  for (size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs((int)img[i] - (int)back[i]));
  CHECK(worst <= 1);

  // mean colour of the decode matches a pixel-space average
  auto mc = lift.mean_color(feats, side);
  double sums[3] = {0, 0, 0};
  for (size_t i = 0; i < back.size(); ++i) sums[i % 3] += back[i];
  for (int ch = 0; ch < 3; ++ch)
    CHECK(mc[(size_t)ch] == doctest::Approx(sums[ch] / (H * H)).epsilon(0.02));
}
