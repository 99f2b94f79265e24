#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mvar {

// Dense row-major matrix over float or double. Square token grids of side s
// with embedding width d are stored as (s*s) x d, row index r*s + c.
template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, T(0)) {}

  T& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  T* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
  const T* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return v.size(); }
  void zero() { std::fill(v.begin(), v.end(), T(0)); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

template <typename T>
bool all_finite(const Mat<T>& m) {
  for (T x : m.v)
    if (!std::isfinite(x)) return false;
  return true;
}

// out = a * b, shapes (m x k)(k x n)
template <typename T>
void matmul(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  if (a.cols != b.rows || out.rows != a.rows || out.cols != b.cols)
    throw std::invalid_argument("matmul: shape mismatch");
  out.zero();
  for (int i = 0; i < a.rows; ++i) {
    T* o = out.row(i);
    const T* ar = a.row(i);
    for (int k = 0; k < a.cols; ++k) {
      T aik = ar[k];
      const T* br = b.row(k);
      for (int j = 0; j < b.cols; ++j) o[j] += aik * br[j];
    }
  }
}

// out += a^T * b, shapes (m x k)^T (m x n) -> (k x n); used for weight grads
template <typename T>
void matmul_acc_tA(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  if (a.rows != b.rows || out.rows != a.cols || out.cols != b.cols)
    throw std::invalid_argument("matmul_acc_tA: shape mismatch");
  for (int i = 0; i < a.rows; ++i) {
    const T* ar = a.row(i);
    const T* br = b.row(i);
    for (int k = 0; k < a.cols; ++k) {
      T aik = ar[k];
      T* o = out.row(k);
      for (int j = 0; j < b.cols; ++j) o[j] += aik * br[j];
    }
  }
}

// out += a * b^T, shapes (m x k)(n x k)^T -> (m x n); used for input grads
template <typename T>
void matmul_acc_tB(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  if (a.cols != b.cols || out.rows != a.rows || out.cols != b.rows)
    throw std::invalid_argument("matmul_acc_tB: shape mismatch");
  for (int i = 0; i < a.rows; ++i) {
    const T* ar = a.row(i);
    T* o = out.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const T* br = b.row(j);
      double acc = 0;
      for (int k = 0; k < a.cols; ++k) acc += double(ar[k]) * br[k];
      o[j] += T(acc);
    }
  }
}

}  // namespace mvar
