#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "unidec/kernels.hpp"

namespace unidec {

// Row-major dense matrix. Vectors are 1 x n or n x 1 as convenient.
template <typename T>
struct Mat {
  int rows = 0, cols = 0;
  std::vector<T> d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, T(0)) {}

  T* row(int i) { return d.data() + static_cast<size_t>(i) * cols; }
  const T* row(int i) const { return d.data() + static_cast<size_t>(i) * cols; }
  T& at(int i, int j) { return d[static_cast<size_t>(i) * cols + j]; }
  const T& at(int i, int j) const { return d[static_cast<size_t>(i) * cols + j]; }
  T* data() { return d.data(); }
  const T* data() const { return d.data(); }
  int64_t numel() const { return static_cast<int64_t>(rows) * cols; }
  void zero() { std::fill(d.begin(), d.end(), T(0)); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// c = a * b
template <typename T>
inline void mm(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool acc = false) {
  kern::K<T>().matmul(a.data(), b.data(), c.data(), a.rows, a.cols, b.cols, acc);
}

// c = a * b^T
template <typename T>
inline void mm_bt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool acc = false) {
  kern::K<T>().matmul_bt(a.data(), b.data(), c.data(), a.rows, a.cols, b.rows, acc);
}

// c = a^T * b
template <typename T>
inline void mm_at(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool acc = false) {
  kern::K<T>().matmul_at(a.data(), b.data(), c.data(), a.rows, a.cols, b.cols, acc);
}

template <typename T>
inline T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  T m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const T diff = a.d[i] > b.d[i] ? a.d[i] - b.d[i] : b.d[i] - a.d[i];
    m = std::max(m, diff);
  }
  return m;
}

}  // namespace unidec
