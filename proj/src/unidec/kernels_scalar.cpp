#include <cmath>
#include <cstring>

#include "unidec/kernels.hpp"

namespace unidec::kern::detail {

namespace {

template <typename T>
void matmul_s(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    if (!acc) std::memset(crow, 0, sizeof(T) * n);
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_bt_s(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T s = 0;
      for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

template <typename T>
void matmul_at_s(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
  if (!acc) std::memset(c, 0, sizeof(T) * static_cast<size_t>(k) * n);
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    const T* brow = b + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      T* crow = c + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
T dot_s(const T* a, const T* b, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy_s(T alpha, const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_s(T alpha, T* x, int n) {
  for (int i = 0; i < n; ++i) x[i] *= alpha;
}

template <typename T>
void vadd_s(const T* a, const T* b, T* c, int n) {
  for (int i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

template <typename T>
void vmul_s(const T* a, const T* b, T* c, int n) {
  for (int i = 0; i < n; ++i) c[i] = a[i] * b[i];
}

template <typename T>
T sumsq_s(const T* x, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += x[i] * x[i];
  return s;
}

template <typename T>
void adamw_s(T* p, const T* g, T* m, T* v, int n, T lr, T beta1, T beta2,
             T bias1, T bias2, T eps, T wd) {
  for (int i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mh = m[i] / bias1;
    const T vh = v[i] / bias2;
    p[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * p[i]);
  }
}

}  // namespace

template <typename T>
Kernels<T> scalar_table() {
  Kernels<T> t;
  t.matmul = matmul_s<T>;
  t.matmul_bt = matmul_bt_s<T>;
  t.matmul_at = matmul_at_s<T>;
  t.dot = dot_s<T>;
  t.axpy = axpy_s<T>;
  t.scale = scale_s<T>;
  t.vadd = vadd_s<T>;
  t.vmul = vmul_s<T>;
  t.sumsq = sumsq_s<T>;
  t.adamw = adamw_s<T>;
  return t;
}

template Kernels<float> scalar_table<float>();
template Kernels<double> scalar_table<double>();

}  // namespace unidec::kern::detail
