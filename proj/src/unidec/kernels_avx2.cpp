// AVX2/FMA variants of the dense kernels. This translation unit is the only
// one built with -mavx2 -mfma; nothing here may be called unless dispatch
// confirmed CPU support.

#include <cmath>
#include <cstring>

#include "unidec/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

namespace unidec::kern::detail {

namespace {

// ---------------------------------------------------------------- float ----

void matmul_f(const float* a, const float* b, float* c, int m, int k, int n,
              bool acc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<size_t>(i) * n;
    if (!acc) std::memset(crow, 0, sizeof(float) * n);
    const float* arow = a + static_cast<size_t>(i) * k;
    int j = 0;
    for (; j + 64 <= n; j += 64) {
      __m256 c0 = _mm256_loadu_ps(crow + j + 0);
      __m256 c1 = _mm256_loadu_ps(crow + j + 8);
      __m256 c2 = _mm256_loadu_ps(crow + j + 16);
      __m256 c3 = _mm256_loadu_ps(crow + j + 24);
      __m256 c4 = _mm256_loadu_ps(crow + j + 32);
      __m256 c5 = _mm256_loadu_ps(crow + j + 40);
      __m256 c6 = _mm256_loadu_ps(crow + j + 48);
      __m256 c7 = _mm256_loadu_ps(crow + j + 56);
      for (int l = 0; l < k; ++l) {
        const __m256 av = _mm256_set1_ps(arow[l]);
        const float* brow = b + static_cast<size_t>(l) * n + j;
        c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 0), c0);
        c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
        c2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 16), c2);
        c3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 24), c3);
        c4 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 32), c4);
        c5 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 40), c5);
        c6 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 48), c6);
        c7 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 56), c7);
      }
      _mm256_storeu_ps(crow + j + 0, c0);
      _mm256_storeu_ps(crow + j + 8, c1);
      _mm256_storeu_ps(crow + j + 16, c2);
      _mm256_storeu_ps(crow + j + 24, c3);
      _mm256_storeu_ps(crow + j + 32, c4);
      _mm256_storeu_ps(crow + j + 40, c5);
      _mm256_storeu_ps(crow + j + 48, c6);
      _mm256_storeu_ps(crow + j + 56, c7);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 c0 = _mm256_loadu_ps(crow + j);
      for (int l = 0; l < k; ++l) {
        c0 = _mm256_fmadd_ps(_mm256_set1_ps(arow[l]),
                             _mm256_loadu_ps(b + static_cast<size_t>(l) * n + j), c0);
      }
      _mm256_storeu_ps(crow + j, c0);
    }
    for (; j < n; ++j) {
      float s = crow[j];
      for (int l = 0; l < k; ++l) s += arow[l] * b[static_cast<size_t>(l) * n + j];
      crow[j] = s;
    }
  }
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

float dot_f(const float* a, const float* b, int n) {
  __m256 s0 = _mm256_setzero_ps();
  __m256 s1 = _mm256_setzero_ps();
  __m256 s2 = _mm256_setzero_ps();
  __m256 s3 = _mm256_setzero_ps();
  int i = 0;
  for (; i + 32 <= n; i += 32) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 0), _mm256_loadu_ps(b + i + 0), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), s1);
    s2 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 16), _mm256_loadu_ps(b + i + 16), s2);
    s3 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 24), _mm256_loadu_ps(b + i + 24), s3);
  }
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
  }
  float s = hsum(_mm256_add_ps(_mm256_add_ps(s0, s1), _mm256_add_ps(s2, s3)));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void matmul_bt_f(const float* a, const float* b, float* c, int m, int k, int n,
                 bool acc) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float s = dot_f(arow, b + static_cast<size_t>(j) * k, k);
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

void axpy_f(float alpha, const float* x, float* y, int n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i),
                                            _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void matmul_at_f(const float* a, const float* b, float* c, int m, int k, int n,
                 bool acc) {
  if (!acc) std::memset(c, 0, sizeof(float) * static_cast<size_t>(k) * n);
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    const float* brow = b + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      axpy_f(arow[l], brow, c + static_cast<size_t>(l) * n, n);
    }
  }
}

void scale_f(float alpha, float* x, int n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void vadd_f(const float* a, const float* b, float* c, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(c + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void vmul_f(const float* a, const float* b, float* c, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(c + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

float sumsq_f(const float* x, int n) {
  __m256 s0 = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    s0 = _mm256_fmadd_ps(v, v, s0);
  }
  float s = hsum(s0);
  for (; i < n; ++i) s += x[i] * x[i];
  return s;
}

void adamw_f(float* p, const float* g, float* m, float* v, int n, float lr,
             float beta1, float beta2, float bias1, float bias2, float eps,
             float wd) {
  const __m256 b1 = _mm256_set1_ps(beta1);
  const __m256 b2 = _mm256_set1_ps(beta2);
  const __m256 ob1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 ob2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 ib1 = _mm256_set1_ps(1.0f / bias1);
  const __m256 ib2 = _mm256_set1_ps(1.0f / bias2);
  const __m256 ev = _mm256_set1_ps(eps);
  const __m256 lrv = _mm256_set1_ps(lr);
  const __m256 wdv = _mm256_set1_ps(wd);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gv = _mm256_loadu_ps(g + i);
    __m256 mv = _mm256_loadu_ps(m + i);
    __m256 vv = _mm256_loadu_ps(v + i);
    mv = _mm256_fmadd_ps(ob1, gv, _mm256_mul_ps(b1, mv));
    vv = _mm256_fmadd_ps(ob2, _mm256_mul_ps(gv, gv), _mm256_mul_ps(b2, vv));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    const __m256 mh = _mm256_mul_ps(mv, ib1);
    const __m256 vh = _mm256_mul_ps(vv, ib2);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vh), ev);
    __m256 pv = _mm256_loadu_ps(p + i);
    const __m256 upd = _mm256_fmadd_ps(wdv, pv, _mm256_div_ps(mh, denom));
    pv = _mm256_fnmadd_ps(lrv, upd, pv);
    _mm256_storeu_ps(p + i, pv);
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    const float mh = m[i] / bias1;
    const float vh = v[i] / bias2;
    p[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * p[i]);
  }
}

// --------------------------------------------------------------- double ----

void matmul_d(const double* a, const double* b, double* c, int m, int k, int n,
              bool acc) {
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    if (!acc) std::memset(crow, 0, sizeof(double) * n);
    const double* arow = a + static_cast<size_t>(i) * k;
    int j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256d c0 = _mm256_loadu_pd(crow + j + 0);
      __m256d c1 = _mm256_loadu_pd(crow + j + 4);
      __m256d c2 = _mm256_loadu_pd(crow + j + 8);
      __m256d c3 = _mm256_loadu_pd(crow + j + 12);
      for (int l = 0; l < k; ++l) {
        const __m256d av = _mm256_set1_pd(arow[l]);
        const double* brow = b + static_cast<size_t>(l) * n + j;
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 0), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 4), c1);
        c2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 8), c2);
        c3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 12), c3);
      }
      _mm256_storeu_pd(crow + j + 0, c0);
      _mm256_storeu_pd(crow + j + 4, c1);
      _mm256_storeu_pd(crow + j + 8, c2);
      _mm256_storeu_pd(crow + j + 12, c3);
    }
    for (; j + 4 <= n; j += 4) {
      __m256d c0 = _mm256_loadu_pd(crow + j);
      for (int l = 0; l < k; ++l) {
        c0 = _mm256_fmadd_pd(_mm256_set1_pd(arow[l]),
                             _mm256_loadu_pd(b + static_cast<size_t>(l) * n + j), c0);
      }
      _mm256_storeu_pd(crow + j, c0);
    }
    for (; j < n; ++j) {
      double s = crow[j];
      for (int l = 0; l < k; ++l) s += arow[l] * b[static_cast<size_t>(l) * n + j];
      crow[j] = s;
    }
  }
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  lo = _mm_hadd_pd(lo, lo);
  return _mm_cvtsd_f64(lo);
}

double dot_d(const double* a, const double* b, int n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 0), _mm256_loadu_pd(b + i + 0), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void matmul_bt_d(const double* a, const double* b, double* c, int m, int k,
                 int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double s = dot_d(arow, b + static_cast<size_t>(j) * k, k);
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

void axpy_d(double alpha, const double* x, double* y, int n) {
  const __m256d av = _mm256_set1_pd(alpha);
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void matmul_at_d(const double* a, const double* b, double* c, int m, int k,
                 int n, bool acc) {
  if (!acc) std::memset(c, 0, sizeof(double) * static_cast<size_t>(k) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      axpy_d(arow[l], brow, c + static_cast<size_t>(l) * n, n);
    }
  }
}

void scale_d(double alpha, double* x, int n) {
  const __m256d av = _mm256_set1_pd(alpha);
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void vadd_d(const double* a, const double* b, double* c, int n) {
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] + b[i];
}

void vmul_d(const double* a, const double* b, double* c, int n) {
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(c + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) c[i] = a[i] * b[i];
}

double sumsq_d(const double* x, int n) {
  __m256d s0 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    s0 = _mm256_fmadd_pd(v, v, s0);
  }
  double s = hsum(s0);
  for (; i < n; ++i) s += x[i] * x[i];
  return s;
}

void adamw_d(double* p, const double* g, double* m, double* v, int n,
             double lr, double beta1, double beta2, double bias1, double bias2,
             double eps, double wd) {
  for (int i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mh = m[i] / bias1;
    const double vh = v[i] / bias2;
    p[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * p[i]);
  }
}

}  // namespace

template <>
Kernels<float> avx2_table<float>() {
  Kernels<float> t;
  t.matmul = matmul_f;
  t.matmul_bt = matmul_bt_f;
  t.matmul_at = matmul_at_f;
  t.dot = dot_f;
  t.axpy = axpy_f;
  t.scale = scale_f;
  t.vadd = vadd_f;
  t.vmul = vmul_f;
  t.sumsq = sumsq_f;
  t.adamw = adamw_f;
  return t;
}

template <>
Kernels<double> avx2_table<double>() {
  Kernels<double> t;
  t.matmul = matmul_d;
  t.matmul_bt = matmul_bt_d;
  t.matmul_at = matmul_at_d;
  t.dot = dot_d;
  t.axpy = axpy_d;
  t.scale = scale_d;
  t.vadd = vadd_d;
  t.vmul = vmul_d;
  t.sumsq = sumsq_d;
  t.adamw = adamw_d;
  return t;
}

}  // namespace unidec::kern::detail

#else  // non-x86 build: alias the scalar table so dispatch still links

namespace unidec::kern::detail {

template <>
Kernels<float> avx2_table<float>() { return scalar_table<float>(); }

template <>
Kernels<double> avx2_table<double>() { return scalar_table<double>(); }

}  // namespace unidec::kern::detail

#endif
