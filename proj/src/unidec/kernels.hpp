#pragma once

namespace unidec::kern {

enum class Isa { scalar, avx2 };

// ISA resolved once at first use: AVX2+FMA when the CPU supports it, otherwise
// scalar. UNIDEC_ISA=scalar|avx2 overrides detection.
Isa active_isa();

// Test hook; swaps every dispatch table. Not thread safe.
void force_isa(Isa isa);

bool cpu_has_avx2();

const char* isa_name(Isa isa);

// Dense row-major kernels. The scalar table is the reference implementation;
// SIMD variants must agree with it to rounding error and are tested for that.
template <typename T>
struct Kernels {
  // C(m,n) = A(m,k) * B(k,n); accumulates into C when acc is set.
  void (*matmul)(const T* a, const T* b, T* c, int m, int k, int n, bool acc);
  // C(m,n) = A(m,k) * B(n,k)^T
  void (*matmul_bt)(const T* a, const T* b, T* c, int m, int k, int n, bool acc);
  // C(k,n) = A(m,k)^T * B(m,n)
  void (*matmul_at)(const T* a, const T* b, T* c, int m, int k, int n, bool acc);
  T (*dot)(const T* a, const T* b, int n);
  void (*axpy)(T alpha, const T* x, T* y, int n);  // y += alpha * x
  void (*scale)(T alpha, T* x, int n);
  void (*vadd)(const T* a, const T* b, T* c, int n);
  void (*vmul)(const T* a, const T* b, T* c, int n);
  T (*sumsq)(const T* x, int n);
  // AdamW step with decoupled weight decay; bias1/bias2 are the 1-beta^t
  // correction denominators.
  void (*adamw)(T* p, const T* g, T* m, T* v, int n, T lr, T beta1, T beta2,
                T bias1, T bias2, T eps, T wd);
};

template <typename T>
const Kernels<T>& K();

namespace detail {
template <typename T> Kernels<T> scalar_table();
template <typename T> Kernels<T> avx2_table();
}  // namespace detail

}  // namespace unidec::kern
