#include "unidec/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace unidec::kern {

namespace {

Kernels<float> g_table_f;
Kernels<double> g_table_d;
Isa g_isa = Isa::scalar;
bool g_resolved = false;

Isa detect() {
  if (const char* env = std::getenv("UNIDEC_ISA")) {
    if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
    if (std::strcmp(env, "avx2") == 0 && cpu_has_avx2()) return Isa::avx2;
  }
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

void install(Isa isa) {
  if (isa == Isa::avx2) {
    g_table_f = detail::avx2_table<float>();
    g_table_d = detail::avx2_table<double>();
  } else {
    g_table_f = detail::scalar_table<float>();
    g_table_d = detail::scalar_table<double>();
  }
  g_isa = isa;
  g_resolved = true;
}

void resolve_once() {
  if (!g_resolved) install(detect());
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa active_isa() {
  resolve_once();
  return g_isa;
}

void force_isa(Isa isa) { install(isa); }

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

template <>
const Kernels<float>& K<float>() {
  resolve_once();
  return g_table_f;
}

template <>
const Kernels<double>& K<double>() {
  resolve_once();
  return g_table_d;
}

}  // namespace unidec::kern
