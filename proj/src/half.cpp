#include "gradtrace/half.hpp"

#include <Eigen/Core>
#include <array>
#include <cstddef>

#if defined(__x86_64__) && defined(__GNUC__)
#include <immintrin.h>
#define GRADTRACE_X86_DISPATCH 1
#endif

namespace gradtrace {

namespace {

// Every binary16 value widened once; lookups keep the inner-product loop
// free of bit manipulation.
const std::array<double, 65536>& widen_table() {
  static const std::array<double, 65536> table = [] {
    std::array<double, 65536> t{};
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<double>(static_cast<float>(
          Eigen::numext::bit_cast<Eigen::half>(static_cast<std::uint16_t>(i))));
    }
    return t;
  }();
  return table;
}

// Products of two binary16 values are exact in binary32 and binary64, so
// only the order of the double additions matters. Both paths use eight
// lanes (lane l takes indices i = l mod 8), fold them as
// ((l0+l4) + (l1+l5)) + ((l2+l6) + (l3+l7)), then add the tail in order,
// which makes them bitwise identical.
double half_dot_portable(const HalfBits* a, const HalfBits* b, std::size_t n) {
  const auto& table = widen_table();
  double lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lane[l] += table[a[i + l]] * table[b[i + l]];
  }
  double acc = ((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7]));
  for (; i < n; ++i) acc += table[a[i]] * table[b[i]];
  return acc;
}

#ifdef GRADTRACE_X86_DISPATCH
__attribute__((target("avx,f16c"))) double half_dot_f16c(const HalfBits* a, const HalfBits* b, std::size_t n) {
  __m256d lo = _mm256_setzero_pd();
  __m256d hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 fa = _mm256_cvtph_ps(_mm_loadu_si128(reinterpret_cast<const __m128i*>(a + i)));
    const __m256 fb = _mm256_cvtph_ps(_mm_loadu_si128(reinterpret_cast<const __m128i*>(b + i)));
    const __m256 p = _mm256_mul_ps(fa, fb);
    lo = _mm256_add_pd(lo, _mm256_cvtps_pd(_mm256_castps256_ps128(p)));
    hi = _mm256_add_pd(hi, _mm256_cvtps_pd(_mm256_extractf128_ps(p, 1)));
  }
  alignas(32) double d[4];
  _mm256_store_pd(d, _mm256_add_pd(lo, hi));
  double acc = (d[0] + d[1]) + (d[2] + d[3]);
  const auto& table = widen_table();
  for (; i < n; ++i) acc += table[a[i]] * table[b[i]];
  return acc;
}

bool cpu_has_f16c() {
  static const bool has = __builtin_cpu_supports("avx") && __builtin_cpu_supports("f16c");
  return has;
}
#endif

}  // namespace

HalfBits to_half(double value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(value)));
}

double from_half(HalfBits bits) { return widen_table()[bits]; }

double half_dot(std::span<const HalfBits> a, std::span<const HalfBits> b) {
  const std::size_t n = a.size() < b.size() ? a.size() : b.size();
#ifdef GRADTRACE_X86_DISPATCH
  if (cpu_has_f16c()) return half_dot_f16c(a.data(), b.data(), n);
#endif
  return half_dot_portable(a.data(), b.data(), n);
}

double half_dot_reference(std::span<const HalfBits> a, std::span<const HalfBits> b) {
  const std::size_t n = a.size() < b.size() ? a.size() : b.size();
  return half_dot_portable(a.data(), b.data(), n);
}

}  // namespace gradtrace
