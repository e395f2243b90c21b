#pragma once

// Vectorized float transcendentals for the softmax/gelu hot paths. The AVX2
// path processes 8 lanes per iteration; every function has a scalar fallback
// with identical math so non-AVX builds stay correct (values may differ in
// the last ulp between paths, which is within every stated tolerance).

#include <cmath>
#include <cstdint>
#include <cstring>

#ifdef __AVX2__
#include <immintrin.h>
#endif

namespace picoclip::simd {

// exp via 2^n * poly(r), degree-7 Taylor on [0, ln 2), relative error ~1e-7
inline float fexp_scalar(float x) {
    x = x < -87.0f ? -87.0f : (x > 87.0f ? 87.0f : x);
    const float t = x * 1.44269504088896341f;
    const float n = std::floor(t);
    const float y = (t - n) * 0.6931471805599453f;
    float p = 1.0f / 5040.0f;
    p = p * y + 1.0f / 720.0f;
    p = p * y + 1.0f / 120.0f;
    p = p * y + 1.0f / 24.0f;
    p = p * y + 1.0f / 6.0f;
    p = p * y + 0.5f;
    p = p * y + 1.0f;
    p = p * y + 1.0f;
    const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return p * scale;
}

#ifdef __AVX2__

inline __m256 fexp8(__m256 x) {
    x = _mm256_min_ps(_mm256_set1_ps(87.0f), _mm256_max_ps(_mm256_set1_ps(-87.0f), x));
    const __m256 t = _mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f));
    const __m256 n = _mm256_floor_ps(t);
    const __m256 y = _mm256_mul_ps(_mm256_sub_ps(t, n), _mm256_set1_ps(0.6931471805599453f));
    __m256 p = _mm256_set1_ps(1.0f / 5040.0f);
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(1.0f / 720.0f));
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(1.0f / 120.0f));
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(1.0f / 24.0f));
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(1.0f / 6.0f));
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(0.5f));
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(1.0f));
    p = _mm256_fmadd_ps(p, y, _mm256_set1_ps(1.0f));
    const __m256i bits = _mm256_slli_epi32(_mm256_add_epi32(_mm256_cvtps_epi32(_mm256_round_ps(
                                               n, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC)),
                                                            _mm256_set1_epi32(127)),
                                           23);
    return _mm256_mul_ps(p, _mm256_castsi256_ps(bits));
}

inline float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}

#endif  // __AVX2__

// y[i] = exp(x[i] + shift); returns sum of outputs
inline float exp_shift_sum(const float* x, float* y, std::size_t n, float shift) {
    std::size_t i = 0;
    float total = 0;
#ifdef __AVX2__
    const __m256 vshift = _mm256_set1_ps(shift);
    __m256 acc = _mm256_setzero_ps();
    for (; i + 8 <= n; i += 8) {
        const __m256 e = fexp8(_mm256_add_ps(_mm256_loadu_ps(x + i), vshift));
        _mm256_storeu_ps(y + i, e);
        acc = _mm256_add_ps(acc, e);
    }
    total = hsum8(acc);
#endif
    for (; i < n; ++i) {
        y[i] = fexp_scalar(x[i] + shift);
        total += y[i];
    }
    return total;
}

// sum of exp(x[i] + shift) without storing
inline float exp_shift_sum_only(const float* x, std::size_t n, float shift) {
    std::size_t i = 0;
    float total = 0;
#ifdef __AVX2__
    const __m256 vshift = _mm256_set1_ps(shift);
    __m256 acc = _mm256_setzero_ps();
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, fexp8(_mm256_add_ps(_mm256_loadu_ps(x + i), vshift)));
    total = hsum8(acc);
#endif
    for (; i < n; ++i) total += fexp_scalar(x[i] + shift);
    return total;
}

// g[i] += s * exp(x[i] + shift)
inline void exp_shift_axpy(const float* x, float* g, std::size_t n, float shift, float s) {
    std::size_t i = 0;
#ifdef __AVX2__
    const __m256 vshift = _mm256_set1_ps(shift);
    const __m256 vs = _mm256_set1_ps(s);
    for (; i + 8 <= n; i += 8) {
        const __m256 e = fexp8(_mm256_add_ps(_mm256_loadu_ps(x + i), vshift));
        _mm256_storeu_ps(g + i, _mm256_fmadd_ps(vs, e, _mm256_loadu_ps(g + i)));
    }
#endif
    for (; i < n; ++i) g[i] += s * fexp_scalar(x[i] + shift);
}

inline float max_of(const float* x, std::size_t n) {
    std::size_t i = 0;
    float mx = x[0];
#ifdef __AVX2__
    if (n >= 8) {
        __m256 vmx = _mm256_loadu_ps(x);
        for (i = 8; i + 8 <= n; i += 8) vmx = _mm256_max_ps(vmx, _mm256_loadu_ps(x + i));
        alignas(32) float lanes[8];
        _mm256_store_ps(lanes, vmx);
        mx = lanes[0];
        for (int l = 1; l < 8; ++l) mx = std::max(mx, lanes[l]);
    }
#endif
    for (; i < n; ++i) mx = std::max(mx, x[i]);
    return mx;
}

inline float dot(const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    float total = 0;
#ifdef __AVX2__
    __m256 acc = _mm256_setzero_ps();
    for (; i + 8 <= n; i += 8) acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
    total = hsum8(acc);
#endif
    for (; i < n; ++i) total += a[i] * b[i];
    return total;
}

inline float tanh_scalar(float x) {
    const float e2 = fexp_scalar(2.0f * x);
    return (e2 - 1.0f) / (e2 + 1.0f);
}

// tanh-form gelu, vectorized forward and derivative
inline void gelu_forward(const float* x, float* y, std::size_t n) {
    std::size_t i = 0;
#ifdef __AVX2__
    const __m256 c0 = _mm256_set1_ps(0.7978845608028654f);
    const __m256 c1 = _mm256_set1_ps(0.044715f);
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 half = _mm256_set1_ps(0.5f);
    for (; i + 8 <= n; i += 8) {
        const __m256 v = _mm256_loadu_ps(x + i);
        const __m256 u = _mm256_mul_ps(c0, _mm256_fmadd_ps(_mm256_mul_ps(c1, _mm256_mul_ps(v, v)), v, v));
        const __m256 e2 = fexp8(_mm256_add_ps(u, u));
        const __m256 t = _mm256_div_ps(_mm256_sub_ps(e2, one), _mm256_add_ps(e2, one));
        _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, t)));
    }
#endif
    for (; i < n; ++i) {
        const float v = x[i];
        const float u = 0.7978845608028654f * (v + 0.044715f * v * v * v);
        y[i] = 0.5f * v * (1.0f + tanh_scalar(u));
    }
}

// g[i] += go[i] * gelu'(x[i])
inline void gelu_backward(const float* x, const float* go, float* g, std::size_t n) {
    std::size_t i = 0;
#ifdef __AVX2__
    const __m256 c0 = _mm256_set1_ps(0.7978845608028654f);
    const __m256 c1 = _mm256_set1_ps(0.044715f);
    const __m256 c3 = _mm256_set1_ps(3.0f * 0.044715f);
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 half = _mm256_set1_ps(0.5f);
    for (; i + 8 <= n; i += 8) {
        const __m256 v = _mm256_loadu_ps(x + i);
        const __m256 v2 = _mm256_mul_ps(v, v);
        const __m256 u = _mm256_mul_ps(c0, _mm256_fmadd_ps(_mm256_mul_ps(c1, v2), v, v));
        const __m256 e2 = fexp8(_mm256_add_ps(u, u));
        const __m256 t = _mm256_div_ps(_mm256_sub_ps(e2, one), _mm256_add_ps(e2, one));
        const __m256 du = _mm256_mul_ps(c0, _mm256_fmadd_ps(c3, v2, one));
        const __m256 sech2 = _mm256_sub_ps(one, _mm256_mul_ps(t, t));
        const __m256 grad =
            _mm256_fmadd_ps(_mm256_mul_ps(half, v), _mm256_mul_ps(sech2, du),
                            _mm256_mul_ps(half, _mm256_add_ps(one, t)));
        _mm256_storeu_ps(g + i, _mm256_fmadd_ps(_mm256_loadu_ps(go + i), grad, _mm256_loadu_ps(g + i)));
    }
#endif
    for (; i < n; ++i) {
        const float v = x[i];
        const float u = 0.7978845608028654f * (v + 0.044715f * v * v * v);
        const float t = tanh_scalar(u);
        const float du = 0.7978845608028654f * (1.0f + 3.0f * 0.044715f * v * v);
        g[i] += go[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
    }
}

}  // namespace picoclip::simd
