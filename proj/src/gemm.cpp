#include "gemm.hpp"

#include <atomic>

namespace logodiffuser::detail {

namespace {

std::atomic<bool> portable_only{false};

void gemm_scalar(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
                 std::size_t m, std::size_t n, std::size_t k_len, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            float acc = accumulate ? c[i * ldc + j] : 0.0f;
            for (std::size_t k = 0; k < k_len; ++k) acc += a[i * lda + k] * b[k * ldb + j];
            c[i * ldc + j] = acc;
        }
    }
}

#if defined(__GNUC__)

// The 32-byte helpers are always inlined into the AVX2 entry point, so the
// ABI note about passing them by value does not apply.
#pragma GCC diagnostic ignored "-Wpsabi"

// vector_size on a dependent alias template is silently dropped, hence the
// explicit specializations.
template <std::size_t W>
struct lanes;
template <>
struct lanes<4> {
    typedef float type __attribute__((vector_size(16)));
    typedef float unaligned __attribute__((vector_size(16), aligned(4)));
};
template <>
struct lanes<8> {
    typedef float type __attribute__((vector_size(32)));
    typedef float unaligned __attribute__((vector_size(32), aligned(4)));
};
template <std::size_t W>
using vec = typename lanes<W>::type;
template <std::size_t W>
using vec_u = typename lanes<W>::unaligned;
static_assert(sizeof(vec<4>) == 16 && sizeof(vec<8>) == 32);

template <std::size_t W>
[[gnu::always_inline]] inline vec<W> load(const float* p) {
    return *reinterpret_cast<const vec_u<W>*>(p);
}
template <std::size_t W>
[[gnu::always_inline]] inline void store(float* p, vec<W> v) {
    *reinterpret_cast<vec_u<W>*>(p) = v;
}
template <std::size_t W>
[[gnu::always_inline]] inline vec<W> splat(float s) {
    return vec<W>{} + s;
}

// 4 rows x 2W columns held in registers across the k loop. Named
// accumulators on purpose: GCC spills an array of them every iteration.
template <std::size_t W>
[[gnu::always_inline]] inline void tile_4x2(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                                            std::size_t ldc, std::size_t k_len, bool accumulate) {
    vec<W> c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
    if (accumulate) {
        c00 = load<W>(c), c01 = load<W>(c + W);
        c10 = load<W>(c + ldc), c11 = load<W>(c + ldc + W);
        c20 = load<W>(c + 2 * ldc), c21 = load<W>(c + 2 * ldc + W);
        c30 = load<W>(c + 3 * ldc), c31 = load<W>(c + 3 * ldc + W);
    }
    for (std::size_t k = 0; k < k_len; ++k) {
        const vec<W> b0 = load<W>(b + k * ldb);
        const vec<W> b1 = load<W>(b + k * ldb + W);
        vec<W> av = splat<W>(a[k]);
        c00 += av * b0, c01 += av * b1;
        av = splat<W>(a[lda + k]);
        c10 += av * b0, c11 += av * b1;
        av = splat<W>(a[2 * lda + k]);
        c20 += av * b0, c21 += av * b1;
        av = splat<W>(a[3 * lda + k]);
        c30 += av * b0, c31 += av * b1;
    }
    store<W>(c, c00), store<W>(c + W, c01);
    store<W>(c + ldc, c10), store<W>(c + ldc + W, c11);
    store<W>(c + 2 * ldc, c20), store<W>(c + 2 * ldc + W, c21);
    store<W>(c + 3 * ldc, c30), store<W>(c + 3 * ldc + W, c31);
}

template <std::size_t W>
[[gnu::always_inline]] inline void tile_1x1(const float* a, const float* b, std::size_t ldb, float* c,
                                            std::size_t k_len, bool accumulate) {
    vec<W> acc = accumulate ? load<W>(c) : vec<W>{};
    for (std::size_t k = 0; k < k_len; ++k) acc += splat<W>(a[k]) * load<W>(b + k * ldb);
    store<W>(c, acc);
}

template <std::size_t W>
[[gnu::always_inline]] inline void gemm_vec(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                                            std::size_t ldc, std::size_t m, std::size_t n, std::size_t k_len,
                                            bool accumulate) {
    const std::size_t n_vec = n - n % W;
    const std::size_t n_tile = n - n % (2 * W);
    const std::size_t m_tile = m - m % 4;
    for (std::size_t i = 0; i < m_tile; i += 4) {
        for (std::size_t j = 0; j < n_tile; j += 2 * W) {
            tile_4x2<W>(a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc, k_len, accumulate);
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i < m_tile ? n_tile : 0; j < n_vec; j += W) {
            tile_1x1<W>(a + i * lda, b + j, ldb, c + i * ldc + j, k_len, accumulate);
        }
    }
    gemm_scalar(a, lda, b + n_vec, ldb, c + n_vec, ldc, m, n - n_vec, k_len, accumulate);
}

void gemm_sse(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
              std::size_t m, std::size_t n, std::size_t k_len, bool accumulate) {
    gemm_vec<4>(a, lda, b, ldb, c, ldc, m, n, k_len, accumulate);
}

#if defined(__x86_64__) || defined(__i386__)
#define LOGODIFFUSER_HAVE_AVX2_PATH 1
// FMA stays off: contraction would change rounding.
__attribute__((target("avx2"))) void gemm_avx2(const float* a, std::size_t lda, const float* b, std::size_t ldb,
                                               float* c, std::size_t ldc, std::size_t m, std::size_t n,
                                               std::size_t k_len, bool accumulate) {
    gemm_vec<8>(a, lda, b, ldb, c, ldc, m, n, k_len, accumulate);
}

bool cpu_has_avx2() {
    static const bool has = __builtin_cpu_supports("avx2");
    return has;
}
#endif

#endif  // __GNUC__

}  // namespace

void gemm(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc, std::size_t m,
          std::size_t n, std::size_t k_len, bool accumulate) {
#if defined(LOGODIFFUSER_HAVE_AVX2_PATH)
    if (!portable_only.load(std::memory_order_relaxed) && cpu_has_avx2()) {
        gemm_avx2(a, lda, b, ldb, c, ldc, m, n, k_len, accumulate);
        return;
    }
#endif
#if defined(__GNUC__)
    gemm_sse(a, lda, b, ldb, c, ldc, m, n, k_len, accumulate);
#else
    gemm_scalar(a, lda, b, ldb, c, ldc, m, n, k_len, accumulate);
#endif
}

const char* gemm_kernel() noexcept {
#if defined(LOGODIFFUSER_HAVE_AVX2_PATH)
    if (!portable_only.load(std::memory_order_relaxed) && cpu_has_avx2()) return "avx2";
#endif
#if defined(__GNUC__)
    return "sse";
#else
    return "scalar";
#endif
}

void set_portable_gemm(bool portable) noexcept { portable_only.store(portable, std::memory_order_relaxed); }

}  // namespace logodiffuser::detail
