#pragma once

#include <cstddef>

namespace logodiffuser::detail {

// C (+)= A * B, all row-major with leading dimensions. Every output element
// accumulates a[i][k] * b[k][j] over k in ascending order with separate
// multiply and add, so every kernel below gives bit-identical results.
void gemm(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc, std::size_t m,
          std::size_t n, std::size_t k_len, bool accumulate);

// Name of the kernel gemm() currently dispatches to ("avx2", "sse", "scalar").
const char* gemm_kernel() noexcept;
// Restricts dispatch to the portable kernel (for equivalence tests).
void set_portable_gemm(bool portable) noexcept;

}  // namespace logodiffuser::detail
