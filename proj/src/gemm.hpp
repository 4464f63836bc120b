#pragma once

// Plain row-major GEMM loops shared by matmul, linear and conv2d. All of
// them accumulate into C (C += op(A) op(B)).

#include <cstddef>

namespace biper::detail {

// C[M,N] += A[M,K] B[K,N]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] B[N,K]^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
      C[i * N + j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T B[K,N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace biper::detail
