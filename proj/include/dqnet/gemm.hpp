#pragma once

#include <algorithm>
#include <cstdint>
#include <cstddef>

namespace dqnet {

// Accumulating matrix kernels, C += op(A)*op(B), all row-major. Blocked so the
// streamed B tile stays cache resident; the inner j loop is the vector axis.
namespace gemmblk {
constexpr int kJ = 496;
constexpr int kK = 128;
}  // namespace gemmblk

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int j0 = 0; j0 < N; j0 += gemmblk::kJ) {
        const int j1 = std::min(N, j0 + gemmblk::kJ);
        for (int k0 = 0; k0 < K; k0 += gemmblk::kK) {
            const int k1 = std::min(K, k0 + gemmblk::kK);
            for (int i = 0; i < M; ++i) {
                const T* a = A + static_cast<size_t>(i) * K;
                T* c = C + static_cast<size_t>(i) * N;
                int k = k0;
                for (; k + 4 <= k1; k += 4) {
                    const T a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
                    const T* b0 = B + static_cast<size_t>(k) * N;
                    const T* b1 = b0 + N;
                    const T* b2 = b1 + N;
                    const T* b3 = b2 + N;
                    for (int j = j0; j < j1; ++j)
                        c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                for (; k < k1; ++k) {
                    const T av = a[k];
                    const T* b = B + static_cast<size_t>(k) * N;
                    for (int j = j0; j < j1; ++j) c[j] += av * b[j];
                }
            }
        }
    }
}

// C[M,N] += A^T * B with A stored [K,M]
template <typename T>
void gemm_tn(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int j0 = 0; j0 < N; j0 += gemmblk::kJ) {
        const int j1 = std::min(N, j0 + gemmblk::kJ);
        for (int k = 0; k < K; ++k) {
            const T* arow = A + static_cast<size_t>(k) * M;
            const T* b = B + static_cast<size_t>(k) * N;
            for (int i = 0; i < M; ++i) {
                const T av = arow[i];
                T* c = C + static_cast<size_t>(i) * N;
                for (int j = j0; j < j1; ++j) c[j] += av * b[j];
            }
        }
    }
}

// C[M,N] += A * B^T with B stored [N,K]
template <typename T>
void gemm_nt(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<size_t>(i) * K;
        T* c = C + static_cast<size_t>(i) * N;
        int j = 0;
        for (; j + 4 <= N; j += 4) {
            const T* b0 = B + static_cast<size_t>(j) * K;
            const T* b1 = b0 + K;
            const T* b2 = b1 + K;
            const T* b3 = b2 + K;
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            for (int k = 0; k < K; ++k) {
                const T av = a[k];
                s0 += av * b0[k];
                s1 += av * b1[k];
                s2 += av * b2[k];
                s3 += av * b3[k];
            }
            c[j] += s0;
            c[j + 1] += s1;
            c[j + 2] += s2;
            c[j + 3] += s3;
        }
        for (; j < N; ++j) {
            const T* b = B + static_cast<size_t>(j) * K;
            T s = 0;
            for (int k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

}  // namespace dqnet
