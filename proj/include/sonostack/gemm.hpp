#pragma once

#include <cstddef>

namespace sonostack::nn {

// Row-major accumulating matrix kernels. Loop orders are fixed so results
// are bitwise deterministic; the inner loops autovectorize.

// C[M,N] += A[M,K] * B[K,N]
template <typename S>
void gemm_nn(int m, int n, int k, const S* a, const S* b, S* c) {
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        const S* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A^T * B with A stored [K,M]
template <typename S>
void gemm_tn(int m, int n, int k, const S* a, const S* b, S* c) {
    for (int p = 0; p < k; ++p) {
        const S* arow = a + static_cast<size_t>(p) * m;
        const S* brow = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const S av = arow[i];
            S* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A * B^T with B stored [N,K]
template <typename S>
void gemm_nt(int m, int n, int k, const S* a, const S* b, S* c) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<size_t>(j) * k;
            S acc = S(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

} // namespace sonostack::nn
