#pragma once

#include <cstdint>

namespace fedvirt::detail {

// C[M,N] = op(A) * op(B), or C += op(A) * op(B) when `accumulate` is set.
// All matrices are dense row-major. op(A) is [M,K]; A is stored [K,M] when
// trans_a. op(B) is [K,N]; B is stored [N,K] when trans_b.
//
// Every output element is a single multiply-add chain over k in ascending
// order, whatever the blocking or thread count, so results are reproducible.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
          std::int64_t k, const double* a, const double* b, double* c,
          bool accumulate);

}  // namespace fedvirt::detail
