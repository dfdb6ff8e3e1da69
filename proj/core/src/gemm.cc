#include "gemm.h"

#include <algorithm>
#include <cstring>
#include <vector>

#include "fedvirt/parallel.h"

namespace fedvirt::detail {
namespace {

constexpr std::int64_t kMr = 8;
constexpr std::int64_t kNr = 16;
constexpr std::int64_t kKc = 512;
// Below this many multiply-adds the task hand-off costs more than it saves.
constexpr std::int64_t kParallelWork = 1 << 20;

typedef double v8d __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

// C tile (kMr x kNr, row stride ldc) = (load ? C : 0) + sum_p ap[p][r] * bp[p][j].
void micro_kernel(std::int64_t kc, const double* ap, const double* bp, double* c,
                  std::int64_t ldc, bool load) {
  v8d c0[kMr];
  v8d c1[kMr];
  for (int r = 0; r < kMr; ++r) {
    if (load) {
      c0[r] = load8(c + r * ldc);
      c1[r] = load8(c + r * ldc + 8);
    } else {
      c0[r] = v8d{};
      c1[r] = v8d{};
    }
  }
  for (std::int64_t p = 0; p < kc; ++p) {
    const v8d b0 = load8(bp);
    const v8d b1 = load8(bp + 8);
    for (int r = 0; r < kMr; ++r) {
      const double av = ap[r];
      c0[r] += av * b0;
      c1[r] += av * b1;
    }
    ap += kMr;
    bp += kNr;
  }
  for (int r = 0; r < kMr; ++r) {
    store8(c + r * ldc, c0[r]);
    store8(c + r * ldc + 8, c1[r]);
  }
}

thread_local std::vector<double> t_bpack;
thread_local std::vector<double> t_apack;

double* scratch(std::vector<double>& v, std::int64_t n) {
  if (static_cast<std::int64_t>(v.size()) < n) v.resize(static_cast<std::size_t>(n));
  return v.data();
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }

  const std::int64_t n_panels = (n + kNr - 1) / kNr;
  const std::int64_t m_tiles = (m + kMr - 1) / kMr;
  const bool parallel = m * n * k >= kParallelWork && m_tiles > 1;
  double* bpack = scratch(t_bpack, n_panels * std::min(k, kKc) * kNr);

  for (std::int64_t k0 = 0; k0 < k; k0 += kKc) {
    const std::int64_t kc = std::min(kKc, k - k0);
    const bool load = accumulate || k0 > 0;

    for (std::int64_t jp = 0; jp < n_panels; ++jp) {
      double* dst = bpack + jp * kc * kNr;
      const std::int64_t j0 = jp * kNr;
      const std::int64_t cols = std::min(kNr, n - j0);
      for (std::int64_t p = 0; p < kc; ++p) {
        double* row = dst + p * kNr;
        if (trans_b) {
          for (std::int64_t jj = 0; jj < cols; ++jj) row[jj] = b[(j0 + jj) * k + k0 + p];
        } else {
          std::memcpy(row, b + (k0 + p) * n + j0, static_cast<std::size_t>(cols) * sizeof(double));
        }
        for (std::int64_t jj = cols; jj < kNr; ++jj) row[jj] = 0.0;
      }
    }

    auto run_tiles = [&](std::size_t tb, std::size_t te) {
      double* apack = scratch(t_apack, kc * kMr);
      double edge[kMr * kNr];
      for (auto t = static_cast<std::int64_t>(tb); t < static_cast<std::int64_t>(te); ++t) {
        const std::int64_t i0 = t * kMr;
        const std::int64_t rows = std::min(kMr, m - i0);
        for (std::int64_t p = 0; p < kc; ++p) {
          double* dst = apack + p * kMr;
          if (trans_a) {
            const double* src = a + (k0 + p) * m + i0;
            for (std::int64_t r = 0; r < rows; ++r) dst[r] = src[r];
          } else {
            for (std::int64_t r = 0; r < rows; ++r) dst[r] = a[(i0 + r) * k + k0 + p];
          }
          for (std::int64_t r = rows; r < kMr; ++r) dst[r] = 0.0;
        }
        for (std::int64_t jp = 0; jp < n_panels; ++jp) {
          const std::int64_t j0 = jp * kNr;
          const std::int64_t cols = std::min(kNr, n - j0);
          const double* bp = bpack + jp * kc * kNr;
          if (rows == kMr && cols == kNr) {
            micro_kernel(kc, apack, bp, c + i0 * n + j0, n, load);
            continue;
          }
          for (std::int64_t r = 0; r < kMr; ++r) {
            for (std::int64_t jj = 0; jj < kNr; ++jj) {
              edge[r * kNr + jj] = (load && r < rows && jj < cols) ? c[(i0 + r) * n + j0 + jj] : 0.0;
            }
          }
          micro_kernel(kc, apack, bp, edge, kNr, true);
          for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(c + (i0 + r) * n + j0, edge + r * kNr,
                        static_cast<std::size_t>(cols) * sizeof(double));
          }
        }
      }
    };
    if (parallel) {
      parallel_chunks(static_cast<std::size_t>(m_tiles), 4, run_tiles);
    } else {
      run_tiles(0, static_cast<std::size_t>(m_tiles));
    }
  }
}

}  // namespace fedvirt::detail
