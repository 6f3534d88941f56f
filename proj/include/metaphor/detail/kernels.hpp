#pragma once

// Dense loops shared by the tensor ops and the fused recurrent kernels.
// Matrix products go through Eigen on row-major maps; everything runs on the
// calling thread, so results depend only on the operand shapes and values.

#include <cstddef>

#include <Eigen/Core>

namespace metaphor::detail {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using MatrixView = Eigen::Map<RowMatrix<Real>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename Real>
using ConstMatrixView = Eigen::Map<const RowMatrix<Real>, Eigen::Unaligned, Eigen::OuterStride<>>;

/// rows×cols view of row-major data whose rows are `ld` apart.
template <typename Real>
inline MatrixView<Real> view(Real* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return MatrixView<Real>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(ld)));
}

template <typename Real>
inline MatrixView<Real> view(Real* p, std::size_t rows, std::size_t cols) {
  return view(p, rows, cols, cols);
}

template <typename Real>
inline ConstMatrixView<Real> view(const Real* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return ConstMatrixView<Real>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(ld)));
}

template <typename Real>
inline ConstMatrixView<Real> view(const Real* p, std::size_t rows, std::size_t cols) {
  return view(p, rows, cols, cols);
}

template <typename Real>
inline Real dot(const Real* a, const Real* b, std::size_t n) {
  constexpr std::size_t lanes = 8;
  Real acc[lanes] = {};
  std::size_t i = 0;
  for (; i + lanes <= n; i += lanes) {
    for (std::size_t l = 0; l < lanes; ++l) acc[l] += a[i + l] * b[i + l];
  }
  Real tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  Real s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  return s + tail;
}

/// y += alpha * x
template <typename Real>
inline void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// C[m×n] (+)= A[m×k] · B[k×n]
template <typename Real>
inline void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  auto cm = view(c, m, n);
  if (accumulate) {
    cm.noalias() += view(a, m, k) * view(b, k, n);
  } else {
    cm.noalias() = view(a, m, k) * view(b, k, n);
  }
}

/// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
template <typename Real>
inline void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  auto cm = view(c, m, n);
  if (accumulate) {
    cm.noalias() += view(a, m, k) * view(b, n, k).transpose();
  } else {
    cm.noalias() = view(a, m, k) * view(b, n, k).transpose();
  }
}

/// C[m×n] += A[k×m]ᵀ · B[k×n], where rows of A are `lda` apart.
template <typename Real>
inline void gemm_tn_acc(const Real* a, std::size_t lda, const Real* b, Real* c, std::size_t k, std::size_t m,
                        std::size_t n) {
  view(c, m, n).noalias() += view(a, k, m, lda).transpose() * view(b, k, n);
}

template <typename Real>
inline void gemm_tn_acc(const Real* a, const Real* b, Real* c, std::size_t k, std::size_t m, std::size_t n) {
  gemm_tn_acc(a, m, b, c, k, m, n);
}

}  // namespace metaphor::detail
