#ifndef EGG_SVD_HPP
#define EGG_SVD_HPP

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <sstream>
#include <vector>

#include "egg/matrix.hpp"

namespace egg {

// Thin SVD factors of a decomposed matrix M (m x n, k = min(m, n)):
// M = U * diag(S) * V^T with orthonormal U (m x k) and V (n x k),
// singular values descending.
struct SvdFactors {
  Matrix U;
  std::vector<double> S;
  Matrix V;
};

// Counts how often the tie-breaking clamp on the F denominator fires
// (|s_i^2 - s_j^2| below the tie tolerance for i != j).
inline std::atomic<std::uint64_t>& svd_tie_clamp_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

namespace detail {

// Orthonormalize `col` against the existing columns of U (modified
// Gram-Schmidt, two passes), writing the result into column `col`.
// Used to complete U when the input is rank deficient.
inline void complete_column(Matrix& U, std::size_t col) {
  const std::size_t m = U.rows();
  for (std::size_t trial = 0; trial < m + 1; ++trial) {
    Matrix v(m, 1);
    v(trial % m, 0) = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < col; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) dot += v(i, 0) * U(i, j);
        for (std::size_t i = 0; i < m; ++i) v(i, 0) -= dot * U(i, j);
      }
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += v(i, 0) * v(i, 0);
    norm = std::sqrt(norm);
    if (norm > 1e-6) {
      for (std::size_t i = 0; i < m; ++i) U(i, col) = v(i, 0) / norm;
      return;
    }
  }
  throw std::runtime_error("svd: failed to complete orthonormal basis");
}

// One-sided Jacobi on W (rows x cols, cols <= rows preferred): rotates column
// pairs until all are mutually orthogonal. Returns singular values in `s`,
// left vectors overwrite W's columns, right rotations accumulate into V.
inline void one_sided_jacobi(Matrix& W, Matrix& V, std::vector<double>& s,
                             int max_sweeps = 100, double tol = 1e-12) {
  const std::size_t m = W.rows(), n = W.cols();
  V = Matrix::identity(n);
  // Columns whose norm is negligible against the matrix scale are flushed to
  // exact zero; rotating them only produces denormal noise that never passes
  // the relative orthogonality test.
  const double frob = W.frobenius_norm();
  const double zero2 = frob * frob * 1e-30;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += W(i, p) * W(i, p);
          beta += W(i, q) * W(i, q);
          gamma += W(i, p) * W(i, q);
        }
        if (alpha <= zero2) {
          for (std::size_t i = 0; i < m; ++i) W(i, p) = 0.0;
          alpha = 0.0;
        }
        if (beta <= zero2) {
          for (std::size_t i = 0; i < m; ++i) W(i, q) = 0.0;
          beta = 0.0;
        }
        if (alpha == 0.0 || beta == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta))
          continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = W(i, p), wq = W(i, q);
          W(i, p) = c * wp - sn * wq;
          W(i, q) = sn * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = V(i, p), vq = V(i, q);
          V(i, p) = c * vp - sn * vq;
          V(i, q) = sn * vp + c * vq;
        }
      }
    }
  }
  if (!converged) {
    // Final convergence check: an exactly converged last sweep also clears
    // the flag, so re-test before reporting failure.
    double worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += W(i, p) * W(i, p);
          beta += W(i, q) * W(i, q);
          gamma += W(i, p) * W(i, q);
        }
        if (alpha > zero2 && beta > zero2)
          worst = std::max(worst, std::abs(gamma) / std::sqrt(alpha * beta));
      }
    if (worst > 1e-10) {
      std::ostringstream msg;
      msg << "svd: Jacobi failed to converge in 100 sweeps (" << m << "x" << n
          << ", residual orthogonality " << worst << ")";
      throw std::runtime_error(msg.str());
    }
  }
  s.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += W(i, j) * W(i, j);
    s[j] = std::sqrt(norm);
  }
}

}  // namespace detail

// Thin SVD via one-sided Jacobi on the thinner orientation. Deterministic
// sign convention: the largest-magnitude entry of each U column is positive
// (ties broken by lowest row index); V absorbs the sign flip.
inline SvdFactors svd_full(const Matrix& M) {
  const std::size_t m = M.rows(), n = M.cols();
  if (m == 0 || n == 0) throw std::invalid_argument("svd_full: empty matrix");
  M.check_finite("svd_full input");

  SvdFactors f;
  const std::size_t k = std::min(m, n);
  if (n <= m) {
    Matrix W = M;
    detail::one_sided_jacobi(W, f.V, f.S);
    f.U = std::move(W);
  } else {
    Matrix W = M.transposed();
    Matrix right;
    detail::one_sided_jacobi(W, right, f.S);
    f.V = std::move(W);  // columns still scaled by S, normalized below
    f.U = std::move(right);
    // After decomposing M^T = (V S) U'^T we have M = U' S V'^T with
    // U' = right rotations and V' = normalized Jacobi columns.
  }

  // Normalize the scaled side (the Jacobi output columns carry the norms).
  Matrix& scaled = (n <= m) ? f.U : f.V;
  for (std::size_t j = 0; j < k; ++j) {
    if (f.S[j] > 0.0)
      for (std::size_t i = 0; i < scaled.rows(); ++i) scaled(i, j) /= f.S[j];
  }

  // Sort singular triples descending.
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return f.S[a] > f.S[b]; });
  SvdFactors out;
  out.U = Matrix(m, k);
  out.V = Matrix(n, k);
  out.S.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    out.S[j] = f.S[order[j]];
    for (std::size_t i = 0; i < m; ++i) out.U(i, j) = f.U(i, order[j]);
    for (std::size_t i = 0; i < n; ++i) out.V(i, j) = f.V(i, order[j]);
  }

  // Complete columns lost to rank deficiency (zero singular values).
  for (std::size_t j = 0; j < k; ++j) {
    double un = 0.0, vn = 0.0;
    for (std::size_t i = 0; i < m; ++i) un += out.U(i, j) * out.U(i, j);
    for (std::size_t i = 0; i < n; ++i) vn += out.V(i, j) * out.V(i, j);
    if (un < 0.5) detail::complete_column(out.U, j);
    if (vn < 0.5) detail::complete_column(out.V, j);
  }

  // Sign convention.
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t arg = 0;
    double best = std::abs(out.U(0, j));
    for (std::size_t i = 1; i < m; ++i)
      if (std::abs(out.U(i, j)) > best) {
        best = std::abs(out.U(i, j));
        arg = i;
      }
    if (out.U(arg, j) < 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.U(i, j) = -out.U(i, j);
      for (std::size_t i = 0; i < n; ++i) out.V(i, j) = -out.V(i, j);
    }
  }
  return out;
}

// Keep the leading p singular triples.
inline SvdFactors truncate(const SvdFactors& f, std::size_t p) {
  if (p < 1 || p > f.S.size()) throw std::out_of_range("truncate: p out of range");
  SvdFactors t;
  t.U = Matrix(f.U.rows(), p);
  t.V = Matrix(f.V.rows(), p);
  t.S.assign(f.S.begin(), f.S.begin() + p);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t i = 0; i < f.U.rows(); ++i) t.U(i, j) = f.U(i, j);
    for (std::size_t i = 0; i < f.V.rows(); ++i) t.V(i, j) = f.V(i, j);
  }
  return t;
}

// S_ii^new = S_ii if S_ii > eps else eps.
inline std::vector<double> clamp_singular(const std::vector<double>& s, double eps = 1e-12) {
  if (eps <= 0.0) throw std::invalid_argument("clamp_singular: eps must be positive");
  std::vector<double> out = s;
  for (double& v : out)
    if (v <= eps) v = eps;
  return out;
}

// Gradient of a scalar loss w.r.t. the decomposed matrix M, given full thin
// factors and adjoints (Ubar, Sbar, Vbar). Every inverted singular value is
// clamped at eps; F is antisymmetric with zero diagonal and its denominators
// are additionally clamped at tie_tol when singular values (nearly) coincide.
inline Matrix svd_backward(const SvdFactors& f, const Matrix& Ubar,
                           const std::vector<double>& Sbar, const Matrix& Vbar,
                           double eps = 1e-12, double tie_tol = 1e-9) {
  const std::size_t m = f.U.rows(), n = f.V.rows(), k = f.S.size();
  require_shape(Ubar.same_shape(f.U) && Vbar.same_shape(f.V) && Sbar.size() == k,
                "svd_backward: adjoint shape mismatch");
  Ubar.check_finite("svd_backward Ubar");
  Vbar.check_finite("svd_backward Vbar");

  const std::vector<double> sc = clamp_singular(f.S, eps);

  // F_ij = 1 / (s_j^2 - s_i^2), zero diagonal, computed with clamped values.
  Matrix F(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      double d = sc[j] * sc[j] - sc[i] * sc[i];
      if (std::abs(d) < tie_tol) {
        d = (j > i ? -tie_tol : tie_tol);  // descending order: j > i means s_j <= s_i
        svd_tie_clamp_counter()++;
      }
      F(i, j) = 1.0 / d;
    }

  const Matrix Ut = f.U.transposed();
  const Matrix Vt = f.V.transposed();

  // Term 1: [U (F o [U^T Ubar - Ubar^T U]) S + (I_m - U U^T) Ubar S^-1] V^T
  Matrix UtUbar = matmul_raw(Ut, Ubar);
  Matrix skewU(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) skewU(i, j) = UtUbar(i, j) - UtUbar(j, i);
  Matrix inner1 = hadamard_raw(F, skewU);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) inner1(i, j) *= sc[j];
  Matrix proj_u = Ubar - matmul_raw(f.U, UtUbar);  // (I - U U^T) Ubar
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) proj_u(i, j) /= sc[j];
  Matrix term1 = matmul_raw(matmul_raw(f.U, inner1) + proj_u, Vt);

  // Term 2: U [S (F o [V^T Vbar - Vbar^T V]) V^T + S^-1 Vbar^T (I_n - V V^T)]
  Matrix VtVbar = matmul_raw(Vt, Vbar);
  Matrix skewV(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) skewV(i, j) = VtVbar(i, j) - VtVbar(j, i);
  Matrix inner2 = hadamard_raw(F, skewV);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) inner2(i, j) *= sc[i];
  Matrix proj_v = Vbar - matmul_raw(f.V, VtVbar);  // (I - V V^T) Vbar
  Matrix proj_vt = proj_v.transposed();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) proj_vt(i, j) /= sc[i];
  Matrix term2 = matmul_raw(f.U, matmul_raw(inner2, Vt) + proj_vt);

  // Term 3: U (I o Sbar) V^T
  Matrix usbar = f.U;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) usbar(i, j) *= Sbar[j];
  Matrix term3 = matmul_raw(usbar, Vt);

  Matrix grad = term1 + term2 + term3;
  grad.check_finite("svd_backward");
  return grad;
}

}  // namespace egg

#endif  // EGG_SVD_HPP
