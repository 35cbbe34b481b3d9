#ifndef EGG_GRASSMANN_HPP
#define EGG_GRASSMANN_HPP

#include <cmath>
#include <memory>
#include <vector>

#include "egg/matrix.hpp"
#include "egg/svd.hpp"
#include "egg/tape.hpp"

namespace egg {

// A point on the Grassmannian M(rank, ambient_dim): an orthonormal basis of
// a rank-dimensional subspace, plus the full singular spectrum of the
// rectifying SVD for rank/energy queries.
struct GrassmannPoint {
  Matrix basis;  // ambient_dim x rank, orthonormal columns
  std::vector<double> singular_values;
  std::size_t ambient_dim = 0;
  std::size_t rank = 0;
};

struct PrincipalAngles {
  std::vector<double> angles;  // ascending, in [0, pi/2]
};

// How the retained subspace dimension p is chosen from the spectrum.
struct RankPolicy {
  enum class Kind {
    kEnergyThreshold,  // smallest p with cumulative singular mass >= r
    kValueThreshold,   // literal count of singular values > r
    kFixedRatio,       // p = ceil(x * m)
    kFixedCount,
  };
  Kind kind = Kind::kEnergyThreshold;
  double threshold = 0.8;  // r for the threshold kinds
  double ratio = 0.8;      // x
  std::size_t count = 1;   // p

  static RankPolicy energy(double r) {
    if (r <= 0.0 || r >= 1.0) throw std::invalid_argument("energy threshold r must be in (0,1)");
    return {Kind::kEnergyThreshold, r, 0.0, 0};
  }
  static RankPolicy value_threshold(double r) { return {Kind::kValueThreshold, r, 0.0, 0}; }
  static RankPolicy fixed_ratio(double x) {
    if (x <= 0.0 || x > 1.0) throw std::invalid_argument("ratio x must be in (0,1]");
    return {Kind::kFixedRatio, 0.0, x, 0};
  }
  static RankPolicy fixed_count(std::size_t p) {
    if (p < 1) throw std::invalid_argument("count must be >= 1");
    return {Kind::kFixedCount, 0.0, 0.0, p};
  }
};

enum class RectifyMode { kGraphLevel, kNodeLevel };

// p from the spectrum under the given policy. The fixed-ratio rule
// p = ceil(x * m) reads m as the spectrum length of the thin SVD (the
// latent width in the usual n >= m case). Always returns 1 <= p <= k.
inline std::size_t select_rank(const std::vector<double>& singular_values,
                               const RankPolicy& policy) {
  const std::size_t k = singular_values.size();
  if (k == 0) throw std::invalid_argument("select_rank: empty spectrum");
  double total = 0.0;
  for (double s : singular_values) total += s;
  if (total <= 0.0) throw std::domain_error("select_rank: all-zero singular values");

  switch (policy.kind) {
    case RankPolicy::Kind::kEnergyThreshold: {
      double acc = 0.0;
      for (std::size_t p = 1; p <= k; ++p) {
        acc += singular_values[p - 1];
        if (acc / total >= policy.threshold) return p;
      }
      return k;
    }
    case RankPolicy::Kind::kValueThreshold: {
      std::size_t p = 0;
      for (double s : singular_values)
        if (s > policy.threshold) ++p;
      return std::max<std::size_t>(1, std::min(p, k));
    }
    case RankPolicy::Kind::kFixedRatio: {
      const auto p =
          static_cast<std::size_t>(std::ceil(policy.ratio * static_cast<double>(k)));
      return std::max<std::size_t>(1, std::min(p, k));
    }
    case RankPolicy::Kind::kFixedCount:
      return std::max<std::size_t>(1, std::min(policy.count, k));
  }
  throw std::logic_error("select_rank: unknown policy");
}

// Fraction of singular mass captured by the leading p values.
inline double captured_energy(const std::vector<double>& singular_values, std::size_t p) {
  if (p < 1 || p > singular_values.size())
    throw std::out_of_range("captured_energy: p out of range");
  double total = 0.0, head = 0.0;
  for (std::size_t i = 0; i < singular_values.size(); ++i) {
    total += singular_values[i];
    if (i < p) head += singular_values[i];
  }
  if (total <= 0.0) throw std::domain_error("captured_energy: all-zero singular values");
  return head / total;
}

// Manifold rectification: SVD of H^T (graph level) or H (node level),
// truncated to the policy-selected rank.
inline GrassmannPoint rectify(const Matrix& H, RectifyMode mode, const RankPolicy& policy) {
  if (H.rows() == 0 || H.cols() == 0) throw std::invalid_argument("rectify: empty input");
  const Matrix target = mode == RectifyMode::kGraphLevel ? H.transposed() : H;
  SvdFactors f = svd_full(target);
  GrassmannPoint pt;
  pt.ambient_dim = target.rows();
  pt.singular_values = f.S;
  pt.rank = select_rank(f.S, policy);
  pt.basis = truncate(f, pt.rank).U;
  return pt;
}

// Projection embedding Pi(U) = U U^T: symmetric, idempotent, trace = rank.
inline Matrix project(const GrassmannPoint& pt) {
  return matmul_raw(pt.basis, pt.basis.transposed());
}

// Upper triangle (incl. diagonal) of a symmetric matrix, row-major.
inline std::vector<double> flatten_sym(const Matrix& sym, double tol = 1e-8) {
  require_shape(sym.rows() == sym.cols(), "flatten_sym: not square");
  const std::size_t m = sym.rows();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      if (std::abs(sym(i, j) - sym(j, i)) > tol)
        throw std::invalid_argument("flatten_sym: input not symmetric");
  std::vector<double> out;
  out.reserve(m * (m + 1) / 2);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) out.push_back(sym(i, j));
  return out;
}

inline Matrix unflatten_sym(const std::vector<double>& flat, std::size_t m) {
  if (flat.size() != m * (m + 1) / 2) throw std::invalid_argument("unflatten_sym: length");
  Matrix s(m, m);
  std::size_t k = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) {
      s(i, j) = flat[k];
      s(j, i) = flat[k];
      ++k;
    }
  return s;
}

// theta_i = arccos(sigma_i(basis_a^T basis_b)), ascending. Subspaces of
// different rank are compared at min(rank_a, rank_b).
inline PrincipalAngles principal_angles(const GrassmannPoint& a, const GrassmannPoint& b) {
  if (a.ambient_dim != b.ambient_dim)
    throw std::invalid_argument("principal_angles: ambient dimension mismatch");
  const std::size_t p = std::min(a.rank, b.rank);
  Matrix ua(a.ambient_dim, p), ub(b.ambient_dim, p);
  for (std::size_t i = 0; i < a.ambient_dim; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      ua(i, j) = a.basis(i, j);
      ub(i, j) = b.basis(i, j);
    }
  SvdFactors f = svd_full(matmul_raw(ua.transposed(), ub));
  PrincipalAngles out;
  out.angles.resize(p);
  for (std::size_t i = 0; i < p; ++i) {
    const double c = std::min(1.0, std::max(0.0, f.S[i]));
    out.angles[p - 1 - i] = std::acos(c);  // singular values descend, angles ascend
  }
  return out;
}

// Geodesic distance ||Theta||_2.
inline double geodesic_distance(const GrassmannPoint& a, const GrassmannPoint& b) {
  const PrincipalAngles th = principal_angles(a, b);
  double s = 0.0;
  for (double t : th.angles) s += t * t;
  return std::sqrt(s);
}

// ---- differentiable rectification on a tape ----

struct RectifyNode {
  Value basis;          // ambient_dim x p node
  Value singular_vals;  // 1 x k node (full spectrum)
  std::vector<double> sigma;
  std::size_t rank = 0;
  std::size_t ambient_dim = 0;
};

// Registers the truncated-SVD rectification as a differentiable op. The rank
// choice is treated as a constant of the forward pass; gradients of discarded
// singular directions are zero-padded before applying the backward formula.
inline RectifyNode tape_rectify(Tape& tape, Value h, RectifyMode mode,
                                const RankPolicy& policy, double eps = 1e-12) {
  const bool transpose_input = (mode == RectifyMode::kGraphLevel);
  const Matrix target = transpose_input ? tape.value(h).transposed() : tape.value(h);
  auto factors = std::make_shared<SvdFactors>(svd_full(target));
  const std::size_t k = factors->S.size();
  const std::size_t m = factors->U.rows();

  RectifyNode out;
  out.sigma = factors->S;
  out.ambient_dim = m;
  out.rank = select_rank(factors->S, policy);
  const std::size_t p = out.rank;

  Matrix basis(m, p);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) basis(i, j) = factors->U(i, j);

  out.basis = tape.make_node(std::move(basis), [h, factors, p, k, m, transpose_input,
                                                eps](Tape& t) {
    const Matrix& g = t.grad(t.current_output());
    Matrix ubar(m, k);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) ubar(i, j) = g(i, j);
    Matrix vbar(factors->V.rows(), k);
    std::vector<double> sbar(k, 0.0);
    Matrix gm = svd_backward(*factors, ubar, sbar, vbar, eps);
    t.accumulate(h, transpose_input ? gm.transposed() : gm);
  });

  Matrix svals(1, k);
  for (std::size_t j = 0; j < k; ++j) svals(0, j) = factors->S[j];
  out.singular_vals = tape.make_node(std::move(svals), [h, factors, k, m, transpose_input,
                                                        eps](Tape& t) {
    const Matrix& g = t.grad(t.current_output());
    Matrix ubar(m, k);
    Matrix vbar(factors->V.rows(), k);
    std::vector<double> sbar(k);
    for (std::size_t j = 0; j < k; ++j) sbar[j] = g(0, j);
    Matrix gm = svd_backward(*factors, ubar, sbar, vbar, eps);
    t.accumulate(h, transpose_input ? gm.transposed() : gm);
  });
  return out;
}

}  // namespace egg

#endif  // EGG_GRASSMANN_HPP
