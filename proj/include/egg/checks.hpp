#ifndef EGG_CHECKS_HPP
#define EGG_CHECKS_HPP

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "egg/gnn.hpp"
#include "egg/graph.hpp"
#include "egg/grassmann.hpp"
#include "egg/matrix.hpp"
#include "egg/rng.hpp"
#include "egg/svd.hpp"
#include "egg/tape.hpp"

// Self-contained numerical verification suites, shared by the `egg gradcheck`
// command and the acceptance harness.

namespace egg::checks {

struct SuiteReport {
  std::string name;
  std::size_t trials = 0;
  double max_err = 0.0;
  double threshold = 0.0;
  bool pass = true;
};

inline Matrix random_matrix(RngStream& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

// Orthonormal columns via modified Gram-Schmidt on a random matrix.
inline Matrix random_orthonormal(RngStream& rng, std::size_t n, std::size_t k) {
  Matrix q = random_matrix(rng, n, k);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t prev = 0; prev < j; ++prev) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, prev);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, prev);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-8) {  // redraw a degenerate column
      for (std::size_t i = 0; i < n; ++i) q(i, j) = rng.uniform(-1.0, 1.0);
      --j;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
  }
  return q;
}

// U diag(s) V^T with random orthonormal factors and a prescribed spectrum.
inline Matrix matrix_with_spectrum(RngStream& rng, std::size_t m, std::size_t n,
                                   const std::vector<double>& s) {
  const std::size_t k = s.size();
  Matrix u = random_orthonormal(rng, m, k);
  Matrix v = random_orthonormal(rng, n, k);
  Matrix us = u;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) us(i, j) *= s[j];
  return matmul_raw(us, v.transposed());
}

// Descending spectrum with consecutive gaps of at least `gap`.
inline std::vector<double> gapped_spectrum(RngStream& rng, std::size_t k, double gap = 0.1,
                                           double base = 0.2) {
  std::vector<double> s(k);
  double cur = base + rng.uniform(0.0, 0.3);
  for (std::size_t i = k; i-- > 0;) {
    s[i] = cur;
    cur += gap + rng.uniform(0.0, 0.4);
  }
  return s;
}

// Analytic SVD backward vs central differences on random well-gapped
// matrices. The loss touches both the truncated basis (through the projector,
// which is insensitive to column signs) and the singular values.
inline SuiteReport svd_gradient_suite(std::uint64_t seed, std::size_t trials) {
  SuiteReport rep{"svd backward vs central differences", trials, 0.0, 1e-4, true};
  RngStream rng(seed, /*stream=*/0x5D1);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t m = 4 + rng.below(9);                        // 4 .. 12
    const std::size_t n = 3 + rng.below(std::min<std::uint64_t>(6, m - 2));  // 3 .. min(8, m)
    const std::size_t k = std::min(m, n);
    Matrix h = matrix_with_spectrum(rng, m, n, gapped_spectrum(rng, k));
    const std::size_t p = k > 1 ? k - 1 : 1;
    Matrix w = random_matrix(rng, m, m);
    Matrix ws = random_matrix(rng, 1, k);
    const double err = finite_diff_check(
        [&](Tape& t, Value x) {
          RectifyNode r = tape_rectify(t, x, RectifyMode::kNodeLevel,
                                       RankPolicy::fixed_count(p));
          Value proj = t.matmul(r.basis, t.transpose(r.basis));
          Value pl = t.sum(t.hadamard(proj, t.leaf(w)));
          Value sl = t.sum(t.hadamard(r.singular_vals, t.leaf(ws)));
          return t.add(pl, sl);
        },
        h, 1e-5);
    rep.max_err = std::max(rep.max_err, err);
  }
  rep.pass = rep.max_err < rep.threshold;
  return rep;
}

// Backward stays finite when the spectrum bottoms out near (or below) the
// 1e-12 clamp; max_err counts non-finite entries.
inline SuiteReport svd_stress_suite(std::uint64_t seed, std::size_t trials,
                                    double s_min = 1e-14) {
  SuiteReport rep{"near-zero singular value stress", trials, 0.0, 0.5, true};
  RngStream rng(seed, /*stream=*/0x5D2);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t m = 4 + rng.below(6);
    const std::size_t n = 3 + rng.below(std::min<std::uint64_t>(4, m - 2));
    const std::size_t k = std::min(m, n);
    std::vector<double> s = gapped_spectrum(rng, k);
    s.back() = s_min;
    Matrix h = matrix_with_spectrum(rng, m, n, s);
    SvdFactors f = svd_full(h);
    Matrix g = svd_backward(f, random_matrix(rng, m, k),
                            std::vector<double>(k, rng.uniform()),
                            random_matrix(rng, n, k));
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g.data()[i])) rep.max_err += 1.0;
  }
  rep.pass = rep.max_err == 0.0;
  return rep;
}

namespace detail {

inline Graph pipeline_fixture(RngStream& rng) {
  Graph g;
  g.node_count = 6;
  for (std::size_t i = 0; i + 1 < 6; ++i) g.add_edge(i, i + 1);
  g.add_edge(0, 3);
  g.add_edge(2, 5);
  g.dedupe_edges();
  g.features = random_matrix(rng, 6, 4);
  g.label = 1;
  return g;
}

}  // namespace detail

// End-to-end classifier pipeline (GCN convolutions, Grassmann pooling, MLP
// head, cross-entropy): tape gradients of every parameter vs central
// differences. Positive conv biases keep ReLU units live so the rectified
// spectrum stays well-conditioned for the finite-difference oracle.
inline SuiteReport pipeline_gradient_suite(std::uint64_t seed) {
  SuiteReport rep{"classifier pipeline parameter gradients", 1, 0.0, 1e-4, true};
  RngStream rng(seed, /*stream=*/0x5D3);
  Graph g = detail::pipeline_fixture(rng);
  auto a_hat = std::make_shared<SparseMatrix>(normalize_adjacency(g));

  std::vector<GcnLayer> convs;
  convs.emplace_back(4, 5, rng);
  convs.emplace_back(5, 5, rng);
  for (std::size_t l = 0; l < convs.size(); ++l)
    for (std::size_t j = 0; j < 5; ++j)
      convs[l].bias.value(0, j) = 0.5 + 0.1 * static_cast<double>(j + l);
  MlpHead head(5 * 6 / 2, {4}, 3, rng);
  RngStream eval_rng(0, 0);  // eval mode, dropout unused

  std::vector<Parameter*> params;
  for (GcnLayer& l : convs) {
    params.push_back(&l.weight);
    params.push_back(&l.bias);
  }
  for (MlpHead::Affine& a : head.layers) {
    params.push_back(&a.weight);
    params.push_back(&a.bias);
  }

  auto loss_of = [&](Tape& t) {
    Value h = t.leaf(g.features);
    for (GcnLayer& l : convs) h = gcn_forward(l, t, a_hat, h);
    PoolConfig pool{PoolKind::kEgg, RankPolicy::fixed_count(2)};
    Value pooled = global_pool(t, h, pool);
    Value logits = head.forward(t, pooled, eval_rng, /*training=*/false);
    return t.cross_entropy(logits, {g.label});
  };

  Tape t;
  t.backward(loss_of(t));
  const double step = 1e-5;
  for (Parameter* p : params) {
    const Matrix analytic = t.grad(p->node);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + step;
      Tape tp;
      const double fp = tp.value(loss_of(tp))(0, 0);
      p->value.data()[i] = keep - step;
      Tape tm;
      const double fm = tm.value(loss_of(tm))(0, 0);
      p->value.data()[i] = keep;
      const double numeric = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::abs(analytic.data()[i]), std::abs(numeric), 1e-8});
      rep.max_err = std::max(rep.max_err, std::abs(analytic.data()[i] - numeric) / denom);
    }
  }
  rep.pass = rep.max_err < rep.threshold;
  return rep;
}

// The full gradcheck battery. `trials` scales the SVD suite; the stress suite
// runs trials/5 cases (at least one unless trials is zero).
inline std::vector<SuiteReport> run_gradcheck(std::uint64_t seed, std::size_t trials) {
  std::vector<SuiteReport> out;
  out.push_back(svd_gradient_suite(seed, trials));
  out.push_back(svd_stress_suite(seed, trials == 0 ? 0 : std::max<std::size_t>(1, trials / 5)));
  if (trials > 0) out.push_back(pipeline_gradient_suite(seed));
  return out;
}

}  // namespace egg::checks

#endif  // EGG_CHECKS_HPP
