#ifndef EGG_CLUSTERING_HPP
#define EGG_CLUSTERING_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "egg/gnn.hpp"
#include "egg/graph.hpp"
#include "egg/grassmann.hpp"
#include "egg/matrix.hpp"
#include "egg/rng.hpp"
#include "egg/tape.hpp"
#include "egg/training.hpp"

namespace egg {

inline SparseMatrix sparse_from_dense(const Matrix& d) {
  std::vector<std::size_t> r, c;
  std::vector<double> v;
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < d.cols(); ++j)
      if (d(i, j) != 0.0) {
        r.push_back(i);
        c.push_back(j);
        v.push_back(d(i, j));
      }
  return SparseMatrix::from_triplets(d.rows(), d.cols(), std::move(r), std::move(c),
                                     std::move(v));
}

// Entrywise clamp with straight-through gradient inside the interval.
inline Value tape_clamp(Tape& t, Value a, double lo, double hi) {
  Matrix out = t.value(a);
  auto mask = std::make_shared<Matrix>(out.rows(), out.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out.data()[i] < lo) {
      out.data()[i] = lo;
    } else if (out.data()[i] > hi) {
      out.data()[i] = hi;
    } else {
      mask->data()[i] = 1.0;
    }
  }
  return t.make_node(std::move(out), [a, mask](Tape& tt) {
    tt.accumulate(a, hadamard_raw(tt.grad(tt.current_output()), *mask));
  });
}

// ---- VGAE ----

struct VgaeConfig {
  std::size_t hidden = 32;
  std::size_t latent = 16;
  std::size_t epochs = 200;
  double lr = 0.01;
  std::uint64_t seed = 0;
  bool full_matrix_bce = false;  // weighted BCE over every node pair, n <= 5000
};

struct VgaeState {
  GcnLayer shared;       // d -> hidden, relu
  GcnLayer mu_head;      // hidden -> latent, linear
  GcnLayer logsig_head;  // hidden -> latent, linear
  Matrix mu, logsig;     // final latents, filled by train_vgae
  std::vector<double> losses;  // per-epoch negative ELBO

  VgaeState() = default;
  VgaeState(std::size_t feature_dim, const VgaeConfig& cfg) {
    RngStream rng(cfg.seed, /*stream=*/0xE66);
    shared = GcnLayer(feature_dim, cfg.hidden, rng, /*with_bias=*/true, /*with_relu=*/true);
    mu_head = GcnLayer(cfg.hidden, cfg.latent, rng, true, /*with_relu=*/false);
    logsig_head = GcnLayer(cfg.hidden, cfg.latent, rng, true, false);
  }

  std::vector<Parameter*> parameters() {
    return {&shared.weight,      &shared.bias,      &mu_head.weight,
            &mu_head.bias,       &logsig_head.weight, &logsig_head.bias};
  }
};

// Shared GCN layer then two parallel linear GCN heads.
inline std::pair<Value, Value> vgae_encode(VgaeState& s, Tape& t,
                                           std::shared_ptr<const SparseMatrix> a_hat,
                                           std::shared_ptr<const SparseMatrix> x) {
  Value hidden = gcn_forward_sparse(s.shared, t, a_hat, x);
  Value mu = gcn_forward(s.mu_head, t, a_hat, hidden);
  Value logsig = gcn_forward(s.logsig_head, t, a_hat, hidden);
  return {mu, logsig};
}

// Z = mu + exp(logsig) * eta with logsig clamped to [-20, 20].
inline Value tape_reparameterize(Tape& t, Value mu, Value logsig, RngStream& rng) {
  const Matrix& m = t.value(mu);
  require_shape(m.same_shape(t.value(logsig)), "reparameterize: shape mismatch");
  Matrix eta(m.rows(), m.cols());
  for (std::size_t i = 0; i < eta.size(); ++i) eta.data()[i] = rng.normal();
  Value sig = t.exp(tape_clamp(t, logsig, -20.0, 20.0));
  return t.add(mu, t.hadamard(sig, t.leaf(eta)));
}

inline Matrix reparameterize(const Matrix& mu, const Matrix& logsig, RngStream& rng) {
  Tape t;
  return t.value(tape_reparameterize(t, t.leaf(mu), t.leaf(logsig), rng));
}

// p(A_ij = 1 | z_i, z_j) = logistic(z_i . z_j).
inline double decode_edge(const Matrix& z, std::size_t i, std::size_t j) {
  if (i >= z.rows() || j >= z.rows()) throw std::out_of_range("decode_edge: index");
  double d = 0.0;
  for (std::size_t c = 0; c < z.cols(); ++c) d += z(i, c) * z(j, c);
  return d >= 0.0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

struct ElboTerms {
  Value loss, recon, kl;
  Value z, mu, logsig;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> targets;
};

namespace detail {

// Uniformly sampled non-edges, without replacement within one call.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_non_edges(
    const Graph& g, std::size_t count, RngStream& rng) {
  std::set<std::pair<std::size_t, std::size_t>> edge_set(g.edges.begin(), g.edges.end());
  std::set<std::pair<std::size_t, std::size_t>> taken;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t n = g.node_count;
  if (n * (n - 1) / 2 < edge_set.size() + count)
    throw std::runtime_error("elbo: not enough non-edges to sample");
  std::size_t guard = 0;
  while (out.size() < count) {
    if (++guard > 1000 * count + 100000)
      throw std::runtime_error("elbo: negative sampling stalled");
    std::size_t u = rng.below(n), v = rng.below(n);
    if (u == v) continue;
    if (u > v) std::swap(u, v);
    const std::pair<std::size_t, std::size_t> p{u, v};
    if (edge_set.count(p) || taken.count(p)) continue;
    taken.insert(p);
    out.push_back(p);
  }
  return out;
}

}  // namespace detail

// Negative ELBO on the tape: reconstruction BCE over train positives plus an
// equal count of freshly sampled non-edges, and the closed-form KL against a
// standard normal prior, averaged over nodes.
inline ElboTerms elbo_loss(VgaeState& s, Tape& t, std::shared_ptr<const SparseMatrix> a_hat,
                           std::shared_ptr<const SparseMatrix> x, const Graph& g,
                           const EdgeSplit& split, RngStream& rng,
                           bool full_matrix = false) {
  if (split.train_pos.empty()) throw std::invalid_argument("elbo: no train positives");
  ElboTerms out;
  std::tie(out.mu, out.logsig) = vgae_encode(s, t, a_hat, x);
  out.z = tape_reparameterize(t, out.mu, out.logsig, rng);

  if (full_matrix) {
    const std::size_t n = g.node_count;
    if (n > 5000) throw std::invalid_argument("elbo: full-matrix BCE limited to n <= 5000");
    std::set<std::pair<std::size_t, std::size_t>> pos(split.train_pos.begin(),
                                                      split.train_pos.end());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        out.pairs.emplace_back(i, j);
        out.targets.push_back(pos.count({i, j}) ? 1.0 : 0.0);
      }
    const double npos = static_cast<double>(pos.size());
    const double total = static_cast<double>(out.pairs.size());
    const double w_pos = (total - npos) / npos;  // balance the classes
    Value logits = t.pair_dot(out.z, out.pairs);
    // weighted mean: split positives and negatives into two BCE terms
    std::vector<std::pair<std::size_t, std::size_t>> pp, np;
    for (std::size_t k = 0; k < out.pairs.size(); ++k)
      (out.targets[k] > 0.5 ? pp : np).push_back(out.pairs[k]);
    Value pos_bce = t.logistic_bce(t.pair_dot(out.z, pp), std::vector<double>(pp.size(), 1.0));
    Value neg_bce = t.logistic_bce(t.pair_dot(out.z, np), std::vector<double>(np.size(), 0.0));
    const double denom = w_pos * npos + (total - npos);
    out.recon = t.add(t.scale(pos_bce, w_pos * npos / denom),
                      t.scale(neg_bce, (total - npos) / denom));
  } else {
    out.pairs = split.train_pos;
    const auto negs = detail::sample_non_edges(g, split.train_pos.size(), rng);
    out.pairs.insert(out.pairs.end(), negs.begin(), negs.end());
    out.targets.assign(split.train_pos.size(), 1.0);
    out.targets.resize(out.pairs.size(), 0.0);
    out.recon = t.logistic_bce(t.pair_dot(out.z, out.pairs), out.targets);
  }

  out.kl = t.gaussian_kl(out.mu, tape_clamp(t, out.logsig, -20.0, 20.0));
  out.loss = t.add(out.recon, out.kl);
  if (!t.value(out.loss).all_finite()) throw std::runtime_error("elbo: non-finite loss");
  return out;
}

// Full-batch Adam on the negative ELBO; the stored latent is H := mu.
inline VgaeState train_vgae(const Graph& g, const EdgeSplit& split, const VgaeConfig& cfg) {
  if (g.features.rows() != g.node_count)
    throw std::invalid_argument("train_vgae: graph has no features");
  VgaeState s(g.features.cols(), cfg);
  auto a_hat = std::make_shared<SparseMatrix>(
      normalize_adjacency(g.node_count, split.train_pos));
  auto x = std::make_shared<SparseMatrix>(sparse_from_dense(g.features));

  AdamConfig adam;
  adam.lr = cfg.lr;
  RngStream noise(cfg.seed, /*stream=*/0xE17);
  std::vector<Parameter*> params = s.parameters();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape t;
    ElboTerms terms = elbo_loss(s, t, a_hat, x, g, split, noise, cfg.full_matrix_bce);
    const double loss = t.value(terms.loss)(0, 0);
    if (!std::isfinite(loss))
      throw std::runtime_error("train_vgae: training diverged (non-finite loss) at epoch " +
                               std::to_string(epoch + 1));
    s.losses.push_back(loss);
    t.backward(terms.loss);
    for (Parameter* p : params) adam_step(*p, t.grad(p->node), adam);
  }

  Tape t;
  auto [mu, logsig] = vgae_encode(s, t, a_hat, x);
  s.mu = t.value(mu);
  s.logsig = t.value(logsig);
  return s;
}

// ---- k-means ----

struct ClusterMetrics {
  double acc = 0.0;
  double nmi = 0.0;
  double ari = 0.0;
  double completeness = 0.0;
};

struct ClusterResult {
  std::vector<int> assignment;
  Matrix centers;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // Lloyd curve of the winning restart
  ClusterMetrics metrics;
  std::size_t rank = 0;          // filled by egg_cluster
  double captured_energy = 0.0;  // filled by egg_cluster
};

namespace detail {

inline double sq_dist(const Matrix& pts, std::size_t row, const Matrix& centers,
                      std::size_t center) {
  double d = 0.0;
  for (std::size_t c = 0; c < pts.cols(); ++c) {
    const double diff = pts(row, c) - centers(center, c);
    d += diff * diff;
  }
  return d;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs chosen by
// (inertia, restart index) so ties resolve deterministically.
inline ClusterResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                            std::size_t restarts = 10, std::size_t max_iter = 300) {
  const std::size_t n = points.rows();
  if (k < 1 || k > n) throw std::invalid_argument("kmeans: need 1 <= k <= n");
  if (restarts < 1) throw std::invalid_argument("kmeans: restarts");
  points.check_finite("kmeans input");

  ClusterResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t restart = 0; restart < restarts; ++restart) {
    RngStream rng(seed, 0xC1u + restart);

    // k-means++ seeding
    Matrix centers(k, points.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = rng.below(n);
    for (std::size_t c = 0; c < points.cols(); ++c) centers(0, c) = points(first, c);
    for (std::size_t j = 1; j < k; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], detail::sq_dist(points, i, centers, j - 1));
        total += d2[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        double target = rng.uniform() * total, acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (acc >= target) {
            pick = i;
            break;
          }
        }
      } else {
        pick = rng.below(n);
      }
      for (std::size_t c = 0; c < points.cols(); ++c) centers(j, c) = points(pick, c);
    }

    std::vector<int> assign(n, -1);
    std::vector<double> history;
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
      bool changed = false;
      double inertia = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        int arg = 0;
        double bestd = detail::sq_dist(points, i, centers, 0);
        for (std::size_t j = 1; j < k; ++j) {
          const double d = detail::sq_dist(points, i, centers, j);
          if (d < bestd) {
            bestd = d;
            arg = static_cast<int>(j);
          }
        }
        if (assign[i] != arg) {
          assign[i] = arg;
          changed = true;
        }
        inertia += bestd;
      }
      history.push_back(inertia);
      if (!changed) break;

      // recompute centers; an empty cluster is reseeded at the point
      // farthest from its current center
      Matrix sums(k, points.cols());
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++counts[assign[i]];
        for (std::size_t c = 0; c < points.cols(); ++c) sums(assign[i], c) += points(i, c);
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (counts[j] == 0) {
          std::size_t far = 0;
          double fard = -1.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double d = detail::sq_dist(points, i, centers, assign[i]);
            if (d > fard) {
              fard = d;
              far = i;
            }
          }
          for (std::size_t c = 0; c < points.cols(); ++c) centers(j, c) = points(far, c);
        } else {
          for (std::size_t c = 0; c < points.cols(); ++c)
            centers(j, c) = sums(j, c) / static_cast<double>(counts[j]);
        }
      }
    }

    const double inertia = history.empty() ? 0.0 : history.back();
    if (inertia < best.inertia) {
      best.assignment = assign;
      best.centers = centers;
      best.inertia = inertia;
      best.inertia_history = history;
    }
  }
  best.centers.check_finite("kmeans centers");
  return best;
}

// ---- metrics ----

namespace detail {

// Minimum-cost assignment (Hungarian algorithm, O(n^3)); returns row -> col.
inline std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double pairs2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace detail

// Acc via Hungarian matching on the confusion matrix, NMI with arithmetic
// normalization, adjusted Rand index, and completeness.
inline ClusterMetrics cluster_metrics(const std::vector<int>& pred,
                                      const std::vector<int>& truth, std::size_t k) {
  if (pred.empty() || pred.size() != truth.size())
    throw std::invalid_argument("cluster_metrics: empty or mismatched inputs");
  const std::size_t n = pred.size();
  for (std::size_t i = 0; i < n; ++i)
    if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= k ||
        static_cast<std::size_t>(truth[i]) >= k)
      throw std::out_of_range("cluster_metrics: label outside [0, k)");

  std::vector<std::vector<double>> conf(k, std::vector<double>(k, 0.0));
  std::vector<double> row(k, 0.0), col(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    conf[truth[i]][pred[i]] += 1.0;
    row[truth[i]] += 1.0;
    col[pred[i]] += 1.0;
  }
  const double N = static_cast<double>(n);

  ClusterMetrics m;

  // Acc: maximize matched mass = minimize its negation
  std::vector<std::vector<double>> cost(k, std::vector<double>(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) cost[i][j] = -conf[i][j];
  const std::vector<int> match = detail::hungarian_min(cost);
  double matched = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    if (match[i] >= 0) matched += conf[i][match[i]];
  m.acc = matched / N;

  // entropies and mutual information (natural log)
  double ht = 0.0, hp = 0.0, mi = 0.0, ht_given_p = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    if (row[i] > 0.0) ht -= (row[i] / N) * std::log(row[i] / N);
  for (std::size_t j = 0; j < k; ++j)
    if (col[j] > 0.0) hp -= (col[j] / N) * std::log(col[j] / N);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (conf[i][j] <= 0.0) continue;
      mi += (conf[i][j] / N) * std::log(N * conf[i][j] / (row[i] * col[j]));
      ht_given_p -= (conf[i][j] / N) * std::log(conf[i][j] / col[j]);
    }
  const double mean_h = 0.5 * (ht + hp);
  m.nmi = mean_h > 0.0 ? mi / mean_h : 1.0;

  // adjusted Rand index
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) sum_ij += detail::pairs2(conf[i][j]);
  for (std::size_t i = 0; i < k; ++i) sum_a += detail::pairs2(row[i]);
  for (std::size_t j = 0; j < k; ++j) sum_b += detail::pairs2(col[j]);
  const double expected = sum_a * sum_b / detail::pairs2(N);
  const double maximum = 0.5 * (sum_a + sum_b);
  m.ari = (maximum - expected) > 0.0 ? (sum_ij - expected) / (maximum - expected) : 1.0;

  // completeness: 1 - H(T|P) / H(T)
  m.completeness = ht > 0.0 ? 1.0 - ht_given_p / ht : 1.0;
  return m;
}

// Node-level EGG clustering: rectify the latent H, then k-means on the rows
// of the basis U_p (or of the full projector U U^T when asked; the grassmann
// row-distance identity makes both give the same geometry).
inline ClusterResult egg_cluster(const Matrix& h, const RankPolicy& policy, std::size_t k,
                                 const std::vector<int>& truth, std::uint64_t seed,
                                 bool use_full_projector = false) {
  GrassmannPoint pt = rectify(h, RectifyMode::kNodeLevel, policy);
  const Matrix points = use_full_projector ? project(pt) : pt.basis;
  ClusterResult res = kmeans(points, k, seed);
  res.rank = pt.rank;
  res.captured_energy = captured_energy(pt.singular_values, pt.rank);
  if (!truth.empty()) {
    if (truth.size() != h.rows()) throw std::invalid_argument("egg_cluster: truth length");
    std::size_t classes = k;
    for (int label : truth)
      classes = std::max(classes, static_cast<std::size_t>(label) + 1);
    res.metrics = cluster_metrics(res.assignment, truth, classes);
  }
  return res;
}

}  // namespace egg

#endif  // EGG_CLUSTERING_HPP
