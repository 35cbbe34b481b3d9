#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <vector>

#include "egg/clustering.hpp"
#include "egg/graph.hpp"
#include "egg/matrix.hpp"
#include "egg/rng.hpp"
#include "testutil.hpp"

using namespace egg;
using eggtest::max_abs_diff;

namespace {

// Two planted communities with denser in-group wiring and a clean feature
// signal; easy for the VGAE and k-means to untangle.
Graph community_graph(std::size_t per_group, std::uint64_t seed) {
  RngStream rng(seed, 55);
  Graph g;
  g.node_count = 2 * per_group;
  for (std::size_t u = 0; u < g.node_count; ++u)
    for (std::size_t v = u + 1; v < g.node_count; ++v) {
      const bool same = (u < per_group) == (v < per_group);
      if (rng.uniform() < (same ? 0.6 : 0.05)) g.add_edge(u, v);
    }
  for (std::size_t i = 0; i + 1 < per_group; ++i) {
    g.add_edge(i, i + 1);
    g.add_edge(per_group + i, per_group + i + 1);
  }
  g.dedupe_edges();
  g.features = Matrix(g.node_count, 4);
  g.node_labels.resize(g.node_count);
  for (std::size_t i = 0; i < g.node_count; ++i) {
    const std::size_t group = i < per_group ? 0 : 1;
    g.node_labels[i] = static_cast<int>(group);
    g.features(i, group) = 1.0 + 0.1 * rng.uniform();
    g.features(i, 2) = rng.uniform(-0.1, 0.1);
    g.features(i, 3) = rng.uniform(-0.1, 0.1);
  }
  return g;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("vgae_encode") {
  Graph g = community_graph(6, 1);
  EdgeSplit split = split_edges(g, 0.8, 0.1, 0.1, 1);
  auto a_hat = std::make_shared<SparseMatrix>(
      normalize_adjacency(g.node_count, split.train_pos));
  auto x = std::make_shared<SparseMatrix>(sparse_from_dense(g.features));

  SECTION("zero weights give zero latents") {
    VgaeConfig cfg;
    cfg.hidden = 8;
    cfg.latent = 4;
    VgaeState s(4, cfg);
    for (Parameter* p : s.parameters())
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value.data()[i] = 0.0;
    Tape t;
    auto [mu, ls] = vgae_encode(s, t, a_hat, x);
    CHECK(t.value(mu).max_abs() == 0.0);
    CHECK(t.value(ls).max_abs() == 0.0);
  }

  SECTION("single node reduces to affine maps of relu(x W1 + b1)") {
    Graph single;
    single.node_count = 1;
    single.features = Matrix(1, 3);
    single.features(0, 0) = 0.4;
    single.features(0, 1) = -0.7;
    single.features(0, 2) = 1.2;
    auto a1 = std::make_shared<SparseMatrix>(normalize_adjacency(single));
    auto x1 = std::make_shared<SparseMatrix>(sparse_from_dense(single.features));
    VgaeConfig cfg;
    cfg.hidden = 5;
    cfg.latent = 2;
    cfg.seed = 3;
    VgaeState s(3, cfg);
    Tape t;
    auto [mu, ls] = vgae_encode(s, t, a1, x1);

    Matrix hidden = matmul_raw(single.features, s.shared.weight.value);
    for (std::size_t j = 0; j < 5; ++j)
      hidden(0, j) = std::max(0.0, hidden(0, j) + s.shared.bias.value(0, j));
    Matrix mu_ref = matmul_raw(hidden, s.mu_head.weight.value);
    Matrix ls_ref = matmul_raw(hidden, s.logsig_head.weight.value);
    for (std::size_t j = 0; j < 2; ++j) {
      mu_ref(0, j) += s.mu_head.bias.value(0, j);
      ls_ref(0, j) += s.logsig_head.bias.value(0, j);
    }
    CHECK(max_abs_diff(t.value(mu), mu_ref) < 1e-14);
    CHECK(max_abs_diff(t.value(ls), ls_ref) < 1e-14);
  }
}

TEST_CASE("reparameterize") {
  SECTION("strongly negative logsig collapses to mu") {
    RngStream init(2, 0);
    Matrix mu = eggtest::random_matrix(init, 3, 4);
    Matrix ls(3, 4, -30.0);  // clamped at -20, sigma ~ 2e-9
    RngStream rng(9, 9);
    Matrix z = reparameterize(mu, ls, rng);
    CHECK(max_abs_diff(z, mu) < 1e-7);
  }

  SECTION("fixed seed replays exactly") {
    RngStream init(3, 0);
    Matrix mu = eggtest::random_matrix(init, 2, 3);
    Matrix ls = eggtest::random_matrix(init, 2, 3);
    RngStream r1(4, 4), r2(4, 4);
    CHECK(max_abs_diff(reparameterize(mu, ls, r1), reparameterize(mu, ls, r2)) == 0.0);
  }

  SECTION("sample mean approaches mu within three standard errors") {
    Matrix mu(1, 1, 0.7);
    Matrix ls(1, 1, std::log(0.5));
    RngStream rng(10, 1);
    const std::size_t draws = 100000;
    double sum = 0.0;
    for (std::size_t i = 0; i < draws; ++i) sum += reparameterize(mu, ls, rng)(0, 0);
    const double se = 0.5 / std::sqrt(static_cast<double>(draws));
    CHECK(std::abs(sum / static_cast<double>(draws) - 0.7) < 3.0 * se);
  }
}

TEST_CASE("decode_edge") {
  Matrix z(3, 4);
  z(0, 0) = 1.0;             // e1-ish
  z(1, 1) = 2.0;             // orthogonal to row 0
  for (std::size_t c = 0; c < 4; ++c) z(2, c) = std::sqrt(10.0) / 2.0;  // ||z||^2 = 10

  CHECK(decode_edge(z, 0, 1) == Catch::Approx(0.5));
  CHECK(decode_edge(z, 2, 2) == Catch::Approx(sigmoid_ref(10.0)).epsilon(1e-12));
  CHECK(decode_edge(z, 2, 2) == Catch::Approx(0.9999546).epsilon(1e-4));
  CHECK(decode_edge(z, 0, 2) == decode_edge(z, 2, 0));
  CHECK_THROWS_AS(decode_edge(z, 0, 7), std::out_of_range);
}

TEST_CASE("elbo_loss") {
  Graph g;
  g.node_count = 6;
  g.add_edge(0, 1);
  g.add_edge(1, 2);
  g.add_edge(2, 3);
  g.add_edge(3, 4);
  g.add_edge(4, 5);
  g.add_edge(0, 5);
  g.add_edge(1, 3);
  RngStream frng(12, 0);
  g.features = eggtest::random_matrix(frng, 6, 3);
  EdgeSplit split;
  split.train_pos = g.edges;

  auto a_hat = std::make_shared<SparseMatrix>(
      normalize_adjacency(g.node_count, split.train_pos));
  auto x = std::make_shared<SparseMatrix>(sparse_from_dense(g.features));
  VgaeConfig cfg;
  cfg.hidden = 6;
  cfg.latent = 3;
  cfg.seed = 5;

  SECTION("zero latents have zero KL") {
    VgaeState s(3, cfg);
    for (Parameter* p : s.parameters())
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value.data()[i] = 0.0;
    Tape t;
    RngStream rng(6, 6);
    ElboTerms terms = elbo_loss(s, t, a_hat, x, g, split, rng);
    CHECK(t.value(terms.kl)(0, 0) == 0.0);
  }

  SECTION("matches a scalar-by-scalar recomputation") {
    VgaeState s(3, cfg);
    Tape t;
    RngStream rng(7, 7);
    ElboTerms terms = elbo_loss(s, t, a_hat, x, g, split, rng);

    const Matrix& z = t.value(terms.z);
    const Matrix& mu = t.value(terms.mu);
    const Matrix& ls = t.value(terms.logsig);
    double recon = 0.0;
    for (std::size_t p = 0; p < terms.pairs.size(); ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < z.cols(); ++c)
        dot += z(terms.pairs[p].first, c) * z(terms.pairs[p].second, c);
      const double prob = sigmoid_ref(dot);
      recon -= terms.targets[p] * std::log(prob) + (1.0 - terms.targets[p]) * std::log(1.0 - prob);
    }
    recon /= static_cast<double>(terms.pairs.size());
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.rows(); ++i)
      for (std::size_t d = 0; d < mu.cols(); ++d)
        kl += -0.5 * (1.0 + 2.0 * ls(i, d) - mu(i, d) * mu(i, d) - std::exp(2.0 * ls(i, d)));
    kl /= static_cast<double>(mu.rows());

    CHECK(t.value(terms.recon)(0, 0) == Catch::Approx(recon).margin(1e-10));
    CHECK(t.value(terms.kl)(0, 0) == Catch::Approx(kl).margin(1e-10));
    CHECK(t.value(terms.loss)(0, 0) == Catch::Approx(recon + kl).margin(1e-10));
    CHECK(terms.pairs.size() == 2 * split.train_pos.size());
  }

  SECTION("gradient through the encoder matches finite differences") {
    VgaeState s(3, cfg);
    auto loss_value = [&]() {
      Tape t;
      RngStream rng(8, 8);
      return t.value(elbo_loss(s, t, a_hat, x, g, split, rng).loss)(0, 0);
    };
    Tape t;
    RngStream rng(8, 8);
    ElboTerms terms = elbo_loss(s, t, a_hat, x, g, split, rng);
    t.backward(terms.loss);

    double worst = 0.0;
    const double step = 1e-5;
    for (Parameter* p : s.parameters()) {
      const Matrix analytic = t.grad(p->node);
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double keep = p->value.data()[i];
        p->value.data()[i] = keep + step;
        const double fp = loss_value();
        p->value.data()[i] = keep - step;
        const double fm = loss_value();
        p->value.data()[i] = keep;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(analytic.data()[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic.data()[i] - numeric) / denom);
      }
    }
    CHECK(worst < 1e-4);
  }

  SECTION("full-matrix flag covers every pair") {
    VgaeState s(3, cfg);
    Tape t;
    RngStream rng(9, 9);
    ElboTerms terms = elbo_loss(s, t, a_hat, x, g, split, rng, /*full_matrix=*/true);
    CHECK(terms.pairs.size() == 15);  // C(6,2)
    CHECK(std::isfinite(t.value(terms.loss)(0, 0)));
  }
}

TEST_CASE("gaussian kl sign") {
  Tape t;
  RngStream rng(20, 0);
  for (int trial = 0; trial < 20; ++trial) {
    Value mu = t.leaf(eggtest::random_matrix(rng, 3, 4));
    Value ls = t.leaf(eggtest::random_matrix(rng, 3, 4));
    CHECK(t.value(t.gaussian_kl(mu, ls))(0, 0) >= 0.0);
  }
  Value zero_kl = t.gaussian_kl(t.leaf(Matrix(3, 4)), t.leaf(Matrix(3, 4)));
  CHECK(t.value(zero_kl)(0, 0) == 0.0);
}

TEST_CASE("train_vgae") {
  Graph g = community_graph(12, 3);
  EdgeSplit split = split_edges(g, 0.8, 0.1, 0.1, 3);
  VgaeConfig cfg;
  cfg.hidden = 16;
  cfg.latent = 8;
  cfg.epochs = 60;
  cfg.lr = 0.01;
  cfg.seed = 11;

  VgaeState s = train_vgae(g, split, cfg);

  SECTION("loss decreases over the first ten epochs") {
    REQUIRE(s.losses.size() == 60);
    CHECK(s.losses[9] < s.losses[0]);
  }

  SECTION("deterministic under a fixed seed") {
    VgaeState s2 = train_vgae(g, split, cfg);
    CHECK(max_abs_diff(s.mu, s2.mu) == 0.0);
    CHECK(s.losses == s2.losses);
  }

  SECTION("validation edges rank above validation non-edges") {
    double pos = 0.0, neg = 0.0;
    for (const auto& [u, v] : split.val_pos) pos += decode_edge(s.mu, u, v);
    for (const auto& [u, v] : split.val_neg) neg += decode_edge(s.mu, u, v);
    pos /= static_cast<double>(split.val_pos.size());
    neg /= static_cast<double>(split.val_neg.size());
    CHECK(pos > neg);
  }

  SECTION("latent shape matches the config") {
    CHECK(s.mu.rows() == g.node_count);
    CHECK(s.mu.cols() == 8);
  }
}

TEST_CASE("kmeans") {
  SECTION("two separated 1-D pairs find the analytic centers") {
    Matrix pts(4, 1);
    pts(0, 0) = 0.0;
    pts(1, 0) = 0.1;
    pts(2, 0) = 10.0;
    pts(3, 0) = 10.1;
    ClusterResult r = kmeans(pts, 2, 7);
    std::vector<double> centers{r.centers(0, 0), r.centers(1, 0)};
    std::sort(centers.begin(), centers.end());
    CHECK(centers[0] == Catch::Approx(0.05));
    CHECK(centers[1] == Catch::Approx(10.05));
    CHECK(r.assignment[0] == r.assignment[1]);
    CHECK(r.assignment[2] == r.assignment[3]);
    CHECK(r.assignment[0] != r.assignment[2]);
  }

  SECTION("k = n gives zero inertia") {
    RngStream rng(5, 0);
    Matrix pts = eggtest::random_matrix(rng, 6, 3);
    ClusterResult r = kmeans(pts, 6, 1);
    CHECK(r.inertia == Catch::Approx(0.0).margin(1e-18));
  }

  SECTION("matches brute force over all assignments for n = 8") {
    RngStream rng(6, 0);
    Matrix pts(8, 2);
    for (std::size_t i = 0; i < 8; ++i) {
      const double cx = i < 4 ? 0.0 : 3.0;
      pts(i, 0) = cx + rng.uniform(-1.0, 1.0);
      pts(i, 1) = rng.uniform(-1.0, 1.0);
    }
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask < 255; ++mask) {  // skip single-cluster splits
      double sum[2][2] = {{0, 0}, {0, 0}};
      int count[2] = {0, 0};
      for (std::size_t i = 0; i < 8; ++i) {
        const int c = (mask >> i) & 1;
        sum[c][0] += pts(i, 0);
        sum[c][1] += pts(i, 1);
        ++count[c];
      }
      double inertia = 0.0;
      for (std::size_t i = 0; i < 8; ++i) {
        const int c = (mask >> i) & 1;
        const double dx = pts(i, 0) - sum[c][0] / count[c];
        const double dy = pts(i, 1) - sum[c][1] / count[c];
        inertia += dx * dx + dy * dy;
      }
      best = std::min(best, inertia);
    }
    ClusterResult r = kmeans(pts, 2, 9);
    CHECK(r.inertia == Catch::Approx(best).margin(1e-12));
  }

  SECTION("inertia is non-increasing across Lloyd iterations") {
    RngStream rng(7, 0);
    Matrix pts = eggtest::random_matrix(rng, 40, 3);
    ClusterResult r = kmeans(pts, 4, 13);
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      CHECK(r.inertia_history[i] <= r.inertia_history[i - 1] + 1e-12);
  }

  SECTION("bad k rejected") {
    Matrix pts(3, 2);
    CHECK_THROWS_AS(kmeans(pts, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(kmeans(pts, 4, 1), std::invalid_argument);
  }
}

namespace {

// Independent metric computations, written from the definitions: accuracy by
// exhaustive permutation matching, MI and entropies from count maps, ARI from
// raw pair counting.
ClusterMetrics metrics_oracle(const std::vector<int>& pred, const std::vector<int>& truth,
                              std::size_t k) {
  const double N = static_cast<double>(pred.size());

  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  double best_hits = 0.0;
  do {
    double hits = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (perm[pred[i]] == truth[i]) hits += 1.0;
    best_hits = std::max(best_hits, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::map<int, double> cp, ct;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    cp[pred[i]] += 1.0;
    ct[truth[i]] += 1.0;
    joint[{truth[i], pred[i]}] += 1.0;
  }
  double hp = 0.0, ht = 0.0, mi = 0.0, ht_cond = 0.0;
  for (auto& [c, v] : cp) hp -= (v / N) * std::log(v / N);
  for (auto& [c, v] : ct) ht -= (v / N) * std::log(v / N);
  for (auto& [tc, v] : joint) {
    mi += (v / N) * std::log((v / N) / ((ct[tc.first] / N) * (cp[tc.second] / N)));
    ht_cond -= (v / N) * std::log(v / cp[tc.second]);
  }

  double same_both = 0.0, same_t = 0.0, same_p = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = i + 1; j < pred.size(); ++j) {
      const bool st = truth[i] == truth[j];
      const bool sp = pred[i] == pred[j];
      same_t += st;
      same_p += sp;
      same_both += st && sp;
    }
  const double total_pairs = N * (N - 1.0) / 2.0;
  const double expected = same_t * same_p / total_pairs;
  const double maximum = 0.5 * (same_t + same_p);

  ClusterMetrics m;
  m.acc = best_hits / N;
  m.nmi = (hp + ht) > 0.0 ? mi / (0.5 * (hp + ht)) : 1.0;
  m.ari = (maximum - expected) > 0.0 ? (same_both - expected) / (maximum - expected) : 1.0;
  m.completeness = ht > 0.0 ? 1.0 - ht_cond / ht : 1.0;
  return m;
}

}  // namespace

TEST_CASE("cluster_metrics") {
  SECTION("identical labelings score one on every metric") {
    std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
    ClusterMetrics m = cluster_metrics(labels, labels, 3);
    CHECK(m.acc == 1.0);
    CHECK(m.nmi == Catch::Approx(1.0).margin(1e-12));
    CHECK(m.ari == Catch::Approx(1.0).margin(1e-12));
    CHECK(m.completeness == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("relabeling the predictions changes nothing") {
    std::vector<int> truth{0, 0, 1, 1, 2, 2};
    std::vector<int> pred{2, 2, 0, 0, 1, 1};  // same partition, ids rotated
    ClusterMetrics m = cluster_metrics(pred, truth, 3);
    CHECK(m.acc == 1.0);
    CHECK(m.nmi == Catch::Approx(1.0).margin(1e-12));
    CHECK(m.ari == Catch::Approx(1.0).margin(1e-12));
    CHECK(m.completeness == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("thirty random labelings match the definitional oracle") {
    RngStream rng(17, 0);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t k = 2 + rng.below(3);  // brute-force matching up to k = 4
      const std::size_t n = 12 + rng.below(30);
      std::vector<int> pred(n), truth(n);
      for (std::size_t i = 0; i < n; ++i) {
        pred[i] = static_cast<int>(rng.below(k));
        truth[i] = static_cast<int>(rng.below(k));
      }
      ClusterMetrics got = cluster_metrics(pred, truth, k);
      ClusterMetrics want = metrics_oracle(pred, truth, k);
      CHECK(std::abs(got.acc - want.acc) < 1e-12);
      CHECK(std::abs(got.nmi - want.nmi) < 1e-12);
      CHECK(std::abs(got.ari - want.ari) < 1e-12);
      CHECK(std::abs(got.completeness - want.completeness) < 1e-12);
    }
  }

  SECTION("prediction id permutation invariance") {
    RngStream rng(18, 0);
    std::vector<int> truth(20), pred(20);
    for (std::size_t i = 0; i < 20; ++i) {
      truth[i] = static_cast<int>(rng.below(3));
      pred[i] = static_cast<int>(rng.below(3));
    }
    ClusterMetrics base = cluster_metrics(pred, truth, 3);
    std::vector<int> rotated(20);
    for (std::size_t i = 0; i < 20; ++i) rotated[i] = (pred[i] + 1) % 3;
    ClusterMetrics rot = cluster_metrics(rotated, truth, 3);
    CHECK(base.acc == Catch::Approx(rot.acc).margin(1e-14));
    CHECK(base.nmi == Catch::Approx(rot.nmi).margin(1e-14));
    CHECK(base.ari == Catch::Approx(rot.ari).margin(1e-14));
    CHECK(base.completeness == Catch::Approx(rot.completeness).margin(1e-14));
  }

  SECTION("bad input rejected") {
    CHECK_THROWS_AS(cluster_metrics({}, {}, 2), std::invalid_argument);
    CHECK_THROWS_AS(cluster_metrics({0, 1}, {0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(cluster_metrics({0, 5}, {0, 1}, 2), std::out_of_range);
  }
}

TEST_CASE("egg_cluster") {
  SECTION("orthogonal block structure clusters perfectly") {
    RngStream rng(21, 0);
    Matrix h(10, 4);
    std::vector<int> truth(10);
    for (std::size_t i = 0; i < 10; ++i) {
      const std::size_t group = i < 5 ? 0 : 1;
      truth[i] = static_cast<int>(group);
      h(i, 2 * group) = rng.uniform(0.5, 1.5);
      h(i, 2 * group + 1) = rng.uniform(0.5, 1.5);
    }
    ClusterResult r = egg_cluster(h, RankPolicy::fixed_count(2), 2, truth, 23);
    CHECK(r.metrics.acc == 1.0);
    CHECK(r.metrics.nmi == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("fixed ratio 0.8 on a width-16 latent keeps rank 13") {
    RngStream rng(22, 0);
    Matrix h = eggtest::random_matrix(rng, 40, 16);
    ClusterResult r = egg_cluster(h, RankPolicy::fixed_ratio(0.8), 3, {}, 29);
    CHECK(r.rank == 13);
    CHECK(r.captured_energy > 0.0);
    CHECK(r.captured_energy <= 1.0);
  }

  SECTION("full projector flag reproduces the basis-row assignments at p = m") {
    RngStream rng(23, 0);
    Matrix h = eggtest::random_matrix(rng, 25, 5);
    ClusterResult direct = egg_cluster(h, RankPolicy::fixed_count(5), 3, {}, 31, false);
    ClusterResult full = egg_cluster(h, RankPolicy::fixed_count(5), 3, {}, 31, true);
    REQUIRE(direct.assignment.size() == full.assignment.size());
    // same partition up to cluster ids
    ClusterMetrics m = cluster_metrics(full.assignment, direct.assignment, 3);
    CHECK(m.acc == 1.0);
  }
}
