#ifndef EGG_GNN_HPP
#define EGG_GNN_HPP

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "egg/graph.hpp"
#include "egg/grassmann.hpp"
#include "egg/matrix.hpp"
#include "egg/rng.hpp"
#include "egg/tape.hpp"

namespace egg {

inline Matrix glorot_uniform(std::size_t fan_in, std::size_t fan_out, RngStream& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
  return w;
}

// One graph-convolution layer: act(A_hat H W + b).
struct GcnLayer {
  Parameter weight;  // d_in x d_out
  Parameter bias;    // 1 x d_out
  bool has_bias = true;
  bool apply_relu = true;

  GcnLayer() = default;
  GcnLayer(std::size_t d_in, std::size_t d_out, RngStream& rng, bool with_bias = true,
           bool with_relu = true)
      : weight(glorot_uniform(d_in, d_out, rng)),
        bias(Matrix(1, d_out)),
        has_bias(with_bias),
        apply_relu(with_relu) {}

  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }
};

// A_hat (H W): associativity keeps the dense product at n x d_out.
inline Value gcn_forward(GcnLayer& layer, Tape& t, std::shared_ptr<const SparseMatrix> a_hat,
                         Value h) {
  require_shape(a_hat->rows() == a_hat->cols(), "gcn_forward: adjacency not square");
  require_shape(t.value(h).rows() == a_hat->rows(), "gcn_forward: node count mismatch");
  require_shape(t.value(h).cols() == layer.in_dim(), "gcn_forward: feature width mismatch");
  Value out = t.spmm(a_hat, t.matmul(h, layer.weight.use(t)));
  if (layer.has_bias) out = t.add_rowvec(out, layer.bias.use(t));
  if (layer.apply_relu) out = t.relu(out);
  return out;
}

// First-layer variant for sparse node features: A_hat (X W) with X constant.
inline Value gcn_forward_sparse(GcnLayer& layer, Tape& t,
                                std::shared_ptr<const SparseMatrix> a_hat,
                                std::shared_ptr<const SparseMatrix> x) {
  require_shape(a_hat->rows() == x->rows(), "gcn_forward: node count mismatch");
  require_shape(x->cols() == layer.in_dim(), "gcn_forward: feature width mismatch");
  Value out = t.spmm(a_hat, t.spmm(x, layer.weight.use(t)));
  if (layer.has_bias) out = t.add_rowvec(out, layer.bias.use(t));
  if (layer.apply_relu) out = t.relu(out);
  return out;
}

// GIN convolution: MLP((1 + eps) h_v + sum of neighbor features), with a
// two-affine MLP (d_in -> d_out -> d_out, ReLU between). eps is fixed.
struct GinLayer {
  double eps = 0.0;
  Parameter w1, b1;  // d_in x d_out, 1 x d_out
  Parameter w2, b2;  // d_out x d_out, 1 x d_out

  GinLayer() = default;
  GinLayer(std::size_t d_in, std::size_t d_out, RngStream& rng, double eps_ = 0.0)
      : eps(eps_),
        w1(glorot_uniform(d_in, d_out, rng)),
        b1(Matrix(1, d_out)),
        w2(glorot_uniform(d_out, d_out, rng)),
        b2(Matrix(1, d_out)) {}

  std::size_t in_dim() const { return w1.value.rows(); }
  std::size_t out_dim() const { return w2.value.cols(); }
};

inline Value gin_forward(GinLayer& layer, Tape& t, const Graph& g, Value h) {
  require_shape(t.value(h).rows() == g.node_count, "gin_forward: node count mismatch");
  require_shape(t.value(h).cols() == layer.in_dim(), "gin_forward: feature width mismatch");
  auto agg = std::make_shared<SparseMatrix>(gin_aggregation(g, layer.eps));
  Value s = t.spmm(agg, h);
  Value hidden = t.relu(t.add_rowvec(t.matmul(s, layer.w1.use(t)), layer.b1.use(t)));
  return t.add_rowvec(t.matmul(hidden, layer.w2.use(t)), layer.b2.use(t));
}

enum class PoolKind { kSum, kAvg, kMax, kEgg };

struct PoolConfig {
  PoolKind kind = PoolKind::kSum;
  RankPolicy policy = RankPolicy::energy(0.8);  // only used by kEgg
};

// Readout over node embeddings H (n x m). sum/avg/max reduce columns; egg
// returns flatten_sym(U U^T) of the rectified graph-level subspace, so its
// length m(m+1)/2 is independent of both node count and retained rank.
inline Value global_pool(Tape& t, Value h, const PoolConfig& pool) {
  if (t.value(h).rows() == 0) throw std::invalid_argument("global_pool: empty graph");
  switch (pool.kind) {
    case PoolKind::kSum:
      return t.pool_sum(h);
    case PoolKind::kAvg:
      return t.pool_avg(h);
    case PoolKind::kMax:
      return t.pool_max(h);
    case PoolKind::kEgg: {
      RectifyNode r = tape_rectify(t, h, RectifyMode::kGraphLevel, pool.policy);
      Value proj = t.matmul(r.basis, t.transpose(r.basis));
      return t.flatten_upper(proj);
    }
  }
  throw std::logic_error("global_pool: unknown kind");
}

inline std::size_t pool_output_dim(const PoolConfig& pool, std::size_t m) {
  return pool.kind == PoolKind::kEgg ? m * (m + 1) / 2 : m;
}

// Jumping-knowledge aggregation: concatenation in layer order.
inline Value jk_aggregate(Tape& t, const std::vector<Value>& per_layer_pools) {
  if (per_layer_pools.empty()) throw std::invalid_argument("jk_aggregate: no layer outputs");
  if (per_layer_pools.size() == 1) return per_layer_pools[0];
  return t.concat_cols(per_layer_pools);
}

// Fully connected head; ReLU and inverted dropout on hidden layers, linear
// output. Default widths (64, 16) ahead of the class logits.
struct MlpHead {
  struct Affine {
    Parameter weight, bias;
  };
  std::vector<Affine> layers;
  double dropout = 0.0;

  MlpHead() = default;
  MlpHead(std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
          RngStream& rng, double dropout_ = 0.0)
      : dropout(dropout_) {
    std::size_t prev = in_dim;
    for (std::size_t w : hidden) {
      layers.push_back({Parameter(glorot_uniform(prev, w, rng)), Parameter(Matrix(1, w))});
      prev = w;
    }
    layers.push_back(
        {Parameter(glorot_uniform(prev, out_dim, rng)), Parameter(Matrix(1, out_dim))});
  }

  Value forward(Tape& t, Value x, RngStream& rng, bool training) {
    require_shape(!layers.empty(), "mlp_head: uninitialized");
    Value cur = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      cur = t.add_rowvec(t.matmul(cur, layers[i].weight.use(t)), layers[i].bias.use(t));
      if (i + 1 < layers.size()) {
        cur = t.relu(cur);
        cur = t.dropout(cur, dropout, rng, training);
      }
    }
    return cur;
  }
};

enum class Backbone { kGcn, kGin };

struct ClassifierConfig {
  Backbone backbone = Backbone::kGcn;
  std::size_t conv_layers = 2;
  std::size_t hidden_units = 64;
  std::size_t feature_dim = 0;
  std::size_t class_count = 0;
  PoolConfig pool;
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

// Graph classifier. GCN backbone pools once after the last convolution; GIN
// backbone pools after every convolution and concatenates (JKNet style).
struct ClassifierModel {
  ClassifierConfig config;
  std::vector<GcnLayer> gcn_layers;
  std::vector<GinLayer> gin_layers;
  MlpHead head;

  ClassifierModel() = default;

  explicit ClassifierModel(const ClassifierConfig& cfg) : config(cfg) {
    if (cfg.feature_dim == 0 || cfg.class_count == 0)
      throw std::invalid_argument("classifier: feature_dim and class_count required");
    if (cfg.conv_layers == 0) throw std::invalid_argument("classifier: need >= 1 conv layer");
    RngStream rng(cfg.seed, /*stream=*/0x1217);
    std::size_t prev = cfg.feature_dim;
    for (std::size_t i = 0; i < cfg.conv_layers; ++i) {
      if (cfg.backbone == Backbone::kGcn)
        gcn_layers.emplace_back(prev, cfg.hidden_units, rng);
      else
        gin_layers.emplace_back(prev, cfg.hidden_units, rng);
      prev = cfg.hidden_units;
    }
    const std::size_t per_pool = pool_output_dim(cfg.pool, cfg.hidden_units);
    const std::size_t head_in =
        cfg.backbone == Backbone::kGin ? per_pool * cfg.conv_layers : per_pool;
    head = MlpHead(head_in, {64, 16}, cfg.class_count, rng, cfg.dropout);
  }

  // 1 x class_count logits for one graph.
  Value forward(Tape& t, const Graph& g, RngStream& rng, bool training) {
    Value h = t.leaf(g.features);
    if (config.backbone == Backbone::kGcn) {
      auto a_hat = std::make_shared<SparseMatrix>(normalize_adjacency(g));
      for (GcnLayer& layer : gcn_layers) h = gcn_forward(layer, t, a_hat, h);
      Value pooled = global_pool(t, h, config.pool);
      return head.forward(t, pooled, rng, training);
    }
    std::vector<Value> pools;
    pools.reserve(gin_layers.size());
    for (GinLayer& layer : gin_layers) {
      h = gin_forward(layer, t, g, h);
      pools.push_back(global_pool(t, h, config.pool));
    }
    return head.forward(t, jk_aggregate(t, pools), rng, training);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (GcnLayer& l : gcn_layers) {
      ps.push_back(&l.weight);
      if (l.has_bias) ps.push_back(&l.bias);
    }
    for (GinLayer& l : gin_layers) {
      ps.push_back(&l.w1);
      ps.push_back(&l.b1);
      ps.push_back(&l.w2);
      ps.push_back(&l.b2);
    }
    for (MlpHead::Affine& a : head.layers) {
      ps.push_back(&a.weight);
      ps.push_back(&a.bias);
    }
    return ps;
  }
};

}  // namespace egg

#endif  // EGG_GNN_HPP
