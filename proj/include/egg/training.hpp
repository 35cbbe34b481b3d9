#ifndef EGG_TRAINING_HPP
#define EGG_TRAINING_HPP

#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <tuple>
#include <stdexcept>
#include <string>
#include <vector>

#include "egg/gnn.hpp"
#include "egg/graph.hpp"
#include "egg/tape.hpp"

namespace egg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One bias-corrected Adam update; weight decay enters as an L2 term added to
// the gradient. A non-finite gradient aborts the step.
inline void adam_step(Parameter& p, const Matrix& grad, const AdamConfig& cfg) {
  require_shape(grad.same_shape(p.value), "adam_step: gradient shape mismatch");
  if (!grad.all_finite())
    throw std::runtime_error("adam_step: non-finite gradient, aborting update");
  ++p.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = grad.data()[i] + cfg.weight_decay * p.value.data()[i];
    p.m1.data()[i] = cfg.beta1 * p.m1.data()[i] + (1.0 - cfg.beta1) * g;
    p.m2.data()[i] = cfg.beta2 * p.m2.data()[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = p.m1.data()[i] / bc1;
    const double vhat = p.m2.data()[i] / bc2;
    p.value.data()[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double dropout = 0.0;
  std::size_t hidden_units = 64;
  PoolConfig pool;
  std::uint64_t seed = 0;
};

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct RunRecord {
  std::vector<EpochStats> epochs;
  std::size_t stop_epoch = 0;  // 1-based; equals epochs.size()
  std::size_t best_epoch = 0;
  double test_accuracy = 0.0;
  double wall_time_seconds = 0.0;
};

// Line-oriented CSV of the learning curves.
inline std::string run_record_csv(const RunRecord& r) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,train_acc,val_acc\n";
  out.precision(17);
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    const EpochStats& e = r.epochs[i];
    out << (i + 1) << ',' << e.train_loss << ',' << e.val_loss << ',' << e.train_acc << ','
        << e.val_acc << '\n';
  }
  return out.str();
}

namespace detail {

inline std::vector<std::size_t> split_indices(const GraphSet& gs, Split which) {
  if (gs.split.size() != gs.graphs.size())
    throw std::invalid_argument("training: graph set has no split assignment");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < gs.graphs.size(); ++i)
    if (gs.split[i] == which) idx.push_back(i);
  return idx;
}

// Mean loss and accuracy over a fixed set of graphs in eval mode. Sums are
// accumulated per graph and divided once, so iteration order cannot change
// the result beyond float rounding of a fixed-order sum.
inline std::pair<double, double> eval_split(ClassifierModel& model, const GraphSet& gs,
                                            const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("training: empty split");
  double loss = 0.0;
  std::size_t correct = 0;
  RngStream noise(0, 0);  // unused in eval mode
  for (std::size_t i : idx) {
    Tape t;
    Value logits = model.forward(t, gs.graphs[i], noise, /*training=*/false);
    loss += t.value(t.cross_entropy(logits, {gs.graphs[i].label}))(0, 0);
    const Matrix& l = t.value(logits);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < l.cols(); ++j)
      if (l(0, j) > l(0, arg)) arg = j;
    if (static_cast<int>(arg) == gs.graphs[i].label) ++correct;
  }
  return {loss / static_cast<double>(idx.size()),
          static_cast<double>(correct) / static_cast<double>(idx.size())};
}

}  // namespace detail

// Fraction of correctly classified graphs in the given split, eval mode.
inline double evaluate_accuracy(ClassifierModel& model, const GraphSet& gs, Split which) {
  return detail::eval_split(model, gs, detail::split_indices(gs, which)).second;
}

// Full training loop: minibatch Adam with per-graph gradient averaging and
// early stopping on validation loss. "Improvement" means strictly lower than
// the best seen so far minus 1e-6. The best-validation parameters are
// restored before the single test evaluation.
inline RunRecord train_classifier(const GraphSet& gs, ClassifierModel& model,
                                  const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  if (cfg.learning_rate <= 0.0) throw std::invalid_argument("training: learning rate");
  if (cfg.max_epochs == 0) throw std::invalid_argument("training: max_epochs");
  const auto train_idx = detail::split_indices(gs, Split::kTrain);
  const auto val_idx = detail::split_indices(gs, Split::kVal);
  const auto test_idx = detail::split_indices(gs, Split::kTest);
  if (train_idx.empty() || val_idx.empty() || test_idx.empty())
    throw std::invalid_argument("training: empty split");

  AdamConfig adam;
  adam.lr = cfg.learning_rate;
  adam.weight_decay = cfg.weight_decay;

  RngStream shuffle_rng(cfg.seed, /*stream=*/0x5F1E);
  RngStream dropout_rng(cfg.seed, /*stream=*/0xD120);
  std::vector<Parameter*> params = model.parameters();

  RunRecord record;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_params;
  std::size_t since_best = 0;

  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  std::vector<std::size_t> order = train_idx;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(begin + batch, order.size());
      std::vector<Matrix> grad_sum(params.size());
      for (std::size_t k = 0; k < params.size(); ++k)
        grad_sum[k] = Matrix(params[k]->value.rows(), params[k]->value.cols());
      for (std::size_t b = begin; b < end; ++b) {
        Tape t;
        Value logits = model.forward(t, gs.graphs[order[b]], dropout_rng, /*training=*/true);
        t.backward(t.cross_entropy(logits, {gs.graphs[order[b]].label}));
        for (std::size_t k = 0; k < params.size(); ++k) {
          const Matrix& g = t.grad(params[k]->node);
          for (std::size_t e = 0; e < g.size(); ++e) grad_sum[k].data()[e] += g.data()[e];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (std::size_t k = 0; k < params.size(); ++k)
        adam_step(*params[k], inv * grad_sum[k], adam);
    }

    EpochStats stats;
    std::tie(stats.train_loss, stats.train_acc) = detail::eval_split(model, gs, train_idx);
    std::tie(stats.val_loss, stats.val_acc) = detail::eval_split(model, gs, val_idx);
    record.epochs.push_back(stats);

    if (stats.val_loss < best_val - 1e-6) {
      best_val = stats.val_loss;
      record.best_epoch = epoch;
      since_best = 0;
      best_params.clear();
      for (Parameter* p : params) best_params.push_back(p->value);
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience) break;
  }
  record.stop_epoch = record.epochs.size();

  if (!best_params.empty())
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best_params[k];
  record.test_accuracy = detail::eval_split(model, gs, test_idx).second;
  record.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

}  // namespace egg

#endif  // EGG_TRAINING_HPP
