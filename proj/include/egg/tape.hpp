#ifndef EGG_TAPE_HPP
#define EGG_TAPE_HPP

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "egg/matrix.hpp"
#include "egg/rng.hpp"

namespace egg {

// Handle to a node on a Tape.
struct Value {
  int id = -1;
};

// Reverse-mode tape, rebuilt per training step (define-by-run). Nodes are
// appended in topological order, so a single reverse sweep visits each node
// exactly once; fan-out gradients accumulate additively.
class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&)> backprop;  // empty for leaves
    bool touched = false;                 // received any gradient
  };

  Value leaf(Matrix v) {
    v.check_finite("leaf");
    return push(std::move(v), nullptr);
  }

  const Matrix& value(Value v) const { return nodes_[check(v)].value; }
  const Matrix& grad(Value v) const { return nodes_[check(v)].grad; }

  // Node whose backprop closure is currently executing (valid inside
  // custom-op closures only).
  Value current_output() const { return Value{out_}; }
  std::size_t size() const { return nodes_.size(); }

  // Raw extension point for custom differentiable ops (e.g. the SVD layer).
  Value make_node(Matrix value, std::function<void(Tape&)> backprop) {
    value.check_finite("custom op");
    return push(std::move(value), std::move(backprop));
  }

  void accumulate(Value v, const Matrix& g) {
    Node& n = nodes_[check(v)];
    require_shape(n.grad.same_shape(g), "gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) n.grad.data()[i] += g.data()[i];
    n.touched = true;
  }

  // ---- arithmetic ----

  Value matmul(Value a, Value b) {
    Matrix out = matmul_raw(value(a), value(b));
    out.check_finite("matmul");
    return push(std::move(out), [a, b](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      t.accumulate(a, matmul_raw(g, t.value(b).transposed()));
      t.accumulate(b, matmul_raw(t.value(a).transposed(), g));
    });
  }

  // out = A * b for a fixed sparse A (A itself is not differentiated).
  Value spmm(std::shared_ptr<const SparseMatrix> A, Value b) {
    Matrix out = A->multiply(value(b));
    out.check_finite("spmm");
    return push(std::move(out), [A, b](Tape& t) {
      t.accumulate(b, A->multiply_transposed(t.nodes_[t.out_].grad));
    });
  }

  Value transpose(Value a) {
    return push(value(a).transposed(), [a](Tape& t) {
      t.accumulate(a, t.nodes_[t.out_].grad.transposed());
    });
  }

  Value add(Value a, Value b) {
    Matrix out = value(a) + value(b);
    return push(std::move(out), [a, b](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Value sub(Value a, Value b) {
    Matrix out = value(a) - value(b);
    return push(std::move(out), [a, b](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      t.accumulate(a, g);
      t.accumulate(b, -1.0 * g);
    });
  }

  Value hadamard(Value a, Value b) {
    Matrix out = hadamard_raw(value(a), value(b));
    return push(std::move(out), [a, b](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      t.accumulate(a, hadamard_raw(g, t.value(b)));
      t.accumulate(b, hadamard_raw(g, t.value(a)));
    });
  }

  // a (n x c) + bias (1 x c) broadcast over rows.
  Value add_rowvec(Value a, Value bias) {
    const Matrix& av = value(a);
    const Matrix& bv = value(bias);
    require_shape(bv.rows() == 1 && bv.cols() == av.cols(), "add_rowvec: bias shape");
    Matrix out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
    return push(std::move(out), [a, bias](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      t.accumulate(a, g);
      Matrix bg(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) bg(0, j) += g(i, j);
      t.accumulate(bias, bg);
    });
  }

  Value scale(Value a, double s) {
    Matrix out = s * value(a);
    out.check_finite("scale");
    return push(std::move(out), [a, s](Tape& t) {
      t.accumulate(a, s * t.nodes_[t.out_].grad);
    });
  }

  // ---- entrywise nonlinearities ----

  Value relu(Value a) {
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out.data()[i] < 0.0) out.data()[i] = 0.0;
    return push(std::move(out), [a](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      const Matrix& x = t.value(a);
      Matrix ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.data()[i] = x.data()[i] > 0.0 ? g.data()[i] : 0.0;
      t.accumulate(a, ga);
    });
  }

  Value sigmoid(Value a) {
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = sigma(out.data()[i]);
    return push(std::move(out), [a](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      const Matrix& y = t.nodes_[t.out_].value;
      Matrix ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = y.data()[i];
        ga.data()[i] = g.data()[i] * s * (1.0 - s);
      }
      t.accumulate(a, ga);
    });
  }

  Value exp(Value a) {
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::exp(out.data()[i]);
    out.check_finite("exp");
    return push(std::move(out), [a](Tape& t) {
      t.accumulate(a, hadamard_raw(t.nodes_[t.out_].grad, t.nodes_[t.out_].value));
    });
  }

  Value log(Value a) {
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out.data()[i] <= 0.0) throw std::domain_error("log of non-positive entry");
      out.data()[i] = std::log(out.data()[i]);
    }
    return push(std::move(out), [a](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      const Matrix& x = t.value(a);
      Matrix ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] = g.data()[i] / x.data()[i];
      t.accumulate(a, ga);
    });
  }

  Value softplus(Value a) {
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = softplus_stable(out.data()[i]);
    return push(std::move(out), [a](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      const Matrix& x = t.value(a);
      Matrix ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] = g.data()[i] * sigma(x.data()[i]);
      t.accumulate(a, ga);
    });
  }

  // Inverted dropout; identity in eval mode.
  Value dropout(Value a, double p, RngStream& rng, bool training) {
    if (!training || p <= 0.0) return a;
    const double keep = 1.0 - p;
    auto mask = std::make_shared<Matrix>(value(a).rows(), value(a).cols());
    Matrix out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double m = rng.uniform() < keep ? 1.0 / keep : 0.0;
      mask->data()[i] = m;
      out.data()[i] *= m;
    }
    return push(std::move(out), [a, mask](Tape& t) {
      t.accumulate(a, hadamard_raw(t.nodes_[t.out_].grad, *mask));
    });
  }

  // ---- reductions ----

  Value sum(Value a) {
    double s = 0.0;
    for (std::size_t i = 0; i < value(a).size(); ++i) s += value(a).data()[i];
    Matrix out(1, 1);
    out(0, 0) = s;
    return push(std::move(out), [a](Tape& t) {
      const double g = t.nodes_[t.out_].grad(0, 0);
      Matrix ga(t.value(a).rows(), t.value(a).cols(), g);
      t.accumulate(a, ga);
    });
  }

  Value pool_sum(Value a) {
    const Matrix& x = value(a);
    Matrix out(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
    return push(std::move(out), [a](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      const Matrix& x = t.value(a);
      Matrix ga(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) = g(0, j);
      t.accumulate(a, ga);
    });
  }

  Value pool_avg(Value a) {
    if (value(a).rows() == 0) throw std::invalid_argument("pool on empty matrix");
    return scale(pool_sum(a), 1.0 / static_cast<double>(value(a).rows()));
  }

  Value pool_max(Value a) {
    const Matrix& x = value(a);
    if (x.rows() == 0) throw std::invalid_argument("pool on empty matrix");
    Matrix out(1, x.cols());
    auto argmax = std::make_shared<std::vector<std::size_t>>(x.cols(), 0);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double best = x(0, j);
      for (std::size_t i = 1; i < x.rows(); ++i)
        if (x(i, j) > best) {
          best = x(i, j);
          (*argmax)[j] = i;
        }
      out(0, j) = best;
    }
    return push(std::move(out), [a, argmax](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      Matrix ga(t.value(a).rows(), t.value(a).cols());
      for (std::size_t j = 0; j < g.cols(); ++j) ga((*argmax)[j], j) = g(0, j);
      t.accumulate(a, ga);
    });
  }

  // Concatenate 1 x w_i row vectors in order.
  Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat of nothing");
    std::size_t total = 0;
    for (Value p : parts) {
      require_shape(value(p).rows() == 1, "concat_cols expects row vectors");
      total += value(p).cols();
    }
    Matrix out(1, total);
    std::size_t off = 0;
    for (Value p : parts) {
      const Matrix& v = value(p);
      for (std::size_t j = 0; j < v.cols(); ++j) out(0, off + j) = v(0, j);
      off += v.cols();
    }
    auto ps = std::make_shared<std::vector<Value>>(parts);
    return push(std::move(out), [ps](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      std::size_t off = 0;
      for (Value p : *ps) {
        const std::size_t w = t.value(p).cols();
        Matrix gp(1, w);
        for (std::size_t j = 0; j < w; ++j) gp(0, j) = g(0, off + j);
        t.accumulate(p, gp);
        off += w;
      }
    });
  }

  // Upper triangle (incl. diagonal) of a symmetric m x m matrix, row-major,
  // as a 1 x m(m+1)/2 vector.
  Value flatten_upper(Value a, double sym_tol = 1e-8) {
    const Matrix& x = value(a);
    require_shape(x.rows() == x.cols(), "flatten_upper: not square");
    const std::size_t m = x.rows();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j)
        if (std::abs(x(i, j) - x(j, i)) > sym_tol)
          throw std::invalid_argument("flatten_upper: input not symmetric");
    Matrix out(1, m * (m + 1) / 2);
    std::size_t k = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i; j < m; ++j) out(0, k++) = x(i, j);
    return push(std::move(out), [a, m](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      Matrix ga(m, m);
      std::size_t k = 0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i; j < m; ++j) ga(i, j) = g(0, k++);
      t.accumulate(a, ga);
    });
  }

  // ---- losses ----

  // Mean negative log-softmax at the true class; logits B x C.
  Value cross_entropy(Value logits, const std::vector<int>& labels) {
    const Matrix& l = value(logits);
    require_shape(l.rows() == labels.size(), "cross_entropy: batch size mismatch");
    auto probs = std::make_shared<Matrix>(l.rows(), l.cols());
    double loss = 0.0;
    for (std::size_t i = 0; i < l.rows(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= l.cols())
        throw std::out_of_range("cross_entropy: label out of range");
      double mx = l(i, 0);
      for (std::size_t j = 1; j < l.cols(); ++j) mx = std::max(mx, l(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < l.cols(); ++j) z += std::exp(l(i, j) - mx);
      for (std::size_t j = 0; j < l.cols(); ++j) (*probs)(i, j) = std::exp(l(i, j) - mx) / z;
      loss -= (l(i, labels[i]) - mx - std::log(z));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(l.rows());
    auto lab = std::make_shared<std::vector<int>>(labels);
    return push(std::move(out), [logits, probs, lab](Tape& t) {
      const double g = t.nodes_[t.out_].grad(0, 0);
      Matrix gl = *probs;
      const double inv = 1.0 / static_cast<double>(gl.rows());
      for (std::size_t i = 0; i < gl.rows(); ++i) {
        gl(i, (*lab)[i]) -= 1.0;
        for (std::size_t j = 0; j < gl.cols(); ++j) gl(i, j) *= g * inv;
      }
      t.accumulate(logits, gl);
    });
  }

  // Mean binary cross-entropy with logits (P x 1) against targets in {0,1}.
  Value logistic_bce(Value logits, const std::vector<double>& targets) {
    const Matrix& l = value(logits);
    require_shape(l.cols() == 1 && l.rows() == targets.size(), "logistic_bce: shape");
    double loss = 0.0;
    for (std::size_t i = 0; i < l.rows(); ++i)
      loss += softplus_stable(l(i, 0)) - targets[i] * l(i, 0);
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(l.rows());
    auto tg = std::make_shared<std::vector<double>>(targets);
    return push(std::move(out), [logits, tg](Tape& t) {
      const double g = t.nodes_[t.out_].grad(0, 0);
      const Matrix& l = t.value(logits);
      const double inv = 1.0 / static_cast<double>(l.rows());
      Matrix gl(l.rows(), 1);
      for (std::size_t i = 0; i < l.rows(); ++i)
        gl(i, 0) = g * inv * (sigma(l(i, 0)) - (*tg)[i]);
      t.accumulate(logits, gl);
    });
  }

  // KL(q || N(0,I)) averaged over rows, with q = N(mu, diag(exp(logsig)^2)).
  Value gaussian_kl(Value mu, Value logsig) {
    const Matrix& m = value(mu);
    const Matrix& s = value(logsig);
    require_shape(m.same_shape(s), "gaussian_kl: shape mismatch");
    const double inv_n = 1.0 / static_cast<double>(m.rows());
    double kl = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double mu2 = m.data()[i] * m.data()[i];
      const double two_l = 2.0 * s.data()[i];
      kl += 0.5 * (mu2 + std::exp(two_l) - 1.0 - two_l);
    }
    Matrix out(1, 1);
    out(0, 0) = kl * inv_n;
    return push(std::move(out), [mu, logsig, inv_n](Tape& t) {
      const double g = t.nodes_[t.out_].grad(0, 0);
      const Matrix& m = t.value(mu);
      const Matrix& s = t.value(logsig);
      Matrix gm(m.rows(), m.cols()), gs(s.rows(), s.cols());
      for (std::size_t i = 0; i < m.size(); ++i) {
        gm.data()[i] = g * inv_n * m.data()[i];
        gs.data()[i] = g * inv_n * (std::exp(2.0 * s.data()[i]) - 1.0);
      }
      t.accumulate(mu, gm);
      t.accumulate(logsig, gs);
    });
  }

  // Dot products z_i . z_j for each (i, j) pair, as a P x 1 column.
  Value pair_dot(Value z, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    const Matrix& zv = value(z);
    Matrix out(pairs.size(), 1);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [i, j] = pairs[k];
      if (i >= zv.rows() || j >= zv.rows()) throw std::out_of_range("pair_dot: index");
      double d = 0.0;
      for (std::size_t c = 0; c < zv.cols(); ++c) d += zv(i, c) * zv(j, c);
      out(k, 0) = d;
    }
    auto ps = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(pairs);
    return push(std::move(out), [z, ps](Tape& t) {
      const Matrix& g = t.nodes_[t.out_].grad;
      const Matrix& zv = t.value(z);
      Matrix gz(zv.rows(), zv.cols());
      for (std::size_t k = 0; k < ps->size(); ++k) {
        const auto [i, j] = (*ps)[k];
        const double gk = g(k, 0);
        for (std::size_t c = 0; c < zv.cols(); ++c) {
          gz(i, c) += gk * zv(j, c);
          gz(j, c) += gk * zv(i, c);
        }
      }
      t.accumulate(z, gz);
    });
  }

  // ---- backward ----

  void backward(Value loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw std::invalid_argument("backward requires a scalar (1x1) loss node");
    ln.grad(0, 0) = 1.0;
    ln.touched = true;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.touched || !n.backprop) continue;
      out_ = i;
      n.backprop(*this);
    }
  }

 private:
  static double sigma(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  static double softplus_stable(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }

  int check(Value v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("stale Value handle");
    return v.id;
  }

  Value push(Matrix value, std::function<void(Tape&)> backprop) {
    Node n;
    n.grad = Matrix(value.rows(), value.cols());
    n.value = std::move(value);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  int out_ = -1;  // node currently running its backprop
};

// Trainable matrix with Adam state; re-registered on each fresh tape.
struct Parameter {
  Matrix value;
  Matrix m1, m2;
  long step = 0;
  Value node;

  explicit Parameter(Matrix init = Matrix())
      : value(std::move(init)),
        m1(value.rows(), value.cols()),
        m2(value.rows(), value.cols()) {}

  Value use(Tape& tape) {
    node = tape.leaf(value);
    return node;
  }
};

// Central-difference gradient check. `f` maps (tape, input-node) to a scalar
// node; returns the max entrywise relative error between the tape gradient
// and central differences, with denominator max(|analytic|, |numeric|, 1e-8).
template <typename F>
double finite_diff_check(F&& f, const Matrix& at, double step = 1e-5) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
  Tape tape;
  Value x = tape.leaf(at);
  Value loss = f(tape, x);
  if (!tape.value(loss).all_finite()) throw std::runtime_error("non-finite function value");
  tape.backward(loss);
  Matrix analytic = tape.grad(x);

  double max_rel = 0.0;
  for (std::size_t i = 0; i < at.size(); ++i) {
    Matrix plus = at, minus = at;
    plus.data()[i] += step;
    minus.data()[i] -= step;
    Tape tp, tm;
    const double fp = tp.value(f(tp, tp.leaf(plus)))(0, 0);
    const double fm = tm.value(f(tm, tm.leaf(minus)))(0, 0);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("non-finite function value");
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic.data()[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic.data()[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace egg

#endif  // EGG_TAPE_HPP
