#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reddot/errors.hpp"
#include "reddot/rng.hpp"
#include "reddot/types.hpp"

namespace reddot::autodiff {

// Reverse-mode tape over dense matrices. Each op appends a node holding the
// forward value and a closure that scatters the node's gradient to its
// parents. Sequences are [tokens, dim] matrices; scalars are 1x1.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    Matrix<Scalar> value;
    Matrix<Scalar> grad;  // empty until touched by backward
    std::function<void(Tape&, int)> backward;
    bool needs_grad = false;
  };

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  int emplace(Matrix<Scalar> value, bool needs_grad, std::function<void(Tape&, int)> backward) {
    if (check_finite_ && !value.allFinite()) {
      throw NumericalError("non-finite value produced at tape node " +
                           std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(backward), needs_grad});
    return static_cast<int>(nodes_.size() - 1);
  }

  const Matrix<Scalar>& value(int id) const { return nodes_[id].value; }
  Node& node(int id) { return nodes_[id]; }

  // Gradient accumulator, zero-initialized to the value's shape on first use.
  Matrix<Scalar>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      n.grad.setZero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  void run_backward(int loss_id) {
    if (nodes_[loss_id].value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar (1x1)");
    }
    grad(loss_id).setOnes();
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.grad.size() != 0 && n.backward) {
        n.backward(*this, i);
      }
    }
  }

 private:
  std::vector<Node> nodes_;
  bool check_finite_;
};

// Lightweight handle into a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr; }
  const Matrix<Scalar>& value() const { return tape->value(id); }
  const Matrix<Scalar>& grad() const { return tape->node(id).grad; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }
};

template <typename Scalar>
Var<Scalar> input(Tape<Scalar>& tape, Matrix<Scalar> value, bool requires_grad = false) {
  return {&tape, tape.emplace(std::move(value), requires_grad, {})};
}

namespace detail {

template <typename Scalar>
void check_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape) throw StateError("vars belong to different tapes");
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  int id = t.emplace(a.value() + b.value(), ng, [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.node(self).grad;
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("sub: shape mismatch");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  int id = t.emplace(a.value() - b.value(), ng, [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.node(self).grad;
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) -= g;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("hadamard: shape mismatch");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  int id = t.emplace(a.value().cwiseProduct(b.value()), ng,
                     [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
                       const Matrix<Scalar>& g = t.node(self).grad;
                       if (t.needs_grad(a)) t.grad(a) += g.cwiseProduct(t.value(b));
                       if (t.needs_grad(b)) t.grad(b) += g.cwiseProduct(t.value(a));
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar c) {
  Tape<Scalar>& t = *a.tape;
  int id = t.emplace(a.value() * c, t.needs_grad(a.id), [a = a.id, c](Tape<Scalar>& t, int self) {
    if (t.needs_grad(a)) t.grad(a) += t.node(self).grad * c;
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dims disagree");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  int id = t.emplace(a.value() * b.value(), ng, [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.node(self).grad;
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
  return {&t, id};
}

// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dims disagree");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  int id = t.emplace(a.value() * b.value().transpose(), ng,
                     [a = a.id, b = b.id](Tape<Scalar>& t, int self) {
                       const Matrix<Scalar>& g = t.node(self).grad;
                       if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b);
                       if (t.needs_grad(b)) t.grad(b).noalias() += g.transpose() * t.value(a);
                     });
  return {&t, id};
}

// y = x W + b with b a [1, out] row broadcast over rows.
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, b);
  if (x.cols() != w.rows()) throw ShapeError("linear: input dim does not match weight rows");
  if (b.rows() != 1 || b.cols() != w.cols()) throw ShapeError("linear: bias must be [1, out]");
  Tape<Scalar>& t = *x.tape;
  Matrix<Scalar> y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  int id = t.emplace(std::move(y), ng, [x = x.id, w = w.id, b = b.id](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.node(self).grad;
    if (t.needs_grad(x)) t.grad(x).noalias() += g * t.value(w).transpose();
    if (t.needs_grad(w)) t.grad(w).noalias() += t.value(x).transpose() * g;
    if (t.needs_grad(b)) t.grad(b).row(0) += g.colwise().sum();
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  Tape<Scalar>& t = *parts.front().tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool ng = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix<Scalar> value(rows, cols);
  std::vector<int> ids;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    value.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    ids.push_back(p.id);
  }
  int id = t.emplace(std::move(value), ng, [ids](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.node(self).grad;
    Eigen::Index at = 0;
    for (int pid : ids) {
      const Eigen::Index n = t.value(pid).rows();
      if (t.needs_grad(pid)) t.grad(pid) += g.middleRows(at, n);
      at += n;
    }
  });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  Tape<Scalar>& t = *a.tape;
  int id = t.emplace(a.value().middleRows(start, count), t.needs_grad(a.id),
                     [a = a.id, start, count](Tape<Scalar>& t, int self) {
                       if (t.needs_grad(a)) {
                         t.grad(a).middleRows(start, count) += t.node(self).grad;
                       }
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  Tape<Scalar>& t = *a.tape;
  int id = t.emplace(a.value().middleCols(start, count), t.needs_grad(a.id),
                     [a = a.id, start, count](Tape<Scalar>& t, int self) {
                       if (t.needs_grad(a)) {
                         t.grad(a).middleCols(start, count) += t.node(self).grad;
                       }
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  int id = t.emplace(a.value().transpose(), t.needs_grad(a.id),
                     [a = a.id](Tape<Scalar>& t, int self) {
                       if (t.needs_grad(a)) t.grad(a) += t.node(self).grad.transpose();
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  Tape<Scalar>& t = *parts.front().tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  bool ng = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix<Scalar> value(rows, cols);
  std::vector<int> ids;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    value.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    ids.push_back(p.id);
  }
  int id = t.emplace(std::move(value), ng, [ids](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& g = t.node(self).grad;
    Eigen::Index at = 0;
    for (int pid : ids) {
      const Eigen::Index n = t.value(pid).cols();
      if (t.needs_grad(pid)) t.grad(pid) += g.middleCols(at, n);
      at += n;
    }
  });
  return {&t, id};
}

// Softmax over each row, computed with the max-shift trick.
template <typename Scalar>
Var<Scalar> row_softmax(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> y = a.value();
  y.colwise() -= y.rowwise().maxCoeff();
  y = y.array().exp();
  const Vector<Scalar> row_sums = y.rowwise().sum();
  y.array().colwise() /= row_sums.array();
  int id = t.emplace(std::move(y), t.needs_grad(a.id), [a = a.id](Tape<Scalar>& t, int self) {
    if (!t.needs_grad(a)) return;
    const Matrix<Scalar>& y = t.value(self);
    const Matrix<Scalar>& g = t.node(self).grad;
    // dx = (g - rowwise_sum(g .* y)) .* y
    const Vector<Scalar> dot = (g.cwiseProduct(y)).rowwise().sum();
    Matrix<Scalar> dx = g;
    dx.colwise() -= dot;
    t.grad(a) += dx.cwiseProduct(y);
  });
  return {&t, id};
}

// Per-row standardization followed by an affine map; gain and shift are
// [1, dim] rows broadcast over the batch.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> shift,
                       Scalar eps = Scalar(1e-5)) {
  detail::check_same_tape(x, gain);
  detail::check_same_tape(x, shift);
  const Eigen::Index dim = x.cols();
  if (dim < 1) throw ShapeError("layer_norm: dim must be >= 1");
  if (gain.rows() != 1 || gain.cols() != dim || shift.rows() != 1 || shift.cols() != dim) {
    throw ShapeError("layer_norm: gain/shift must be [1, dim]");
  }
  Tape<Scalar>& t = *x.tape;

  const Vector<Scalar> mean = x.value().rowwise().mean();
  Matrix<Scalar> centered = x.value();
  centered.colwise() -= mean;
  const Vector<Scalar> rstd =
      ((centered.array().square().rowwise().mean() + eps).sqrt()).inverse();
  Matrix<Scalar> normed = centered.array().colwise() * rstd.array();
  Matrix<Scalar> y = normed.array().rowwise() * gain.value().row(0).array();
  y.rowwise() += shift.value().row(0);

  const bool ng = t.needs_grad(x.id) || t.needs_grad(gain.id) || t.needs_grad(shift.id);
  int id = t.emplace(std::move(y), ng,
                     [x = x.id, gain = gain.id, shift = shift.id, mean, rstd](Tape<Scalar>& t,
                                                                              int self) {
                       const Matrix<Scalar>& g = t.node(self).grad;
                       Matrix<Scalar> normed = t.value(x);
                       normed.colwise() -= mean;
                       normed.array().colwise() *= rstd.array();

                       if (t.needs_grad(gain)) {
                         t.grad(gain).row(0) += (g.cwiseProduct(normed)).colwise().sum();
                       }
                       if (t.needs_grad(shift)) t.grad(shift).row(0) += g.colwise().sum();
                       if (t.needs_grad(x)) {
                         const Matrix<Scalar> dnorm =
                             g.array().rowwise() * t.value(gain).row(0).array();
                         const Vector<Scalar> dnorm_mean = dnorm.rowwise().mean();
                         const Vector<Scalar> dnorm_norm_mean =
                             (dnorm.cwiseProduct(normed)).rowwise().mean();
                         Matrix<Scalar> dx = dnorm;
                         dx.colwise() -= dnorm_mean;
                         dx.array() -= normed.array().colwise() * dnorm_norm_mean.array();
                         dx.array().colwise() *= rstd.array();
                         t.grad(x) += dx;
                       }
                     });
  return {&t, id};
}

namespace detail {

template <typename Scalar>
constexpr Scalar kGeluCoeff = Scalar(0.044715);

template <typename Scalar>
inline Scalar sqrt_2_over_pi() {
  return Scalar(0.7978845608028653558798921198687);
}

template <typename Scalar>
inline Scalar stable_sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

// tanh-approximation GELU.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const Scalar c = detail::sqrt_2_over_pi<Scalar>();
  const Scalar k = detail::kGeluCoeff<Scalar>;
  auto fwd = [c, k](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + k * x * x * x)));
  };
  int id = t.emplace(a.value().unaryExpr(fwd), t.needs_grad(a.id),
                     [a = a.id, c, k](Tape<Scalar>& t, int self) {
                       if (!t.needs_grad(a)) return;
                       auto dfdx = [c, k](Scalar x) {
                         const Scalar th = std::tanh(c * (x + k * x * x * x));
                         return Scalar(0.5) * (Scalar(1) + th) +
                                Scalar(0.5) * x * (Scalar(1) - th * th) *
                                    c * (Scalar(1) + Scalar(3) * k * x * x);
                       };
                       t.grad(a) += t.node(self).grad.cwiseProduct(t.value(a).unaryExpr(dfdx));
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  int id = t.emplace(a.value().unaryExpr([](Scalar x) { return detail::stable_sigmoid(x); }),
                     t.needs_grad(a.id), [a = a.id](Tape<Scalar>& t, int self) {
                       if (!t.needs_grad(a)) return;
                       const Matrix<Scalar>& y = t.value(self);
                       t.grad(a) += t.node(self)
                                        .grad.cwiseProduct(y)
                                        .cwiseProduct(Matrix<Scalar>::Ones(y.rows(), y.cols()) - y);
                     });
  return {&t, id};
}

// Zeroes entries with probability p and rescales survivors by 1/(1-p) during
// training; identity in eval or at p == 0.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> a, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return a;
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> mask(a.rows(), a.cols());
  const Scalar keep_scale = Scalar(1.0 / (1.0 - p));
  for (Eigen::Index r = 0; r < mask.rows(); ++r) {
    for (Eigen::Index c = 0; c < mask.cols(); ++c) {
      mask(r, c) = rng.uniform() < p ? Scalar(0) : keep_scale;
    }
  }
  int id = t.emplace(a.value().cwiseProduct(mask), t.needs_grad(a.id),
                     [a = a.id, mask](Tape<Scalar>& t, int self) {
                       if (t.needs_grad(a)) {
                         t.grad(a) += t.node(self).grad.cwiseProduct(mask);
                       }
                     });
  return {&t, id};
}

// Mean over all elements of the fused binary-cross-entropy-with-logits:
// max(z,0) - z*t + log1p(exp(-|z|)). Targets are constants in {0, 1}.
template <typename Scalar>
Var<Scalar> bce_with_logits_mean(Var<Scalar> logits, Matrix<Scalar> targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw ShapeError("bce: logits/targets shape mismatch");
  }
  for (Eigen::Index i = 0; i < targets.size(); ++i) {
    const Scalar v = targets.data()[i];
    if (v != Scalar(0) && v != Scalar(1)) throw DataError("bce: targets must be binary");
  }
  Tape<Scalar>& t = *logits.tape;
  const Eigen::Index n = targets.size();
  Scalar total = Scalar(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar z = logits.value().data()[i];
    const Scalar y = targets.data()[i];
    total += std::max(z, Scalar(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Matrix<Scalar> value(1, 1);
  value(0, 0) = total / Scalar(n);
  int id = t.emplace(std::move(value), t.needs_grad(logits.id),
                     [a = logits.id, targets, n](Tape<Scalar>& t, int self) {
                       if (!t.needs_grad(a)) return;
                       const Scalar g = t.node(self).grad(0, 0) / Scalar(n);
                       Matrix<Scalar>& da = t.grad(a);
                       const Matrix<Scalar>& z = t.value(a);
                       for (Eigen::Index i = 0; i < z.size(); ++i) {
                         da.data()[i] += g * (detail::stable_sigmoid(z.data()[i]) -
                                              targets.data()[i]);
                       }
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> mean_all(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> value(1, 1);
  value(0, 0) = a.value().mean();
  const Eigen::Index n = a.value().size();
  int id = t.emplace(std::move(value), t.needs_grad(a.id),
                     [a = a.id, n](Tape<Scalar>& t, int self) {
                       if (t.needs_grad(a)) {
                         t.grad(a).array() += t.node(self).grad(0, 0) / Scalar(n);
                       }
                     });
  return {&t, id};
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  return sub(a, b);
}

// Scaled-dot-product multi-head self-attention over one token sequence.
// Bidirectional (no mask); per-head dropout on the attention weights.
template <typename Scalar>
struct AttentionParams {
  Var<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename Scalar>
Var<Scalar> multi_head_self_attention(Var<Scalar> x, int heads,
                                      const AttentionParams<Scalar>& p, double dropout_p,
                                      bool training, Rng& rng) {
  const Eigen::Index dim = x.cols();
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention: dim must be divisible by the head count");
  }
  const Eigen::Index head_dim = dim / heads;
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(Scalar(head_dim));

  Var<Scalar> q = linear(x, p.wq, p.bq);
  Var<Scalar> k = linear(x, p.wk, p.bk);
  Var<Scalar> v = linear(x, p.wv, p.bv);

  std::vector<Var<Scalar>> head_outputs;
  head_outputs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var<Scalar> qh = slice_cols(q, h * head_dim, head_dim);
    Var<Scalar> kh = slice_cols(k, h * head_dim, head_dim);
    Var<Scalar> vh = slice_cols(v, h * head_dim, head_dim);
    Var<Scalar> weights = row_softmax(scale(matmul_nt(qh, kh), inv_sqrt_dh));
    weights = dropout(weights, dropout_p, training, rng);
    head_outputs.push_back(matmul(weights, vh));
  }
  return linear(concat_cols(head_outputs), p.wo, p.bo);
}

// ---------------------------------------------------------------------------
// Parameters and Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct Parameter {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until zero_grads/accumulation
  Matrix<Scalar> m, v;  // Adam moments, sized at the first step
};

// Named parameter leaves plus Adam state. std::map keeps names sorted, which
// fixes the serialization order.
template <typename Scalar>
class ParameterSet {
 public:
  Parameter<Scalar>& add(const std::string& name, Matrix<Scalar> value) {
    auto [it, inserted] = params_.emplace(name, Parameter<Scalar>{std::move(value), {}, {}, {}});
    if (!inserted) throw StateError("parameter '" + name + "' already exists");
    return it->second;
  }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<Scalar>& at(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  size_t count() const { return params_.size(); }
  int64_t step() const { return step_; }
  void set_step(int64_t step) { step_ = step; }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
  }

  // Standard Adam with bias correction. Requires every gradient populated.
  void adam_step(const AdamConfig& cfg) {
    for (auto& [name, p] : params_) {
      if (p.grad.size() == 0) throw StateError("adam_step: missing gradient for '" + name + "'");
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
        throw ShapeError("adam_step: gradient shape mismatch for '" + name + "'");
      }
    }
    ++step_;
    const Scalar bc1 = Scalar(1.0 - std::pow(cfg.beta1, static_cast<double>(step_)));
    const Scalar bc2 = Scalar(1.0 - std::pow(cfg.beta2, static_cast<double>(step_)));
    const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
    const Scalar lr = Scalar(cfg.lr), eps = Scalar(cfg.eps);
    for (auto& [name, p] : params_) {
      if (p.m.size() == 0) {
        p.m.setZero(p.value.rows(), p.value.cols());
        p.v.setZero(p.value.rows(), p.value.cols());
      }
      p.m = b1 * p.m + (Scalar(1) - b1) * p.grad;
      p.v = b2 * p.v.array() + (Scalar(1) - b2) * p.grad.array().square();
      p.value.array() -=
          lr * (p.m.array() / bc1) / ((p.v.array() / bc2).sqrt() + eps);
    }
  }

  // Flat packing in name order, row-major within each parameter; used by the
  // finite-difference harness.
  VectorD flatten_values() const {
    VectorD out(scalar_count());
    Eigen::Index at = 0;
    for (const auto& [name, p] : params_) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        out[at++] = static_cast<double>(p.value.data()[i]);
      }
    }
    return out;
  }

  VectorD flatten_grads() const {
    VectorD out(scalar_count());
    Eigen::Index at = 0;
    for (const auto& [name, p] : params_) {
      if (p.grad.size() == 0) throw StateError("flatten_grads: missing gradient for '" + name + "'");
      for (Eigen::Index i = 0; i < p.grad.size(); ++i) {
        out[at++] = static_cast<double>(p.grad.data()[i]);
      }
    }
    return out;
  }

  void assign_from_flat(const VectorD& flat) {
    if (static_cast<size_t>(flat.size()) != scalar_count()) {
      throw ShapeError("assign_from_flat: size mismatch");
    }
    Eigen::Index at = 0;
    for (auto& [name, p] : params_) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        p.value.data()[i] = static_cast<Scalar>(flat[at++]);
      }
    }
  }

  // Name of the parameter owning flat index `i` (diagnostics).
  std::string name_at_flat_index(Eigen::Index i) const {
    for (const auto& [name, p] : params_) {
      if (i < p.value.size()) return name;
      i -= p.value.size();
    }
    return "?";
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& [name, p] : params_) {
      out.add(name, p.value.template cast<Other>());
    }
    out.set_step(step_);
    return out;
  }

 private:
  std::map<std::string, Parameter<Scalar>> params_;
  int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Central differences against a reverse-mode gradient. The error metric is
// |a - n| / max(1, |a|, |n|): relative for large entries, absolute for small.
template <typename F>
GradCheckReport finite_difference_check(F&& f, const VectorD& x0, const VectorD& analytic,
                                        double h = 1e-5) {
  if (x0.size() != analytic.size()) throw ShapeError("grad_check: size mismatch");
  GradCheckReport report;
  VectorD x = x0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace reddot::autodiff
