#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "pgmap/core.hpp"

// Reverse-mode automatic differentiation over Eigen matrices. A Tape owns a
// growing list of nodes; ops append a node whose lambda scatters the output
// gradient back into its parents. Creation order is a topological order, so
// backward() is a single reverse sweep.
namespace pgmap::ad {

using Eigen::MatrixXd;

class Tape;

struct Value {
  Tape* tape = nullptr;
  int idx = -1;

  const MatrixXd& val() const;
  const MatrixXd& grad() const;
  int rows() const { return static_cast<int>(val().rows()); }
  int cols() const { return static_cast<int>(val().cols()); }
  double scalar() const {
    if (val().size() != 1) throw BadInput("scalar() on non-1x1 value");
    return val()(0, 0);
  }
};

class Tape {
 public:
  struct Node {
    MatrixXd value;
    MatrixXd grad;
    std::function<void()> back;  // empty for leaves
  };

  Value leaf(MatrixXd v) {
    nodes_.push_back(Node{std::move(v), MatrixXd(), nullptr});
    Node& n = nodes_.back();
    n.grad = MatrixXd::Zero(n.value.rows(), n.value.cols());
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  Value make(MatrixXd v, std::function<void()> back) {
    nodes_.push_back(Node{std::move(v), MatrixXd(), std::move(back)});
    Node& n = nodes_.back();
    n.grad = MatrixXd::Zero(n.value.rows(), n.value.cols());
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int i) { return nodes_[i]; }
  const Node& node(int i) const { return nodes_[i]; }
  std::size_t size() const { return nodes_.size(); }

  void backward(const Value& loss) {
    if (loss.tape != this) throw BadInput("backward: value from another tape");
    Node& top = nodes_[loss.idx];
    if (top.value.size() != 1) throw BadInput("backward needs a scalar loss");
    top.grad(0, 0) += 1.0;
    for (int i = loss.idx; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back();
  }

 private:
  std::deque<Node> nodes_;  // deque: stable references for the lambdas
};

inline const MatrixXd& Value::val() const { return tape->node(idx).value; }
inline const MatrixXd& Value::grad() const { return tape->node(idx).grad; }

namespace detail {
inline Tape& same_tape(const Value& a, const Value& b) {
  if (a.tape == nullptr || a.tape != b.tape) throw BadInput("values from different tapes");
  return *a.tape;
}
}  // namespace detail

// ---- arithmetic ----

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.val().rows() != b.val().rows() || a.val().cols() != b.val().cols())
    throw BadInput("add: shape mismatch");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  return t.make(a.val() + b.val(), [&t, na, nb, out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    na->grad += g;
    nb->grad += g;
  });
}

inline Value sub(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.val().rows() != b.val().rows() || a.val().cols() != b.val().cols())
    throw BadInput("sub: shape mismatch");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  return t.make(a.val() - b.val(), [&t, na, nb, out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    na->grad += g;
    nb->grad -= g;
  });
}

inline Value scale(const Value& a, double s) {
  Tape& t = *a.tape;
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val() * s, [&t, na, s, out = static_cast<int>(t.size())]() {
    na->grad += s * t.node(out).grad;
  });
}

inline Value add_scalar(const Value& a, double s) {
  Tape& t = *a.tape;
  Tape::Node* na = &t.node(a.idx);
  return t.make((a.val().array() + s).matrix(), [&t, na, out = static_cast<int>(t.size())]() {
    na->grad += t.node(out).grad;
  });
}

inline Value hadamard(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.val().rows() != b.val().rows() || a.val().cols() != b.val().cols())
    throw BadInput("hadamard: shape mismatch");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  return t.make(a.val().cwiseProduct(b.val()),
                [&t, na, nb, out = static_cast<int>(t.size())]() {
                  const MatrixXd& g = t.node(out).grad;
                  na->grad += g.cwiseProduct(nb->value);
                  nb->grad += g.cwiseProduct(na->value);
                });
}

inline Value matmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.val().cols() != b.val().rows()) throw BadInput("matmul: inner dims disagree");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  return t.make(a.val() * b.val(), [&t, na, nb, out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    na->grad += g * nb->value.transpose();
    nb->grad += na->value.transpose() * g;
  });
}

// a * b^T
inline Value matmul_nt(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.val().cols() != b.val().cols()) throw BadInput("matmul_nt: inner dims disagree");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  return t.make(a.val() * b.val().transpose(),
                [&t, na, nb, out = static_cast<int>(t.size())]() {
                  const MatrixXd& g = t.node(out).grad;
                  na->grad += g * nb->value;
                  nb->grad += g.transpose() * na->value;
                });
}

// broadcast a 1 x d row vector over all rows
inline Value add_rowvec(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (b.val().rows() != 1 || a.val().cols() != b.val().cols())
    throw BadInput("add_rowvec: need 1 x d bias matching columns");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  MatrixXd y = a.val();
  y.rowwise() += b.val().row(0);
  return t.make(std::move(y), [&t, na, nb, out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    na->grad += g;
    nb->grad += g.colwise().sum();
  });
}

inline Value mul_rowvec(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (b.val().rows() != 1 || a.val().cols() != b.val().cols())
    throw BadInput("mul_rowvec: need 1 x d gain matching columns");
  Tape::Node *na = &t.node(a.idx), *nb = &t.node(b.idx);
  MatrixXd y = (a.val().array().rowwise() * b.val().row(0).array()).matrix();
  return t.make(std::move(y), [&t, na, nb, out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    na->grad += (g.array().rowwise() * nb->value.row(0).array()).matrix();
    nb->grad += (g.cwiseProduct(na->value)).colwise().sum();
  });
}

// ---- elementwise nonlinearities ----

inline Value tanh_(const Value& a) {
  Tape& t = *a.tape;
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().array().tanh().matrix(), [&t, na, out = static_cast<int>(t.size())]() {
    const Tape::Node& n = t.node(out);
    na->grad.array() += n.grad.array() * (1.0 - n.value.array().square());
  });
}

inline Value sqrt_(const Value& a) {
  Tape& t = *a.tape;
  if ((a.val().array() <= 0.0).any()) throw NumericError("sqrt domain");
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().array().sqrt().matrix(), [&t, na, out = static_cast<int>(t.size())]() {
    const Tape::Node& n = t.node(out);
    na->grad.array() += n.grad.array() * 0.5 / n.value.array();
  });
}

// Smoothed absolute value: quadratic inside [-delta, delta], |x| - delta/2
// outside; C^1 everywhere.
inline Value huber_(const Value& a, double delta) {
  Tape& t = *a.tape;
  if (delta <= 0) throw BadInput("huber delta must be positive");
  Tape::Node* na = &t.node(a.idx);
  MatrixXd y = a.val().unaryExpr([delta](double x) {
    const double ax = std::fabs(x);
    return ax <= delta ? x * x / (2.0 * delta) : ax - delta / 2.0;
  });
  return t.make(std::move(y), [&t, na, delta, out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    na->grad += g.cwiseProduct(na->value.unaryExpr([delta](double x) {
      return std::clamp(x / delta, -1.0, 1.0);
    }));
  });
}

inline Value log_(const Value& a) {
  Tape& t = *a.tape;
  if ((a.val().array() <= 0.0).any()) throw NumericError("log domain");
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().array().log().matrix(), [&t, na, out = static_cast<int>(t.size())]() {
    na->grad.array() += t.node(out).grad.array() / na->value.array();
  });
}

inline Value sin_(const Value& a) {
  Tape& t = *a.tape;
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().array().sin().matrix(), [&t, na, out = static_cast<int>(t.size())]() {
    na->grad.array() += t.node(out).grad.array() * na->value.array().cos();
  });
}

inline Value cos_(const Value& a) {
  Tape& t = *a.tape;
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().array().cos().matrix(), [&t, na, out = static_cast<int>(t.size())]() {
    na->grad.array() -= t.node(out).grad.array() * na->value.array().sin();
  });
}

// ---- row-wise normalizations ----

inline Value softmax_rows(const Value& a) {
  Tape& t = *a.tape;
  MatrixXd y = a.val();
  for (int r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  Tape::Node* na = &t.node(a.idx);
  return t.make(std::move(y), [&t, na, out = static_cast<int>(t.size())]() {
    const Tape::Node& n = t.node(out);
    for (int r = 0; r < n.value.rows(); ++r) {
      const double dot = n.grad.row(r).cwiseProduct(n.value.row(r)).sum();
      na->grad.row(r).array() +=
          (n.grad.row(r).array() - dot) * n.value.row(r).array();
    }
  });
}

inline Value log_softmax_rows(const Value& a) {
  Tape& t = *a.tape;
  MatrixXd y = a.val();
  for (int r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    const double lse = m + std::log((y.row(r).array() - m).exp().sum());
    y.row(r).array() -= lse;
  }
  Tape::Node* na = &t.node(a.idx);
  return t.make(std::move(y), [&t, na, out = static_cast<int>(t.size())]() {
    const Tape::Node& n = t.node(out);
    for (int r = 0; r < n.value.rows(); ++r) {
      const double gsum = n.grad.row(r).sum();
      na->grad.row(r).array() +=
          n.grad.row(r).array() - gsum * n.value.row(r).array().exp();
    }
  });
}

inline Value layernorm_rows(const Value& a, double eps = 1e-5) {
  Tape& t = *a.tape;
  const MatrixXd& x = a.val();
  MatrixXd y(x.rows(), x.cols());
  Eigen::VectorXd inv_sigma(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(r) = is;
    y.row(r) = ((x.row(r).array() - mu) * is).matrix();
  }
  Tape::Node* na = &t.node(a.idx);
  return t.make(std::move(y),
                [&t, na, inv_sigma = std::move(inv_sigma),
                 out = static_cast<int>(t.size())]() {
                  const Tape::Node& n = t.node(out);
                  for (int r = 0; r < n.value.rows(); ++r) {
                    const auto g = n.grad.row(r).array();
                    const auto xh = n.value.row(r).array();
                    const double gm = g.mean();
                    const double gxm = (g * xh).mean();
                    na->grad.row(r).array() += inv_sigma(r) * (g - gm - xh * gxm);
                  }
                });
}

inline Value l2_normalize_rows(const Value& a, double eps = 1e-12) {
  Tape& t = *a.tape;
  const MatrixXd& x = a.val();
  MatrixXd y(x.rows(), x.cols());
  Eigen::VectorXd inv_n(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    const double n = std::sqrt(x.row(r).squaredNorm() + eps);
    inv_n(r) = 1.0 / n;
    y.row(r) = x.row(r) * inv_n(r);
  }
  Tape::Node* na = &t.node(a.idx);
  return t.make(std::move(y), [&t, na, inv_n = std::move(inv_n),
                               out = static_cast<int>(t.size())]() {
    const Tape::Node& n = t.node(out);
    for (int r = 0; r < n.value.rows(); ++r) {
      const double dot = n.grad.row(r).cwiseProduct(n.value.row(r)).sum();
      na->grad.row(r) +=
          inv_n(r) * (n.grad.row(r) - dot * n.value.row(r));
    }
  });
}

// ---- shape ops ----

inline Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw BadInput("concat_cols: empty");
  Tape& t = *parts[0].tape;
  int total = 0;
  const int rows = parts[0].val().rows();
  for (const auto& p : parts) {
    if (p.tape != &t) throw BadInput("values from different tapes");
    if (p.val().rows() != rows) throw BadInput("concat_cols: row mismatch");
    total += static_cast<int>(p.val().cols());
  }
  MatrixXd y(rows, total);
  std::vector<Tape::Node*> srcs;
  std::vector<int> offs, widths;
  int off = 0;
  for (const auto& p : parts) {
    const int w = static_cast<int>(p.val().cols());
    y.middleCols(off, w) = p.val();
    srcs.push_back(&t.node(p.idx));
    offs.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return t.make(std::move(y), [&t, srcs = std::move(srcs), offs = std::move(offs),
                               widths = std::move(widths),
                               out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    for (std::size_t k = 0; k < srcs.size(); ++k)
      srcs[k]->grad += g.middleCols(offs[k], widths[k]);
  });
}

inline Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw BadInput("concat_rows: empty");
  Tape& t = *parts[0].tape;
  int total = 0;
  const int cols = parts[0].val().cols();
  for (const auto& p : parts) {
    if (p.tape != &t) throw BadInput("values from different tapes");
    if (p.val().cols() != cols) throw BadInput("concat_rows: column mismatch");
    total += static_cast<int>(p.val().rows());
  }
  MatrixXd y(total, cols);
  std::vector<Tape::Node*> srcs;
  std::vector<int> offs, heights;
  int off = 0;
  for (const auto& p : parts) {
    const int h = static_cast<int>(p.val().rows());
    y.middleRows(off, h) = p.val();
    srcs.push_back(&t.node(p.idx));
    offs.push_back(off);
    heights.push_back(h);
    off += h;
  }
  return t.make(std::move(y), [&t, srcs = std::move(srcs), offs = std::move(offs),
                               heights = std::move(heights),
                               out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    for (std::size_t k = 0; k < srcs.size(); ++k)
      srcs[k]->grad += g.middleRows(offs[k], heights[k]);
  });
}

inline Value slice_cols(const Value& a, int start, int n) {
  Tape& t = *a.tape;
  if (start < 0 || n <= 0 || start + n > a.val().cols()) throw BadInput("slice_cols: range");
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().middleCols(start, n),
                [&t, na, start, n, out = static_cast<int>(t.size())]() {
                  na->grad.middleCols(start, n) += t.node(out).grad;
                });
}

inline Value gather_rows(const Value& a, std::vector<int> idx) {
  Tape& t = *a.tape;
  MatrixXd y(static_cast<int>(idx.size()), a.val().cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.val().rows()) throw BadInput("gather_rows: index range");
    y.row(static_cast<int>(k)) = a.val().row(idx[k]);
  }
  Tape::Node* na = &t.node(a.idx);
  return t.make(std::move(y), [&t, na, idx = std::move(idx),
                               out = static_cast<int>(t.size())]() {
    const MatrixXd& g = t.node(out).grad;
    for (std::size_t k = 0; k < idx.size(); ++k)
      na->grad.row(idx[k]) += g.row(static_cast<int>(k));
  });
}

// ---- reductions ----

inline Value sum_all(const Value& a) {
  Tape& t = *a.tape;
  MatrixXd y(1, 1);
  y(0, 0) = a.val().sum();
  Tape::Node* na = &t.node(a.idx);
  return t.make(std::move(y), [&t, na, out = static_cast<int>(t.size())]() {
    na->grad.array() += t.node(out).grad(0, 0);
  });
}

inline Value mean_all(const Value& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.val().size()));
}

inline Value rowwise_sum(const Value& a) {
  Tape& t = *a.tape;
  Tape::Node* na = &t.node(a.idx);
  return t.make(a.val().rowwise().sum(), [&t, na, out = static_cast<int>(t.size())]() {
    na->grad.colwise() += t.node(out).grad.col(0);
  });
}

// ---- raster sampling (differentiable in the positions) ----

// positions: N x 2 (x, y). Returns N x |channels| of bilinear samples with
// zero padding, matching Raster::sample. Gradients flow into the positions.
inline Value bilinear_sample(const Value& positions, const Raster* raster,
                             std::vector<int> channels) {
  Tape& t = *positions.tape;
  if (positions.val().cols() != 2) throw BadInput("bilinear_sample: positions must be N x 2");
  for (int ch : channels)
    if (ch < 0 || ch >= raster->c) throw BadInput("bilinear_sample: channel range");
  const MatrixXd& P = positions.val();
  const int N = static_cast<int>(P.rows());
  const int C = static_cast<int>(channels.size());
  MatrixXd y(N, C);
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < C; ++k) y(i, k) = raster->sample(P(i, 0), P(i, 1), channels[k]);
  Tape::Node* np = &t.node(positions.idx);
  return t.make(std::move(y), [&t, np, raster, channels = std::move(channels),
                               out = static_cast<int>(t.size())]() {
    const Tape::Node& n = t.node(out);
    const MatrixXd& P = np->value;
    for (int i = 0; i < n.value.rows(); ++i) {
      const double x = P(i, 0), yy = P(i, 1);
      const int x0 = static_cast<int>(std::floor(x));
      const int y0 = static_cast<int>(std::floor(yy));
      const double fx = x - x0, fy = yy - y0;
      for (std::size_t k = 0; k < channels.size(); ++k) {
        const double g = n.grad(i, static_cast<int>(k));
        if (g == 0.0) continue;
        const int ch = channels[k];
        auto v = [&](int r, int c) -> double {
          if (r < 0 || r >= raster->h || c < 0 || c >= raster->w) return 0.0;
          return raster->at(r, c, ch);
        };
        const double v00 = v(y0, x0), v01 = v(y0, x0 + 1);
        const double v10 = v(y0 + 1, x0), v11 = v(y0 + 1, x0 + 1);
        np->grad(i, 0) += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
        np->grad(i, 1) += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
      }
    }
  });
}

}  // namespace pgmap::ad
