#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "vslm/types.hpp"

namespace vslm {

/// Handle into a Tape. Cheap to copy; only valid for the tape it came from.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense Eigen matrices. Nodes are appended during
/// the forward pass; backward() walks them in reverse, accumulating into
/// the gradient slots of nodes that require gradients. One tape per loss
/// evaluation; parameters live outside and are lifted in as leaves.
template <typename S>
class Tape {
 public:
  using Mat = MatX<S>;
  /// Called with (tape, value of this node, gradient of this node).
  using BackFn = std::function<void(Tape&, const Mat&, const Mat&)>;

  struct Node {
    Mat value;
    Mat grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    BackFn backward;
  };

  Var leaf(Mat value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Mat value) { return leaf(std::move(value), false); }

  Var scalar(S v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  const Mat& val(Var v) const { return nodes_[v.id].value; }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  int rows(Var v) const { return static_cast<int>(nodes_[v.id].value.rows()); }
  int cols(Var v) const { return static_cast<int>(nodes_[v.id].value.cols()); }
  std::size_t size() const { return nodes_.size(); }

  /// Appends a computed node. The backward closure is dropped when no
  /// parent needs gradients, pruning constant subgraphs.
  Var push(Mat value, bool requires_grad, BackFn backward) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad,
                          requires_grad ? std::move(backward) : nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Adds `g` into the gradient slot of `v` (no-op if v does not need it).
  template <typename Expr>
  void accum(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  /// Seeds d(root)/d(root) = 1 and runs the reverse sweep. `root` must be 1x1.
  void backward(Var root) {
    Node& r = nodes_[root.id];
    if (r.value.rows() != 1 || r.value.cols() != 1)
      throw std::invalid_argument("Tape::backward: root must be a scalar node");
    if (!r.requires_grad) return;
    if (r.grad.size() == 0) r.grad = Mat::Zero(1, 1);
    r.grad(0, 0) += S(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward && n.grad.size() != 0)
        n.backward(*this, n.value, n.grad);
    }
  }

 private:
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Free-function ops. Shapes follow the [channels x frames] convention:
// column t is frame t.
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void check_same_shape(const Tape<S>& t, Var a, Var b, const char* op) {
  if (t.rows(a) != t.rows(b) || t.cols(a) != t.cols(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}
template <typename S>
bool rg2(const Tape<S>& t, Var a, Var b) {
  return t.requires_grad(a) || t.requires_grad(b);
}
}  // namespace detail

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  detail::check_same_shape(t, a, b, "add");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a) + t.val(b), detail::rg2(t, a, b),
                [a, b](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g);
                  tp.accum(b, g);
                });
}

template <typename S>
Var sub(Tape<S>& t, Var a, Var b) {
  detail::check_same_shape(t, a, b, "sub");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a) - t.val(b), detail::rg2(t, a, b),
                [a, b](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g);
                  tp.accum(b, -g);
                });
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  detail::check_same_shape(t, a, b, "mul");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).cwiseProduct(t.val(b)), detail::rg2(t, a, b),
                [a, b](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g.cwiseProduct(tp.val(b)));
                  tp.accum(b, g.cwiseProduct(tp.val(a)));
                });
}

template <typename S>
Var neg(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(-t.val(a), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) { tp.accum(a, -g); });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S c) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a) * c, t.requires_grad(a),
                [a, c](Tape<S>& tp, const Mat&, const Mat& g) { tp.accum(a, g * c); });
}

template <typename S>
Var add_const(Tape<S>& t, Var a, S c) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).array() + c, t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) { tp.accum(a, g); });
}

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  if (t.cols(a) != t.rows(b)) throw std::invalid_argument("matmul: inner dim mismatch");
  using Mat = typename Tape<S>::Mat;
  Mat v(t.rows(a), t.cols(b));
  v.noalias() = t.val(a) * t.val(b);
  return t.push(std::move(v), detail::rg2(t, a, b),
                [a, b](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g * tp.val(b).transpose());
                  tp.accum(b, tp.val(a).transpose() * g);
                });
}

template <typename S>
Var transpose(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).transpose(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) { tp.accum(a, g.transpose()); });
}

/// a[m x n] + b[m x 1] broadcast across columns.
template <typename S>
Var add_bias(Tape<S>& t, Var a, Var b) {
  if (t.rows(a) != t.rows(b) || t.cols(b) != 1)
    throw std::invalid_argument("add_bias: expected [m x n] + [m x 1]");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).colwise() + t.val(b).col(0), detail::rg2(t, a, b),
                [a, b](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g);
                  tp.accum(b, g.rowwise().sum());
                });
}

template <typename S>
Var exp(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).array().exp(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat& v, const Mat& g) {
                  tp.accum(a, g.cwiseProduct(v));
                });
}

template <typename S>
Var log(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).array().log(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g.cwiseQuotient(tp.val(a)));
                });
}

template <typename S>
Var tanh(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).array().tanh(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat& v, const Mat& g) {
                  tp.accum(a, g.cwiseProduct((S(1) - v.array().square()).matrix()));
                });
}

template <typename S>
Var relu(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).cwiseMax(S(0)), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, (tp.val(a).array() > S(0)).template cast<S>().matrix().cwiseProduct(g));
                });
}

/// tanh-approximation GELU; the derivative is exact for the approximation.
template <typename S>
Var gelu(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto& x = t.val(a).array();
  Mat u = (kC * (x + kA * x.cube())).matrix();
  Mat th = u.array().tanh().matrix();
  Mat v = (S(0.5) * x * (S(1) + th.array())).matrix();
  return t.push(std::move(v), t.requires_grad(a),
                [a, th = std::move(th)](Tape<S>& tp, const Mat&, const Mat& g) {
                  const auto& x = tp.val(a).array();
                  auto sech2 = S(1) - th.array().square();
                  auto du = S(kC) * (S(1) + S(3) * S(kA) * x.square());
                  auto d = S(0.5) * (S(1) + th.array()) + S(0.5) * x * sech2 * du;
                  tp.accum(a, g.cwiseProduct(d.matrix()));
                });
}

template <typename S>
Var square(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).array().square(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, S(2) * g.cwiseProduct(tp.val(a)));
                });
}

/// Elementwise |x| with subgradient 0 at x == 0.
template <typename S>
Var abs(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).cwiseAbs(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g.cwiseProduct(tp.val(a).array().sign().matrix()));
                });
}

/// 1 / sqrt(x + eps), elementwise.
template <typename S>
Var rsqrt_eps(Tape<S>& t, Var a, S eps) {
  using Mat = typename Tape<S>::Mat;
  return t.push((t.val(a).array() + eps).rsqrt(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat& v, const Mat& g) {
                  tp.accum(a, (S(-0.5) * g.array() * v.array().cube()).matrix());
                });
}

/// Hard clamp; gradient passes through strictly inside [lo, hi].
template <typename S>
Var clamp(Tape<S>& t, Var a, S lo, S hi) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).cwiseMax(lo).cwiseMin(hi), t.requires_grad(a),
                [a, lo, hi](Tape<S>& tp, const Mat&, const Mat& g) {
                  const auto& x = tp.val(a).array();
                  auto inside = (x > lo && x < hi).template cast<S>();
                  tp.accum(a, g.cwiseProduct(inside.matrix()));
                });
}

template <typename S>
Var sum_all(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  Mat v(1, 1);
  v(0, 0) = t.val(a).sum();
  return t.push(std::move(v), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, Mat::Constant(tp.rows(a), tp.cols(a), g(0, 0)));
                });
}

template <typename S>
Var mean_all(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  const S inv = S(1) / static_cast<S>(t.val(a).size());
  Mat v(1, 1);
  v(0, 0) = t.val(a).sum() * inv;
  return t.push(std::move(v), t.requires_grad(a),
                [a, inv](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, Mat::Constant(tp.rows(a), tp.cols(a), g(0, 0) * inv));
                });
}

template <typename S>
Var rowwise_mean(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  const S inv = S(1) / static_cast<S>(t.cols(a));
  return t.push(t.val(a).rowwise().mean(), t.requires_grad(a),
                [a, inv](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, (g * inv).replicate(1, tp.cols(a)));
                });
}

template <typename S>
Var colwise_sum(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).colwise().sum(), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g.replicate(tp.rows(a), 1));
                });
}

template <typename S>
Var colwise_mean(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  const S inv = S(1) / static_cast<S>(t.rows(a));
  return t.push(t.val(a).colwise().mean(), t.requires_grad(a),
                [a, inv](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, (g * inv).replicate(tp.rows(a), 1));
                });
}

/// v[m x 1] -> [m x n].
template <typename S>
Var broadcast_cols(Tape<S>& t, Var v, int n) {
  if (t.cols(v) != 1) throw std::invalid_argument("broadcast_cols: expected column vector");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(v).replicate(1, n), t.requires_grad(v),
                [v](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(v, g.rowwise().sum());
                });
}

/// v[1 x n] -> [m x n].
template <typename S>
Var broadcast_rows(Tape<S>& t, Var v, int m) {
  if (t.rows(v) != 1) throw std::invalid_argument("broadcast_rows: expected row vector");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(v).replicate(m, 1), t.requires_grad(v),
                [v](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(v, g.colwise().sum());
                });
}

template <typename S>
Var slice_rows(Tape<S>& t, Var a, int r0, int nr) {
  if (r0 < 0 || r0 + nr > t.rows(a)) throw std::invalid_argument("slice_rows: out of range");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).middleRows(r0, nr), t.requires_grad(a),
                [a, r0, nr](Tape<S>& tp, const Mat&, const Mat& g) {
                  Mat full = Mat::Zero(tp.rows(a), tp.cols(a));
                  full.middleRows(r0, nr) = g;
                  tp.accum(a, full);
                });
}

template <typename S>
Var slice_cols(Tape<S>& t, Var a, int c0, int nc) {
  if (c0 < 0 || c0 + nc > t.cols(a)) throw std::invalid_argument("slice_cols: out of range");
  using Mat = typename Tape<S>::Mat;
  return t.push(t.val(a).middleCols(c0, nc), t.requires_grad(a),
                [a, c0, nc](Tape<S>& tp, const Mat&, const Mat& g) {
                  Mat full = Mat::Zero(tp.rows(a), tp.cols(a));
                  full.middleCols(c0, nc) = g;
                  tp.accum(a, full);
                });
}

template <typename S>
Var concat_rows(Tape<S>& t, Var a, Var b) {
  if (t.cols(a) != t.cols(b)) throw std::invalid_argument("concat_rows: column mismatch");
  using Mat = typename Tape<S>::Mat;
  Mat v(t.rows(a) + t.rows(b), t.cols(a));
  v.topRows(t.rows(a)) = t.val(a);
  v.bottomRows(t.rows(b)) = t.val(b);
  const int ra = t.rows(a);
  return t.push(std::move(v), detail::rg2(t, a, b),
                [a, b, ra](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g.topRows(ra));
                  tp.accum(b, g.bottomRows(g.rows() - ra));
                });
}

template <typename S>
Var concat_cols(Tape<S>& t, Var a, Var b) {
  if (t.rows(a) != t.rows(b)) throw std::invalid_argument("concat_cols: row mismatch");
  using Mat = typename Tape<S>::Mat;
  Mat v(t.rows(a), t.cols(a) + t.cols(b));
  v.leftCols(t.cols(a)) = t.val(a);
  v.rightCols(t.cols(b)) = t.val(b);
  const int ca = t.cols(a);
  return t.push(std::move(v), detail::rg2(t, a, b),
                [a, b, ca](Tape<S>& tp, const Mat&, const Mat& g) {
                  tp.accum(a, g.leftCols(ca));
                  tp.accum(b, g.rightCols(g.cols() - ca));
                });
}

/// Shifts columns right by `offset` (left if negative), zero-filling.
/// out.col(j) = a.col(j - offset) where defined.
template <typename S>
Var time_shift(Tape<S>& t, Var a, int offset) {
  using Mat = typename Tape<S>::Mat;
  const int m = t.rows(a), n = t.cols(a);
  Mat v = Mat::Zero(m, n);
  const int len = n - std::abs(offset);
  if (len > 0) {
    if (offset >= 0)
      v.middleCols(offset, len) = t.val(a).middleCols(0, len);
    else
      v.middleCols(0, len) = t.val(a).middleCols(-offset, len);
  }
  return t.push(std::move(v), t.requires_grad(a),
                [a, offset](Tape<S>& tp, const Mat&, const Mat& g) {
                  const int m = tp.rows(a), n = tp.cols(a);
                  Mat d = Mat::Zero(m, n);
                  const int len = n - std::abs(offset);
                  if (len > 0) {
                    if (offset >= 0)
                      d.middleCols(0, len) = g.middleCols(offset, len);
                    else
                      d.middleCols(-offset, len) = g.middleCols(0, len);
                  }
                  tp.accum(a, d);
                });
}

/// Keeps columns phase, phase+stride, ... (stride-2 convolutions).
template <typename S>
Var downsample_cols(Tape<S>& t, Var a, int stride, int phase) {
  if (stride < 1 || phase < 0) throw std::invalid_argument("downsample_cols: bad args");
  using Mat = typename Tape<S>::Mat;
  const int n = t.cols(a);
  const int count = phase < n ? (n - phase + stride - 1) / stride : 0;
  Mat v(t.rows(a), count);
  for (int j = 0; j < count; ++j) v.col(j) = t.val(a).col(phase + j * stride);
  return t.push(std::move(v), t.requires_grad(a),
                [a, stride, phase](Tape<S>& tp, const Mat&, const Mat& g) {
                  Mat d = Mat::Zero(tp.rows(a), tp.cols(a));
                  for (int j = 0; j < g.cols(); ++j) d.col(phase + j * stride) = g.col(j);
                  tp.accum(a, d);
                });
}

/// Softmax along each column (keys down the rows). -inf entries map to 0.
template <typename S>
Var colwise_softmax(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  Mat v = t.val(a);
  for (int j = 0; j < v.cols(); ++j) {
    const S m = v.col(j).maxCoeff();
    v.col(j) = (v.col(j).array() - m).exp();
    v.col(j) /= v.col(j).sum();
  }
  return t.push(std::move(v), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat& v, const Mat& g) {
                  Mat d = g.cwiseProduct(v);
                  Eigen::Matrix<S, 1, Eigen::Dynamic> s = d.colwise().sum();
                  d.noalias() -= v * s.asDiagonal();
                  tp.accum(a, d);
                });
}

/// Row vector of log(sum(exp(col))) per column, computed stably.
template <typename S>
Var colwise_logsumexp(Tape<S>& t, Var a) {
  using Mat = typename Tape<S>::Mat;
  const Mat& x = t.val(a);
  Mat v(1, x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    const S m = x.col(j).maxCoeff();
    v(0, j) = m + std::log((x.col(j).array() - m).exp().sum());
  }
  return t.push(std::move(v), t.requires_grad(a),
                [a](Tape<S>& tp, const Mat& v, const Mat& g) {
                  const Mat& x = tp.val(a);
                  Mat d(x.rows(), x.cols());
                  for (int j = 0; j < x.cols(); ++j)
                    d.col(j) = (x.col(j).array() - v(0, j)).exp() * g(0, j);
                  tp.accum(a, d);
                });
}

/// out(0, j) = a(idx[j], j); used to pick target-token logits.
template <typename S>
Var select_rows_per_col(Tape<S>& t, Var a, std::vector<int> idx) {
  if (static_cast<int>(idx.size()) != t.cols(a))
    throw std::invalid_argument("select_rows_per_col: index length mismatch");
  using Mat = typename Tape<S>::Mat;
  Mat v(1, t.cols(a));
  for (int j = 0; j < t.cols(a); ++j) {
    if (idx[j] < 0 || idx[j] >= t.rows(a))
      throw std::invalid_argument("select_rows_per_col: index out of range");
    v(0, j) = t.val(a)(idx[j], j);
  }
  return t.push(std::move(v), t.requires_grad(a),
                [a, idx = std::move(idx)](Tape<S>& tp, const Mat&, const Mat& g) {
                  Mat d = Mat::Zero(tp.rows(a), tp.cols(a));
                  for (int j = 0; j < g.cols(); ++j) d(idx[j], j) = g(0, j);
                  tp.accum(a, d);
                });
}

/// Embedding lookup: a[d x k], idx[n] -> [d x n].
template <typename S>
Var gather_cols(Tape<S>& t, Var a, std::vector<int> idx) {
  using Mat = typename Tape<S>::Mat;
  Mat v(t.rows(a), static_cast<int>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= t.cols(a))
      throw std::invalid_argument("gather_cols: index out of range");
    v.col(j) = t.val(a).col(idx[j]);
  }
  return t.push(std::move(v), t.requires_grad(a),
                [a, idx = std::move(idx)](Tape<S>& tp, const Mat&, const Mat& g) {
                  Mat d = Mat::Zero(tp.rows(a), tp.cols(a));
                  for (std::size_t j = 0; j < idx.size(); ++j) d.col(idx[j]) += g.col(j);
                  tp.accum(a, d);
                });
}

}  // namespace vslm
