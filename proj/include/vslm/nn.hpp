#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "vslm/rng.hpp"
#include "vslm/tape.hpp"
#include "vslm/types.hpp"

namespace vslm {

/// Named parameter registry. Checkpoints serialize tensors in registry
/// order, so construction order is part of the on-disk contract.
template <typename S>
struct ParamStore {
  using Mat = MatX<S>;
  std::vector<std::string> names;
  std::vector<Mat> values;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, Mat value) {
    if (index.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index[name] = static_cast<int>(values.size());
    names.push_back(name);
    values.push_back(std::move(value));
    return static_cast<int>(values.size()) - 1;
  }

  int size() const { return static_cast<int>(values.size()); }
  Mat& operator[](int h) { return values[h]; }
  const Mat& operator[](int h) const { return values[h]; }

  std::int64_t num_scalars() const {
    std::int64_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
};

/// Per-tape view of the parameter store: leaf Vars aligned with handles.
struct VarPack {
  std::vector<Var> vars;
  Var operator[](int h) const { return vars[h]; }
};

template <typename S>
VarPack lift(Tape<S>& t, const ParamStore<S>& ps, bool requires_grad = true) {
  VarPack p;
  p.vars.reserve(ps.values.size());
  for (const auto& v : ps.values) p.vars.push_back(t.leaf(v, requires_grad));
  return p;
}

/// Reads accumulated leaf gradients back out, aligned with the store.
template <typename S>
std::vector<MatX<S>> collect_grads(const Tape<S>& t, const ParamStore<S>& ps,
                                   const VarPack& p) {
  std::vector<MatX<S>> g(ps.values.size());
  for (int i = 0; i < ps.size(); ++i) {
    const auto& gi = t.grad(p.vars[i]);
    g[i] = gi.size() ? gi : MatX<S>::Zero(ps.values[i].rows(), ps.values[i].cols());
  }
  return g;
}

namespace init {

template <typename S>
MatX<S> normal(RngStream& rng, int rows, int cols, double stddev) {
  MatX<S> m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = static_cast<S>(rng.normal() * stddev);
  return m;
}

template <typename S>
MatX<S> kaiming(RngStream& rng, int rows, int cols, int fan_in) {
  return normal<S>(rng, rows, cols, std::sqrt(2.0 / fan_in));
}

}  // namespace init

// ---------------------------------------------------------------------------
// Layers. Each layer owns handles into a ParamStore and is applied through
// (tape, pack) so one model definition serves f32 training and f64 checking.
// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
  int W = -1, b = -1;
  int in = 0, out = 0;

  static Linear make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                     int in, int out, bool zero_init = false) {
    Linear l;
    l.in = in;
    l.out = out;
    l.W = ps.add(prefix + ".W", zero_init ? MatX<S>::Zero(out, in)
                                          : init::kaiming<S>(rng, out, in, in));
    l.b = ps.add(prefix + ".b", MatX<S>::Zero(out, 1));
    return l;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    return add_bias(t, matmul(t, p[W], x), p[b]);
  }
};

/// 1-d convolution along time (columns), same padding, optional stride.
/// Weights stored as [out x in*k], tap-major blocks.
template <typename S>
struct Conv1d {
  int W = -1, b = -1;
  int in = 0, out = 0, ksize = 1, stride = 1;

  static Conv1d make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                     int in, int out, int ksize, int stride = 1, bool zero_init = false) {
    Conv1d c;
    c.in = in;
    c.out = out;
    c.ksize = ksize;
    c.stride = stride;
    c.W = ps.add(prefix + ".W", zero_init ? MatX<S>::Zero(out, in * ksize)
                                          : init::kaiming<S>(rng, out, in * ksize, in * ksize));
    c.b = ps.add(prefix + ".b", MatX<S>::Zero(out, 1));
    return c;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    const int pad = ksize / 2;
    Var acc;
    for (int k = 0; k < ksize; ++k) {
      Var wk = slice_cols(t, p[W], k * in, in);
      Var xs = time_shift(t, x, pad - k);  // tap k sees x[t + k - pad]
      Var term = matmul(t, wk, xs);
      acc = k == 0 ? term : add(t, acc, term);
    }
    if (stride > 1) acc = downsample_cols(t, acc, stride, 0);
    return add_bias(t, acc, p[b]);
  }
};

/// Instance normalization: each channel (row) standardized over time,
/// followed by a learned per-channel affine.
template <typename S>
struct InstanceNorm {
  int gain = -1, bias = -1;
  S eps = S(1e-5);

  static InstanceNorm make(ParamStore<S>& ps, const std::string& prefix, int channels) {
    InstanceNorm n;
    n.gain = ps.add(prefix + ".gain", MatX<S>::Ones(channels, 1));
    n.bias = ps.add(prefix + ".bias", MatX<S>::Zero(channels, 1));
    return n;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    const int n = t.cols(x);
    Var mu = rowwise_mean(t, x);
    Var centered = sub(t, x, broadcast_cols(t, mu, n));
    Var var = rowwise_mean(t, square(t, centered));
    Var isd = broadcast_cols(t, rsqrt_eps(t, var, eps), n);
    Var normed = mul(t, centered, isd);
    return add_bias(t, mul(t, normed, broadcast_cols(t, p[gain], n)), p[bias]);
  }
};

/// RMS normalization over channels, per frame, with a learned gain.
template <typename S>
struct RMSNorm {
  int gain = -1;
  S eps = S(1e-6);

  static RMSNorm make(ParamStore<S>& ps, const std::string& prefix, int channels) {
    RMSNorm n;
    n.gain = ps.add(prefix + ".gain", MatX<S>::Ones(channels, 1));
    return n;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    const int m = t.rows(x);
    Var ms = colwise_mean(t, square(t, x));
    Var inv = broadcast_rows(t, rsqrt_eps(t, ms, eps), m);
    return mul(t, mul(t, x, inv), broadcast_cols(t, p[gain], t.cols(x)));
  }
};

/// ALiBi slopes: geometric sequence 2^(-8h/H), h = 1..H.
inline std::vector<double> alibi_slopes(int heads) {
  std::vector<double> s(heads);
  for (int h = 0; h < heads; ++h) s[h] = std::pow(2.0, -8.0 * (h + 1) / heads);
  return s;
}

/// Causal attention bias for one head: entry (i, j) is the additive bias
/// for key i, query j. Upper triangle (i > j) is -inf.
template <typename S>
MatX<S> alibi_causal_bias(int T, double slope) {
  MatX<S> b(T, T);
  const S ninf = -std::numeric_limits<S>::infinity();
  for (int j = 0; j < T; ++j)
    for (int i = 0; i < T; ++i)
      b(i, j) = i <= j ? static_cast<S>(-slope * (j - i)) : ninf;
  return b;
}

/// Multi-head causal self-attention with ALiBi relative positions.
template <typename S>
struct CausalSelfAttention {
  Linear<S> qkv, out;
  int dim = 0, heads = 0;

  static CausalSelfAttention make(ParamStore<S>& ps, RngStream& rng,
                                  const std::string& prefix, int dim, int heads) {
    if (dim % heads != 0) throw std::invalid_argument("attention: dim % heads != 0");
    CausalSelfAttention a;
    a.dim = dim;
    a.heads = heads;
    a.qkv = Linear<S>::make(ps, rng, prefix + ".qkv", dim, 3 * dim);
    a.out = Linear<S>::make(ps, rng, prefix + ".out", dim, dim);
    return a;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    const int T = t.cols(x);
    const int dh = dim / heads;
    const S scl = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Var proj = qkv(t, p, x);  // [3*dim x T]
    const auto slopes = alibi_slopes(heads);
    Var merged;
    for (int h = 0; h < heads; ++h) {
      Var q = slice_rows(t, proj, h * dh, dh);
      Var k = slice_rows(t, proj, dim + h * dh, dh);
      Var v = slice_rows(t, proj, 2 * dim + h * dh, dh);
      Var scores = scale(t, matmul(t, transpose(t, k), q), scl);  // [T x T], (key, query)
      Var biased = add(t, scores, t.constant(alibi_causal_bias<S>(T, slopes[h])));
      Var attn = colwise_softmax(t, biased);
      Var oh = matmul(t, v, attn);  // [dh x T]
      merged = h == 0 ? oh : concat_rows(t, merged, oh);
    }
    return out(t, p, merged);
  }
};

/// Transformer block, Post-LN: normalization applied after each residual add.
template <typename S>
struct TransformerLayer {
  CausalSelfAttention<S> attn;
  Linear<S> ff1, ff2;
  RMSNorm<S> norm1, norm2;

  static TransformerLayer make(ParamStore<S>& ps, RngStream& rng,
                               const std::string& prefix, int dim, int heads, int ff) {
    TransformerLayer l;
    l.attn = CausalSelfAttention<S>::make(ps, rng, prefix + ".attn", dim, heads);
    l.ff1 = Linear<S>::make(ps, rng, prefix + ".ff1", dim, ff);
    l.ff2 = Linear<S>::make(ps, rng, prefix + ".ff2", ff, dim);
    l.norm1 = RMSNorm<S>::make(ps, prefix + ".norm1", dim);
    l.norm2 = RMSNorm<S>::make(ps, prefix + ".norm2", dim);
    return l;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    Var h = norm1(t, p, add(t, x, attn(t, p, x)));
    Var f = ff2(t, p, gelu(t, ff1(t, p, h)));
    return norm2(t, p, add(t, h, f));
  }
};

/// FiLM conditioning: h -> gain(ctx) * h + shift(ctx), per frame.
template <typename S>
struct Film {
  Linear<S> to_gain, to_shift;

  static Film make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                   int ctx_dim, int width) {
    Film f;
    f.to_gain = Linear<S>::make(ps, rng, prefix + ".gain", ctx_dim, width, /*zero_init=*/true);
    f.to_shift = Linear<S>::make(ps, rng, prefix + ".shift", ctx_dim, width, /*zero_init=*/true);
    return f;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var h, Var ctx) const {
    Var g = add_const(t, to_gain(t, p, ctx), S(1));
    return add(t, mul(t, g, h), to_shift(t, p, ctx));
  }
};

}  // namespace vslm
