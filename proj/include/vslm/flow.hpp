#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "vslm/distributions.hpp"
#include "vslm/nn.hpp"
#include "vslm/tape.hpp"

namespace vslm {

/// One affine coupling block. The conditioner reads the pass-through half
/// plus per-frame context (FiLM) and emits shift / bounded log-scale for
/// the other half. A zero-initialized output layer makes the block the
/// identity at construction, so an untrained flow leaves densities exact.
template <typename S>
struct CouplingBlock {
  Linear<S> lin1, lin2;
  Film<S> film;
  bool swap_order = false;  // which half passes through
  int dim = 0, half = 0;
  S s_max = S(3);

  static CouplingBlock make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                            int dim, int ctx_dim, int width, bool swap, S s_max) {
    if (dim % 2 != 0) throw std::invalid_argument("CouplingBlock: dim must be even");
    CouplingBlock b;
    b.dim = dim;
    b.half = dim / 2;
    b.swap_order = swap;
    b.s_max = s_max;
    b.lin1 = Linear<S>::make(ps, rng, prefix + ".lin1", b.half, width);
    b.film = Film<S>::make(ps, rng, prefix + ".film", ctx_dim, width);
    b.lin2 = Linear<S>::make(ps, rng, prefix + ".lin2", width, dim, /*zero_init=*/true);
    return b;
  }

  // shift and log_scale from the pass-through half, all frames at once
  std::pair<Var, Var> conditioner(Tape<S>& t, const VarPack& p, Var z_pass, Var ctx) const {
    Var h = gelu(t, lin1(t, p, z_pass));
    h = film(t, p, h, ctx);
    Var o = lin2(t, p, h);
    Var shift = slice_rows(t, o, 0, half);
    Var log_scale = scale(t, tanh(t, scale(t, slice_rows(t, o, half, half), S(1) / s_max)), s_max);
    return {shift, log_scale};
  }

  // plain-Eigen conditioner for the sampling (inverse) path
  std::pair<MatX<S>, MatX<S>> conditioner_plain(const ParamStore<S>& ps, const MatX<S>& z_pass,
                                                const MatX<S>& ctx) const {
    MatX<S> h = (ps[lin1.W] * z_pass).colwise() + ps[lin1.b].col(0);
    // GELU (tanh approximation), kept in sync with the tape op
    constexpr double kC = 0.7978845608028654, kA = 0.044715;
    h = (S(0.5) * h.array() * (S(1) + (S(kC) * (h.array() + S(kA) * h.array().cube())).tanh()))
            .matrix();
    MatX<S> gain =
        ((ps[film.to_gain.W] * ctx).colwise() + ps[film.to_gain.b].col(0)).array() + S(1);
    MatX<S> sh = (ps[film.to_shift.W] * ctx).colwise() + ps[film.to_shift.b].col(0);
    h = h.cwiseProduct(gain) + sh;
    MatX<S> o = (ps[lin2.W] * h).colwise() + ps[lin2.b].col(0);
    MatX<S> shift = o.topRows(half);
    MatX<S> log_scale = (s_max * (o.bottomRows(half) / s_max).array().tanh()).matrix();
    return {shift, log_scale};
  }
};

/// Stack of coupling blocks shared across time, conditioned per frame.
/// Forward maps data-side z to base noise u (the density direction);
/// sampling runs the inverse.
template <typename S>
struct FlowStack {
  std::vector<CouplingBlock<S>> blocks;
  int dim = 0, ctx_dim = 0;

  bool identity() const { return blocks.empty(); }

  static FlowStack make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                        int n_blocks, int dim, int ctx_dim, int width, S s_max = S(3)) {
    FlowStack f;
    f.dim = dim;
    f.ctx_dim = ctx_dim;
    for (int i = 0; i < n_blocks; ++i)
      f.blocks.push_back(CouplingBlock<S>::make(ps, rng, prefix + ".block" + std::to_string(i),
                                                dim, ctx_dim, width, i % 2 == 1, s_max));
    return f;
  }

  /// z [d x T], ctx [d_ctx x T] -> (u [d x T], log_det [1 x T]).
  std::pair<Var, Var> forward(Tape<S>& t, const VarPack& p, Var z, Var ctx) const {
    if (t.rows(z) != dim) throw std::invalid_argument("FlowStack::forward: dim mismatch");
    if (!blocks.empty() && t.rows(ctx) != ctx_dim)
      throw std::invalid_argument("FlowStack::forward: ctx dim mismatch");
    Var u = z;
    Var log_det = t.constant(MatX<S>::Zero(1, t.cols(z)));
    int bi = 0;
    for (const auto& b : blocks) {
      const int h = b.half;
      Var pass = slice_rows(t, u, b.swap_order ? h : 0, h);
      Var act = slice_rows(t, u, b.swap_order ? 0 : h, h);
      auto [shift, ls] = b.conditioner(t, p, pass, ctx);
      Var out = add(t, mul(t, act, exp(t, ls)), shift);
      if (!t.val(out).allFinite())
        throw std::runtime_error("FlowStack::forward: non-finite output at block " +
                                 std::to_string(bi));
      u = b.swap_order ? concat_rows(t, out, pass) : concat_rows(t, pass, out);
      log_det = add(t, log_det, colwise_sum(t, ls));
      ++bi;
    }
    return {u, log_det};
  }

  /// Exact inverse, plain Eigen (sampling needs no gradients).
  /// Returns z and the accumulated forward-direction log_det at z.
  std::pair<MatX<S>, MatX<S>> inverse(const ParamStore<S>& ps, const MatX<S>& u,
                                      const MatX<S>& ctx) const {
    if (u.rows() != dim) throw std::invalid_argument("FlowStack::inverse: dim mismatch");
    MatX<S> z = u;
    MatX<S> log_det = MatX<S>::Zero(1, u.cols());
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
      const auto& b = *it;
      const int h = b.half;
      MatX<S> pass = b.swap_order ? z.bottomRows(h) : z.topRows(h);
      MatX<S> act = b.swap_order ? z.topRows(h) : z.bottomRows(h);
      auto [shift, ls] = b.conditioner_plain(ps, pass, ctx);
      MatX<S> orig = (act - shift).cwiseProduct((-ls.array()).exp().matrix());
      if (!orig.allFinite())
        throw std::runtime_error("FlowStack::inverse: non-finite output at block " +
                                 std::to_string(static_cast<int>(blocks.rend() - it) - 1));
      if (b.swap_order) {
        z.topRows(h) = orig;
        z.bottomRows(h) = pass;
      } else {
        z.topRows(h) = pass;
        z.bottomRows(h) = orig;
      }
      log_det.array() += ls.colwise().sum().array();
    }
    return {z, log_det};
  }

  /// Plain forward for evaluation paths (scoring without gradients).
  std::pair<MatX<S>, MatX<S>> forward_plain(const ParamStore<S>& ps, const MatX<S>& z,
                                            const MatX<S>& ctx) const {
    MatX<S> u = z;
    MatX<S> log_det = MatX<S>::Zero(1, z.cols());
    for (const auto& b : blocks) {
      const int h = b.half;
      MatX<S> pass = b.swap_order ? u.bottomRows(h) : u.topRows(h);
      MatX<S> act = b.swap_order ? u.topRows(h) : u.bottomRows(h);
      auto [shift, ls] = b.conditioner_plain(ps, pass, ctx);
      MatX<S> out = act.cwiseProduct(ls.array().exp().matrix()) + shift;
      if (b.swap_order)
        u.topRows(h) = out;
      else
        u.bottomRows(h) = out;
      log_det.array() += ls.colwise().sum().array();
    }
    return {u, log_det};
  }
};

/// log p(z) under base-Gaussian-through-flow, per frame: [1 x T].
/// With an identity (empty) flow this is exactly the base log density.
template <typename S>
Var flow_log_prob_cols(Tape<S>& t, const FlowStack<S>& fs, const VarPack& p, Var z,
                       Var base_mean, Var base_log_std, Var ctx) {
  auto [u, log_det] = fs.forward(t, p, z, ctx);
  return add(t, gaussian_log_prob_cols(t, base_mean, base_log_std, u), log_det);
}

/// Plain-Eigen per-frame flow log density for scoring paths.
template <typename S>
VecX<S> flow_log_prob_plain(const FlowStack<S>& fs, const ParamStore<S>& ps, const MatX<S>& z,
                            const MatX<S>& base_mean, const MatX<S>& base_log_std,
                            const MatX<S>& ctx) {
  auto [u, log_det] = fs.forward_plain(ps, z, ctx);
  const int T = static_cast<int>(z.cols());
  VecX<S> lp(T);
  for (int j = 0; j < T; ++j) {
    DiagGaussian<S> g{base_mean.col(j), base_log_std.col(j)};
    lp(j) = log_prob(g, VecX<S>(u.col(j))) + log_det(0, j);
  }
  return lp;
}

/// Draws z by sampling the temperature-scaled base and inverting the flow.
/// The temperature multiplies the standard deviation directly (no floor),
/// so the tau -> 0 limit is exactly inverse(base mean).
template <typename S>
MatX<S> flow_sample(const FlowStack<S>& fs, const ParamStore<S>& ps, const MatX<S>& base_mean,
                    const MatX<S>& base_log_std, const MatX<S>& ctx, S tau, RngStream& rng) {
  if (!(tau > S(0))) throw std::invalid_argument("flow_sample: tau must be > 0");
  MatX<S> std = base_log_std.cwiseMin(S(kLogStdMax)).array().exp() * tau;
  MatX<S> noise = standard_normal<S>(rng, base_mean.rows(), base_mean.cols());
  MatX<S> u = base_mean.array() + std.array() * noise.array();
  return fs.inverse(ps, u, ctx).first;
}

}  // namespace vslm
