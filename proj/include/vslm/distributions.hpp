#pragma once

#include <cmath>
#include <stdexcept>

#include "vslm/rng.hpp"
#include "vslm/tape.hpp"
#include "vslm/types.hpp"

namespace vslm {

inline constexpr double kLogStdMin = -7.0;
inline constexpr double kLogStdMax = 5.0;
inline constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * log(2*pi)

/// Diagonal Gaussian over a single frame. log_std entries are kept inside
/// [-7, 5] to bound KL and likelihood terms.
template <typename S>
struct DiagGaussian {
  VecX<S> mean;
  VecX<S> log_std;

  int dim() const { return static_cast<int>(mean.size()); }

  void clamp_log_std() {
    log_std = log_std.cwiseMax(S(kLogStdMin)).cwiseMin(S(kLogStdMax));
  }

  void check(const DiagGaussian& other, const char* op) const {
    if (mean.size() != other.mean.size())
      throw std::invalid_argument(std::string(op) + ": dimension mismatch");
  }
};

/// Per-frame diagonal Gaussians for a whole sequence, one column per frame.
template <typename S>
struct GaussianSeq {
  MatX<S> means;     // [d x T]
  MatX<S> log_stds;  // [d x T]

  int dim() const { return static_cast<int>(means.rows()); }
  int length() const { return static_cast<int>(means.cols()); }

  DiagGaussian<S> at(int t) const { return {means.col(t), log_stds.col(t)}; }
};

template <typename S>
S log_prob(const DiagGaussian<S>& g, const VecX<S>& x) {
  if (x.size() != g.mean.size()) throw std::invalid_argument("log_prob: dimension mismatch");
  const auto z = (x - g.mean).array() * (-g.log_std.array()).exp();
  return (-g.log_std.array() - S(kHalfLog2Pi) - S(0.5) * z.square()).sum();
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over dims.
/// Exactly 0 when the parameters coincide.
template <typename S>
S kl_divergence(const DiagGaussian<S>& q, const DiagGaussian<S>& p) {
  q.check(p, "kl_divergence");
  const auto lq = q.log_std.array(), lp = p.log_std.array();
  const auto var_ratio = ((lq - lp) * S(2)).exp();
  const auto md = (q.mean - p.mean).array() * (-lp).exp();
  return ((lp - lq) + S(0.5) * (var_ratio + md.square() - S(1))).sum();
}

template <typename S>
VecX<S> reparameterized_sample(const DiagGaussian<S>& g, const VecX<S>& noise) {
  if (noise.size() != g.mean.size())
    throw std::invalid_argument("reparameterized_sample: dimension mismatch");
  return g.mean.array() + g.log_std.array().exp() * noise.array();
}

template <typename S>
VecX<S> sample(const DiagGaussian<S>& g, RngStream& rng) {
  VecX<S> noise(g.dim());
  for (int i = 0; i < g.dim(); ++i) noise(i) = static_cast<S>(rng.normal());
  return reparameterized_sample(g, noise);
}

/// Multiplies the standard deviation by tau (the sampling temperature).
template <typename S>
DiagGaussian<S> scale_temperature(const DiagGaussian<S>& g, S tau) {
  if (!(tau > S(0))) throw std::invalid_argument("scale_temperature: tau must be > 0");
  DiagGaussian<S> out{g.mean, g.log_std.array() + std::log(tau)};
  out.clamp_log_std();
  return out;
}

// ---------------------------------------------------------------------------
// Sequence-level helpers (plain and on-tape). The tape variants reproduce
// the closed forms above so gradients flow through training losses.
// ---------------------------------------------------------------------------

/// Per-frame Gaussian log densities: mean/log_std [d x T], x [d x T] -> [1 x T].
template <typename S>
Var gaussian_log_prob_cols(Tape<S>& t, Var mean, Var log_std, Var x) {
  Var diff = sub(t, x, mean);
  Var inv_var = exp(t, scale(t, log_std, S(-2)));
  Var quad = mul(t, square(t, diff), inv_var);
  Var per = sub(t, neg(t, log_std), scale(t, add_const(t, quad, S(2) * S(kHalfLog2Pi)), S(0.5)));
  return colwise_sum(t, per);
}

/// Per-frame closed-form KL between two Gaussian sequences -> [1 x T].
template <typename S>
Var gaussian_kl_cols(Tape<S>& t, Var q_mean, Var q_log_std, Var p_mean, Var p_log_std) {
  Var ldiff = sub(t, q_log_std, p_log_std);
  Var var_ratio = exp(t, scale(t, ldiff, S(2)));
  Var md = mul(t, sub(t, q_mean, p_mean), exp(t, neg(t, p_log_std)));
  Var inner = add_const(t, add(t, var_ratio, square(t, md)), S(-1));
  Var per = add(t, neg(t, ldiff), scale(t, inner, S(0.5)));
  return colwise_sum(t, per);
}

/// z = mean + exp(log_std) .* noise, with noise a constant.
template <typename S>
Var reparameterize(Tape<S>& t, Var mean, Var log_std, const MatX<S>& noise) {
  return add(t, mean, mul(t, exp(t, log_std), t.constant(noise)));
}

}  // namespace vslm
