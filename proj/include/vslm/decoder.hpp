#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vslm/encoder.hpp"
#include "vslm/nn.hpp"
#include "vslm/rng.hpp"

namespace vslm {

/// Cosine noise schedule. alpha_bar has n_steps + 1 entries with
/// alpha_bar[0] = 1, rebuilt from betas clipped at 0.999 so the product
/// form stays consistent.
template <typename S>
struct DiffusionSchedule {
  int n_steps = 1000;
  VecX<S> alpha_bar;  // [n_steps + 1]

  void validate() const {
    if (alpha_bar.size() != n_steps + 1) throw std::invalid_argument("schedule: bad length");
    if (alpha_bar(0) != S(1)) throw std::invalid_argument("schedule: alpha_bar[0] must be 1");
    for (int s = 1; s <= n_steps; ++s)
      if (!(alpha_bar(s) < alpha_bar(s - 1) && alpha_bar(s) > S(0)))
        throw std::invalid_argument("schedule: alpha_bar must decrease into (0,1)");
  }
};

template <typename S>
DiffusionSchedule<S> make_cosine_schedule(int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("make_cosine_schedule: n_steps must be >= 1");
  auto f = [&](double s) {
    const double x = (s / n_steps + 0.008) / 1.008 * (M_PI / 2);
    return std::cos(x) * std::cos(x);
  };
  DiffusionSchedule<S> sched;
  sched.n_steps = n_steps;
  sched.alpha_bar.resize(n_steps + 1);
  sched.alpha_bar(0) = S(1);
  double prev = 1.0;
  const double f0 = f(0);
  for (int s = 1; s <= n_steps; ++s) {
    const double beta = std::min(1.0 - f(s) / f0 / prev, 0.999);
    prev *= 1.0 - beta;
    sched.alpha_bar(s) = static_cast<S>(prev);
  }
  sched.validate();
  return sched;
}

/// Decoder residual block: the conditioning projection is added to the
/// block input, the step embedding to the first convolution's output.
template <typename S>
struct DecoderResBlock {
  Conv1d<S> conv1, conv2;
  InstanceNorm<S> norm1, norm2;
  Linear<S> cond_proj;  // d_cond -> width
  Linear<S> step_proj;  // step_emb -> width

  static DecoderResBlock make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                              int width, int d_cond, int d_step, int ksize) {
    DecoderResBlock b;
    b.conv1 = Conv1d<S>::make(ps, rng, prefix + ".conv1", width, width, ksize);
    b.norm1 = InstanceNorm<S>::make(ps, prefix + ".norm1", width);
    b.conv2 = Conv1d<S>::make(ps, rng, prefix + ".conv2", width, width, ksize);
    b.norm2 = InstanceNorm<S>::make(ps, prefix + ".norm2", width);
    b.cond_proj = Linear<S>::make(ps, rng, prefix + ".cond", d_cond, width);
    b.step_proj = Linear<S>::make(ps, rng, prefix + ".step", d_step, width);
    return b;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x, Var cond, Var step_emb) const {
    Var in = add(t, x, cond_proj(t, p, cond));
    Var h = conv1(t, p, in);
    h = add(t, h, broadcast_cols(t, step_proj(t, p, step_emb), t.cols(h)));
    h = gelu(t, norm1(t, p, h));
    h = norm2(t, p, conv2(t, p, h));
    return add(t, h, in);
  }
};

/// Noise-prediction network: six residual conv blocks in a U arrangement
/// (early block outputs are added back on the way up), sinusoidal step
/// embedding per block, per-frame conditioning added at each block input.
template <typename S>
struct DiffusionDecoder {
  Conv1d<S> in_proj, out_proj;
  std::vector<DecoderResBlock<S>> blocks;
  int d_x = 0, width = 0, d_cond = 0, d_step = 32;

  static DiffusionDecoder make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                               int d_x, int width, int d_cond, int d_step = 32, int ksize = 7,
                               int n_blocks = 6) {
    DiffusionDecoder d;
    d.d_x = d_x;
    d.width = width;
    d.d_cond = d_cond;
    d.d_step = d_step;
    d.in_proj = Conv1d<S>::make(ps, rng, prefix + ".in_proj", d_x, width, ksize);
    for (int i = 0; i < n_blocks; ++i)
      d.blocks.push_back(DecoderResBlock<S>::make(ps, rng, prefix + ".block" + std::to_string(i),
                                                  width, d_cond, d_step, ksize));
    // zero-initialized output keeps the initial noise prediction at zero
    d.out_proj = Conv1d<S>::make(ps, rng, prefix + ".out_proj", width, d_x, ksize,
                                 /*stride=*/1, /*zero_init=*/true);
    return d;
  }

  MatX<S> step_embedding(int step) const {
    MatX<S> e(d_step, 1);
    for (int i = 0; i < d_step / 2; ++i) {
      const double w = std::pow(10000.0, -2.0 * i / d_step);
      e(2 * i, 0) = static_cast<S>(std::sin(step * w));
      e(2 * i + 1, 0) = static_cast<S>(std::cos(step * w));
    }
    return e;
  }

  /// Predicts the noise in x_noisy given the conditioning pack [d_cond x T].
  Var operator()(Tape<S>& t, const VarPack& p, Var x_noisy, int step, Var cond) const {
    Var se = t.constant(step_embedding(step));
    Var h0 = in_proj(t, p, x_noisy);
    Var o1 = blocks[0](t, p, h0, cond, se);
    Var o2 = blocks[1](t, p, o1, cond, se);
    Var o3 = blocks[2](t, p, o2, cond, se);
    Var o4 = blocks[3](t, p, o3, cond, se);
    Var o5 = blocks[4](t, p, add(t, o4, o2), cond, se);  // skips mirror the down path
    Var o6 = blocks[5](t, p, add(t, o5, o1), cond, se);
    return out_proj(t, p, add(t, o6, h0));
  }
};

/// x_noisy = sqrt(ab[s]) x + sqrt(1 - ab[s]) eps.
template <typename S>
MatX<S> forward_noising(const DiffusionSchedule<S>& sched, const MatX<S>& x, int step,
                        const MatX<S>& eps) {
  if (step < 1 || step > sched.n_steps)
    throw std::invalid_argument("forward_noising: step out of range");
  const S ab = sched.alpha_bar(step);
  return std::sqrt(ab) * x + std::sqrt(S(1) - ab) * eps;
}

/// L1 noise-prediction loss at one diffusion step (the O_rec surrogate).
template <typename S>
Var ddpm_loss(Tape<S>& t, const DiffusionDecoder<S>& dec, const VarPack& p,
              const DiffusionSchedule<S>& sched, const MatX<S>& x0, int step,
              const MatX<S>& eps, Var cond) {
  MatX<S> x_noisy = forward_noising(sched, x0, step, eps);
  Var pred = dec(t, p, t.constant(x_noisy), step, cond);
  return mean_all(t, abs(t, sub(t, pred, t.constant(eps))));
}

/// Plain-Eigen epsilon prediction for the samplers.
template <typename S>
MatX<S> predict_noise(const DiffusionDecoder<S>& dec, const ParamStore<S>& ps,
                      const MatX<S>& x_noisy, int step, const MatX<S>& cond) {
  Tape<S> t;
  VarPack p = lift(t, ps, false);
  Var out = dec(t, p, t.constant(x_noisy), step, t.constant(cond));
  return t.val(out);
}

/// DDIM over an evenly strided step subsequence; eta interpolates from
/// deterministic (0) to DDPM-like (1). Operates in standardized space.
template <typename S>
MatX<S> ddim_sample(const DiffusionDecoder<S>& dec, const ParamStore<S>& ps,
                    const DiffusionSchedule<S>& sched, const MatX<S>& cond, int T,
                    int n_infer_steps, double eta, RngStream& rng) {
  if (n_infer_steps < 1 || n_infer_steps > sched.n_steps)
    throw std::invalid_argument("ddim_sample: invalid step count");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_sample: eta must be in [0,1]");

  std::vector<int> taus(n_infer_steps + 1);
  for (int i = 0; i <= n_infer_steps; ++i)
    taus[i] = static_cast<int>(std::llround(double(i) * sched.n_steps / n_infer_steps));
  taus[0] = 0;
  taus[n_infer_steps] = sched.n_steps;

  MatX<S> x = standard_normal<S>(rng, dec.d_x, T);
  for (int i = n_infer_steps; i >= 1; --i) {
    const int s = taus[i], s_prev = taus[i - 1];
    const double ab = sched.alpha_bar(s), ab_prev = sched.alpha_bar(s_prev);
    MatX<S> eps = predict_noise(dec, ps, x, s, cond);
    MatX<S> x0 = (x - std::sqrt(S(1) - S(ab)) * eps) / std::sqrt(S(ab));
    const double sigma =
        eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    x = std::sqrt(S(ab_prev)) * x0 + S(dir) * eps;
    if (sigma > 0) x += S(sigma) * standard_normal<S>(rng, dec.d_x, T);
  }
  return x;
}

/// Ancestral DDPM sampling over every step; the distributional reference
/// for the eta = 1 DDIM check.
template <typename S>
MatX<S> ddpm_sample(const DiffusionDecoder<S>& dec, const ParamStore<S>& ps,
                    const DiffusionSchedule<S>& sched, const MatX<S>& cond, int T,
                    RngStream& rng) {
  MatX<S> x = standard_normal<S>(rng, dec.d_x, T);
  for (int s = sched.n_steps; s >= 1; --s) {
    const double ab = sched.alpha_bar(s), ab_prev = sched.alpha_bar(s - 1);
    const double alpha = ab / ab_prev;
    const double beta = 1.0 - alpha;
    MatX<S> eps = predict_noise(dec, ps, x, s, cond);
    x = (x - S(beta / std::sqrt(1.0 - ab)) * eps) / S(std::sqrt(alpha));
    if (s > 1) {
      const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      x += S(sigma) * standard_normal<S>(rng, dec.d_x, T);
    }
  }
  return x;
}

}  // namespace vslm
