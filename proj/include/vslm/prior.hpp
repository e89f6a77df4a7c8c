#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vslm/distributions.hpp"
#include "vslm/flow.hpp"
#include "vslm/nn.hpp"
#include "vslm/types.hpp"

namespace vslm {

/// Autoregressive model over the joint stream: a causal transformer with
/// ALiBi relative positions reads (z^d_{t-1}, z^c_{t-1}) pairs behind a
/// learned BOS element; two heads predict the next token's logits and the
/// next latent's base Gaussian, and the last-layer state feeds the flow
/// conditioner.
template <typename S>
struct PriorNet {
  Variant variant = Variant::kFull;
  int k = 0, d_z = 0, dim = 0, d_tok_emb = 0;

  int tok_emb = -1;  // [d_tok_emb x k]
  int bos = -1;      // [dim x 1]
  Linear<S> in_proj;
  std::vector<TransformerLayer<S>> layers;
  Linear<S> head_tok;
  Linear<S> head_mean, head_log_std;

  bool has_tokens() const { return variant != Variant::kTokenFree; }
  bool has_latents() const { return variant != Variant::kTokenOnly; }

  static PriorNet make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                       Variant variant, int k, int d_z, int dim, int heads, int ff,
                       int n_layers, int d_tok_emb) {
    PriorNet n;
    n.variant = variant;
    n.k = k;
    n.d_z = d_z;
    n.dim = dim;
    n.d_tok_emb = d_tok_emb;
    int d_in = 0;
    if (n.has_tokens()) {
      n.tok_emb = ps.add(prefix + ".tok_emb", init::normal<S>(rng, d_tok_emb, k, 0.5));
      d_in += d_tok_emb;
    }
    if (n.has_latents()) d_in += d_z;
    n.in_proj = Linear<S>::make(ps, rng, prefix + ".in_proj", d_in, dim);
    n.bos = ps.add(prefix + ".bos", init::normal<S>(rng, dim, 1, 0.5));
    for (int i = 0; i < n_layers; ++i)
      n.layers.push_back(TransformerLayer<S>::make(ps, rng, prefix + ".layer" + std::to_string(i),
                                                   dim, heads, ff));
    if (n.has_tokens()) n.head_tok = Linear<S>::make(ps, rng, prefix + ".head_tok", dim, k);
    if (n.has_latents()) {
      n.head_mean = Linear<S>::make(ps, rng, prefix + ".head_mean", dim, d_z);
      n.head_log_std = Linear<S>::make(ps, rng, prefix + ".head_log_std", dim, d_z);
    }
    return n;
  }

  struct Output {
    Var ctx;                       // [dim x T], last-layer state o_t
    Var token_logits;              // [k x T] when the variant has tokens
    Var base_mean, base_log_std;   // [d_z x T] when the variant has latents
  };

  /// Teacher-forced forward. Output position t is a function of frames
  /// 1..t-1 only (strict causality via the BOS shift + causal mask).
  /// `latents` must be valid iff the variant has latents; `tokens`
  /// likewise. Sequence length T is taken from whichever is present.
  Output operator()(Tape<S>& t, const VarPack& p, const std::vector<std::int32_t>* tokens,
                    std::optional<Var> latents) const {
    int T = 0;
    if (has_latents()) {
      if (!latents) throw std::invalid_argument("prior: latents required for this variant");
      T = t.cols(*latents);
    }
    if (has_tokens()) {
      if (!tokens) throw std::invalid_argument("prior: tokens required for this variant");
      if (T != 0 && static_cast<int>(tokens->size()) != T)
        throw std::invalid_argument("prior: token/latent length mismatch");
      T = static_cast<int>(tokens->size());
      for (auto tok : *tokens)
        if (tok < 0 || tok >= k) throw std::invalid_argument("prior: token out of range");
    }
    if (T == 0) throw std::invalid_argument("prior: empty sequence");

    Var x;  // [dim x T]
    if (T == 1) {
      x = broadcast_cols(t, p[bos], 1);
    } else {
      Var in;
      if (has_tokens()) {
        std::vector<int> shifted(tokens->begin(), tokens->end() - 1);
        in = gather_cols(t, p[tok_emb], shifted);
      }
      if (has_latents()) {
        Var lat = slice_cols(t, *latents, 0, T - 1);
        in = has_tokens() ? concat_rows(t, in, lat) : lat;
      }
      x = concat_cols(t, broadcast_cols(t, p[bos], 1), in_proj(t, p, in));
    }
    for (const auto& l : layers) x = l(t, p, x);

    Output out;
    out.ctx = x;
    if (has_tokens()) out.token_logits = head_tok(t, p, x);
    if (has_latents()) {
      out.base_mean = head_mean(t, p, x);
      out.base_log_std = clamp(t, head_log_std(t, p, x), S(kLogStdMin), S(kLogStdMax));
    }
    return out;
  }
};

/// Per-step categorical negative log-likelihood, averaged over frames.
template <typename S>
Var token_nll(Tape<S>& t, Var logits, const std::vector<std::int32_t>& tokens) {
  if (static_cast<int>(tokens.size()) != t.cols(logits))
    throw std::invalid_argument("token_nll: length mismatch");
  std::vector<int> idx(tokens.begin(), tokens.end());
  Var lse = colwise_logsumexp(t, logits);
  Var picked = select_rows_per_col(t, logits, idx);
  return mean_all(t, sub(t, lse, picked));
}

/// Monte-Carlo estimate of the per-step continuous KL through the flow,
/// averaged over frames: mean_t (1/n_mc) sum_i [log q(z_i) - log p(z_i)].
/// With an identity flow the exact closed form is used instead.
template <typename S>
Var continuous_kl(Tape<S>& t, const FlowStack<S>& flow, const VarPack& p, Var q_mean,
                  Var q_log_std, Var base_mean, Var base_log_std, Var ctx, int n_mc,
                  RngStream& rng) {
  if (flow.identity())
    return mean_all(t, gaussian_kl_cols(t, q_mean, q_log_std, base_mean, base_log_std));
  if (n_mc < 1) throw std::invalid_argument("continuous_kl: n_mc must be >= 1");
  Var acc;
  for (int i = 0; i < n_mc; ++i) {
    MatX<S> noise = standard_normal<S>(rng, t.rows(q_mean), t.cols(q_mean));
    Var z = reparameterize(t, q_mean, q_log_std, noise);
    Var lq = gaussian_log_prob_cols(t, q_mean, q_log_std, z);
    Var lp = flow_log_prob_cols(t, flow, p, z, base_mean, base_log_std, ctx);
    Var diff = sub(t, lq, lp);
    acc = i == 0 ? diff : add(t, acc, diff);
  }
  return mean_all(t, scale(t, acc, S(1) / S(n_mc)));
}

/// KL estimate that reuses an existing latent sample (the teacher-forcing
/// trajectory), the n_mc = 1 training path.
template <typename S>
Var continuous_kl_at(Tape<S>& t, const FlowStack<S>& flow, const VarPack& p, Var q_mean,
                     Var q_log_std, Var z, Var base_mean, Var base_log_std, Var ctx) {
  if (flow.identity())
    return mean_all(t, gaussian_kl_cols(t, q_mean, q_log_std, base_mean, base_log_std));
  Var lq = gaussian_log_prob_cols(t, q_mean, q_log_std, z);
  Var lp = flow_log_prob_cols(t, flow, p, z, base_mean, base_log_std, ctx);
  return mean_all(t, sub(t, lq, lp));
}

enum class LikelihoodMode { kTokensOnly, kLatentsOnly, kJoint };

inline LikelihoodMode likelihood_mode_from_name(const std::string& s) {
  if (s == "tokens_only") return LikelihoodMode::kTokensOnly;
  if (s == "latents_only") return LikelihoodMode::kLatentsOnly;
  if (s == "joint") return LikelihoodMode::kJoint;
  throw std::invalid_argument("unknown likelihood mode: " + s);
}

/// Length-normalized model log-likelihood of the selected stream(s).
/// Latents are evaluated through the flow (exact change of variables).
template <typename S>
double sequence_log_likelihood(const PriorNet<S>& prior, const FlowStack<S>& flow,
                               const ParamStore<S>& ps, const TokenSeq* tokens,
                               const MatX<S>* latents, LikelihoodMode mode) {
  const bool want_tok = mode != LikelihoodMode::kLatentsOnly;
  const bool want_lat = mode != LikelihoodMode::kTokensOnly;
  if (want_tok && (!tokens || !prior.has_tokens()))
    throw std::invalid_argument("sequence_log_likelihood: tokens unavailable");
  if (want_lat && (!latents || !prior.has_latents()))
    throw std::invalid_argument("sequence_log_likelihood: latents unavailable");

  Tape<S> t;
  VarPack p = lift(t, ps, false);
  std::optional<Var> lat;
  if (prior.has_latents()) {
    if (!latents) throw std::invalid_argument("sequence_log_likelihood: latents required");
    lat = t.constant(*latents);
  }
  auto out = prior(t, p, prior.has_tokens() ? &tokens->tokens : nullptr, lat);
  const int T = t.cols(out.ctx);

  double total = 0;
  if (want_tok) {
    std::vector<int> idx(tokens->tokens.begin(), tokens->tokens.end());
    Var lse = colwise_logsumexp(t, out.token_logits);
    Var picked = select_rows_per_col(t, out.token_logits, idx);
    total += (t.val(picked) - t.val(lse)).sum();
  }
  if (want_lat) {
    Var lp = flow_log_prob_cols(t, flow, p, *lat, out.base_mean, out.base_log_std, out.ctx);
    total += t.val(lp).sum();
  }
  return total / T;
}

/// Greedy (tau_d -> 0) token choice used in tests: argmax with ties to the
/// lowest index.
template <typename S>
std::int32_t argmax_token(const VecX<S>& logits) {
  int best = 0;
  for (int c = 1; c < logits.size(); ++c)
    if (logits(c) > logits(best)) best = c;
  return static_cast<std::int32_t>(best);
}

/// One sampling step: token from tempered softmax, latent through the
/// flow at the continuous temperature. The prefix is teacher-forced.
template <typename S>
std::pair<std::int32_t, VecX<S>> prior_sample_step(const PriorNet<S>& prior,
                                                   const FlowStack<S>& flow,
                                                   const ParamStore<S>& ps,
                                                   const TokenSeq* prefix_tokens,
                                                   const MatX<S>* prefix_latents, S tau_d,
                                                   S tau_c, RngStream& rng) {
  if (prior.has_tokens() && !(tau_d > S(0)))
    throw std::invalid_argument("prior_sample_step: tau_d must be > 0");
  if (prior.has_latents() && !(tau_c > S(0)))
    throw std::invalid_argument("prior_sample_step: tau_c must be > 0");

  // the prediction target is the frame after the prefix: run on length
  // prefix+1 with a placeholder final element (causality ignores it)
  const int T_prev =
      prior.has_tokens() ? prefix_tokens->length()
                         : static_cast<int>(prefix_latents->cols());
  const int T = T_prev + 1;

  Tape<S> t;
  VarPack p = lift(t, ps, false);
  std::vector<std::int32_t> toks;
  std::optional<Var> lat;
  if (prior.has_tokens()) {
    toks = prefix_tokens->tokens;
    toks.push_back(0);  // placeholder
  }
  if (prior.has_latents()) {
    MatX<S> padded(prior.d_z, T);
    if (T_prev > 0) padded.leftCols(T_prev) = *prefix_latents;
    padded.col(T - 1).setZero();  // placeholder
    lat = t.constant(padded);
  }
  auto out = prior(t, p, prior.has_tokens() ? &toks : nullptr, lat);

  std::int32_t token = 0;
  if (prior.has_tokens()) {
    VecX<S> logits = t.val(out.token_logits).col(T - 1);
    if (tau_d < S(1e-6)) {
      token = argmax_token(logits);  // ties resolve to the lowest index
    } else {
      VecXd scaled = logits.template cast<double>() / static_cast<double>(tau_d);
      scaled.array() -= scaled.maxCoeff();
      VecXd probs = scaled.array().exp();
      probs /= probs.sum();
      double r = rng.uniform();
      token = prior.k - 1;
      for (int c = 0; c < prior.k; ++c) {
        r -= probs(c);
        if (r <= 0) {
          token = static_cast<std::int32_t>(c);
          break;
        }
      }
    }
  }
  VecX<S> latent;
  if (prior.has_latents()) {
    MatX<S> mean = t.val(out.base_mean).col(T - 1);
    MatX<S> ls = t.val(out.base_log_std).col(T - 1);
    MatX<S> ctx = t.val(out.ctx).col(T - 1);
    latent = flow_sample(flow, ps, mean, ls, ctx, tau_c, rng).col(0);
  }
  return {token, latent};
}

}  // namespace vslm
