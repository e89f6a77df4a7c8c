#pragma once

#include <optional>
#include <vector>

#include "vslm/model.hpp"

namespace vslm {

/// Linear warm-up from zero to beta_final over warmup_steps, then flat.
struct BetaSchedule {
  double beta_final = 0.04;
  int warmup_steps = 0;

  double at(std::int64_t step) const {
    if (step < 0) throw std::invalid_argument("beta_at: step must be >= 0");
    if (warmup_steps <= 0) return beta_final;
    return beta_final * std::min<double>(1.0, double(step) / warmup_steps);
  }
};

/// The three balanced loss terms. rec_loss is the DDPM noise-prediction
/// surrogate for -O_rec; the invariant
///   total = rec_loss + beta_effective * (kl_c + gamma * nll_d)
/// holds for every variant (absent terms enter as zero with unit weights).
struct ElboTerms {
  double rec_loss = 0;
  double kl_c = 0;
  double nll_d = 0;
  double beta_effective = 0;
  double gamma = 0;
  double total = 0;

  bool finite() const {
    return std::isfinite(rec_loss) && std::isfinite(kl_c) && std::isfinite(nll_d) &&
           std::isfinite(total);
  }
  const char* diverged_term() const {
    if (!std::isfinite(rec_loss)) return "rec_loss";
    if (!std::isfinite(kl_c)) return "kl_c";
    if (!std::isfinite(nll_d)) return "nll_d";
    return "total";
  }
};

/// One training example with every random draw materialized up front, so
/// the loss is a deterministic differentiable function of the parameters.
template <typename S>
struct BatchItem {
  MatX<S> x_std;                      // [d_x x T] standardized crop
  std::vector<std::int32_t> tokens;   // length T (token variants)
  MatX<S> post_noise;                 // [d_z x T] (latent variants)
  int diff_step = 1;
  MatX<S> diff_noise;                 // [d_x x T]
  int utt_start = 0, utt_len = 0;     // crop for the utterance encoder
};

/// Builds the scalar loss graph for one item; returns the three raw terms.
template <typename S>
struct ItemTerms {
  Var rec, kl_c, nll_d;  // invalid Vars when the variant lacks the term
};

template <typename S>
ItemTerms<S> item_loss_graph(Tape<S>& t, const Model<S>& m, const VarPack& p,
                             const BatchItem<S>& item) {
  const int T = static_cast<int>(item.x_std.cols());
  if (T < 1) throw std::invalid_argument("compute_loss: empty item");
  if (m.has_tokens() && static_cast<int>(item.tokens.size()) != T)
    throw std::invalid_argument("compute_loss: token/frame length mismatch");

  ItemTerms<S> out;
  std::optional<Var> z;
  Var q_mean, q_log_std;
  if (m.has_latents()) {
    auto enc = m.encoder(t, p, t.constant(item.x_std));
    q_mean = enc.mean;
    q_log_std = enc.log_std;
    z = reparameterize(t, q_mean, q_log_std, item.post_noise);
  }

  auto prior_out = m.prior(t, p, m.has_tokens() ? &item.tokens : nullptr, z);
  if (m.has_latents())
    out.kl_c = continuous_kl_at(t, m.flow, p, q_mean, q_log_std, *z, prior_out.base_mean,
                                prior_out.base_log_std, prior_out.ctx);
  if (m.has_tokens()) out.nll_d = token_nll(t, prior_out.token_logits, item.tokens);

  Var utt_emb = m.utt_enc(
      t, p, slice_cols(t, t.constant(item.x_std), item.utt_start, item.utt_len));
  Var cond = m.conditioning(t, p, z, m.has_tokens() ? &item.tokens : nullptr, utt_emb, T);
  out.rec = ddpm_loss(t, m.decoder, p, m.sched, item.x_std, item.diff_step, item.diff_noise,
                      cond);
  return out;
}

/// Balanced total for one item on the tape.
template <typename S>
Var item_total(Tape<S>& t, const Model<S>& m, const ItemTerms<S>& terms, double beta_eff) {
  Var total = terms.rec;
  switch (m.cfg.variant_enum()) {
    case Variant::kFull: {
      Var inner = terms.kl_c;
      if (m.cfg.gamma != 0)
        inner = add(t, inner, scale(t, terms.nll_d, S(m.cfg.gamma)));
      if (beta_eff != 0) total = add(t, total, scale(t, inner, S(beta_eff)));
      break;
    }
    case Variant::kTokenFree:
      if (beta_eff != 0) total = add(t, total, scale(t, terms.kl_c, S(beta_eff)));
      break;
    case Variant::kTokenOnly:
      total = add(t, total, terms.nll_d);
      break;
  }
  return total;
}

/// Loss + optional gradient accumulation over a batch (mean over items).
/// Items are independent, so they run in parallel; the reduction is in
/// item order, which keeps results bitwise identical for any thread count.
template <typename S>
ElboTerms compute_loss(const Model<S>& m, const std::vector<BatchItem<S>>& batch,
                       double beta_eff, std::vector<MatX<S>>* grads_out = nullptr) {
  if (batch.empty()) throw std::invalid_argument("compute_loss: empty batch");
  const int n = static_cast<int>(batch.size());
  const bool want_grads = grads_out != nullptr;

  struct ItemResult {
    double rec = 0, kl = 0, nll = 0, total = 0;
    std::vector<MatX<S>> grads;
  };
  std::vector<ItemResult> results(n);

#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < n; ++i) {
    Tape<S> t;
    VarPack p = lift(t, m.params, want_grads);
    auto terms = item_loss_graph(t, m, p, batch[i]);
    Var total = item_total(t, m, terms, beta_eff);
    auto& r = results[i];
    r.rec = double(t.val(terms.rec)(0, 0));
    if (terms.kl_c.valid()) r.kl = double(t.val(terms.kl_c)(0, 0));
    if (terms.nll_d.valid()) r.nll = double(t.val(terms.nll_d)(0, 0));
    r.total = double(t.val(total)(0, 0));
    if (want_grads) {
      t.backward(total);
      r.grads.resize(m.params.size());
      for (int h = 0; h < m.params.size(); ++h) {
        const auto& g = t.grad(p.vars[h]);
        if (g.size()) r.grads[h] = g;
      }
    }
  }

  ElboTerms agg;
  const bool token_only = m.cfg.variant_enum() == Variant::kTokenOnly;
  agg.beta_effective = token_only ? 1.0 : beta_eff;
  agg.gamma = token_only ? 1.0 : (m.cfg.variant_enum() == Variant::kFull ? m.cfg.gamma : 0.0);
  if (want_grads) {
    grads_out->assign(m.params.size(), MatX<S>());
    for (int h = 0; h < m.params.size(); ++h)
      (*grads_out)[h] = MatX<S>::Zero(m.params[h].rows(), m.params[h].cols());
  }
  const S inv = S(1) / static_cast<S>(n);
  for (const auto& r : results) {
    agg.rec_loss += r.rec / n;
    agg.kl_c += r.kl / n;
    agg.nll_d += r.nll / n;
    agg.total += r.total / n;
    if (want_grads)
      for (int h = 0; h < m.params.size(); ++h)
        if (r.grads[h].size()) (*grads_out)[h] += r.grads[h] * inv;
  }
  return agg;
}

/// Per-item ELBO-style log weight for the importance-weighted bound:
///   log w = -rec_loss_surrogate + log p_psi(z) - log q(z | x)
/// with a fresh posterior sample. Token terms are conditioning only.
template <typename S>
double elbo_log_weight(const Model<S>& m, const BatchItem<S>& item, RngStream& rng) {
  Tape<S> t;
  VarPack p = lift(t, m.params, false);
  const int T = static_cast<int>(item.x_std.cols());

  auto enc = m.encoder(t, p, t.constant(item.x_std));
  MatX<S> noise = standard_normal<S>(rng, m.cfg.d_z, T);
  Var z = reparameterize(t, enc.mean, enc.log_std, noise);
  auto prior_out = m.prior(t, p, m.has_tokens() ? &item.tokens : nullptr, z);

  Var lp = flow_log_prob_cols(t, m.flow, p, z, prior_out.base_mean, prior_out.base_log_std,
                              prior_out.ctx);
  Var lq = gaussian_log_prob_cols(t, enc.mean, enc.log_std, z);

  Var utt_emb = m.utt_enc(
      t, p, slice_cols(t, t.constant(item.x_std), item.utt_start, item.utt_len));
  Var cond = m.conditioning(t, p, z, m.has_tokens() ? &item.tokens : nullptr, utt_emb, T);
  Var rec = ddpm_loss(t, m.decoder, p, m.sched, item.x_std, item.diff_step, item.diff_noise,
                      cond);

  return -double(t.val(rec)(0, 0)) +
         (t.val(lp).sum() - t.val(lq).sum()) / T;
}

}  // namespace vslm
