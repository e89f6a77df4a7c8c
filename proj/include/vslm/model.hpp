#pragma once

#include <string>

#include "vslm/config.hpp"
#include "vslm/decoder.hpp"
#include "vslm/encoder.hpp"
#include "vslm/flow.hpp"
#include "vslm/prior.hpp"
#include "vslm/tokenizer.hpp"

namespace vslm {

/// All trainable components plus the frozen tokenizer and corpus
/// statistics: everything needed to train, sample, score and reconstruct.
template <typename S>
struct Model {
  Config cfg;
  ParamStore<S> params;

  PosteriorEncoder<S> encoder;   // latent variants
  UtteranceEncoder<S> utt_enc;
  PriorNet<S> prior;
  FlowStack<S> flow;             // empty when flow_blocks == 0 or no latents
  DiffusionDecoder<S> decoder;
  int dec_tok_emb = -1;          // decoder-side token embedding [tok_emb_dim x k]
  DiffusionSchedule<S> sched;

  Codebook<S> codebook;          // token variants
  VecX<S> feat_mean, feat_std;   // standardization snapshot
  double frame_rate = 50.0;
  int d_x = 0;
  std::int64_t step = 0;

  bool has_tokens() const { return cfg.has_tokens(); }
  bool has_latents() const { return cfg.has_latents(); }

  int d_cond() const {
    int d = static_cast<int>(utt_enc.d_u);
    if (has_tokens()) d += cfg.tok_emb_dim;
    if (has_latents()) d += cfg.d_z;
    return d;
  }

  MatX<S> standardize(const MatX<S>& x) const {
    return (x.colwise() - feat_mean).array().colwise() / feat_std.array();
  }
  MatX<S> destandardize(const MatX<S>& x) const {
    return (x.array().colwise() * feat_std.array()).matrix().colwise() + feat_mean;
  }

  TokenSeq tokenize_features(const MatX<S>& raw_frames) const {
    return tokenize_frames<S>(standardize(raw_frames), codebook);
  }

  /// Builds the per-frame conditioning pack [d_cond x T] on the tape:
  /// [latents ; decoder token embedding ; broadcast utterance embedding].
  Var conditioning(Tape<S>& t, const VarPack& p, std::optional<Var> latents,
                   const std::vector<std::int32_t>* tokens, Var utt_embedding, int T) const {
    Var cond;
    bool first = true;
    if (has_latents()) {
      cond = *latents;
      first = false;
    }
    if (has_tokens()) {
      std::vector<int> idx(tokens->begin(), tokens->end());
      Var emb = gather_cols(t, p[dec_tok_emb], idx);
      cond = first ? emb : concat_rows(t, cond, emb);
      first = false;
    }
    Var utt = broadcast_cols(t, utt_embedding, T);
    return first ? utt : concat_rows(t, cond, utt);
  }

  static Model init(const Config& cfg, int d_x, double frame_rate, const VecX<S>& mean,
                    const VecX<S>& stddev, Codebook<S> codebook = {}) {
    cfg.validate();
    if (cfg.has_tokens() && codebook.k() != cfg.k)
      throw std::invalid_argument("Model::init: codebook size does not match Config.k");

    Model m;
    m.cfg = cfg;
    m.d_x = d_x;
    m.frame_rate = frame_rate;
    m.feat_mean = mean;
    m.feat_std = stddev;
    m.codebook = std::move(codebook);
    m.sched = make_cosine_schedule<S>(cfg.ddpm_steps);

    RngStream init_rng = RngStream::fork(cfg.seed, "init");
    if (m.has_latents())
      m.encoder = PosteriorEncoder<S>::make(m.params, init_rng, "enc", d_x, cfg.d_z,
                                            cfg.enc_width, cfg.enc_blocks, cfg.kernel_size);
    m.utt_enc = UtteranceEncoder<S>::make(m.params, init_rng, "utt", d_x, cfg.utt_widths);
    m.utt_enc.crop_min_s = cfg.crop_min_s;
    m.utt_enc.crop_max_s = cfg.crop_max_s;
    m.prior = PriorNet<S>::make(m.params, init_rng, "prior", cfg.variant_enum(), cfg.k, cfg.d_z,
                                cfg.prior_width, cfg.prior_heads, cfg.prior_ff, cfg.prior_layers,
                                cfg.tok_emb_dim);
    if (m.has_latents() && cfg.flow_blocks > 0)
      m.flow = FlowStack<S>::make(m.params, init_rng, "flow", cfg.flow_blocks, cfg.d_z,
                                  cfg.prior_width, cfg.flow_width, S(cfg.flow_smax));
    if (m.has_tokens())
      m.dec_tok_emb =
          m.params.add("dec.tok_emb", init::normal<S>(init_rng, cfg.tok_emb_dim, cfg.k, 0.5));
    m.decoder = DiffusionDecoder<S>::make(m.params, init_rng, "dec", d_x, cfg.dec_width,
                                          m.d_cond(), cfg.step_emb_dim, cfg.kernel_size,
                                          cfg.dec_blocks);
    return m;
  }
};

}  // namespace vslm
