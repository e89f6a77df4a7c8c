#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vslm/data.hpp"
#include "vslm/objective.hpp"

namespace vslm {

/// Decoupled-weight-decay Adam with moments aligned to the ParamStore.
template <typename S>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-8, weight_decay = 0.01;
  std::int64_t t = 0;
  std::vector<MatX<S>> m, v;

  void init(const ParamStore<S>& ps) {
    m.resize(ps.size());
    v.resize(ps.size());
    for (int i = 0; i < ps.size(); ++i) {
      m[i] = MatX<S>::Zero(ps[i].rows(), ps[i].cols());
      v[i] = MatX<S>::Zero(ps[i].rows(), ps[i].cols());
    }
  }

  void step(ParamStore<S>& ps, const std::vector<MatX<S>>& grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (int i = 0; i < ps.size(); ++i) {
      m[i] = S(beta1) * m[i] + S(1 - beta1) * grads[i];
      v[i] = (S(beta2) * v[i].array() + S(1 - beta2) * grads[i].array().square()).matrix();
      auto mhat = m[i].array() / S(bc1);
      auto vhat = v[i].array() / S(bc2);
      ps[i].array() -= S(lr) * (mhat / (vhat.sqrt() + S(eps)) + S(weight_decay) * ps[i].array());
    }
  }
};

/// Cosine decay from lr to lr_final over the training run.
inline double cosine_lr(double lr0, double lr_final, std::int64_t step, std::int64_t total) {
  if (total <= 1) return lr_final;
  const double f = std::min<double>(1.0, double(step) / double(total - 1));
  return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + std::cos(M_PI * f));
}

// ---------------------------------------------------------------------------
// Checkpoint container: named binary tensors + config text + RNG state.
// The writer is canonical, so save(load(f)) == f byte for byte.
// ---------------------------------------------------------------------------

template <typename S>
struct TrainState {
  Model<S> model;
  AdamW<S> opt;
  std::map<std::string, std::string> rng_states;
};

template <typename S>
void save_checkpoint(const TrainState<S>& st, const std::string& path) {
  auto os = io::open_out(path);
  io::write_magic(os, "VSCK");
  io::write_pod<std::uint32_t>(os, 1);  // version
  io::write_string(os, st.model.cfg.to_json().dump());
  io::write_pod<std::int32_t>(os, st.model.d_x);
  io::write_pod<double>(os, st.model.frame_rate);
  io::write_pod<std::int64_t>(os, st.model.step);

  constexpr int dtype = std::is_same_v<S, float> ? 0 : 1;
  io::write_pod<std::uint64_t>(os, st.model.params.size());
  for (int i = 0; i < st.model.params.size(); ++i) {
    io::write_string(os, st.model.params.names[i]);
    io::write_matrix<S>(os, st.model.params[i], dtype);
  }
  io::write_matrix<S>(os, st.model.feat_mean, 1);
  io::write_matrix<S>(os, st.model.feat_std, 1);

  const bool has_cb = st.model.codebook.k() > 0;
  io::write_pod<std::uint8_t>(os, has_cb ? 1 : 0);
  if (has_cb) {
    io::write_matrix<S>(os, st.model.codebook.centroids, 1);
    io::write_pod<std::uint8_t>(os, st.model.codebook.feature_kind == FeatureKind::kRawFrame ? 0 : 1);
    io::write_pod<double>(os, st.model.codebook.inertia);
    io::write_pod<std::int32_t>(os, st.model.codebook.iterations);
    io::write_pod<std::uint64_t>(os, st.model.codebook.seed);
  }

  io::write_pod<std::int64_t>(os, st.opt.t);
  const bool has_opt = !st.opt.m.empty();
  io::write_pod<std::uint8_t>(os, has_opt ? 1 : 0);
  if (has_opt)
    for (int i = 0; i < st.model.params.size(); ++i) {
      io::write_matrix<S>(os, st.opt.m[i], dtype);
      io::write_matrix<S>(os, st.opt.v[i], dtype);
    }

  io::write_pod<std::uint64_t>(os, st.rng_states.size());
  for (const auto& [name, state] : st.rng_states) {
    io::write_string(os, name);
    io::write_string(os, state);
  }
}

template <typename S>
TrainState<S> load_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "VSCK", path);
  const auto version = io::read_pod<std::uint32_t>(is);
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  Config cfg = Config::from_json(nlohmann::json::parse(io::read_string(is)));
  const auto d_x = io::read_pod<std::int32_t>(is);
  const auto frame_rate = io::read_pod<double>(is);
  const auto step = io::read_pod<std::int64_t>(is);

  const auto n_params = io::read_pod<std::uint64_t>(is);
  std::vector<std::pair<std::string, MatX<S>>> tensors(n_params);
  for (auto& [name, mat] : tensors) {
    name = io::read_string(is);
    mat = io::read_matrix<S>(is);
  }
  VecX<S> mean = io::read_matrix<S>(is);
  VecX<S> stddev = io::read_matrix<S>(is);

  Codebook<S> cb;
  if (io::read_pod<std::uint8_t>(is)) {
    cb.centroids = io::read_matrix<S>(is);
    cb.feature_kind = io::read_pod<std::uint8_t>(is) == 0 ? FeatureKind::kRawFrame
                                                          : FeatureKind::kContextWindow;
    cb.inertia = io::read_pod<double>(is);
    cb.iterations = io::read_pod<std::int32_t>(is);
    cb.seed = io::read_pod<std::uint64_t>(is);
  }

  TrainState<S> st{Model<S>::init(cfg, d_x, frame_rate, mean, stddev, std::move(cb)), {}, {}};
  st.model.step = step;
  if (tensors.size() != static_cast<std::uint64_t>(st.model.params.size()))
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto& [name, mat] : tensors) {
    auto it = st.model.params.index.find(name);
    if (it == st.model.params.index.end())
      throw std::runtime_error("unknown parameter in checkpoint: " + name);
    if (st.model.params[it->second].rows() != mat.rows() ||
        st.model.params[it->second].cols() != mat.cols())
      throw std::runtime_error("parameter shape mismatch: " + name);
    st.model.params[it->second] = std::move(mat);
  }

  st.opt.beta1 = cfg.adam_beta1;
  st.opt.beta2 = cfg.adam_beta2;
  st.opt.weight_decay = cfg.weight_decay;
  st.opt.t = io::read_pod<std::int64_t>(is);
  if (io::read_pod<std::uint8_t>(is)) {
    st.opt.m.resize(st.model.params.size());
    st.opt.v.resize(st.model.params.size());
    for (int i = 0; i < st.model.params.size(); ++i) {
      st.opt.m[i] = io::read_matrix<S>(is);
      st.opt.v[i] = io::read_matrix<S>(is);
    }
  }

  const auto n_rng = io::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n_rng; ++i) {
    std::string name = io::read_string(is);
    st.rng_states[name] = io::read_string(is);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// Train/validation split: the trailing val_frac of utterances validate.
template <typename S>
std::pair<std::vector<int>, std::vector<int>> split_corpus(const Corpus<S>& corpus,
                                                           double val_frac) {
  const int n = corpus.size();
  int n_val = static_cast<int>(std::lround(val_frac * n));
  n_val = std::min(n_val, n - 1);
  std::vector<int> train, val;
  for (int i = 0; i < n - n_val; ++i) train.push_back(i);
  for (int i = n - n_val; i < n; ++i) val.push_back(i);
  return {train, val};
}

template <typename S>
struct TrainData {
  const Corpus<S>* corpus = nullptr;
  std::vector<int> train_idx, val_idx;
  std::vector<TokenSeq> tokens;  // per utterance, empty for token_free
};

template <typename S>
TrainData<S> prepare_data(const Model<S>& m, const Corpus<S>& corpus) {
  TrainData<S> d;
  d.corpus = &corpus;
  std::tie(d.train_idx, d.val_idx) = split_corpus(corpus, m.cfg.val_frac);
  if (m.has_tokens()) {
    d.tokens.resize(corpus.size());
    for (int i = 0; i < corpus.size(); ++i)
      d.tokens[i] = m.tokenize_features(corpus.utts[i].features.frames);
  }
  return d;
}

/// Builds one training example; every random draw comes from the named
/// streams in a fixed order, which is the reproducibility contract.
template <typename S>
BatchItem<S> draw_item(const Model<S>& m, const TrainData<S>& d, RngStream& data_rng,
                       RngStream& post_rng, RngStream& diff_rng) {
  const int u = d.train_idx[data_rng.uniform_int(d.train_idx.size())];
  const auto& feats = d.corpus->utts[u].features;
  const int T_full = feats.length();
  const int Tc = std::min(m.cfg.crop_frames, T_full);
  const int start = static_cast<int>(data_rng.uniform_int(T_full - Tc + 1));

  BatchItem<S> item;
  item.x_std = m.standardize(feats.frames.middleCols(start, Tc));
  if (m.has_tokens())
    item.tokens.assign(d.tokens[u].tokens.begin() + start,
                       d.tokens[u].tokens.begin() + start + Tc);
  auto [us, ul] = m.utt_enc.training_crop(Tc, m.frame_rate, data_rng);
  item.utt_start = us;
  item.utt_len = ul;
  if (m.has_latents()) item.post_noise = standard_normal<S>(post_rng, m.cfg.d_z, Tc);
  item.diff_step = 1 + static_cast<int>(diff_rng.uniform_int(m.cfg.ddpm_steps));
  item.diff_noise = standard_normal<S>(diff_rng, m.d_x, Tc);
  return item;
}

/// Deterministic validation set: fixed crops and noise draws per item, so
/// the validation loss is comparable across epochs (variance reduction).
template <typename S>
std::vector<BatchItem<S>> make_val_items(const Model<S>& m, const TrainData<S>& d) {
  RngStream rng = RngStream::fork(m.cfg.seed, "validation");
  std::vector<BatchItem<S>> items;
  for (int u : d.val_idx) {
    const auto& feats = d.corpus->utts[u].features;
    const int T_full = feats.length();
    const int Tc = std::min(m.cfg.crop_frames, T_full);
    const int start = static_cast<int>(rng.uniform_int(T_full - Tc + 1));
    BatchItem<S> item;
    item.x_std = m.standardize(feats.frames.middleCols(start, Tc));
    if (m.has_tokens())
      item.tokens.assign(d.tokens[u].tokens.begin() + start,
                         d.tokens[u].tokens.begin() + start + Tc);
    auto [us, ul] = m.utt_enc.training_crop(Tc, m.frame_rate, rng);
    item.utt_start = us;
    item.utt_len = ul;
    if (m.has_latents()) item.post_noise = standard_normal<S>(rng, m.cfg.d_z, Tc);
    item.diff_step = 1 + static_cast<int>(rng.uniform_int(m.cfg.ddpm_steps));
    item.diff_noise = standard_normal<S>(rng, m.d_x, Tc);
    items.push_back(std::move(item));
  }
  return items;
}

struct TrainHooks {
  std::function<void(std::int64_t, const ElboTerms&)> on_step;  // optional
};

/// Runs (or resumes) training; writes JSONL logs and periodic checkpoints.
/// The trajectory is a pure function of (config, corpus, codebook).
template <typename S>
TrainState<S> train(Model<S> model, const Corpus<S>& corpus, const std::string& out_dir,
                    const std::string& resume_from = "", TrainHooks hooks = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const Config& cfg = model.cfg;

  TrainState<S> st{std::move(model), {}, {}};
  st.opt.beta1 = cfg.adam_beta1;
  st.opt.beta2 = cfg.adam_beta2;
  st.opt.weight_decay = cfg.weight_decay;

  RngStream data_rng = RngStream::fork(cfg.seed, "data-order");
  RngStream post_rng = RngStream::fork(cfg.seed, "posterior-noise");
  RngStream diff_rng = RngStream::fork(cfg.seed, "diffusion-noise");

  if (!resume_from.empty()) {
    st = load_checkpoint<S>(resume_from);
    data_rng.set_state(st.rng_states.at("data-order"));
    post_rng.set_state(st.rng_states.at("posterior-noise"));
    diff_rng.set_state(st.rng_states.at("diffusion-noise"));
  } else {
    st.opt.init(st.model.params);
  }

  TrainData<S> data = prepare_data(st.model, corpus);
  const auto val_items = make_val_items(st.model, data);
  const int steps_per_epoch =
      std::max(1, static_cast<int>(data.train_idx.size() + cfg.batch_size - 1) / cfg.batch_size);

  std::ofstream log(out_dir + "/train_log.jsonl", std::ios::app);
  if (!log) throw std::runtime_error("cannot open training log in " + out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  BetaSchedule beta_sched{cfg.beta, cfg.warmup_steps()};
  auto run_validation = [&](std::int64_t step) {
    if (val_items.empty()) return;
    const double beta_eff = beta_sched.at(step);
    ElboTerms v = compute_loss(st.model, val_items, beta_eff);
    nlohmann::json j{{"type", "val"},        {"step", step},
                     {"epoch", step / steps_per_epoch},
                     {"rec_loss", v.rec_loss}, {"kl_c", v.kl_c},
                     {"nll_d", v.nll_d},     {"total", v.total},
                     {"wall_s", wall()}};
    log << j.dump() << "\n" << std::flush;
  };

  for (std::int64_t step = st.model.step; step < cfg.steps; ++step) {
    std::vector<BatchItem<S>> batch;
    batch.reserve(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(draw_item(st.model, data, data_rng, post_rng, diff_rng));

    const double beta_eff = beta_sched.at(step);
    const double lr = cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps);
    std::vector<MatX<S>> grads;
    ElboTerms terms = compute_loss(st.model, batch, beta_eff, &grads);
    if (!terms.finite())
      throw std::runtime_error(std::string("training diverged: non-finite ") +
                               terms.diverged_term() + " at step " + std::to_string(step));
    st.opt.step(st.model.params, grads, lr);
    st.model.step = step + 1;

    if (hooks.on_step) hooks.on_step(step, terms);
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      nlohmann::json j{{"type", "train"},     {"step", step + 1},
                       {"rec_loss", terms.rec_loss}, {"kl_c", terms.kl_c},
                       {"nll_d", terms.nll_d}, {"beta", terms.beta_effective},
                       {"gamma", terms.gamma}, {"total", terms.total},
                       {"lr", lr},            {"wall_s", wall()}};
      log << j.dump() << "\n" << std::flush;
    }
    if ((step + 1) % steps_per_epoch == 0) run_validation(step + 1);

    if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
      st.rng_states["data-order"] = data_rng.state();
      st.rng_states["posterior-noise"] = post_rng.state();
      st.rng_states["diffusion-noise"] = diff_rng.state();
      save_checkpoint(st, out_dir + "/ckpt_" + std::to_string(step + 1) + ".vsck");
    }
  }
  if (cfg.steps % steps_per_epoch != 0) run_validation(cfg.steps);

  st.rng_states["data-order"] = data_rng.state();
  st.rng_states["posterior-noise"] = post_rng.state();
  st.rng_states["diffusion-noise"] = diff_rng.state();
  save_checkpoint(st, out_dir + "/model.vsck");
  return st;
}

// ---------------------------------------------------------------------------
// Inference pipelines.
// ---------------------------------------------------------------------------

/// Deterministic reconstruction: tokens + posterior means + full-utterance
/// embedding drive the DDIM sampler; output is de-standardized.
template <typename S>
FeatureSeq<S> reconstruct(const Model<S>& m, const FeatureSeq<S>& x, std::uint64_t seed) {
  x.validate();
  const MatX<S> x_std = m.standardize(x.frames);
  const int T = static_cast<int>(x_std.cols());

  std::vector<std::int32_t> tokens;
  if (m.has_tokens()) tokens = tokenize_frames<S>(x_std, m.codebook).tokens;
  MatX<S> latents;
  if (m.has_latents()) latents = posterior_encode(m.encoder, m.params, x_std).means;
  auto utt = utterance_encode(m.utt_enc, m.params, x_std);

  Tape<S> t;
  VarPack p = lift(t, m.params, false);
  std::optional<Var> lat;
  if (m.has_latents()) lat = t.constant(latents);
  Var cond = m.conditioning(t, p, lat, m.has_tokens() ? &tokens : nullptr,
                            t.constant(MatX<S>(utt.value)), T);

  RngStream rng = RngStream::fork(seed, "reconstruct");
  MatX<S> out_std = ddim_sample(m.decoder, m.params, m.sched, t.val(cond), T, m.cfg.ddim_steps,
                                m.cfg.ddim_eta, rng);
  FeatureSeq<S> out;
  out.frames = m.destandardize(out_std);
  out.frame_rate_hz = x.frame_rate_hz;
  out.source_id = x.source_id + ".recon";
  return out;
}

/// Prompted continuation: encode the prompt, roll the prior at the
/// configured temperatures, then decode the whole sequence. The prompt
/// region of the output is the decoder's re-rendering.
template <typename S>
FeatureSeq<S> continue_speech(const Model<S>& m, const FeatureSeq<S>& prompt,
                              double target_seconds, std::uint64_t seed) {
  if (prompt.length() < 1)
    throw std::invalid_argument("continue_speech: prompt must have at least 1 frame");
  const MatX<S> prompt_std = m.standardize(prompt.frames);
  const int T_prompt = prompt.length();
  const int T_gen = static_cast<int>(std::lround(target_seconds * m.frame_rate));

  TokenSeq tokens;
  tokens.k = m.cfg.k;
  if (m.has_tokens()) tokens = tokenize_frames<S>(prompt_std, m.codebook);
  MatX<S> latents;
  if (m.has_latents()) latents = posterior_encode(m.encoder, m.params, prompt_std).means;
  auto utt = utterance_encode(m.utt_enc, m.params, prompt_std);  // full prompt, deterministic

  RngStream rng = RngStream::fork(seed, "continuation");
  for (int i = 0; i < T_gen; ++i) {
    auto [tok, z] = prior_sample_step<S>(m.prior, m.flow, m.params,
                                         m.has_tokens() ? &tokens : nullptr,
                                         m.has_latents() ? &latents : nullptr,
                                         S(m.cfg.temp_token), S(m.cfg.temp_cont), rng);
    if (m.has_tokens()) tokens.tokens.push_back(tok);
    if (m.has_latents()) {
      latents.conservativeResize(m.cfg.d_z, latents.cols() + 1);
      latents.col(latents.cols() - 1) = z;
    }
  }

  const int T = T_prompt + T_gen;
  Tape<S> t;
  VarPack p = lift(t, m.params, false);
  std::optional<Var> lat;
  if (m.has_latents()) lat = t.constant(latents);
  Var cond = m.conditioning(t, p, lat, m.has_tokens() ? &tokens.tokens : nullptr,
                            t.constant(MatX<S>(utt.value)), T);
  MatX<S> out_std = ddim_sample(m.decoder, m.params, m.sched, t.val(cond), T, m.cfg.ddim_steps,
                                m.cfg.ddim_eta, rng);
  FeatureSeq<S> out;
  out.frames = m.destandardize(out_std);
  out.frame_rate_hz = prompt.frame_rate_hz;
  out.source_id = prompt.source_id + ".cont";
  return out;
}

/// Likelihood ingredients for one utterance under the scoring protocol:
/// tokens from the tokenizer, latents from the posterior mean.
template <typename S>
double score_sequence(const Model<S>& m, const FeatureSeq<S>& x, LikelihoodMode mode) {
  const MatX<S> x_std = m.standardize(x.frames);
  TokenSeq tokens;
  if (m.has_tokens()) tokens = tokenize_frames<S>(x_std, m.codebook);
  MatX<S> latents;
  if (m.has_latents()) latents = posterior_encode(m.encoder, m.params, x_std).means;
  return sequence_log_likelihood<S>(m.prior, m.flow, m.params,
                                    m.has_tokens() ? &tokens : nullptr,
                                    m.has_latents() ? &latents : nullptr, mode);
}

/// Fraction of pairs where the positive scores strictly higher; ties count
/// one half.
template <typename S>
double score_pairs(const Model<S>& m, const std::vector<UtterancePair<S>>& pairs,
                   LikelihoodMode mode) {
  if (pairs.empty()) throw std::invalid_argument("score_pairs: empty pair list");
  double acc = 0;
#pragma omp parallel for schedule(dynamic, 1) reduction(+ : acc)
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double sp = score_sequence(m, pairs[i].positive, mode);
    const double sn = score_sequence(m, pairs[i].negative, mode);
    acc += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
  }
  return acc / pairs.size();
}

}  // namespace vslm
