#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vslm/types.hpp"

namespace vslm {

/// Every knob of the system. Serialized verbatim into checkpoints; any
/// CLI flag overrides the file value.
struct Config {
  std::string variant = "full";
  int d_z = 4;
  int k = 200;

  double beta = 0.04;
  double gamma = 0.5;
  double warmup_frac = 0.05;

  double temp_token = 0.85;
  double temp_cont = 0.85;
  double ddim_eta = 0.5;
  int ddim_steps = 100;
  int ddpm_steps = 1000;

  double lr = 5e-4;
  double lr_final = 5e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double weight_decay = 0.01;

  int batch_size = 16;
  int steps = 20000;
  int crop_frames = 256;
  std::uint64_t seed = 1234;

  int enc_width = 64;
  int enc_blocks = 3;
  std::vector<int> utt_widths = {64, 64, 64};
  double crop_min_s = 2.0;
  double crop_max_s = 4.0;

  int prior_layers = 4;
  int prior_heads = 8;
  int prior_width = 256;
  int prior_ff = 1024;
  int tok_emb_dim = 32;

  int flow_blocks = 4;
  int flow_width = 64;
  double flow_smax = 3.0;

  int dec_width = 64;
  int dec_blocks = 6;
  int step_emb_dim = 32;
  int kernel_size = 7;

  int n_mc = 1;
  int checkpoint_every = 2000;
  int log_every = 10;
  double val_frac = 0.1;
  int threads = 0;  // 0: hardware concurrency

  Variant variant_enum() const { return variant_from_name(variant); }
  bool has_tokens() const { return variant_enum() != Variant::kTokenFree; }
  bool has_latents() const { return variant_enum() != Variant::kTokenOnly; }
  int warmup_steps() const { return static_cast<int>(warmup_frac * steps); }

  void validate() const {
    auto fail = [](const std::string& f) {
      throw std::invalid_argument("Config." + f + " out of range");
    };
    variant_from_name(variant);  // throws on unknown
    if (d_z < 1) fail("d_z");
    if (has_latents() && d_z % 2 != 0) fail("d_z (must be even for the coupling split)");
    if (k < 2) fail("k");
    if (beta < 0) fail("beta");
    if (gamma < 0) fail("gamma");
    if (warmup_frac < 0 || warmup_frac > 1) fail("warmup_frac");
    if (!(temp_token > 0)) fail("temp_token");
    if (!(temp_cont > 0)) fail("temp_cont");
    if (ddim_eta < 0 || ddim_eta > 1) fail("ddim_eta");
    if (ddpm_steps < 1) fail("ddpm_steps");
    if (ddim_steps < 1 || ddim_steps > ddpm_steps) fail("ddim_steps");
    if (!(lr > 0) || !(lr_final > 0) || lr_final > lr) fail("lr/lr_final");
    if (adam_beta1 <= 0 || adam_beta1 >= 1) fail("adam_beta1");
    if (adam_beta2 <= 0 || adam_beta2 >= 1) fail("adam_beta2");
    if (weight_decay < 0) fail("weight_decay");
    if (batch_size < 1) fail("batch_size");
    if (steps < 1) fail("steps");
    if (crop_frames < 8) fail("crop_frames");
    if (enc_width < 1 || enc_blocks < 1) fail("enc_width/enc_blocks");
    if (utt_widths.empty()) fail("utt_widths");
    if (crop_min_s <= 0 || crop_max_s < crop_min_s) fail("crop_min_s/crop_max_s");
    if (prior_layers < 1 || prior_width < 1 || prior_ff < 1) fail("prior dims");
    if (prior_heads < 1 || prior_width % prior_heads != 0) fail("prior_heads");
    if (tok_emb_dim < 1) fail("tok_emb_dim");
    if (flow_blocks < 0 || flow_width < 1) fail("flow_blocks/flow_width");
    if (flow_smax <= 0) fail("flow_smax");
    if (dec_width < 1 || dec_blocks < 2 || dec_blocks % 2 != 0) fail("dec_width/dec_blocks");
    if (step_emb_dim < 2 || step_emb_dim % 2 != 0) fail("step_emb_dim");
    if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size");
    if (n_mc < 1) fail("n_mc");
    if (checkpoint_every < 1) fail("checkpoint_every");
    if (log_every < 1) fail("log_every");
    if (val_frac < 0 || val_frac >= 1) fail("val_frac");
    if (threads < 0) fail("threads");
  }

  nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);
  static Config load(const std::string& path);
};

namespace detail {
template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline nlohmann::json Config::to_json() const {
  nlohmann::json j;
  j["variant"] = variant;
  j["d_z"] = d_z;
  j["k"] = k;
  j["beta"] = beta;
  j["gamma"] = gamma;
  j["warmup_frac"] = warmup_frac;
  j["temp_token"] = temp_token;
  j["temp_cont"] = temp_cont;
  j["ddim_eta"] = ddim_eta;
  j["ddim_steps"] = ddim_steps;
  j["ddpm_steps"] = ddpm_steps;
  j["lr"] = lr;
  j["lr_final"] = lr_final;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["steps"] = steps;
  j["crop_frames"] = crop_frames;
  j["seed"] = seed;
  j["enc_width"] = enc_width;
  j["enc_blocks"] = enc_blocks;
  j["utt_widths"] = utt_widths;
  j["crop_min_s"] = crop_min_s;
  j["crop_max_s"] = crop_max_s;
  j["prior_layers"] = prior_layers;
  j["prior_heads"] = prior_heads;
  j["prior_width"] = prior_width;
  j["prior_ff"] = prior_ff;
  j["tok_emb_dim"] = tok_emb_dim;
  j["flow_blocks"] = flow_blocks;
  j["flow_width"] = flow_width;
  j["flow_smax"] = flow_smax;
  j["dec_width"] = dec_width;
  j["dec_blocks"] = dec_blocks;
  j["step_emb_dim"] = step_emb_dim;
  j["kernel_size"] = kernel_size;
  j["n_mc"] = n_mc;
  j["checkpoint_every"] = checkpoint_every;
  j["log_every"] = log_every;
  j["val_frac"] = val_frac;
  j["threads"] = threads;
  return j;
}

inline Config Config::from_json(const nlohmann::json& j) {
  Config c;
  detail::maybe(j, "variant", c.variant);
  detail::maybe(j, "d_z", c.d_z);
  detail::maybe(j, "k", c.k);
  detail::maybe(j, "beta", c.beta);
  detail::maybe(j, "gamma", c.gamma);
  detail::maybe(j, "warmup_frac", c.warmup_frac);
  detail::maybe(j, "temp_token", c.temp_token);
  detail::maybe(j, "temp_cont", c.temp_cont);
  detail::maybe(j, "ddim_eta", c.ddim_eta);
  detail::maybe(j, "ddim_steps", c.ddim_steps);
  detail::maybe(j, "ddpm_steps", c.ddpm_steps);
  detail::maybe(j, "lr", c.lr);
  detail::maybe(j, "lr_final", c.lr_final);
  detail::maybe(j, "adam_beta1", c.adam_beta1);
  detail::maybe(j, "adam_beta2", c.adam_beta2);
  detail::maybe(j, "weight_decay", c.weight_decay);
  detail::maybe(j, "batch_size", c.batch_size);
  detail::maybe(j, "steps", c.steps);
  detail::maybe(j, "crop_frames", c.crop_frames);
  detail::maybe(j, "seed", c.seed);
  detail::maybe(j, "enc_width", c.enc_width);
  detail::maybe(j, "enc_blocks", c.enc_blocks);
  detail::maybe(j, "utt_widths", c.utt_widths);
  detail::maybe(j, "crop_min_s", c.crop_min_s);
  detail::maybe(j, "crop_max_s", c.crop_max_s);
  detail::maybe(j, "prior_layers", c.prior_layers);
  detail::maybe(j, "prior_heads", c.prior_heads);
  detail::maybe(j, "prior_width", c.prior_width);
  detail::maybe(j, "prior_ff", c.prior_ff);
  detail::maybe(j, "tok_emb_dim", c.tok_emb_dim);
  detail::maybe(j, "flow_blocks", c.flow_blocks);
  detail::maybe(j, "flow_width", c.flow_width);
  detail::maybe(j, "flow_smax", c.flow_smax);
  detail::maybe(j, "dec_width", c.dec_width);
  detail::maybe(j, "dec_blocks", c.dec_blocks);
  detail::maybe(j, "step_emb_dim", c.step_emb_dim);
  detail::maybe(j, "kernel_size", c.kernel_size);
  detail::maybe(j, "n_mc", c.n_mc);
  detail::maybe(j, "checkpoint_every", c.checkpoint_every);
  detail::maybe(j, "log_every", c.log_every);
  detail::maybe(j, "val_frac", c.val_frac);
  detail::maybe(j, "threads", c.threads);
  return c;
}

inline Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  return from_json(nlohmann::json::parse(is));
}

}  // namespace vslm
