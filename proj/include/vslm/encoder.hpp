#pragma once

#include <string>
#include <vector>

#include "vslm/distributions.hpp"
#include "vslm/nn.hpp"
#include "vslm/rng.hpp"

namespace vslm {

/// Convolutional residual block: conv7 -> instance norm -> GELU -> conv7
/// -> instance norm, plus a projected skip when the width changes.
template <typename S>
struct ConvResBlock {
  Conv1d<S> conv1, conv2;
  InstanceNorm<S> norm1, norm2;
  Conv1d<S> proj;  // 1x1, only when in != out
  bool has_proj = false;

  static ConvResBlock make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                           int in, int out, int ksize) {
    ConvResBlock b;
    b.conv1 = Conv1d<S>::make(ps, rng, prefix + ".conv1", in, out, ksize);
    b.norm1 = InstanceNorm<S>::make(ps, prefix + ".norm1", out);
    b.conv2 = Conv1d<S>::make(ps, rng, prefix + ".conv2", out, out, ksize);
    b.norm2 = InstanceNorm<S>::make(ps, prefix + ".norm2", out);
    b.has_proj = in != out;
    if (b.has_proj) b.proj = Conv1d<S>::make(ps, rng, prefix + ".proj", in, out, 1);
    return b;
  }

  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    Var h = norm1(t, p, conv1(t, p, x));
    h = gelu(t, h);
    h = norm2(t, p, conv2(t, p, h));
    Var skip = has_proj ? proj(t, p, x) : x;
    return add(t, h, skip);
  }
};

/// The variational posterior q(Z^c | X): three conv residual blocks with
/// kernel 7 and instance normalization, a final normalization, then
/// separate linear heads for per-frame mean and log-std.
template <typename S>
struct PosteriorEncoder {
  std::vector<ConvResBlock<S>> blocks;
  InstanceNorm<S> final_norm;
  Conv1d<S> head_mean, head_log_std;
  int d_in = 0, d_z = 0, width = 0, ksize = 7;

  static PosteriorEncoder make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                               int d_in, int d_z, int width, int n_blocks = 3, int ksize = 7) {
    PosteriorEncoder e;
    e.d_in = d_in;
    e.d_z = d_z;
    e.width = width;
    e.ksize = ksize;
    for (int i = 0; i < n_blocks; ++i)
      e.blocks.push_back(ConvResBlock<S>::make(ps, rng, prefix + ".block" + std::to_string(i),
                                               i == 0 ? d_in : width, width, ksize));
    e.final_norm = InstanceNorm<S>::make(ps, prefix + ".final_norm", width);
    e.head_mean = Conv1d<S>::make(ps, rng, prefix + ".head_mean", width, d_z, 1);
    e.head_log_std = Conv1d<S>::make(ps, rng, prefix + ".head_log_std", width, d_z, 1);
    return e;
  }

  /// Half-width of the output's dependence on one input frame.
  int receptive_field() const {
    return static_cast<int>(blocks.size()) * 2 * (ksize / 2);
  }

  struct Output {
    Var mean, log_std;  // [d_z x T] each
  };

  Output operator()(Tape<S>& t, const VarPack& p, Var x) const {
    if (t.cols(x) == 0) throw std::invalid_argument("posterior_encode: empty sequence");
    if (t.rows(x) != d_in) throw std::invalid_argument("posterior_encode: channel mismatch");
    Var h = x;
    for (const auto& b : blocks) h = b(t, p, h);
    h = final_norm(t, p, h);
    Var mean = head_mean(t, p, h);
    Var log_std = clamp(t, head_log_std(t, p, h), S(kLogStdMin), S(kLogStdMax));
    return {mean, log_std};
  }
};

/// Runs the encoder without gradients and returns plain parameters.
template <typename S>
GaussianSeq<S> posterior_encode(const PosteriorEncoder<S>& enc, const ParamStore<S>& ps,
                                const MatX<S>& x_std) {
  Tape<S> t;
  VarPack p = lift(t, ps, false);
  auto out = enc(t, p, t.constant(x_std));
  return {t.val(out.mean), t.val(out.log_std)};
}

template <typename S>
LatentSeq<S> sample_posterior(const GaussianSeq<S>& g, RngStream& rng) {
  MatX<S> noise = standard_normal<S>(rng, g.dim(), g.length());
  return {g.means.array() + g.log_stds.array().exp() * noise.array()};
}

/// Deterministic reconstruction path: the Gaussian means.
template <typename S>
LatentSeq<S> posterior_mode(const GaussianSeq<S>& g) {
  return {g.means};
}

/// Utterance encoder: strided conv blocks over a crop, then time average.
/// Training crops are random in [min,max] seconds; inference uses the
/// whole prompt so continuations are reproducible.
template <typename S>
struct UtteranceEncoder {
  std::vector<Conv1d<S>> convs;
  std::vector<InstanceNorm<S>> norms;
  int d_in = 0, d_u = 0;
  double crop_min_s = 2.0, crop_max_s = 4.0;

  static UtteranceEncoder make(ParamStore<S>& ps, RngStream& rng, const std::string& prefix,
                               int d_in, const std::vector<int>& widths) {
    UtteranceEncoder u;
    u.d_in = d_in;
    u.d_u = widths.back();
    int in = d_in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      u.convs.push_back(Conv1d<S>::make(ps, rng, prefix + ".conv" + std::to_string(i), in,
                                        widths[i], 4, /*stride=*/2));
      u.norms.push_back(InstanceNorm<S>::make(ps, prefix + ".norm" + std::to_string(i), widths[i]));
      in = widths[i];
    }
    return u;
  }

  /// x_std: standardized features (whole utterance or crop), returns [d_u x 1].
  Var operator()(Tape<S>& t, const VarPack& p, Var x) const {
    Var h = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      h = convs[i](t, p, h);
      // instance norm needs at least two frames; short tails skip it
      if (t.cols(h) > 1) h = norms[i](t, p, h);
      h = relu(t, h);
    }
    return rowwise_mean(t, h);
  }

  /// Picks [start, len) for a training crop; the whole utterance when shorter.
  std::pair<int, int> training_crop(int T, double frame_rate, RngStream& rng) const {
    const int min_f = static_cast<int>(crop_min_s * frame_rate);
    const int max_f = static_cast<int>(crop_max_s * frame_rate);
    if (T <= min_f) return {0, T};
    const int len = min_f + static_cast<int>(rng.uniform_int(std::min(max_f, T) - min_f + 1));
    const int start = static_cast<int>(rng.uniform_int(T - len + 1));
    return {start, len};
  }
};

template <typename S>
UtteranceEmbedding<S> utterance_encode(const UtteranceEncoder<S>& enc, const ParamStore<S>& ps,
                                       const MatX<S>& x_std) {
  Tape<S> t;
  VarPack p = lift(t, ps, false);
  Var e = enc(t, p, t.constant(x_std));
  return {t.val(e).col(0)};
}

}  // namespace vslm
