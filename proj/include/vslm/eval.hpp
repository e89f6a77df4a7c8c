#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vslm/runtime.hpp"

namespace vslm {

// ---------------------------------------------------------------------------
// Pitch tracking (real-audio path): normalized autocorrelation per frame
// with a periodicity threshold for the voicing decision.
// ---------------------------------------------------------------------------

struct PitchConfig {
  double fmin = 60.0;
  double fmax = 400.0;
  double periodicity_threshold = 0.3;
  int frame = 1024;
  int hop = 320;
};

/// Per-frame F0 in Hz; 0 marks unvoiced frames.
inline std::vector<double> track_pitch(const std::vector<double>& audio, double sample_rate,
                                       const PitchConfig& cfg = {}) {
  if (audio.empty()) throw std::invalid_argument("track_pitch: empty audio");
  const int lag_min = std::max(2, static_cast<int>(sample_rate / cfg.fmax));
  const int lag_max = static_cast<int>(sample_rate / cfg.fmin);
  if (lag_max + cfg.frame > static_cast<int>(audio.size()))
    return {};  // too short for a single frame
  std::vector<double> f0;
  for (int start = 0; start + cfg.frame + lag_max <= static_cast<int>(audio.size());
       start += cfg.hop) {
    double r0 = 1e-12;
    for (int i = 0; i < cfg.frame; ++i) r0 += audio[start + i] * audio[start + i];
    double best = 0;
    int best_lag = 0;
    for (int lag = lag_min; lag <= lag_max; ++lag) {
      double r = 0, e = 1e-12;
      for (int i = 0; i < cfg.frame; ++i) {
        r += audio[start + i] * audio[start + i + lag];
        e += audio[start + i + lag] * audio[start + i + lag];
      }
      const double norm = r / std::sqrt(r0 * e);
      if (norm > best) {
        best = norm;
        best_lag = lag;
      }
    }
    f0.push_back(best >= cfg.periodicity_threshold ? sample_rate / best_lag : 0.0);
  }
  return f0;
}

/// RMSE over frames voiced in BOTH tracks. Undefined (nullopt) when no
/// mutually voiced frame exists.
inline std::optional<double> f0_rmse_tracks(const std::vector<double>& ref,
                                            const std::vector<double>& syn) {
  const std::size_t n = std::min(ref.size(), syn.size());
  double acc = 0;
  int count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ref[i] > 0 && syn[i] > 0) {
      acc += (ref[i] - syn[i]) * (ref[i] - syn[i]);
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return std::sqrt(acc / count);
}

inline std::optional<double> f0_rmse_waveform(const std::vector<double>& ref,
                                              const std::vector<double>& syn,
                                              double sample_rate, const PitchConfig& cfg = {}) {
  return f0_rmse_tracks(track_pitch(ref, sample_rate, cfg), track_pitch(syn, sample_rate, cfg));
}

/// Synthetic path: RMSE over the designated pitch-like channel (the first
/// prosody channel); ground-truth voicing is every frame.
template <typename S>
double f0_rmse_synth(const FeatureSeq<S>& ref, const FeatureSeq<S>& syn, int prosody_channels) {
  const int T = std::min(ref.length(), syn.length());
  const int ch = ref.channels() - prosody_channels;
  if (ch < 0 || prosody_channels < 1)
    throw std::invalid_argument("f0_rmse_synth: bad prosody channel count");
  double acc = 0;
  for (int t = 0; t < T; ++t) {
    const double d = double(ref.frames(ch, t)) - double(syn.frames(ch, t));
    acc += d * d;
  }
  return std::sqrt(acc / T);
}

/// RMSE over the whole prosody block, the aggregate used by the sweeps.
template <typename S>
double prosody_rmse(const FeatureSeq<S>& ref, const FeatureSeq<S>& syn, int prosody_channels) {
  const int T = std::min(ref.length(), syn.length());
  const int c0 = ref.channels() - prosody_channels;
  double acc = 0;
  for (int t = 0; t < T; ++t)
    acc += (ref.frames.col(t).segment(c0, prosody_channels) -
            syn.frames.col(t).segment(c0, prosody_channels))
               .template cast<double>()
               .squaredNorm();
  return std::sqrt(acc / (T * prosody_channels));
}

// ---------------------------------------------------------------------------
// Mel-cepstral distortion.
// ---------------------------------------------------------------------------

/// Orthonormal DCT-II of each frame (column).
inline MatXd dct2_frames(const MatXd& x) {
  const int M = static_cast<int>(x.rows());
  MatXd basis(M, M);
  for (int k = 0; k < M; ++k)
    for (int m = 0; m < M; ++m)
      basis(k, m) = std::cos(M_PI * k * (m + 0.5) / M) *
                    (k == 0 ? std::sqrt(1.0 / M) : std::sqrt(2.0 / M));
  return basis * x;
}

/// Mean over frames of the scaled Euclidean distance between cepstral
/// coefficients 1..n_coeffs (c0 excluded). When fewer channels exist the
/// available ones are used and `used_coeffs` reports how many.
template <typename S>
double mcd(const FeatureSeq<S>& ref, const FeatureSeq<S>& syn, int n_coeffs = 23,
           int* used_coeffs = nullptr) {
  if (ref.channels() != syn.channels()) throw std::invalid_argument("mcd: channel mismatch");
  const int T = std::min(ref.length(), syn.length());
  const int avail = std::min(n_coeffs, ref.channels() - 1);
  if (used_coeffs) *used_coeffs = avail;
  MatXd cr = dct2_frames(ref.frames.leftCols(T).template cast<double>());
  MatXd cs = dct2_frames(syn.frames.leftCols(T).template cast<double>());
  double acc = 0;
  for (int t = 0; t < T; ++t)
    acc += (cr.col(t).segment(1, avail) - cs.col(t).segment(1, avail)).norm();
  const double scale = 10.0 * std::sqrt(2.0) / std::log(10.0);
  return scale * acc / T;
}

// ---------------------------------------------------------------------------
// Token-content error: a character-error-rate stand-in from run-length
// collapsed token strings.
// ---------------------------------------------------------------------------

inline std::vector<std::int32_t> collapse_runs(const std::vector<std::int32_t>& tokens) {
  std::vector<std::int32_t> runs;
  for (auto t : tokens)
    if (runs.empty() || runs.back() != t) runs.push_back(t);
  return runs;
}

inline int edit_distance(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  std::vector<int> prev(m + 1), cur(m + 1);
  for (int j = 0; j <= m; ++j) prev[j] = j;
  for (int i = 1; i <= n; ++i) {
    cur[0] = i;
    for (int j = 1; j <= m; ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[m];
}

/// Normalized edit distance between collapsed token strings; the
/// normalizer is the reference run count, so insertions can push the
/// value slightly above 1.
template <typename S>
double token_content_error(const FeatureSeq<S>& ref, const FeatureSeq<S>& syn,
                           const Codebook<S>& cb, const VecX<S>& mean, const VecX<S>& stddev) {
  auto standardize = [&](const MatX<S>& x) -> MatX<S> {
    return (x.colwise() - mean).array().colwise() / stddev.array();
  };
  auto tr = collapse_runs(tokenize_frames<S>(standardize(ref.frames), cb).tokens);
  auto ts = collapse_runs(tokenize_frames<S>(standardize(syn.frames), cb).tokens);
  if (tr.empty()) throw std::invalid_argument("token_content_error: empty reference");
  return double(edit_distance(tr, ts)) / double(tr.size());
}

// ---------------------------------------------------------------------------
// Reconstruction report.
// ---------------------------------------------------------------------------

struct UtteranceMetrics {
  std::string id;
  double f0_rmse = 0;
  double prosody_rmse = 0;
  double mcd = 0;
  double token_content_error = 0;
  bool failed = false;
  std::string error;
};

struct ReconReport {
  double f0_rmse = 0;
  double prosody_rmse = 0;
  double mcd = 0;
  double token_content_error = 0;
  int n_ok = 0, n_failed = 0;
  std::vector<UtteranceMetrics> per_utterance;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& u : per_utterance) {
      nlohmann::json r{{"id", u.id},
                       {"f0_rmse", u.f0_rmse},
                       {"prosody_rmse", u.prosody_rmse},
                       {"mcd", u.mcd},
                       {"token_content_error", u.token_content_error},
                       {"failed", u.failed}};
      if (u.failed) r["error"] = u.error;
      rows.push_back(r);
    }
    return nlohmann::json{{"aggregate",
                           {{"f0_rmse", f0_rmse},
                            {"prosody_rmse", prosody_rmse},
                            {"mcd", mcd},
                            {"token_content_error", token_content_error},
                            {"n_ok", n_ok},
                            {"n_failed", n_failed}}},
                          {"per_utterance", rows}};
  }
};

/// Reconstructs every utterance deterministically and aggregates the
/// metrics. The token-content codebook may differ from the model's (the
/// token-free variant has none of its own).
template <typename S>
ReconReport eval_report(const Model<S>& m, const Corpus<S>& corpus,
                        const Codebook<S>& metric_codebook, std::uint64_t seed,
                        int max_utts = 0) {
  ReconReport rep;
  const int n = max_utts > 0 ? std::min(max_utts, corpus.size()) : corpus.size();
  rep.per_utterance.resize(n);

#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < n; ++i) {
    auto& row = rep.per_utterance[i];
    const auto& utt = corpus.utts[i];
    row.id = utt.features.source_id;
    try {
      FeatureSeq<S> recon = reconstruct(m, utt.features, seed);
      if (corpus.synthetic) {
        row.prosody_rmse = prosody_rmse(utt.features, recon, corpus.spec.prosody_channels);
        row.f0_rmse = f0_rmse_synth(utt.features, recon, corpus.spec.prosody_channels);
      }
      row.mcd = mcd(utt.features, recon);
      row.token_content_error =
          token_content_error(utt.features, recon, metric_codebook, m.feat_mean, m.feat_std);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
  }
  for (const auto& row : rep.per_utterance) {
    if (row.failed) {
      ++rep.n_failed;
      continue;
    }
    ++rep.n_ok;
    rep.f0_rmse += row.f0_rmse;
    rep.prosody_rmse += row.prosody_rmse;
    rep.mcd += row.mcd;
    rep.token_content_error += row.token_content_error;
  }
  if (rep.n_ok > 0) {
    rep.f0_rmse /= rep.n_ok;
    rep.prosody_rmse /= rep.n_ok;
    rep.mcd /= rep.n_ok;
    rep.token_content_error /= rep.n_ok;
  }
  return rep;
}

}  // namespace vslm
