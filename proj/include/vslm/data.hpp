#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vslm/rng.hpp"
#include "vslm/serialize.hpp"
#include "vslm/types.hpp"

namespace vslm {

inline constexpr double kMelLogFloor = -11.512925464970229;  // log(1e-5)

/// Recipe for the synthetic corpus: a sticky Markov chain over phone
/// states emits per-state spectral templates into the leading channels;
/// the trailing channels carry slowly varying pitch-like tracks.
struct SynthCorpusSpec {
  int num_utterances = 100;
  int num_phone_states = 12;
  int d_x = 20;
  int prosody_channels = 4;
  double transition_stickiness = 0.9;
  double noise_scale = 0.1;
  std::uint64_t seed = 1;
  int min_frames = 160;
  int max_frames = 240;
  double frame_rate_hz = 50.0;

  int spectral_channels() const { return d_x - prosody_channels; }

  void validate() const {
    if (num_utterances < 1) throw std::invalid_argument("SynthCorpusSpec.num_utterances must be >= 1");
    if (num_phone_states < 2) throw std::invalid_argument("SynthCorpusSpec.num_phone_states must be >= 2");
    if (prosody_channels < 1) throw std::invalid_argument("SynthCorpusSpec.prosody_channels must be >= 1");
    if (d_x <= prosody_channels)
      throw std::invalid_argument("SynthCorpusSpec.d_x must exceed prosody_channels");
    if (!(transition_stickiness > 0.0 && transition_stickiness < 1.0))
      throw std::invalid_argument("SynthCorpusSpec.transition_stickiness must be in (0,1)");
    if (noise_scale < 0.0) throw std::invalid_argument("SynthCorpusSpec.noise_scale must be >= 0");
    if (min_frames < 2 || max_frames < min_frames)
      throw std::invalid_argument("SynthCorpusSpec.min_frames/max_frames invalid");
    if (frame_rate_hz <= 0.0) throw std::invalid_argument("SynthCorpusSpec.frame_rate_hz must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"num_utterances", num_utterances}, {"num_phone_states", num_phone_states},
            {"d_x", d_x},                       {"prosody_channels", prosody_channels},
            {"transition_stickiness", transition_stickiness},
            {"noise_scale", noise_scale},       {"seed", seed},
            {"min_frames", min_frames},         {"max_frames", max_frames},
            {"frame_rate_hz", frame_rate_hz}};
  }

  static SynthCorpusSpec from_json(const nlohmann::json& j) {
    SynthCorpusSpec s;
    s.num_utterances = j.at("num_utterances");
    s.num_phone_states = j.at("num_phone_states");
    s.d_x = j.at("d_x");
    s.prosody_channels = j.at("prosody_channels");
    s.transition_stickiness = j.at("transition_stickiness");
    s.noise_scale = j.at("noise_scale");
    s.seed = j.at("seed");
    s.min_frames = j.at("min_frames");
    s.max_frames = j.at("max_frames");
    s.frame_rate_hz = j.at("frame_rate_hz");
    return s;
  }
};

template <typename S>
struct TruthTracks {
  std::vector<std::int32_t> states;  // [T]
  MatX<S> prosody;                   // [prosody_channels x T], the clean tracks
};

template <typename S>
struct Utterance {
  FeatureSeq<S> features;
  TruthTracks<S> truth;  // empty for ingested real audio
  bool has_truth() const { return !truth.states.empty(); }
};

template <typename S>
struct Corpus {
  std::vector<Utterance<S>> utts;
  VecX<S> mean, stddev;  // per-channel standardization statistics
  double frame_rate_hz = 50.0;
  bool synthetic = false;
  SynthCorpusSpec spec;  // valid when synthetic

  int channels() const { return utts.empty() ? 0 : utts[0].features.channels(); }
  int size() const { return static_cast<int>(utts.size()); }

  MatX<S> standardize(const MatX<S>& x) const {
    return (x.colwise() - mean).array().colwise() / stddev.array();
  }
  MatX<S> destandardize(const MatX<S>& x) const {
    return (x.array().colwise() * stddev.array()).matrix().colwise() + mean;
  }
};

/// Spectral templates are a pure function of the corpus seed. When the
/// state count fits the spectral dimension they are made orthogonal with
/// norm sqrt(d), giving uniform pairwise separation; otherwise plain
/// Gaussian draws are used.
template <typename S>
MatX<S> synth_state_templates(const SynthCorpusSpec& spec) {
  RngStream rng = RngStream::fork(spec.seed, "templates");
  const int d = spec.spectral_channels();
  const int k = spec.num_phone_states;
  MatXd g = standard_normal<double>(rng, d, k);
  if (k <= d) {
    Eigen::HouseholderQR<MatXd> qr(g);
    MatXd q = qr.householderQ() * MatXd::Identity(d, k);
    g = q * std::sqrt(double(d));
  }
  return g.cast<S>();
}

namespace detail {

template <typename S>
void compute_stats(Corpus<S>& corpus) {
  const int d = corpus.channels();
  VecX<double> sum = VecX<double>::Zero(d), sum2 = VecX<double>::Zero(d);
  std::int64_t n = 0;
  for (const auto& u : corpus.utts) {
    sum += u.features.frames.template cast<double>().rowwise().sum();
    sum2 += u.features.frames.template cast<double>().array().square().matrix().rowwise().sum();
    n += u.features.length();
  }
  VecX<double> mean = sum / double(n);
  VecX<double> var = (sum2 / double(n) - mean.array().square().matrix()).cwiseMax(0.0);
  corpus.mean = mean.template cast<S>();
  corpus.stddev = (var.array().sqrt() + 1e-6).template cast<S>();
}

inline int sample_next_state(int prev, int n_states, double stickiness, RngStream& rng) {
  if (rng.uniform() < stickiness) return prev;
  // uniform over the other states
  int s = static_cast<int>(rng.uniform_int(n_states - 1));
  return s >= prev ? s + 1 : s;
}

}  // namespace detail

/// Deterministic synthetic corpus with ground-truth state and prosody
/// tracks for the metric oracles.
template <typename S>
Corpus<S> generate_synth_corpus(const SynthCorpusSpec& spec) {
  spec.validate();
  const MatX<S> templates = synth_state_templates<S>(spec);
  const int spectral = spec.spectral_channels();

  Corpus<S> corpus;
  corpus.synthetic = true;
  corpus.spec = spec;
  corpus.frame_rate_hz = spec.frame_rate_hz;
  corpus.utts.resize(spec.num_utterances);

  for (int u = 0; u < spec.num_utterances; ++u) {
    RngStream rng = RngStream::fork(spec.seed, "utterance", u);
    const int T = spec.min_frames + static_cast<int>(rng.uniform_int(spec.max_frames - spec.min_frames + 1));

    auto& utt = corpus.utts[u];
    utt.truth.states.resize(T);
    utt.truth.states[0] = static_cast<std::int32_t>(rng.uniform_int(spec.num_phone_states));
    for (int t = 1; t < T; ++t)
      utt.truth.states[t] = static_cast<std::int32_t>(detail::sample_next_state(
          utt.truth.states[t - 1], spec.num_phone_states, spec.transition_stickiness, rng));

    // smooth pitch-like tracks: stationary AR(1), unit marginal variance
    const double rho = 0.99;
    const double step = std::sqrt(1.0 - rho * rho);
    utt.truth.prosody.resize(spec.prosody_channels, T);
    for (int c = 0; c < spec.prosody_channels; ++c) {
      double r = rng.normal();
      utt.truth.prosody(c, 0) = static_cast<S>(r);
      for (int t = 1; t < T; ++t) {
        r = rho * r + step * rng.normal();
        utt.truth.prosody(c, t) = static_cast<S>(r);
      }
    }

    MatX<S>& frames = utt.features.frames;
    frames.resize(spec.d_x, T);
    for (int t = 0; t < T; ++t) {
      frames.col(t).head(spectral) = templates.col(utt.truth.states[t]);
      if (spec.noise_scale > 0)
        for (int c = 0; c < spectral; ++c)
          frames(c, t) += static_cast<S>(spec.noise_scale * rng.normal());
      frames.col(t).tail(spec.prosody_channels) = utt.truth.prosody.col(t);
    }
    utt.features.frame_rate_hz = spec.frame_rate_hz;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_%05d", u);
    utt.features.source_id = buf;
  }

  detail::compute_stats(corpus);
  return corpus;
}

// ---------------------------------------------------------------------------
// Mel-spectrogram ingestion.
// ---------------------------------------------------------------------------

struct MelConfig {
  int n_fft = 1024;
  int hop = 320;
  int n_mels = 20;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means Nyquist

  void validate(double sample_rate) const {
    if (n_fft < 8 || (n_fft & (n_fft - 1)) != 0)
      throw std::invalid_argument("MelConfig.n_fft must be a power of two >= 8");
    if (hop < 1) throw std::invalid_argument("MelConfig.hop must be >= 1");
    if (n_mels < 1) throw std::invalid_argument("MelConfig.n_mels must be >= 1");
    const double nyquist = sample_rate / 2;
    if (fmin < 0 || (fmax != 0 && (fmax <= fmin || fmax > nyquist)))
      throw std::invalid_argument("MelConfig.fmin/fmax out of range");
  }
};

namespace detail {

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// In-place iterative radix-2 FFT.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        auto u = a[i + k], v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

/// Triangular mel filterbank over FFT magnitude bins, [n_mels x (n_fft/2+1)].
inline MatXd mel_filterbank(double sample_rate, int n_fft, int n_mels, double fmin, double fmax) {
  const int n_bins = n_fft / 2 + 1;
  if (fmax == 0.0) fmax = sample_rate / 2;
  const double mel_min = hz_to_mel(fmin), mel_max = hz_to_mel(fmax);
  std::vector<double> hz(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    hz[i] = mel_to_hz(mel_min + (mel_max - mel_min) * i / (n_mels + 1));
  MatXd fb = MatXd::Zero(n_mels, n_bins);
  for (int m = 0; m < n_mels; ++m) {
    const double left = hz[m], center = hz[m + 1], right = hz[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * sample_rate / n_fft;
      if (f > left && f < center)
        fb(m, k) = (f - left) / (center - left);
      else if (f >= center && f < right)
        fb(m, k) = (right - f) / (right - center);
    }
  }
  return fb;
}

}  // namespace detail

/// Log-magnitude mel filterbank frames with reflective padding, so
/// T = floor(len / hop) + 1. Entries are floored at log(1e-5).
template <typename S>
FeatureSeq<S> wav_to_features(const std::vector<double>& audio, double sample_rate,
                              const MelConfig& cfg) {
  if (audio.empty()) throw std::invalid_argument("wav_to_features: empty audio");
  if (sample_rate <= 0) throw std::invalid_argument("wav_to_features: unsupported sample rate");
  cfg.validate(sample_rate);

  const int len = static_cast<int>(audio.size());
  const int pad = cfg.n_fft / 2;
  // reflective padding
  std::vector<double> x(len + 2 * pad);
  for (int i = 0; i < len + 2 * pad; ++i) {
    int j = i - pad;
    if (j < 0) j = -j;
    if (j >= len) j = 2 * (len - 1) - j;
    j = std::clamp(j, 0, len - 1);
    x[static_cast<std::size_t>(i)] = audio[static_cast<std::size_t>(j)];
  }

  const int T = len / cfg.hop + 1;
  const int n_bins = cfg.n_fft / 2 + 1;
  std::vector<double> window(cfg.n_fft);
  for (int i = 0; i < cfg.n_fft; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / (cfg.n_fft - 1));

  const MatXd fb = detail::mel_filterbank(sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax);

  FeatureSeq<S> out;
  out.frames.resize(cfg.n_mels, T);
  out.frame_rate_hz = sample_rate / cfg.hop;
  std::vector<std::complex<double>> buf(cfg.n_fft);
  for (int t = 0; t < T; ++t) {
    const int start = t * cfg.hop;
    for (int i = 0; i < cfg.n_fft; ++i)
      buf[i] = {x[static_cast<std::size_t>(start + i)] * window[i], 0.0};
    detail::fft(buf);
    VecXd mag(n_bins);
    for (int k = 0; k < n_bins; ++k) mag(k) = std::abs(buf[k]);
    VecXd mel = fb * mag;
    for (int m = 0; m < cfg.n_mels; ++m)
      out.frames(m, t) = static_cast<S>(std::log(std::max(mel(m), 1e-5)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discrimination pairs.
// ---------------------------------------------------------------------------

enum class Corruption { kSwapSpan, kResampleStates };

inline Corruption corruption_from_name(const std::string& s) {
  if (s == "swap_span") return Corruption::kSwapSpan;
  if (s == "resample_states") return Corruption::kResampleStates;
  throw std::invalid_argument("unknown corruption: " + s);
}

template <typename S>
struct UtterancePair {
  FeatureSeq<S> positive;
  FeatureSeq<S> negative;
  std::string pair_id;
  int span_start = 0, span_len = 0;
  std::vector<std::int32_t> orig_states, corrupt_states;  // span only
};

/// Builds positive/negative pairs; the negative replaces a contiguous span
/// of phone states with a locally implausible sequence and re-renders the
/// spectral channels of the span from the corpus templates.
template <typename S>
std::vector<UtterancePair<S>> make_discrimination_pairs(const Corpus<S>& corpus,
                                                        Corruption corruption,
                                                        double span_frac,
                                                        std::uint64_t seed) {
  if (!corpus.synthetic) throw std::invalid_argument("pairs require a synthetic corpus");
  if (span_frac < 0 || span_frac > 1)
    throw std::invalid_argument("make_discrimination_pairs: span_frac must be in [0,1]");
  const auto& spec = corpus.spec;
  const MatX<S> templates = synth_state_templates<S>(spec);
  const int spectral = spec.spectral_channels();

  std::vector<UtterancePair<S>> pairs;
  pairs.reserve(corpus.utts.size());
  for (int u = 0; u < corpus.size(); ++u) {
    const auto& utt = corpus.utts[u];
    if (!utt.has_truth()) throw std::invalid_argument("pairs require ground-truth states");
    const int T = utt.features.length();
    RngStream rng = RngStream::fork(seed, "pair", u);

    UtterancePair<S> pr;
    pr.positive = utt.features;
    pr.negative = utt.features;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%05d", u);
    pr.pair_id = buf;
    pr.negative.source_id = pr.pair_id;

    const int span = static_cast<int>(std::lround(span_frac * T));
    if (span > T) throw std::invalid_argument("corruption span longer than utterance");
    pr.span_len = span;
    if (span == 0) {
      pairs.push_back(std::move(pr));
      continue;
    }
    const int start = static_cast<int>(rng.uniform_int(T - span + 1));
    pr.span_start = start;
    pr.orig_states.assign(utt.truth.states.begin() + start,
                          utt.truth.states.begin() + start + span);

    if (corruption == Corruption::kResampleStates) {
      // flicker: force a state change at every step, the least likely
      // behaviour under a sticky chain
      pr.corrupt_states.resize(span);
      int prev = start > 0 ? utt.truth.states[start - 1] : -1;
      for (int i = 0; i < span; ++i) {
        int s;
        do {
          s = static_cast<int>(rng.uniform_int(spec.num_phone_states));
        } while (s == prev);
        pr.corrupt_states[i] = static_cast<std::int32_t>(s);
        prev = s;
      }
      for (int i = 0; i < span; ++i) {
        const int t = start + i;
        pr.negative.frames.col(t).head(spectral) = templates.col(pr.corrupt_states[i]);
        if (spec.noise_scale > 0)
          for (int c = 0; c < spectral; ++c)
            pr.negative.frames(c, t) += static_cast<S>(spec.noise_scale * rng.normal());
      }
    } else {  // kSwapSpan: exchange the span with a disjoint span of equal length
      if (2 * span > T) throw std::invalid_argument("swap_span needs two disjoint spans");
      int other;
      do {
        other = static_cast<int>(rng.uniform_int(T - span + 1));
      } while (std::abs(other - start) < span);
      pr.corrupt_states.assign(utt.truth.states.begin() + other,
                               utt.truth.states.begin() + other + span);
      MatX<S> a = utt.features.frames.middleCols(start, span).topRows(spectral);
      MatX<S> b = utt.features.frames.middleCols(other, span).topRows(spectral);
      pr.negative.frames.middleCols(start, span).topRows(spectral) = b;
      pr.negative.frames.middleCols(other, span).topRows(spectral) = a;
    }
    pairs.push_back(std::move(pr));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Corpus on disk: manifest.json + one binary file per utterance, with
// ground-truth tracks beside the features using the `.truth` suffix.
// ---------------------------------------------------------------------------

template <typename S>
void save_feature_file(const std::string& path, const FeatureSeq<S>& f) {
  auto os = io::open_out(path);
  io::write_magic(os, "VSF1");
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(f.length()));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(f.channels()));
  io::write_pod<float>(os, static_cast<float>(f.frame_rate_hz));
  MatX<float> m = f.frames.template cast<float>();
  io::write_bytes(os, m.data(), sizeof(float) * m.size());
}

template <typename S>
FeatureSeq<S> load_feature_file(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "VSF1", path);
  const auto T = io::read_pod<std::uint32_t>(is);
  const auto d = io::read_pod<std::uint32_t>(is);
  const auto rate = io::read_pod<float>(is);
  MatX<float> m(d, T);
  io::read_bytes(is, m.data(), sizeof(float) * m.size());
  FeatureSeq<S> f;
  f.frames = m.template cast<S>();
  f.frame_rate_hz = rate;
  f.source_id = std::filesystem::path(path).stem().string();
  return f;
}

template <typename S>
void save_truth_file(const std::string& path, const TruthTracks<S>& t) {
  auto os = io::open_out(path);
  io::write_magic(os, "VST1");
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.states.size()));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.prosody.rows()));
  io::write_bytes(os, t.states.data(), sizeof(std::int32_t) * t.states.size());
  MatX<float> p = t.prosody.template cast<float>();
  io::write_bytes(os, p.data(), sizeof(float) * p.size());
}

template <typename S>
TruthTracks<S> load_truth_file(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "VST1", path);
  const auto T = io::read_pod<std::uint32_t>(is);
  const auto n_pros = io::read_pod<std::uint32_t>(is);
  TruthTracks<S> t;
  t.states.resize(T);
  io::read_bytes(is, t.states.data(), sizeof(std::int32_t) * T);
  MatX<float> p(n_pros, T);
  io::read_bytes(is, p.data(), sizeof(float) * p.size());
  t.prosody = p.template cast<S>();
  return t;
}

template <typename S>
void save_corpus(const Corpus<S>& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["frame_rate_hz"] = corpus.frame_rate_hz;
  manifest["d_x"] = corpus.channels();
  manifest["synthetic"] = corpus.synthetic;
  if (corpus.synthetic) manifest["synth_spec"] = corpus.spec.to_json();
  manifest["mean"] = std::vector<double>(corpus.mean.data(), corpus.mean.data() + corpus.mean.size());
  manifest["stddev"] =
      std::vector<double>(corpus.stddev.data(), corpus.stddev.data() + corpus.stddev.size());
  nlohmann::json entries = nlohmann::json::array();
  for (int i = 0; i < corpus.size(); ++i) {
    const auto& u = corpus.utts[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "utt_%05d", i);
    const std::string stem = buf;
    save_feature_file(dir + "/" + stem + ".vsf", u.features);
    if (u.has_truth()) save_truth_file(dir + "/" + stem + ".truth", u.truth);
    entries.push_back({{"id", u.features.source_id},
                       {"frames", u.features.length()},
                       {"file", stem + ".vsf"},
                       {"truth", u.has_truth()}});
  }
  manifest["utterances"] = entries;
  std::ofstream os(dir + "/manifest.json");
  if (!os) throw std::runtime_error("cannot write manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

template <typename S>
Corpus<S> load_corpus(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw std::runtime_error("no manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(is);
  Corpus<S> corpus;
  corpus.frame_rate_hz = manifest.at("frame_rate_hz");
  corpus.synthetic = manifest.at("synthetic");
  if (corpus.synthetic) corpus.spec = SynthCorpusSpec::from_json(manifest.at("synth_spec"));
  const auto mean = manifest.at("mean").get<std::vector<double>>();
  const auto sd = manifest.at("stddev").get<std::vector<double>>();
  corpus.mean = Eigen::Map<const VecXd>(mean.data(), mean.size()).cast<S>();
  corpus.stddev = Eigen::Map<const VecXd>(sd.data(), sd.size()).cast<S>();
  for (const auto& e : manifest.at("utterances")) {
    Utterance<S> u;
    const std::string file = e.at("file");
    u.features = load_feature_file<S>(dir + "/" + file);
    u.features.source_id = e.at("id");
    if (e.at("truth").get<bool>()) {
      std::string tpath = dir + "/" + file;
      tpath = tpath.substr(0, tpath.size() - 4) + ".truth";
      u.truth = load_truth_file<S>(tpath);
    }
    corpus.utts.push_back(std::move(u));
  }
  return corpus;
}

// pairs directory: manifest + positive/negative feature files
template <typename S>
void save_pairs(const std::vector<UtterancePair<S>>& pairs, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%05d", static_cast<int>(i));
    const std::string stem = buf;
    save_feature_file(dir + "/" + stem + ".pos.vsf", p.positive);
    save_feature_file(dir + "/" + stem + ".neg.vsf", p.negative);
    entries.push_back({{"id", p.pair_id},
                       {"pos", stem + ".pos.vsf"},
                       {"neg", stem + ".neg.vsf"},
                       {"span_start", p.span_start},
                       {"span_len", p.span_len}});
  }
  nlohmann::json manifest;
  manifest["pairs"] = entries;
  std::ofstream os(dir + "/pairs.json");
  if (!os) throw std::runtime_error("cannot write pairs manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

template <typename S>
std::vector<UtterancePair<S>> load_pairs(const std::string& dir) {
  std::ifstream is(dir + "/pairs.json");
  if (!is) throw std::runtime_error("no pairs.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(is);
  std::vector<UtterancePair<S>> pairs;
  for (const auto& e : manifest.at("pairs")) {
    UtterancePair<S> p;
    p.pair_id = e.at("id");
    p.positive = load_feature_file<S>(dir + "/" + e.at("pos").get<std::string>());
    p.negative = load_feature_file<S>(dir + "/" + e.at("neg").get<std::string>());
    p.span_start = e.at("span_start");
    p.span_len = e.at("span_len");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace vslm
