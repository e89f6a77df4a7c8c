#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "vslm/data.hpp"
#include "vslm/rng.hpp"
#include "vslm/serialize.hpp"
#include "vslm/types.hpp"

namespace vslm {

enum class FeatureKind { kRawFrame, kContextWindow };

inline const char* feature_kind_name(FeatureKind k) {
  return k == FeatureKind::kRawFrame ? "raw_frame" : "context_window";
}

inline FeatureKind feature_kind_from_name(const std::string& s) {
  if (s == "raw_frame") return FeatureKind::kRawFrame;
  if (s == "context_window") return FeatureKind::kContextWindow;
  throw std::invalid_argument("unknown feature_kind: " + s);
}

/// k-means centroids over per-frame features. Clustering runs in double
/// regardless of the model scalar so refits are bit-reproducible.
template <typename S>
struct Codebook {
  MatX<S> centroids;  // [d_feat x k], one centroid per column
  FeatureKind feature_kind = FeatureKind::kRawFrame;
  double inertia = 0.0;
  int iterations = 0;
  std::uint64_t seed = 0;

  int k() const { return static_cast<int>(centroids.cols()); }
  int d_feat() const { return static_cast<int>(centroids.rows()); }
};

namespace detail {

/// Stacks +/-2 neighbouring frames (clamped at the edges).
template <typename S>
MatX<S> context_window_features(const MatX<S>& frames) {
  const int d = static_cast<int>(frames.rows());
  const int T = static_cast<int>(frames.cols());
  MatX<S> out(5 * d, T);
  for (int t = 0; t < T; ++t)
    for (int o = -2; o <= 2; ++o)
      out.col(t).segment((o + 2) * d, d) = frames.col(std::clamp(t + o, 0, T - 1));
  return out;
}

template <typename S>
MatX<S> tokenizer_features(const Corpus<S>& corpus, int u, FeatureKind kind) {
  const MatX<S> std_frames = corpus.standardize(corpus.utts[u].features.frames);
  return kind == FeatureKind::kRawFrame ? std_frames : context_window_features(std_frames);
}

inline int nearest_centroid(const MatXd& centroids, const VecXd& x, double* dist2_out = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::max();
  for (int c = 0; c < centroids.cols(); ++c) {
    const double d = (centroids.col(c) - x).squaredNorm();
    if (d < best_d) {  // strict: ties resolve to the lowest index
      best_d = d;
      best = c;
    }
  }
  if (dist2_out) *dist2_out = best_d;
  return best;
}

}  // namespace detail

namespace detail {

struct LloydResult {
  MatXd centroids;
  double inertia = 0;
  int iterations = 0;
};

/// One k-means++ seeding followed by Lloyd iterations.
inline LloydResult lloyd_run(const MatXd& frames, int k, RngStream& rng, int max_iter,
                             double tol) {
  const int n = static_cast<int>(frames.cols());
  const int d = static_cast<int>(frames.rows());
  MatXd centroids(d, k);
  // greedy k-means++ seeding: several d^2-weighted candidates per step,
  // keeping the one that lowers the potential most
  const int n_candidates = 2 + static_cast<int>(std::log(double(k)));
  std::vector<double> dist2(n);
  centroids.col(0) = frames.col(rng.uniform_int(n));
  for (int i = 0; i < n; ++i) dist2[i] = (frames.col(i) - centroids.col(0)).squaredNorm();
  std::vector<double> cand_dist(n), best_dist(n);
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (int i = 0; i < n; ++i) total += dist2[i];
    int best_pick = -1;
    double best_potential = std::numeric_limits<double>::max();
    for (int cand = 0; cand < n_candidates; ++cand) {
      double r = rng.uniform() * total;
      int pick = n - 1;
      for (int i = 0; i < n; ++i) {
        r -= dist2[i];
        if (r <= 0) {
          pick = i;
          break;
        }
      }
      double potential = 0;
      for (int i = 0; i < n; ++i) {
        cand_dist[i] = std::min(dist2[i], (frames.col(i) - frames.col(pick)).squaredNorm());
        potential += cand_dist[i];
      }
      if (potential < best_potential) {
        best_potential = potential;
        best_pick = pick;
        best_dist.swap(cand_dist);
      }
    }
    centroids.col(c) = frames.col(best_pick);
    dist2 = best_dist;
  }

  std::vector<int> assign(n);
  double inertia = 0;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    inertia = 0;
    for (int i = 0; i < n; ++i) {
      double d2;
      assign[i] = nearest_centroid(centroids, frames.col(i), &d2);
      inertia += d2;
    }
    MatXd sums = MatXd::Zero(d, k);
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums.col(assign[i]) += frames.col(i);
      ++counts[assign[i]];
    }
    // empty-cluster repair: farthest point of the largest cluster
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      int big = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      int far_i = -1;
      double far_d = -1;
      for (int i = 0; i < n; ++i) {
        if (assign[i] != big) continue;
        const double d2 = (frames.col(i) - centroids.col(big)).squaredNorm();
        if (d2 > far_d) {
          far_d = d2;
          far_i = i;
        }
      }
      sums.col(big) -= frames.col(far_i);
      --counts[big];
      sums.col(c) = frames.col(far_i);
      counts[c] = 1;
      assign[far_i] = c;
    }
    MatXd next(d, k);
    for (int c = 0; c < k; ++c) next.col(c) = sums.col(c) / counts[c];
    const double shift = (next - centroids).colwise().norm().maxCoeff();
    centroids = next;
    if (shift < tol) {
      ++iter;
      break;
    }
  }
  // final inertia under the converged centroids
  inertia = 0;
  for (int i = 0; i < n; ++i) {
    double d2;
    nearest_centroid(centroids, frames.col(i), &d2);
    inertia += d2;
  }
  return {std::move(centroids), inertia, iter};
}

}  // namespace detail

/// Lloyd iterations with k-means++ seeding; stops when the largest
/// centroid shift drops below tol. Empty clusters are repaired by taking
/// the farthest point of the largest cluster. Runs n_init seeded restarts
/// and keeps the lowest inertia.
template <typename S>
Codebook<S> fit_codebook_frames(const MatXd& frames, int k, std::uint64_t seed,
                                int max_iter = 100, double tol = 1e-8,
                                FeatureKind kind = FeatureKind::kRawFrame, int n_init = 8) {
  if (k < 2) throw std::invalid_argument("fit_codebook: k must be >= 2");
  if (!frames.allFinite()) throw std::invalid_argument("fit_codebook: non-finite features");
  const int n = static_cast<int>(frames.cols());
  {
    // distinct-frame check, sufficient for the k <= n regime used here
    std::vector<int> probe;
    for (int i = 0; i < n && static_cast<int>(probe.size()) < k; ++i) {
      bool dup = false;
      for (int j : probe)
        if ((frames.col(i) - frames.col(j)).squaredNorm() == 0.0) {
          dup = true;
          break;
        }
      if (!dup) probe.push_back(i);
    }
    if (static_cast<int>(probe.size()) < k)
      throw std::invalid_argument("fit_codebook: fewer distinct frames than k");
  }

  detail::LloydResult best;
  best.inertia = std::numeric_limits<double>::max();
  for (int restart = 0; restart < n_init; ++restart) {
    RngStream rng = RngStream::fork(seed, "kmeans++", restart);
    auto run = detail::lloyd_run(frames, k, rng, max_iter, tol);
    if (run.inertia < best.inertia) best = std::move(run);
  }

  Codebook<S> cb;
  cb.centroids = best.centroids.cast<S>();
  cb.feature_kind = kind;
  cb.inertia = best.inertia;
  cb.iterations = best.iterations;
  cb.seed = seed;
  return cb;
}

/// Fits on a random fraction of all frames in the corpus (without
/// replacement, order-stable).
template <typename S>
Codebook<S> fit_codebook(const Corpus<S>& corpus, int k, std::uint64_t seed,
                         double sample_frac = 0.1, int max_iter = 100, double tol = 1e-8,
                         FeatureKind kind = FeatureKind::kRawFrame) {
  std::vector<MatXd> chunks;
  std::int64_t total = 0;
  for (int u = 0; u < corpus.size(); ++u) {
    chunks.push_back(detail::tokenizer_features(corpus, u, kind).template cast<double>());
    total += chunks.back().cols();
  }
  RngStream rng = RngStream::fork(seed, "kmeans-sample");
  std::vector<std::int64_t> keep;
  for (std::int64_t i = 0; i < total; ++i)
    if (rng.uniform() < sample_frac) keep.push_back(i);
  if (static_cast<int>(keep.size()) < k) {  // tiny corpora: fall back to all frames
    keep.resize(total);
    for (std::int64_t i = 0; i < total; ++i) keep[i] = i;
  }
  const int d = static_cast<int>(chunks[0].rows());
  MatXd sample(d, keep.size());
  std::size_t ci = 0, base = 0, out = 0;
  for (std::int64_t idx : keep) {
    while (idx >= static_cast<std::int64_t>(base + chunks[ci].cols())) {
      base += chunks[ci].cols();
      ++ci;
    }
    sample.col(out++) = chunks[ci].col(idx - base);
  }
  return fit_codebook_frames<S>(sample, k, seed, max_iter, tol, kind);
}

/// Nearest-centroid assignment by squared Euclidean distance; ties break
/// to the lowest index. Input frames must already be standardized when the
/// codebook was fit on standardized features.
template <typename S>
TokenSeq tokenize_frames(const MatX<S>& frames, const Codebook<S>& cb) {
  const MatX<S> feats = cb.feature_kind == FeatureKind::kRawFrame
                            ? frames
                            : detail::context_window_features(frames);
  if (feats.rows() != cb.centroids.rows())
    throw std::invalid_argument("tokenize: feature dimension mismatch");
  const MatXd cd = cb.centroids.template cast<double>();
  TokenSeq seq;
  seq.k = cb.k();
  seq.tokens.resize(feats.cols());
  for (int t = 0; t < feats.cols(); ++t) {
    const VecXd x = feats.col(t).template cast<double>();
    seq.tokens[t] = static_cast<std::int32_t>(detail::nearest_centroid(cd, x));
  }
  return seq;
}

template <typename S>
TokenSeq tokenize(const FeatureSeq<S>& x, const Codebook<S>& cb, const Corpus<S>& stats_src) {
  return tokenize_frames<S>(stats_src.standardize(x.frames), cb);
}

// ---------------------------------------------------------------------------
// Codebook file: structured text header then the binary centroid array.
// ---------------------------------------------------------------------------

template <typename S>
void save_codebook(const Codebook<S>& cb, const std::string& path) {
  auto os = io::open_out(path);
  std::string header = "VSCB1\nk=" + std::to_string(cb.k()) +
                       "\nd_feat=" + std::to_string(cb.d_feat()) +
                       "\nfeature_kind=" + feature_kind_name(cb.feature_kind) +
                       "\nseed=" + std::to_string(cb.seed) +
                       "\ninertia=" + std::to_string(cb.inertia) +
                       "\niterations=" + std::to_string(cb.iterations) + "\n\n";
  io::write_bytes(os, header.data(), header.size());
  MatXd c = cb.centroids.template cast<double>();
  io::write_bytes(os, c.data(), sizeof(double) * c.size());
}

template <typename S>
Codebook<S> load_codebook(const std::string& path) {
  auto is = io::open_in(path);
  std::string line;
  std::getline(is, line);
  if (line != "VSCB1") throw std::runtime_error("bad codebook header in " + path);
  Codebook<S> cb;
  int k = 0, d = 0;
  while (std::getline(is, line) && !line.empty()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad codebook header line: " + line);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "k")
      k = std::stoi(val);
    else if (key == "d_feat")
      d = std::stoi(val);
    else if (key == "feature_kind")
      cb.feature_kind = feature_kind_from_name(val);
    else if (key == "seed")
      cb.seed = std::stoull(val);
    else if (key == "inertia")
      cb.inertia = std::stod(val);
    else if (key == "iterations")
      cb.iterations = std::stoi(val);
  }
  MatXd c(d, k);
  io::read_bytes(is, c.data(), sizeof(double) * c.size());
  cb.centroids = c.cast<S>();
  return cb;
}

}  // namespace vslm
