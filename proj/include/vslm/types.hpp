#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vslm {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatXf = MatX<float>;
using MatXd = MatX<double>;
using VecXf = VecX<float>;
using VecXd = VecX<double>;

/// Mel-like observed sequence. Stored with one column per frame, so the
/// column-major buffer is frame-major on disk ([T x d_x] row-major).
template <typename S>
struct FeatureSeq {
  MatX<S> frames;  // [d_x x T]
  double frame_rate_hz = 50.0;
  std::string source_id;

  int channels() const { return static_cast<int>(frames.rows()); }
  int length() const { return static_cast<int>(frames.cols()); }

  void validate() const {
    if (frames.cols() < 1) throw std::invalid_argument("FeatureSeq: T must be >= 1");
    if (!frames.allFinite()) throw std::invalid_argument("FeatureSeq: non-finite entries");
  }
};

/// Discrete semantic tokens, one per frame, values in [0, k).
struct TokenSeq {
  std::vector<std::int32_t> tokens;
  int k = 0;

  int length() const { return static_cast<int>(tokens.size()); }

  void validate() const {
    if (k < 2) throw std::invalid_argument("TokenSeq: k must be >= 2");
    for (auto t : tokens)
      if (t < 0 || t >= k) throw std::invalid_argument("TokenSeq: token out of range");
  }
};

/// Continuous per-frame latents, one column per frame.
template <typename S>
struct LatentSeq {
  MatX<S> values;  // [d_z x T]

  int dim() const { return static_cast<int>(values.rows()); }
  int length() const { return static_cast<int>(values.cols()); }
};

/// Token + latent streams of equal length.
template <typename S>
struct JointSeq {
  TokenSeq tokens;
  LatentSeq<S> latents;

  int length() const { return tokens.length(); }

  void validate() const {
    if (tokens.length() != latents.length())
      throw std::invalid_argument("JointSeq: token/latent length mismatch");
  }
};

template <typename S>
struct UtteranceEmbedding {
  VecX<S> value;
};

enum class Variant { kFull, kTokenFree, kTokenOnly };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kTokenFree: return "token_free";
    case Variant::kTokenOnly: return "token_only";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "token_free") return Variant::kTokenFree;
  if (s == "token_only") return Variant::kTokenOnly;
  throw std::invalid_argument("unknown variant: " + s);
}

}  // namespace vslm
