#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "vslm/tokenizer.hpp"

using namespace vslm;

namespace {

SynthCorpusSpec spec_for_tokens() {
  SynthCorpusSpec s;
  s.num_utterances = 20;
  s.num_phone_states = 8;
  s.d_x = 12;
  s.prosody_channels = 2;
  s.noise_scale = 0.05;
  s.seed = 7;
  s.min_frames = 80;
  s.max_frames = 120;
  return s;
}

}  // namespace

TEST_CASE("k distinct repeated points are recovered exactly") {
  RngStream rng(3);
  const int k = 5, d = 4;
  MatXd points = standard_normal<double>(rng, d, k);
  MatXd frames(d, k * 20);
  for (int i = 0; i < k * 20; ++i) frames.col(i) = points.col(i % k);
  auto cb = fit_codebook_frames<double>(frames, k, 11);
  CHECK(cb.inertia == doctest::Approx(0.0).epsilon(1e-12));
  // every point matches some centroid exactly
  for (int c = 0; c < k; ++c) {
    double best = 1e9;
    for (int j = 0; j < k; ++j)
      best = std::min(best, (cb.centroids.col(j) - points.col(c)).squaredNorm());
    CHECK(best < 1e-20);
  }
}

TEST_CASE("refitting with the same seed reproduces the codebook bitwise") {
  auto corpus = generate_synth_corpus<float>(spec_for_tokens());
  auto a = fit_codebook(corpus, 8, 99, 0.5);
  auto b = fit_codebook(corpus, 8, 99, 0.5);
  CHECK(a.centroids == b.centroids);
  CHECK(a.inertia == b.inertia);
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("fit errors: too few distinct frames, non-finite input") {
  MatXd frames(3, 10);
  for (int i = 0; i < 10; ++i) frames.col(i) = VecXd::Constant(3, i % 2);
  CHECK_THROWS_AS(fit_codebook_frames<double>(frames, 5, 1), std::invalid_argument);
  frames(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit_codebook_frames<double>(frames, 2, 1), std::invalid_argument);
}

TEST_CASE("tokenize: exact centroid hits, brute-force agreement, determinism") {
  auto corpus = generate_synth_corpus<double>(spec_for_tokens());
  auto cb = fit_codebook(corpus, 8, 5, 0.5);

  // frame exactly at centroid j -> token j
  MatXd at_centroids = cb.centroids;
  auto tokens = tokenize_frames<double>(at_centroids, cb);
  for (int j = 0; j < cb.k(); ++j) CHECK(tokens.tokens[j] == j);

  // brute-force argmin over all k distances for 1000 random frames
  RngStream rng(21);
  MatXd frames = standard_normal<double>(rng, cb.d_feat(), 1000);
  auto got = tokenize_frames<double>(frames, cb);
  for (int t = 0; t < 1000; ++t) {
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < cb.k(); ++c) {
      const double d = (frames.col(t) - cb.centroids.col(c)).squaredNorm();
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    CHECK(got.tokens[t] == best);
    // invariant: assigned distance is minimal
    const double ad = (frames.col(t) - cb.centroids.col(got.tokens[t])).squaredNorm();
    CHECK(ad <= bd + 1e-12);
  }

  auto again = tokenize_frames<double>(frames, cb);
  CHECK(got.tokens == again.tokens);

  MatXd wrong(cb.d_feat() + 1, 5);
  wrong.setZero();
  CHECK_THROWS_AS(tokenize_frames<double>(wrong, cb), std::invalid_argument);
}

TEST_CASE("tokens recover phone states up to permutation on clean corpora") {
  // default corpus geometry: 16 spectral + 4 prosody channels, 12 states
  SynthCorpusSpec spec;
  spec.num_utterances = 40;
  spec.noise_scale = 0.05;
  spec.seed = 17;
  spec.min_frames = 100;
  spec.max_frames = 160;
  auto corpus = generate_synth_corpus<double>(spec);
  auto cb = fit_codebook(corpus, spec.num_phone_states, 13, 0.5);

  // greedy best-match between tokens and ground-truth states
  const int k = spec.num_phone_states;
  MatXd conf = MatXd::Zero(k, k);
  std::int64_t total = 0;
  std::vector<TokenSeq> seqs;
  for (const auto& u : corpus.utts) {
    auto ts = tokenize_frames<double>(corpus.standardize(u.features.frames), cb);
    for (int t = 0; t < ts.length(); ++t) conf(ts.tokens[t], u.truth.states[t]) += 1;
    total += ts.length();
    seqs.push_back(std::move(ts));
  }
  std::vector<bool> used_tok(k, false), used_state(k, false);
  double matched = 0;
  for (int step = 0; step < k; ++step) {
    int bi = -1, bj = -1;
    double best = -1;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        if (!used_tok[i] && !used_state[j] && conf(i, j) > best) {
          best = conf(i, j);
          bi = i;
          bj = j;
        }
    used_tok[bi] = used_state[bj] = true;
    matched += best;
  }
  CHECK(matched / double(total) >= 0.95);
}

TEST_CASE("context_window feature kind stacks +-2 frames") {
  auto corpus = generate_synth_corpus<double>(spec_for_tokens());
  auto cb = fit_codebook(corpus, 6, 3, 0.5, 50, 1e-8, FeatureKind::kContextWindow);
  CHECK(cb.d_feat() == 5 * corpus.channels());
  auto ts = tokenize(corpus.utts[0].features, cb, corpus);
  CHECK(ts.length() == corpus.utts[0].features.length());
}

TEST_CASE("codebook file round trip") {
  auto corpus = generate_synth_corpus<float>(spec_for_tokens());
  auto cb = fit_codebook(corpus, 8, 99, 0.5);
  const auto path = std::filesystem::temp_directory_path() / "vslm_cb_test.bin";
  save_codebook(cb, path.string());
  auto loaded = load_codebook<float>(path.string());
  CHECK(loaded.centroids == cb.centroids);
  CHECK(loaded.k() == cb.k());
  CHECK(loaded.feature_kind == cb.feature_kind);
  CHECK(loaded.seed == cb.seed);
  std::filesystem::remove(path);
}
