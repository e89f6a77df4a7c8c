#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "vslm/prior.hpp"

using namespace vslm;

namespace {

template <typename S>
struct PriorFixture {
  ParamStore<S> ps;
  PriorNet<S> prior;
  FlowStack<S> flow;
  PriorFixture(Variant v, int k, int d_z, int dim, int heads, int ff, int layers,
               int flow_blocks, std::uint64_t seed) {
    RngStream rng(seed);
    prior = PriorNet<S>::make(ps, rng, "prior", v, k, d_z, dim, heads, ff, layers, 8);
    flow = FlowStack<S>::make(ps, rng, "flow", flow_blocks, d_z, dim, 16);
  }
};

std::vector<std::int32_t> random_tokens(RngStream& rng, int T, int k) {
  std::vector<std::int32_t> t(T);
  for (auto& v : t) v = static_cast<std::int32_t>(rng.uniform_int(k));
  return t;
}

}  // namespace

TEST_CASE("prior forward: shapes, T=1, softmax normalization, errors") {
  PriorFixture<double> fx(Variant::kFull, 5, 2, 16, 2, 32, 2, 0, 1);
  RngStream rng(2);

  Tape<double> t;
  VarPack p = lift(t, fx.ps, false);
  auto tokens = random_tokens(rng, 7, 5);
  Var lat = t.constant(standard_normal<double>(rng, 2, 7));
  auto out = fx.prior(t, p, &tokens, lat);
  CHECK(t.rows(out.token_logits) == 5);
  CHECK(t.cols(out.token_logits) == 7);
  CHECK(t.rows(out.base_mean) == 2);
  CHECK(t.cols(out.ctx) == 7);

  // softmax over logits sums to 1
  Var sm = colwise_softmax(t, out.token_logits);
  for (int j = 0; j < 7; ++j) CHECK(t.val(sm).col(j).sum() == doctest::Approx(1.0).epsilon(1e-9));

  // T = 1: conditioned on BOS only
  std::vector<std::int32_t> one = {3};
  Var lat1 = t.constant(standard_normal<double>(rng, 2, 1));
  auto out1 = fx.prior(t, p, &one, lat1);
  CHECK(t.cols(out1.ctx) == 1);

  // token out of range
  std::vector<std::int32_t> bad = {9};
  CHECK_THROWS_AS(fx.prior(t, p, &bad, lat1), std::invalid_argument);
  std::vector<std::int32_t> empty;
  CHECK_THROWS_AS(fx.prior(t, p, &empty, std::nullopt), std::invalid_argument);
}

TEST_CASE("causality: changing frame t+1 leaves outputs 1..t bitwise unchanged") {
  PriorFixture<double> fx(Variant::kFull, 6, 3, 16, 2, 32, 2, 0, 3);
  RngStream rng(5);
  const int T = 10;
  auto tokens = random_tokens(rng, T, 6);
  MatXd lat = standard_normal<double>(rng, 3, T);

  auto run = [&](const std::vector<std::int32_t>& tk, const MatXd& lt) {
    Tape<double> t;
    VarPack p = lift(t, fx.ps, false);
    auto out = fx.prior(t, p, &tk, t.constant(lt));
    return std::tuple<MatXd, MatXd, MatXd>(t.val(out.token_logits), t.val(out.base_mean),
                                           t.val(out.ctx));
  };
  auto [lg0, bm0, cx0] = run(tokens, lat);

  const int tmod = 6;  // modify frame index 6 (0-based), outputs 0..6 must not move
  auto tokens2 = tokens;
  tokens2[tmod] = (tokens2[tmod] + 1) % 6;
  MatXd lat2 = lat;
  lat2.col(tmod).array() += 2.0;
  auto [lg1, bm1, cx1] = run(tokens2, lat2);

  for (int t = 0; t <= tmod; ++t) {
    CHECK(lg0.col(t) == lg1.col(t));
    CHECK(bm0.col(t) == bm1.col(t));
    CHECK(cx0.col(t) == cx1.col(t));
  }
  // and position t+1 does change
  CHECK((lg0.col(tmod + 1) - lg1.col(tmod + 1)).cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("token_nll: uniform logits, one-hot logits, brute-force agreement") {
  Tape<double> t;
  const int k = 200, T = 4;
  Var uniform = t.constant(MatXd::Zero(k, T));
  std::vector<std::int32_t> tokens = {0, 57, 123, 199};
  Var nll = token_nll(t, uniform, tokens);
  CHECK(t.val(nll)(0, 0) == doctest::Approx(std::log(200.0)).epsilon(1e-12));

  // one-hot-correct logits with a growing gap drive the NLL to zero
  MatXd sharp = MatXd::Zero(5, 3);
  std::vector<std::int32_t> tk = {1, 4, 0};
  for (int j = 0; j < 3; ++j) sharp(tk[j], j) = 50.0;
  Var nll2 = token_nll(t, t.constant(sharp), tk);
  CHECK(t.val(nll2)(0, 0) < 1e-12);

  // random case vs independent log-sum-exp accumulation
  RngStream rng(9);
  MatXd logits = standard_normal<double>(rng, 7, 6);
  auto tks = random_tokens(rng, 6, 7);
  Var nll3 = token_nll(t, t.constant(logits), tks);
  double expect = 0;
  for (int j = 0; j < 6; ++j) {
    long double m = logits.col(j).maxCoeff();
    long double lse = 0;
    for (int i = 0; i < 7; ++i) lse += std::exp((long double)logits(i, j) - m);
    expect += double(m + std::log(lse)) - logits(tks[j], j);
  }
  expect /= 6;
  CHECK(t.val(nll3)(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  std::vector<std::int32_t> wrong = {0, 1};
  CHECK_THROWS_AS(token_nll(t, t.constant(logits), wrong), std::invalid_argument);
}

TEST_CASE("continuous_kl: identity-flow branch is the exact closed form") {
  PriorFixture<double> fx(Variant::kFull, 4, 2, 12, 2, 24, 1, 0, 7);
  RngStream rng(3);
  const int T = 5;
  Tape<double> t;
  VarPack p = lift(t, fx.ps, false);
  Var qm = t.constant(standard_normal<double>(rng, 2, T));
  Var ql = t.constant(0.2 * standard_normal<double>(rng, 2, T));
  Var pm = t.constant(standard_normal<double>(rng, 2, T));
  Var pl = t.constant(0.2 * standard_normal<double>(rng, 2, T));
  Var ctx = t.constant(standard_normal<double>(rng, 12, T));

  RngStream mc(1);
  Var kl = continuous_kl(t, fx.flow, p, qm, ql, pm, pl, ctx, 1, mc);
  double expect = 0;
  for (int j = 0; j < T; ++j) {
    DiagGaussian<double> q{t.val(qm).col(j), t.val(ql).col(j)};
    DiagGaussian<double> pr{t.val(pm).col(j), t.val(pl).col(j)};
    expect += kl_divergence(q, pr);
  }
  expect /= T;
  CHECK(t.val(kl)(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  // q == p -> 0
  Var kl0 = continuous_kl(t, fx.flow, p, qm, ql, qm, ql, ctx, 1, mc);
  CHECK(t.val(kl0)(0, 0) == 0.0);
}

TEST_CASE("continuous_kl MC estimate matches 2-d quadrature through a flow") {
  PriorFixture<double> fx(Variant::kFull, 4, 2, 8, 2, 16, 1, 3, 11);
  // move the flow away from identity
  RngStream prng(4);
  for (auto& name : fx.ps.names) {
    int h = fx.ps.index[name];
    if (name.rfind("flow.", 0) == 0)
      fx.ps[h] = fx.ps[h] + 0.15 * standard_normal<double>(prng, fx.ps[h].rows(), fx.ps[h].cols());
  }
  RngStream rng(6);
  MatXd qm = 0.3 * standard_normal<double>(rng, 2, 1);
  MatXd ql = 0.2 * standard_normal<double>(rng, 2, 1);
  MatXd pm = 0.3 * standard_normal<double>(rng, 2, 1);
  MatXd pl = 0.2 * standard_normal<double>(rng, 2, 1);
  MatXd ctx = standard_normal<double>(rng, 8, 1);

  // MC estimate with a large sample
  Tape<double> t;
  VarPack p = lift(t, fx.ps, false);
  RngStream mc(99);
  const int n_mc = 100000;
  Var kl = continuous_kl(t, fx.flow, p, t.constant(qm), t.constant(ql), t.constant(pm),
                         t.constant(pl), t.constant(ctx), n_mc, mc);
  const double mc_est = t.val(kl)(0, 0);

  // grid quadrature of KL(q || p_flow)
  const double lo = -6, hi = 6;
  const int n = 500;
  const double step = (hi - lo) / n;
  double quad = 0;
  MatXd z(2, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) z.col(j) << lo + (i + 0.5) * step, lo + (j + 0.5) * step;
    VecXd lq(n), lp(n);
    MatXd ctxn = ctx.replicate(1, n);
    lp = flow_log_prob_plain(fx.flow, fx.ps, z, MatXd(pm.replicate(1, n)),
                             MatXd(pl.replicate(1, n)), ctxn);
    for (int j = 0; j < n; ++j) {
      DiagGaussian<double> q{qm.col(0), ql.col(0)};
      lq(j) = log_prob(q, VecXd(z.col(j)));
    }
    quad += ((lq.array().exp()) * (lq - lp).array()).sum() * step * step;
  }
  CHECK(std::abs(mc_est - quad) <= 0.01 * std::max(1.0, std::abs(quad)));
}

TEST_CASE("prior_sample_step: greedy limit, defaults, seeded determinism") {
  PriorFixture<double> fx(Variant::kFull, 6, 2, 12, 2, 24, 1, 2, 15);
  RngStream rng(8);
  TokenSeq prefix;
  prefix.k = 6;
  prefix.tokens = random_tokens(rng, 4, 6);
  MatXd lat = standard_normal<double>(rng, 2, 4);

  RngStream s1(42), s2(42);
  auto [tok1, z1] = prior_sample_step<double>(fx.prior, fx.flow, fx.ps, &prefix, &lat, 0.85,
                                              0.85, s1);
  auto [tok2, z2] = prior_sample_step<double>(fx.prior, fx.flow, fx.ps, &prefix, &lat, 0.85,
                                              0.85, s2);
  CHECK(tok1 == tok2);
  CHECK(z1 == z2);

  // tau_d -> 0 gives the argmax token regardless of the seed
  RngStream s3(1), s4(999);
  auto [g1, zz1] = prior_sample_step<double>(fx.prior, fx.flow, fx.ps, &prefix, &lat, 1e-9,
                                             0.85, s3);
  auto [g2, zz2] = prior_sample_step<double>(fx.prior, fx.flow, fx.ps, &prefix, &lat, 1e-9,
                                             0.85, s4);
  CHECK(g1 == g2);

  RngStream s5(3);
  CHECK_THROWS_AS((prior_sample_step<double>(fx.prior, fx.flow, fx.ps, &prefix, &lat, 0.0, 0.85,
                                             s5)),
                  std::invalid_argument);
  CHECK_THROWS_AS((prior_sample_step<double>(fx.prior, fx.flow, fx.ps, &prefix, &lat, 0.85,
                                             -1.0, s5)),
                  std::invalid_argument);
}

TEST_CASE("sequence_log_likelihood: uniform model, additivity, stepwise brute force") {
  PriorFixture<double> fx(Variant::kFull, 5, 2, 12, 2, 24, 1, 2, 23);
  RngStream rng(4);
  const int T = 5;
  TokenSeq seq;
  seq.k = 5;
  seq.tokens = random_tokens(rng, T, 5);
  MatXd lat = standard_normal<double>(rng, 2, T);

  const double lt = sequence_log_likelihood<double>(fx.prior, fx.flow, fx.ps, &seq, &lat,
                                                    LikelihoodMode::kTokensOnly);
  const double ll = sequence_log_likelihood<double>(fx.prior, fx.flow, fx.ps, &seq, &lat,
                                                    LikelihoodMode::kLatentsOnly);
  const double lj = sequence_log_likelihood<double>(fx.prior, fx.flow, fx.ps, &seq, &lat,
                                                    LikelihoodMode::kJoint);
  // joint = tokens + latents after re-normalization (algebraic identity)
  CHECK(lj == doctest::Approx(lt + ll).epsilon(1e-10));

  // stepwise brute-force accumulation: evaluate each position by running
  // the prior on the prefix only
  double acc_tok = 0, acc_lat = 0;
  for (int t = 0; t < T; ++t) {
    Tape<double> tp;
    VarPack p = lift(tp, fx.ps, false);
    std::vector<std::int32_t> tk(seq.tokens.begin(), seq.tokens.begin() + t + 1);
    MatXd lt_prefix = lat.leftCols(t + 1);
    auto out = fx.prior(tp, p, &tk, tp.constant(lt_prefix));
    VecXd logits = tp.val(out.token_logits).col(t);
    const double m = logits.maxCoeff();
    acc_tok += logits(seq.tokens[t]) - (m + std::log((logits.array() - m).exp().sum()));
    MatXd z = lat.col(t), bm = tp.val(out.base_mean).col(t), bl = tp.val(out.base_log_std).col(t),
          cx = tp.val(out.ctx).col(t);
    acc_lat += flow_log_prob_plain(fx.flow, fx.ps, z, bm, bl, cx)(0);
  }
  CHECK(lt == doctest::Approx(acc_tok / T).epsilon(1e-9));
  CHECK(ll == doctest::Approx(acc_lat / T).epsilon(1e-9));

  // uniform-logit model: tokens_only NLL is exactly -log k
  ParamStore<double> ps0;
  RngStream r0(1);
  auto prior0 = PriorNet<double>::make(ps0, r0, "p", Variant::kTokenOnly, 5, 0, 8, 2, 16, 1, 4);
  // zero the token head so logits are uniform
  ps0[prior0.head_tok.W].setZero();
  ps0[prior0.head_tok.b].setZero();
  FlowStack<double> noflow;
  const double lu = sequence_log_likelihood<double>(prior0, noflow, ps0, &seq, nullptr,
                                                    LikelihoodMode::kTokensOnly);
  CHECK(lu == doctest::Approx(-std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("nonnegativity of the MC KL estimator in expectation") {
  PriorFixture<double> fx(Variant::kFull, 4, 2, 8, 2, 16, 1, 2, 29);
  RngStream rng(12);
  MatXd qm = 0.4 * standard_normal<double>(rng, 2, 3);
  MatXd ql = 0.3 * standard_normal<double>(rng, 2, 3);
  MatXd pm = 0.4 * standard_normal<double>(rng, 2, 3);
  MatXd pl = 0.3 * standard_normal<double>(rng, 2, 3);
  MatXd ctx = standard_normal<double>(rng, 8, 3);

  // mean over 100 reseeds stays >= -3 standard errors
  std::vector<double> vals;
  for (int trial = 0; trial < 100; ++trial) {
    Tape<double> t;
    VarPack p = lift(t, fx.ps, false);
    RngStream mc(1000 + trial);
    Var kl = continuous_kl(t, fx.flow, p, t.constant(qm), t.constant(ql), t.constant(pm),
                           t.constant(pl), t.constant(ctx), 1, mc);
    vals.push_back(t.val(kl)(0, 0));
  }
  double mean = 0, var = 0;
  for (double v : vals) mean += v;
  mean /= vals.size();
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= vals.size();
  const double se = std::sqrt(var / vals.size());
  CHECK(mean >= -3 * se);
}

TEST_CASE("prior + flow gradients match finite differences on a micro model") {
  PriorFixture<double> fx(Variant::kFull, 5, 2, 16, 2, 32, 2, 2, 31);
  RngStream rng(14);
  const int T = 6;
  auto tokens = random_tokens(rng, T, 5);
  int qmh = fx.ps.add("test.qm", 0.4 * standard_normal<double>(rng, 2, T));
  int qlh = fx.ps.add("test.ql", 0.3 * standard_normal<double>(rng, 2, T));
  MatXd noise = standard_normal<double>(rng, 2, T);

  auto build = [&](Tape<double>& t, const VarPack& p) {
    Var z = reparameterize(t, p[qmh], p[qlh], noise);
    auto out = fx.prior(t, p, &tokens, z);
    Var nll = token_nll(t, out.token_logits, tokens);
    Var kl = continuous_kl_at(t, fx.flow, p, p[qmh], p[qlh], z, out.base_mean,
                              out.base_log_std, out.ctx);
    return add(t, nll, kl);
  };
  auto eval = [&]() {
    Tape<double> t;
    VarPack p = lift(t, fx.ps);
    return t.val(build(t, p))(0, 0);
  };

  Tape<double> t;
  VarPack p = lift(t, fx.ps);
  t.backward(build(t, p));

  for (int h = 0; h < fx.ps.size(); ++h) {
    const auto& g = t.grad(p[h]);
    MatXd ga = g.size() ? g : MatXd::Zero(fx.ps[h].rows(), fx.ps[h].cols());
    CAPTURE(fx.ps.names[h]);
    CHECK(test::finite_diff_subset_err<double>(fx.ps, h, ga, eval, 1e-5, 16) < 1e-4);
  }
}
