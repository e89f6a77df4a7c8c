#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "vslm/flow.hpp"

using namespace vslm;

namespace {

// Randomizes conditioner weights so blocks are far from identity.
template <typename S>
void perturb(ParamStore<S>& ps, RngStream& rng, double scale = 0.25) {
  for (auto& v : ps.values)
    for (int j = 0; j < v.cols(); ++j)
      for (int i = 0; i < v.rows(); ++i) v(i, j) += S(rng.normal() * scale);
}

template <typename S>
struct FlowFixture {
  ParamStore<S> ps;
  FlowStack<S> flow;
  FlowFixture(int blocks, int dim, int ctx_dim, int width, std::uint64_t seed,
              double perturb_scale) {
    RngStream rng(seed);
    flow = FlowStack<S>::make(ps, rng, "flow", blocks, dim, ctx_dim, width);
    if (perturb_scale > 0) perturb(ps, rng, perturb_scale);
  }
};

}  // namespace

TEST_CASE("freshly initialized flow is the identity with zero log-det") {
  FlowFixture<double> fx(4, 4, 6, 16, 11, /*perturb=*/0.0);
  RngStream rng(5);
  MatXd z = standard_normal<double>(rng, 4, 7);
  MatXd ctx = standard_normal<double>(rng, 6, 7);
  Tape<double> t;
  VarPack p = lift(t, fx.ps, false);
  auto [u, ld] = fx.flow.forward(t, p, t.constant(z), t.constant(ctx));
  CHECK((t.val(u) - z).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t.val(ld).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("round-trip identity under randomized parameters, both precisions") {
  // 100 randomized (parameters, context, z) triples at d=4
  for (int trial = 0; trial < 100; ++trial) {
    FlowFixture<double> fx(4, 4, 5, 16, 1000 + trial, 0.25);
    RngStream rng(300 + trial);
    MatXd z = standard_normal<double>(rng, 4, 3);
    MatXd ctx = standard_normal<double>(rng, 5, 3);
    auto [u, ld_fwd] = fx.flow.forward_plain(fx.ps, z, ctx);
    auto [z2, ld_inv] = fx.flow.inverse(fx.ps, u, ctx);
    CHECK((z2 - z).cwiseAbs().maxCoeff() < 1e-10);
    // log-det computed forward equals the inverse-direction accumulation
    const double ld_scale = std::max(1.0, ld_fwd.cwiseAbs().maxCoeff());
    CHECK((ld_fwd - ld_inv).cwiseAbs().maxCoeff() < 1e-9 * ld_scale);
  }
  // 32-bit round trip
  for (int trial = 0; trial < 20; ++trial) {
    FlowFixture<float> fx(4, 4, 5, 16, 2000 + trial, 0.1);
    RngStream rng(400 + trial);
    MatXf z = standard_normal<float>(rng, 4, 3);
    MatXf ctx = standard_normal<float>(rng, 5, 3);
    auto [u, ld] = fx.flow.forward_plain(fx.ps, z, ctx);
    auto [z2, ld2] = fx.flow.inverse(fx.ps, u, ctx);
    CHECK((z2 - z).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("log-det matches finite-difference Jacobian at d=4") {
  for (int trial = 0; trial < 100; ++trial) {
    FlowFixture<double> fx(4, 4, 3, 12, 5000 + trial, 0.25);
    RngStream rng(600 + trial);
    MatXd z = standard_normal<double>(rng, 4, 1);
    MatXd ctx = standard_normal<double>(rng, 3, 1);

    auto fwd = [&](const MatXd& zin) { return fx.flow.forward_plain(fx.ps, zin, ctx).first; };
    const double h = 1e-6;
    Eigen::Matrix4d J;
    for (int c = 0; c < 4; ++c) {
      MatXd zp = z, zm = z;
      zp(c, 0) += h;
      zm(c, 0) -= h;
      J.col(c) = (fwd(zp) - fwd(zm)) / (2 * h);
    }
    const double fd_logdet = std::log(std::abs(J.determinant()));
    const double ld = fx.flow.forward_plain(fx.ps, z, ctx).second(0, 0);
    CHECK(std::abs(ld - fd_logdet) <=
          1e-4 * std::max(1.0, std::abs(fd_logdet)));
  }
}

TEST_CASE("flow_log_prob: identity flow equals base log density") {
  FlowFixture<double> fx(0, 4, 3, 8, 1, 0.0);  // empty stack
  RngStream rng(9);
  MatXd z = standard_normal<double>(rng, 4, 5);
  MatXd mean = standard_normal<double>(rng, 4, 5);
  MatXd ls = 0.3 * standard_normal<double>(rng, 4, 5);
  MatXd ctx = MatXd::Zero(3, 5);
  VecXd lp = flow_log_prob_plain(fx.flow, fx.ps, z, mean, ls, ctx);
  for (int j = 0; j < 5; ++j) {
    DiagGaussian<double> g{mean.col(j), ls.col(j)};
    CHECK(lp(j) == doctest::Approx(log_prob(g, VecXd(z.col(j)))).epsilon(1e-12));
  }
}

TEST_CASE("flow density integrates to 1 on a d=2 grid") {
  FlowFixture<double> fx(4, 2, 3, 12, 77, 0.25);
  RngStream rng(13);
  MatXd ctx = standard_normal<double>(rng, 3, 1);
  MatXd mean = MatXd::Zero(2, 1);
  MatXd ls = MatXd::Zero(2, 1);

  // midpoint quadrature over a box that captures nearly all mass
  const double lo = -9, hi = 9;
  const int n = 400;
  const double step = (hi - lo) / n;
  double total = 0;
  MatXd z(2, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) z.col(j) << lo + (i + 0.5) * step, lo + (j + 0.5) * step;
    VecXd lp = flow_log_prob_plain(fx.flow, fx.ps, z, MatXd(mean.replicate(1, n)),
                                   MatXd(ls.replicate(1, n)), MatXd(ctx.replicate(1, n)));
    total += lp.array().exp().sum() * step * step;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("flow_sample: tau->0 collapses to inverse of base mean") {
  FlowFixture<double> fx(4, 4, 3, 12, 99, 0.25);
  RngStream rng(21);
  MatXd mean = standard_normal<double>(rng, 4, 6);
  MatXd ls = MatXd::Zero(4, 6);
  MatXd ctx = standard_normal<double>(rng, 3, 6);
  RngStream snoise(1);
  MatXd z = flow_sample(fx.flow, fx.ps, mean, ls, ctx, 1e-12, snoise);
  MatXd expect = fx.flow.inverse(fx.ps, mean, ctx).first;
  CHECK((z - expect).cwiseAbs().maxCoeff() < 1e-6);
  CHECK_THROWS(flow_sample(fx.flow, fx.ps, mean, ls, ctx, 0.0, snoise));
}

TEST_CASE("flow_sample determinism and identity-flow distribution (KS test)") {
  FlowFixture<double> fx(0, 1, 1, 4, 7, 0.0);
  MatXd mean = MatXd::Zero(1, 1), ls = MatXd::Zero(1, 1), ctx = MatXd::Zero(1, 1);

  RngStream a(42), b(42);
  MatXd mean100 = mean.replicate(1, 100), ls100 = ls.replicate(1, 100),
        ctx100 = ctx.replicate(1, 100);
  MatXd s1 = flow_sample(fx.flow, fx.ps, mean100, ls100, ctx100, 1.0, a);
  MatXd s2 = flow_sample(fx.flow, fx.ps, mean100, ls100, ctx100, 1.0, b);
  CHECK((s1 - s2).cwiseAbs().maxCoeff() == 0.0);

  // two-sample KS against direct base draws
  const int n = 10000;
  RngStream c(43), d(44);
  MatXd meann = mean.replicate(1, n), lsn = ls.replicate(1, n), ctxn = ctx.replicate(1, n);
  MatXd xs = flow_sample(fx.flow, fx.ps, meann, lsn, ctxn, 1.0, c);
  std::vector<double> f(xs.data(), xs.data() + n), g(n);
  for (int i = 0; i < n; ++i) g[i] = d.normal();
  std::sort(f.begin(), f.end());
  std::sort(g.begin(), g.end());
  double ks = 0;
  std::size_t i = 0, j = 0;
  while (i < f.size() && j < g.size()) {
    if (f[i] <= g[j])
      ++i;
    else
      ++j;
    ks = std::max(ks, std::abs(double(i) / n - double(j) / n));
  }
  const double crit = 1.36 * std::sqrt(2.0 / n);  // alpha = 0.05
  CHECK(ks < crit);
}

TEST_CASE("histogram of flow samples is consistent with flow density (d=2)") {
  FlowFixture<double> fx(4, 2, 2, 10, 123, 0.1);
  RngStream rng(3);
  MatXd ctx = standard_normal<double>(rng, 2, 1);
  MatXd mean = MatXd::Zero(2, 1), ls = MatXd::Zero(2, 1);

  const int n = 60000;
  RngStream srng(17);
  MatXd meann = mean.replicate(1, n), lsn2 = ls.replicate(1, n), ctxn2 = ctx.replicate(1, n);
  MatXd s = flow_sample(fx.flow, fx.ps, meann, lsn2, ctxn2, 1.0, srng);

  const double lo = -5, hi = 5;
  const int bins = 40;
  const double w = (hi - lo) / bins;
  MatXd counts = MatXd::Zero(bins, bins);
  int inside = 0;
  for (int k = 0; k < n; ++k) {
    int bi = int((s(0, k) - lo) / w), bj = int((s(1, k) - lo) / w);
    if (bi >= 0 && bi < bins && bj >= 0 && bj < bins) {
      counts(bi, bj) += 1;
      ++inside;
    }
  }
  CHECK(inside > n * 0.99);

  // KL(hist || model) over occupied bins, bin centers as density probes
  double kl = 0;
  MatXd z(2, 1);
  for (int bi = 0; bi < bins; ++bi)
    for (int bj = 0; bj < bins; ++bj) {
      if (counts(bi, bj) < 10) continue;
      const double ph = counts(bi, bj) / double(n) / (w * w);
      z << lo + (bi + 0.5) * w, lo + (bj + 0.5) * w;
      const double lq = flow_log_prob_plain(fx.flow, fx.ps, z, mean, ls, ctx)(0);
      kl += ph * (std::log(ph) - lq) * w * w;
    }
  CHECK(std::abs(kl) < 0.05);
}

TEST_CASE("flow gradients match finite differences (z, base, conditioner)") {
  FlowFixture<double> fx(2, 4, 3, 8, 31415, 0.25);
  RngStream rng(8);
  const int T = 3;
  int zh = fx.ps.add("test.z", standard_normal<double>(rng, 4, T));
  int bm = fx.ps.add("test.mean", standard_normal<double>(rng, 4, T));
  int bl = fx.ps.add("test.ls", 0.2 * standard_normal<double>(rng, 4, T));
  MatXd ctx = standard_normal<double>(rng, 3, T);

  auto eval = [&]() {
    Tape<double> t;
    VarPack p = lift(t, fx.ps);
    Var lp = flow_log_prob_cols(t, fx.flow, p, p[zh], p[bm], p[bl], t.constant(ctx));
    return t.val(mean_all(t, lp))(0, 0);
  };

  Tape<double> t;
  VarPack p = lift(t, fx.ps);
  Var lp = flow_log_prob_cols(t, fx.flow, p, p[zh], p[bm], p[bl], t.constant(ctx));
  t.backward(mean_all(t, lp));

  for (int h = 0; h < fx.ps.size(); ++h) {
    MatXd fd = test::finite_diff<double>(fx.ps, h, eval, 1e-6);
    const auto& g = t.grad(p[h]);
    MatXd ga = g.size() ? g : MatXd::Zero(fd.rows(), fd.cols());
    CAPTURE(fx.ps.names[h]);
    CHECK(test::max_rel_err(ga, fd) < 1e-5);
  }
}
