#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "plug/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace plug;

static Tensor<double> brute_force_u(const Tensor<double>& p, int eps) {
  int h = p.shape[0], w = p.shape[1];
  Tensor<double> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      int n = 0;
      for (int dy = -(eps - 1); dy <= eps - 1; ++dy)
        for (int dx = -(eps - 1); dx <= eps - 1; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += bce_self_scalar(p[(int64_t)yy * w + xx]);
          ++n;
        }
      out[(int64_t)y * w + x] = acc / n;
    }
  return out;
}

TEST_CASE("self cross-entropy at the reference points") {
  CHECK(bce_self_scalar(0.5) == doctest::Approx(M_LN2).epsilon(1e-12));
  CHECK(bce_self_scalar(0.8) == doctest::Approx(0.500402).epsilon(1e-5));
  double clamp = -(1e-6 * std::log(1e-6) + (1 - 1e-6) * std::log(1 - 1e-6));
  CHECK(bce_self_scalar(1e-6) == doctest::Approx(clamp).epsilon(1e-12));
  CHECK(clamp == doctest::Approx(1.48e-5).epsilon(0.01));
  // clamping: out-of-range inputs behave like the bound
  CHECK(bce_self_scalar(0.0) == bce_self_scalar(1e-6));
  CHECK(bce_self_scalar(1.0) == bce_self_scalar(1.0 - 1e-6));
}

TEST_CASE("uncertainty map: constant field and eps = 1 degeneration") {
  Tensor<double> p({8, 8});
  p.fill(0.5);
  Tensor<double> u = uncertainty_map(p, 3);
  for (int64_t i = 0; i < u.numel(); ++i) CHECK(u[i] == doctest::Approx(M_LN2).epsilon(1e-12));

  Rng rng(3);
  Tensor<double> q({8, 8});
  for (auto& v : q.data) v = rng.uniform(0.01, 0.99);
  Tensor<double> u1 = uncertainty_map(q, 1);
  for (int64_t i = 0; i < q.numel(); ++i)
    CHECK(u1[i] == doctest::Approx(bce_self_scalar(q[i])).epsilon(1e-12));
}

TEST_CASE("uncertainty map matches the brute-force window oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    int h = rng.uniform_int(3, 12), w = rng.uniform_int(3, 12);
    int eps = rng.uniform_int(1, 3);
    Tensor<double> p({h, w});
    for (auto& v : p.data) v = rng.uniform(1e-6, 1.0 - 1e-6);
    Tensor<double> u = uncertainty_map(p, eps);
    Tensor<double> ref = brute_force_u(p, eps);
    for (int64_t i = 0; i < u.numel(); ++i)
      CHECK(std::abs(u[i] - ref[i]) <= 1e-12);
  }
}

TEST_CASE("moving a probability toward 0.5 never lowers nearby uncertainty") {
  Rng rng(13);
  Tensor<double> p({9, 9});
  for (auto& v : p.data) v = rng.uniform(0.05, 0.95);
  int eps = 2;
  Tensor<double> u0 = uncertainty_map(p, eps);
  for (int trial = 0; trial < 50; ++trial) {
    int y = rng.uniform_int(0, 8), x = rng.uniform_int(0, 8);
    Tensor<double> q = p;
    double& v = q[(int64_t)y * 9 + x];
    v = 0.5 + (v - 0.5) * rng.uniform();  // strictly closer to 0.5
    Tensor<double> u1 = uncertainty_map(q, eps);
    for (int yy = 0; yy < 9; ++yy)
      for (int xx = 0; xx < 9; ++xx)
        if (std::abs(yy - y) < eps && std::abs(xx - x) < eps)
          CHECK(u1[(int64_t)yy * 9 + xx] >= u0[(int64_t)yy * 9 + xx] - 1e-15);
  }
}

TEST_CASE("sampling contract: counts, distinctness, threshold separation") {
  PointLossParams pp;  // K=256, n=4, c=0.75
  Rng grid_rng(17);
  Tensor<double> u({64, 64});
  for (auto& v : u.data) v = grid_rng.uniform();
  for (uint64_t s = 0; s < 1000; ++s) {
    Rng rng(hash_seed(100, s));
    PointSample ps = sample_points(u, pp, rng);
    CHECK(ps.top.size() == 192);
    CHECK(ps.fill.size() == 64);
    CHECK(ps.selected.size() == 256);
    CHECK(ps.rejected.size() == 1024 - 256);
    std::set<int> uniq(ps.selected.begin(), ps.selected.end());
    CHECK(uniq.size() == 256);
    for (int i : ps.selected) {
      CHECK(i >= 0);
      CHECK(i < 64 * 64);
    }
    double top_min = 1e300, rej_max = -1e300;
    for (int i : ps.top) top_min = std::min(top_min, u[i]);
    for (int i : ps.rejected) rej_max = std::max(rej_max, u[i]);
    for (int i : ps.fill) rej_max = std::max(rej_max, u[i]);
    CHECK(top_min >= rej_max);
  }
}

TEST_CASE("c near 1 reduces to pure top-K against a sort oracle") {
  PointLossParams pp;
  pp.K = 64;
  pp.n = 4;
  pp.c = 63.0 / 64.0;  // cK = 63
  Rng grid_rng(19);
  Tensor<double> u({32, 32});
  for (auto& v : u.data) v = grid_rng.uniform();
  Rng rng(23);
  // replicate the candidate draw, then check top-63 matches a full sort
  Rng rng2(23);
  auto cand = rng2.sample_distinct(32 * 32, 256);
  PointSample ps = sample_points(u, pp, rng);
  std::vector<int> sorted(cand.begin(), cand.end());
  std::sort(sorted.begin(), sorted.end(), [&](int a, int b) { return u[a] > u[b]; });
  std::set<int> expect(sorted.begin(), sorted.begin() + 63);
  std::set<int> got(ps.top.begin(), ps.top.end());
  CHECK(got == expect);
}

TEST_CASE("high-uncertainty block captures the whole top set") {
  // 32x32 grid: nK = 1024 candidates cover every pixel, the 16x16 block
  // supplies 256 >= cK = 192 candidates, so all top picks land inside it
  PointLossParams pp;
  Tensor<double> u({32, 32});
  for (int y = 8; y < 24; ++y)
    for (int x = 8; x < 24; ++x) u[(int64_t)y * 32 + x] = M_LN2;
  for (uint64_t s = 0; s < 50; ++s) {
    Rng rng(hash_seed(7, s));
    PointSample ps = sample_points(u, pp, rng);
    for (int i : ps.top) {
      int y = i / 32, x = i % 32;
      CHECK(y >= 8);
      CHECK(y < 24);
      CHECK(x >= 8);
      CHECK(x < 24);
    }
  }
}

TEST_CASE("constant uncertainty reduces to a uniform draw (chi-square)") {
  PointLossParams pp;  // K=256
  Tensor<double> u({64, 64});
  u.fill(M_LN2);
  const int npix = 64 * 64, draws = 2000;
  std::vector<int64_t> counts(npix, 0);
  for (uint64_t s = 0; s < draws; ++s) {
    Rng rng(hash_seed(31, s));
    for (int i : sample_points(u, pp, rng).selected) counts[i]++;
  }
  double expect = (double)draws * pp.K / npix;
  double chi2 = 0;
  for (int64_t c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // Wilson-Hilferty critical value at p = 0.01, dof = npix - 1
  double dof = npix - 1, z = 2.3263;
  double crit = dof * std::pow(1.0 - 2.0 / (9.0 * dof) + z * std::sqrt(2.0 / (9.0 * dof)), 3.0);
  CHECK(chi2 < crit);
}

TEST_CASE("sampling is deterministic for a fixed seed") {
  PointLossParams pp;
  Rng g(37);
  Tensor<double> u({64, 64});
  for (auto& v : u.data) v = g.uniform();
  Rng a(555), b(555);
  CHECK(sample_points(u, pp, a).selected == sample_points(u, pp, b).selected);
  CHECK_THROWS(([&] {
    Tensor<double> tiny({8, 8});
    Rng r(1);
    sample_points(tiny, pp, r);  // nK = 1024 > 64 pixels
  })());
}

TEST_CASE("point loss worked examples") {
  // single point, p = 0.5, gt = 1, eps = 1, alpha = beta = 0.1
  ParamStore<double> ps;
  Tape<double> tp(&ps);
  Tensor<double> logits({1, 1, 1, 1});
  logits[0] = 0.0;  // sigmoid -> 0.5
  auto lv = tp.input(logits);
  auto [p, u] = prob_and_uncertainty(tp, lv, 1, 1, 1);
  Tensor<double> gt({1, 1, 1, 1});
  gt[0] = 1.0;
  PointLossParams pp;
  std::vector<std::vector<int>> idx = {{0}};
  auto loss = point_loss(tp, p, u, gt, idx, pp);
  CHECK(tp.val(loss)[0] == doctest::Approx(0.2 * M_LN2).epsilon(1e-9));
  CHECK(tp.val(loss)[0] == doctest::Approx(0.138629).epsilon(1e-4));

  // alpha = beta = 0 -> exactly zero
  PointLossParams z = pp;
  z.alpha = 0;
  z.beta = 0;
  auto zero = point_loss(tp, p, u, gt, idx, z);
  CHECK(tp.val(zero)[0] == 0.0);

  // p = gt at the clamp bound -> about 2 * 0.1 * 1.48e-5
  Tape<double> tp2(&ps);
  Tensor<double> big({1, 2, 2, 1});
  big.fill(40.0);  // sigmoid saturates past the clamp
  auto [p2, u2] = prob_and_uncertainty(tp2, tp2.input(big), 2, 2, 1);
  Tensor<double> gt2({1, 2, 2, 1});
  gt2.fill(1.0);
  std::vector<std::vector<int>> idx2 = {{0, 1, 2, 3}};
  auto l2 = point_loss(tp2, p2, u2, gt2, idx2, pp);
  double floor_ce = bce_self_scalar(1.0 - 1e-6);
  CHECK(tp2.val(l2)[0] <= 0.1 * floor_ce + 0.1 * floor_ce + 1e-12);
  CHECK(tp2.val(l2)[0] == doctest::Approx(2 * 0.1 * 1.48e-5).epsilon(0.05));
}

TEST_CASE("point loss gradient matches finite differences, including the u path") {
  for (bool ugrad : {true, false}) {
    PointLossParams pp;
    pp.eps = 2;
    pp.uncertainty_grad = ugrad;
    Rng rng(41);
    Tensor<double> base({1, 5, 5, 1});
    for (auto& v : base.data) v = rng.normal();
    Tensor<double> gt({1, 5, 5, 1});
    for (auto& v : gt.data) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    std::vector<std::vector<int>> idx = {{3, 7, 12, 18, 24}};
    // with uncertainty_grad off the analytic gradient treats u as a
    // constant, so the finite-difference oracle must hold u fixed too
    Tensor<double> u_frozen;
    auto eval = [&](const Tensor<double>& logits, Tensor<double>* grad_out) {
      ParamStore<double> ps;
      ps.add("x", logits);
      Tape<double> tp(&ps);
      auto x = tp.param("x");
      auto [p, u] = prob_and_uncertainty(tp, x, 5, 5, pp.eps);
      if (!ugrad && u_frozen.numel() > 0) u = tp.input(u_frozen);
      auto loss = point_loss(tp, p, u, gt, idx, pp);
      double lv = tp.val(loss)[0];
      if (grad_out) {
        ps.zero_grad();
        tp.backward(loss);
        *grad_out = ps.get("x").grad;
        if (!ugrad) u_frozen = tp.val(u);
      }
      return lv;
    };
    Tensor<double> an;
    eval(base, &an);
    double h = 1e-6;
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor<double> bp = base, bm = base;
      bp[i] += h;
      bm[i] -= h;
      double fd = (eval(bp, nullptr) - eval(bm, nullptr)) / (2 * h);
      CHECK(std::abs(fd - an[i]) <= 1e-3 * std::max({1e-6, std::abs(fd), std::abs(an[i])}));
    }
  }
}

TEST_CASE("uncertainty image export is scaled and clipped") {
  Tensor<double> u({1, 2});
  u[0] = M_LN2;
  u[1] = 0.0;
  Image8 img = uncertainty_to_image(u);
  CHECK(img.v[0] == 255);
  CHECK(img.v[1] == 0);
}
