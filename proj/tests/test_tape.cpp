#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "plug/rng.hpp"
#include "plug/tape.hpp"

#include <functional>

using namespace plug;

namespace {

// central finite differences on every param coordinate
void fd_check(ParamStore<double>& ps,
              std::function<int(Tape<double>&, ParamStore<double>&)> loss_fn,
              double tol = 1e-6, double h = 1e-6) {
  ps.zero_grad();
  {
    Tape<double> t2(&ps);
    auto loss = loss_fn(t2, ps);
    t2.backward(loss);
  }
  for (auto& p : ps.all()) {
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      double orig = p.value[i];
      p.value[i] = orig + h;
      Tape<double> tp(&ps);
      double lp = tp.val(loss_fn(tp, ps))[0];
      p.value[i] = orig - h;
      Tape<double> tm(&ps);
      double lm = tm.val(loss_fn(tm, ps))[0];
      p.value[i] = orig;
      double fd = (lp - lm) / (2 * h);
      double an = p.trainable ? p.grad[i] : 0.0;
      double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      CHECK_MESSAGE(std::abs(fd - an) / denom < tol,
                    p.name << "[" << i << "] fd=" << fd << " an=" << an);
    }
  }
}

Tensor<double> rand_t(std::vector<int> shape, Rng& rng, double s = 1.0) {
  return randn_tensor<double>(std::move(shape), rng, s);
}

}  // namespace

TEST_CASE("linear + bias gradients") {
  Rng rng(11);
  ParamStore<double> ps;
  ps.add("w", rand_t({3, 4}, rng));
  ps.add("b", rand_t({3}, rng));
  auto x = rand_t({2, 5, 4}, rng);
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto xv = t.input(x);
    auto y = t.linear(xv, t.param("w"), t.param("b"));
    auto y2 = t.mul(y, y);
    return t.mean_all(y2);
  });
}

TEST_CASE("layernorm gradients") {
  Rng rng(12);
  ParamStore<double> ps;
  ps.add("g", rand_t({6}, rng));
  ps.add("b", rand_t({6}, rng));
  ps.add("x", rand_t({4, 6}, rng));
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto y = t.layernorm(t.param("x"), t.param("g"), t.param("b"));
    return t.mean_all(t.mul(y, y));
  }, 1e-5);
}

TEST_CASE("softmax, gelu, relu, sigmoid_clamp gradients") {
  Rng rng(13);
  ParamStore<double> ps;
  ps.add("x", rand_t({3, 5}, rng));
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto s = t.softmax_lastdim(t.param("x"));
    auto g = t.gelu(t.param("x"));
    auto r = t.relu(t.param("x"));
    auto p = t.sigmoid_clamp(t.param("x"), 1e-6);
    auto sum = t.add(t.add(s, g), t.add(r, p));
    return t.mean_all(t.mul(sum, sum));
  }, 1e-5);
}

TEST_CASE("bce and self_bce gradients") {
  Rng rng(14);
  ParamStore<double> ps;
  ps.add("x", rand_t({4, 4}, rng));
  Tensor<double> gt({4, 4});
  for (int i = 0; i < 16; ++i) gt[i] = (i % 3 == 0) ? 1.0 : 0.0;
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto p = t.sigmoid_clamp(t.param("x"), 1e-6);
    auto a = t.bce(p, gt);
    auto b = t.self_bce(p);
    return t.mean_all(t.add(a, b));
  }, 1e-5);
}

TEST_CASE("bmm with transpose flags gradients") {
  Rng rng(15);
  ParamStore<double> ps;
  ps.add("a", rand_t({2, 3, 4}, rng));
  ps.add("b", rand_t({2, 4, 5}, rng));
  ps.add("bt", rand_t({2, 5, 4}, rng));
  ps.add("at", rand_t({2, 4, 3}, rng));
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto c1 = t.bmm(t.param("a"), t.param("b"));
    auto c2 = t.bmm(t.param("a"), t.param("bt"), false, true);
    auto c3 = t.bmm(t.param("at"), t.param("b"), true, false);
    auto c4 = t.bmm(t.param("at"), t.param("bt"), true, true, 0.5);
    auto s = t.add(t.add(c1, c2), t.add(c3, c4));
    return t.mean_all(t.mul(s, s));
  });
}

TEST_CASE("head split/merge round trip and gradients") {
  Rng rng(16);
  ParamStore<double> ps;
  ps.add("x", rand_t({2, 5, 8}, rng));
  {
    Tape<double> t(&ps);
    auto x = t.param("x");
    auto y = t.merge_heads(t.split_heads(x, 4), 4);
    const auto& xv = t.val(x);
    const auto& yv = t.val(y);
    for (int64_t i = 0; i < xv.numel(); ++i) CHECK(xv[i] == yv[i]);
  }
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto y = t.split_heads(t.param("x"), 2);
    return t.mean_all(t.mul(y, y));
  });
}

TEST_CASE("conv ops gradients") {
  Rng rng(17);
  ParamStore<double> ps;
  ps.add("x", rand_t({2, 5, 5, 3}, rng));
  ps.add("w", rand_t({27, 2}, rng));
  ps.add("b", rand_t({2}, rng));
  ps.add("wt", rand_t({2, 8}, rng));
  ps.add("bt", rand_t({2}, rng));
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto y = t.conv3x3(t.param("x"), t.param("w"), t.param("b"));
    auto z = t.conv_transpose2x2(y, t.param("wt"), t.param("bt"));
    auto u = t.bilinear_up2(z);
    return t.mean_all(t.mul(u, u));
  }, 5e-5);
}

TEST_CASE("box_mean, channel_dot, gather_points gradients") {
  Rng rng(18);
  ParamStore<double> ps;
  ps.add("x", rand_t({2, 4, 4, 1}, rng));
  ps.add("f", rand_t({2, 3, 3, 4}, rng));
  ps.add("v", rand_t({2, 4}, rng));
  std::vector<std::vector<int>> idx = {{0, 5, 9}, {1, 2, 15}};
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto u = t.box_mean(t.param("x"), 4, 4, 2);
    auto g = t.gather_points(u, idx);
    auto d = t.channel_dot(t.param("f"), t.param("v"));
    return t.add(t.mean_all(t.mul(g, g)), t.mean_all(t.mul(d, d)));
  }, 1e-5);
}

TEST_CASE("concat/slice/broadcast gradients") {
  Rng rng(19);
  ParamStore<double> ps;
  ps.add("a", rand_t({2, 2, 3}, rng));
  ps.add("b", rand_t({2, 4, 3}, rng));
  ps.add("e", rand_t({6, 3}, rng));
  ps.add("c1", rand_t({2, 3, 3, 2}, rng));
  ps.add("c2", rand_t({2, 3, 3, 1}, rng));
  fd_check(ps, [&](Tape<double>& t, ParamStore<double>&) {
    auto cat = t.concat_tokens(t.param("a"), t.param("b"));
    auto withe = t.add_rows_broadcast(cat, t.param("e"));
    auto sl = t.slice_tokens(withe, 1, 4);
    auto br = t.broadcast_rows(t.param("e"), 2);
    auto cc = t.concat_lastdim({t.param("c1"), t.param("c2")});
    return t.add(t.add(t.mean_all(t.mul(sl, sl)), t.mean_all(t.mul(br, br))),
                 t.mean_all(t.mul(cc, cc)));
  });
}

TEST_CASE("frozen params receive exactly zero gradient") {
  Rng rng(20);
  ParamStore<double> ps;
  ps.add("w", rand_t({3, 3}, rng));
  ps.get("w").trainable = false;
  auto x = rand_t({2, 3}, rng);
  Tape<double> t(&ps);
  auto y = t.linear(t.input(x), t.param("w"));
  auto l = t.mean_all(t.mul(y, y));
  t.backward(l);
  for (int64_t i = 0; i < 9; ++i) CHECK(ps.get("w").grad[i] == 0.0);
}
