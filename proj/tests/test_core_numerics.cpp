#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "vlmkd/autograd.hpp"
#include "vlmkd/error.hpp"
#include "vlmkd/optim.hpp"
#include "vlmkd/rng.hpp"

using namespace vlmkd;

TEST_CASE("tensor shape invariant") {
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), ContractError);
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(Tensor::scalar(2.0).item() == 2.0);
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("l2_normalize examples") {
  Tensor v(Shape{2}, {3.0, 4.0});
  Tensor n = l2_normalize(v, 0);
  CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-15));

  Tensor unit(Shape{3}, {0.0, 1.0, 0.0});
  Tensor u = l2_normalize(unit, 0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(u[i] == unit[i]);

  Tensor zero(Shape{2}, {0.0, 0.0});
  Tensor z = l2_normalize(zero, 0, 1e-12);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
  CHECK_THROWS_AS(l2_normalize(v, 1), RangeError);
}

TEST_CASE("l2_normalize property: unit norms along any axis") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor t = gradcheck::random_tensor(rng, Shape{3, 4, 5});
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor n = l2_normalize(t, axis);
      const std::size_t outer = axis == 0 ? 1 : (axis == 1 ? 3 : 12);
      const std::size_t len = t.dim(axis);
      const std::size_t inner = 60 / (outer * len);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double sq = 0.0;
          for (std::size_t k = 0; k < len; ++k) {
            const double x = n[o * len * inner + k * inner + in];
            sq += x * x;
          }
          CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);
        }
    }
  }
}

TEST_CASE("forward_backward: linear and quadratic identities") {
  ParamStore store;
  store.add("p", Tensor(Shape{2, 2}, {1.0, -2.0, 3.0, 0.5}));
  double loss = forward_backward([](Graph& g) { return sum(g.param("p")); }, store);
  CHECK(loss == doctest::Approx(2.5));
  for (double x : store.grad("p").data()) CHECK(x == 1.0);

  forward_backward([](Graph& g) { return scale(sum(square(g.param("p"))), 0.5); }, store);
  for (std::size_t i = 0; i < 4; ++i) CHECK(store.grad("p")[i] == store.value("p")[i]);
}

TEST_CASE("forward_backward overwrites rather than accumulates") {
  ParamStore store;
  store.add("p", Tensor(Shape{3}, 1.0));
  store.add("q", Tensor(Shape{1}, 1.0));
  forward_backward([](Graph& g) { return sum(g.param("p")); }, store);
  forward_backward([](Graph& g) { return sum(g.param("p")); }, store);
  for (double x : store.grad("p").data()) CHECK(x == 1.0);
  // q untouched by the loss: slot is zeroed, not left stale.
  store.grad("q")[0] = 42.0;
  forward_backward([](Graph& g) { return sum(g.param("p")); }, store);
  CHECK(store.grad("q")[0] == 0.0);
}

TEST_CASE("forward_backward errors") {
  ParamStore store;
  store.add("layer.w", Tensor(Shape{2}, 1.0));
  CHECK_THROWS_AS(forward_backward([](Graph& g) { return g.param("layer.w"); }, store), ContractError);

  store.value("layer.w")[0] = std::nan("");
  try {
    forward_backward([](Graph& g) { return sum(g.param("layer.w")); }, store);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
  }
}

TEST_CASE("sgd_step examples") {
  ParamStore store;
  store.add("p", Tensor(Shape{1}, 3.0));
  store.grad("p")[0] = 1.0;
  sgd_step(store, 1.0, 0.0, 0.0);
  CHECK(store.value("p")[0] == 2.0);

  ParamStore m;
  m.add("p", Tensor(Shape{1}, 0.0));
  m.grad("p")[0] = 1.0;
  sgd_step(m, 1.0, 0.9, 0.0);
  m.grad("p")[0] = 1.0;
  sgd_step(m, 1.0, 0.9, 0.0);
  CHECK(m.momentum("p")[0] == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(m.value("p")[0] == doctest::Approx(-2.9).epsilon(1e-15));

  CHECK_THROWS_AS(sgd_step(m, 0.0, 0.9, 0.0), ConfigError);
  CHECK_THROWS_AS(sgd_step(m, -1.0, 0.9, 0.0), ConfigError);
}

TEST_CASE("sgd_step with zero gradient is an exact identity") {
  Rng rng(3);
  ParamStore store;
  store.add("a", gradcheck::random_tensor(rng, Shape{4, 5}));
  store.add("b", gradcheck::random_tensor(rng, Shape{7}));
  const Tensor a0 = store.value("a"), b0 = store.value("b");
  for (int i = 0; i < 10; ++i) sgd_step(store, 0.3, 0.9, 0.0);
  for (std::size_t i = 0; i < a0.size(); ++i) CHECK(store.value("a")[i] == a0[i]);
  for (std::size_t i = 0; i < b0.size(); ++i) CHECK(store.value("b")[i] == b0[i]);
}

TEST_CASE("sgd skips non-trainable entries") {
  ParamStore store;
  store.add("stat", Tensor(Shape{1}, 5.0), false);
  store.grad("stat")[0] = 1.0;
  sgd_step(store, 1.0, 0.0, 0.0);
  CHECK(store.value("stat")[0] == 5.0);
}

TEST_CASE("cosine schedule") {
  LrSchedule s{0.1, 100, ScheduleKind::Cosine};
  CHECK(lr_at(s, 0) == 0.1);
  CHECK(lr_at(s, 100) == 0.0);
  CHECK(lr_at(s, 50) == doctest::Approx(0.05).epsilon(1e-15));
  double prev = lr_at(s, 0);
  for (std::size_t k = 1; k <= 100; ++k) {
    const double cur = lr_at(s, k);
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK_THROWS_AS(lr_at(s, 101), RangeError);
  LrSchedule c{0.2, 10, ScheduleKind::Constant};
  CHECK(lr_at(c, 7) == 0.2);
}

namespace {

double check_op(const std::function<Var(Graph&)>& fn, ParamStore& store, std::uint64_t seed) {
  return gradcheck::worst(gradcheck::check(store, fn, seed));
}

}  // namespace

TEST_CASE("primitive gradients match finite differences over 20 seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    ParamStore s;
    s.add("a", gradcheck::random_tensor(rng, Shape{4, 5}));
    s.add("b", gradcheck::random_tensor(rng, Shape{5, 3}));
    s.add("c", gradcheck::random_tensor(rng, Shape{4, 5}));
    s.add("bias", gradcheck::random_tensor(rng, Shape{3}));
    s.add("k", gradcheck::random_tensor(rng, Shape{1}));
    const Tensor w = gradcheck::random_tensor(rng, Shape{4, 3});
    const std::vector<std::size_t> labels{0, 2, 1, 2};

    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(w), add_bias(matmul(g.param("a"), g.param("b")), g.param("bias")))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(matmul(matmul_nt(g.param("a"), g.param("c")), g.constant(w))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(w), log_softmax_rows(matmul(g.param("a"), g.param("b"))))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(pick(log_softmax_rows(matmul(g.param("a"), g.param("b"))), labels)); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(mul(g.param("c"), l2_normalize_rows(g.param("a")))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return mean(square(sub(exp(scale(g.param("a"), 0.3)), g.param("c")))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(mul_scalar(mul(g.param("a"), g.param("c")), exp(g.param("k")))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(w), relu(matmul(g.param("a"), g.param("b"))))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(square(select_rows(mul_bias(g.param("b"), g.param("bias")), {3, 1, 1}))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(w), clamp(add_scalar(matmul(g.param("a"), g.param("b")), 0.1), -0.7, 0.9))); }, s, seed) <= 1e-4);
  }
}

TEST_CASE("batch norm gradients and statistics") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    ParamStore s;
    s.add("x", gradcheck::random_tensor(rng, Shape{6, 4}, 2.0));
    s.add("gamma", gradcheck::random_tensor(rng, Shape{4}));
    s.add("beta", gradcheck::random_tensor(rng, Shape{4}));
    const Tensor w = gradcheck::random_tensor(rng, Shape{6, 4});
    Tensor rm = gradcheck::random_tensor(rng, Shape{4});
    Tensor rv(Shape{4});
    for (double& v : rv.data()) v = 0.5 + rng.uniform();
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(w), batch_norm_train(g.param("x"), g.param("gamma"), g.param("beta"), 1e-5))); }, s, seed) <= 1e-4);
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(w), batch_norm_eval(g.param("x"), g.param("gamma"), g.param("beta"), rm, rv, 1e-5))); }, s, seed) <= 1e-4);
  }

  Graph g;
  Rng rng(5);
  Var x = g.constant(gradcheck::random_tensor(rng, Shape{8, 3}, 3.0));
  Var y = batch_norm_train(x, g.constant(Tensor(Shape{3}, 1.0)), g.constant(Tensor(Shape{3}, 0.0)), 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t r = 0; r < 8; ++r) m += y.value().at(r, c);
    m /= 8;
    for (std::size_t r = 0; r < 8; ++r) v += (y.value().at(r, c) - m) * (y.value().at(r, c) - m);
    v /= 8;
    CHECK(std::abs(m) <= 1e-6);
    CHECK(std::abs(v - 1.0) <= 1e-6);
  }
  Var one = g.constant(Tensor(Shape{1, 3}, 1.0));
  CHECK_THROWS_AS(batch_norm_train(one, g.constant(Tensor(Shape{3}, 1.0)), g.constant(Tensor(Shape{3}, 0.0)), 1e-5),
                  ContractError);
}

TEST_CASE("conv2d and pooling gradients") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    ParamStore s;
    s.add("x", gradcheck::random_tensor(rng, Shape{2, 5, 5, 2}));
    s.add("w", gradcheck::random_tensor(rng, Shape{3 * 3 * 2, 3}, 0.5));
    s.add("b", gradcheck::random_tensor(rng, Shape{3}));
    const Tensor r = gradcheck::random_tensor(rng, Shape{2, 3, 3, 3});
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(r), conv2d(g.param("x"), g.param("w"), g.param("b"), 3, 2, 1))); }, s, seed) <= 1e-4);
    const Tensor q = gradcheck::random_tensor(rng, Shape{2, 3});
    CHECK(check_op([&](Graph& g) { return sum(mul(g.constant(q), global_avg_pool(conv2d(g.param("x"), g.param("w"), g.param("b"), 3, 1, 1)))); }, s, seed) <= 1e-4);
  }
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(9);
  Graph g;
  const Tensor x = gradcheck::random_tensor(rng, Shape{1, 4, 4, 2});
  const Tensor w = gradcheck::random_tensor(rng, Shape{18, 2});
  const Tensor b = gradcheck::random_tensor(rng, Shape{2});
  Var y = conv2d(g.constant(x), g.constant(w), g.constant(b), 3, 2, 1);
  REQUIRE(y.shape() == Shape{1, 2, 2, 2});
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox)
      for (int co = 0; co < 2; ++co) {
        double acc = b[co];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int ci = 0; ci < 2; ++ci) {
              const int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
              if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
              acc += x[(iy * 4 + ix) * 2 + ci] * w[((ky * 3 + kx) * 2 + ci) * 2 + co];
            }
        CHECK(y.value()[(oy * 2 + ox) * 2 + co] == doctest::Approx(acc).epsilon(1e-13));
      }
}

TEST_CASE("clamp blocks gradient outside its range") {
  ParamStore s;
  s.add("t", Tensor(Shape{3}, {-5.0, 0.5, 5.0}));
  forward_backward([](Graph& g) { return sum(clamp(g.param("t"), -1.0, 1.0)); }, s);
  CHECK(s.grad("t")[0] == 0.0);
  CHECK(s.grad("t")[1] == 1.0);
  CHECK(s.grad("t")[2] == 0.0);
}
