#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "mora/autodiff.hpp"
#include "mora/errors.hpp"

using namespace mora;

TEST_CASE("gradient of a polynomial") {
  const Tensor g = grad([](Graph&, Var x) { return sum(x * x); }, Tensor{1.0, 2.0});
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
}

TEST_CASE("detach blocks one branch of the product rule") {
  const Tensor g = grad([](Graph&, Var x) { return sum(detach(x) * x); }, Tensor{3.0});
  CHECK(g[0] == doctest::Approx(3.0));
}

TEST_CASE("non-scalar outputs and non-finite values are rejected") {
  CHECK_THROWS_AS(grad([](Graph&, Var x) { return x; }, Tensor{1.0, 2.0}), ContractViolation);
  CHECK_THROWS_AS(grad([](Graph&, Var x) { return sum(reciprocal(x)); }, Tensor{0.0}),
                  DivergenceError);
}

TEST_CASE("tempered softmax") {
  auto s = softmax_t(Tensor{0.0, 0.0}, 1.0);
  CHECK(s[0] == doctest::Approx(0.5));
  s = softmax_t(Tensor{1.0, 0.0}, 1.0);
  CHECK(s[0] == doctest::Approx(0.73106).epsilon(1e-5));
  CHECK(s[1] == doctest::Approx(0.26894).epsilon(1e-5));
  s = softmax_t(Tensor{1.0, 0.0}, 0.1);
  CHECK(s[0] == doctest::Approx(0.99995).epsilon(1e-5));
  CHECK(s[1] == doctest::Approx(4.5398e-5).epsilon(1e-3));
  CHECK_THROWS_AS(softmax_t(Tensor{1.0, 0.0}, 0.0), ParameterError);

  s = softmax_t(Tensor{1000.0, 0.0}, 1.0);
  CHECK(s.all_finite());
}

TEST_CASE("central finite differences") {
  const Tensor ones = finite_diff(
      [](const Tensor& x) {
        double acc = 0.0;
        for (double v : x.values()) acc += v;
        return acc;
      },
      Tensor{0.3, -2.0, 5.0});
  for (double v : ones.values()) CHECK(v == doctest::Approx(1.0));

  const Tensor sq = finite_diff(
      [](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; }, Tensor{1.0, 2.0});
  CHECK(std::abs(sq[0] - 2.0) < 1e-8);
  CHECK(std::abs(sq[1] - 4.0) < 1e-8);
}

TEST_CASE("MLP loss gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mlp = fixtures::random_mlp(rng, 4, 3, {6});
    const Tensor x = fixtures::random_tensor(rng, {4});
    const std::size_t y = rng.below(3);
    auto loss = [&](Graph& g, Var xv) {
      Var z = mlp.logits(g, xv);
      return logsumexp(z) - index(z, y);
    };
    const Tensor analytic = grad(loss, x);
    const Tensor numeric = finite_diff(
        [&](const Tensor& p) {
          Graph g;
          return loss(g, g.constant(p)).value().item();
        },
        x);
    CHECK(relative_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("every op differentiates consistently") {
  Rng rng(5);
  const Tensor w = fixtures::random_tensor(rng, {3, 3});
  auto f = [&](Graph& g, Var x) {
    Var wv = g.constant(w);
    Var a = affine(wv, x, x);
    Var b = matvec_t(wv, relu(a));
    Var c = softmax_t(b, 0.7) + scale(x, 0.5) - mul_scalar(x, index(b, 1));
    Var d = add_const(c * c, 1.0);
    Var e = log_floor(d) + sqrt(d) + reciprocal(d);
    return dot(e, gather(b, {2, 0, 1})) + sum(e);
  };
  const Tensor x{0.4, -0.3, 0.8};
  const Tensor analytic = grad(f, x);
  const Tensor numeric = finite_diff(
      [&](const Tensor& p) {
        Graph g;
        return f(g, g.constant(p)).value().item();
      },
      x);
  CHECK(relative_error(analytic, numeric) <= 1e-6);
}

TEST_CASE("tensor helpers") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ContractViolation);
  CHECK(argmax(Tensor{1.0, 3.0, 3.0}.values()) == 1);
  CHECK(linf_distance(Tensor{0.0, 1.0}, Tensor{0.5, 0.8}) == doctest::Approx(0.5));
  CHECK(relative_error(Tensor{0.0}, Tensor{0.0}) == 0.0);
}
