#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "mora/autodiff.hpp"
#include "mora/errors.hpp"
#include "mora/objectives.hpp"

using namespace mora;

namespace {

// Plain-double re-derivation of the loss, used as a reference.
std::vector<double> plain_softmax(const std::vector<double>& z, double tau) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> s(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += s[i] = std::exp((z[i] - mx) / tau);
  for (auto& v : s) v /= total;
  return s;
}

double plain_margin(const std::vector<double>& z, std::size_t y, std::size_t* r_out = nullptr) {
  std::size_t r = y == 0 ? 1 : 0;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (i != y && z[i] > z[r]) r = i;
  if (r_out) *r_out = r;
  return z[y] - z[r];
}

std::vector<double> plain_norm(std::vector<double> z, std::size_t y) {
  const double m = plain_margin(z, y);
  for (auto& v : z) v = m > 0.0 ? v / m : 0.0;
  return z;
}

double plain_sce(const std::vector<double>& z, std::size_t y) {
  return -std::log(plain_softmax(z, 1.0)[y]);
}

std::vector<double> as_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("difference of logits") {
  CHECK(dl(Tensor{3.0, 1.0, 2.0}, 0) == 1.0);
  CHECK(dl(Tensor{1.0, 3.0, 2.0}, 0) == -2.0);
  for (double c : {-4.0, 0.0, 2.5}) CHECK(dl(Tensor{c, c}, 0) == 0.0);
  CHECK(runner_up(Tensor{1.0, 3.0, 3.0}.values(), 0) == 1);
}

TEST_CASE("logit normalisation") {
  const Tensor n = scenorm(Tensor{2.0, 0.0, -1.0}, 0);
  CHECK(n == Tensor{1.0, 0.0, -0.5});
  CHECK(scenorm(Tensor{0.0, 1.0}, 0) == Tensor{0.0, 0.0});

  // The divisor is a constant: d/dz of sum(N(z)) is 1/DL per coordinate.
  const Tensor g = grad([](Graph&, Var z) { return sum(scenorm(z, 0)); }, Tensor{2.0, 0.0, -1.0});
  for (double v : g.values()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("importance weights") {
  CHECK(importance_weight(Tensor{3.0, 1.0, 2.0}, 0, FormingMode::logits, 1.0, 1) == 1.0);
  CHECK(importance_weight(Tensor{1.0, 3.0, 2.0}, 0, FormingMode::logits, 1.0, 1) == 0.0);
  CHECK(importance_weight(Tensor{1.0, 0.0}, 0, FormingMode::softmax, 1.0, 1) ==
        doctest::Approx(0.39322).epsilon(1e-5));
  CHECK(importance_weight(Tensor{1.0, 0.0}, 0, FormingMode::voting, 10.0, 1) ==
        doctest::Approx(0.04988).epsilon(1e-4));
  CHECK(importance_weight(Tensor{1.0, 0.0}, 0, FormingMode::softmax, 1.0, 4) ==
        doctest::Approx(0.39322 / 4).epsilon(1e-5));
  CHECK_THROWS_AS(importance_weight(Tensor{1.0, 0.0}, 0, FormingMode::softmax, 0.0, 1),
                  ParameterError);
}

TEST_CASE("classification losses") {
  CHECK(sce(Tensor{0.0, 0.0}, 0) == doctest::Approx(std::log(2.0)));
  CHECK(sce(Tensor{10.0, 0.0}, 0) == doctest::Approx(4.54e-5).epsilon(1e-3));
  CHECK(cw_loss(Tensor{3.0, 1.0, 2.0}, 0) == -1.0);
  CHECK(cw_loss(Tensor{1.0, 3.0, 2.0}, 0) == 2.0);
  CHECK(nll_avg_prob(Tensor{0.0, 1.0}, 0) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("mora loss endpoints") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<Tensor> subs{fixtures::random_tensor(rng, {3}, 2.0),
                             fixtures::random_tensor(rng, {3}, 2.0)};
    const Tensor ze = fixtures::random_tensor(rng, {3}, 2.0);
    ObjectiveContext ctx;
    ctx.label = rng.below(3);
    ctx.mode = FormingMode::softmax;
    ctx.attack_tau = 5.0;
    ctx.num_models = 2;
    ctx.beta = 0.0;
    CHECK(std::abs(mora_loss(subs, ze, ctx) - sce(scenorm(ze, ctx.label), ctx.label)) <= 1e-12);
  }

  const Tensor z{2.0, 0.5, -1.0};
  ObjectiveContext one;
  one.mode = FormingMode::logits;
  one.beta = 1.0;
  one.num_models = 1;
  const std::vector<Tensor> subs{z};
  CHECK(std::abs(mora_loss(subs, Tensor{0.0, 5.0, 0.0}, one) - sce(scenorm(z, 0), 0)) <= 1e-12);
}

TEST_CASE("mora loss composition") {
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    std::vector<Tensor> subs{fixtures::random_tensor(rng, {3}, 2.0),
                             fixtures::random_tensor(rng, {3}, 2.0)};
    const Tensor ze = softmax_t(subs[0], 1.0);
    ObjectiveContext ctx;
    ctx.label = rng.below(3);
    ctx.mode = FormingMode::softmax;
    ctx.attack_tau = 5.0;
    ctx.num_models = 2;
    ctx.beta = 0.5;

    std::vector<double> mix(3, 0.0);
    for (const auto& s : subs) {
      const auto z = as_vec(s);
      std::size_t r = 0;
      const double m = plain_margin(z, ctx.label, &r);
      const auto p = plain_softmax(z, 5.0);
      const double w = m > 0.0 ? p[r] * (1.0 + p[ctx.label] - p[r]) / (5.0 * 2.0) : 0.0;
      for (std::size_t k = 0; k < 3; ++k) mix[k] += w * z[k];
    }
    mix = plain_norm(mix, ctx.label);
    const auto ne = plain_norm(as_vec(ze), ctx.label);
    for (std::size_t k = 0; k < 3; ++k) mix[k] = 0.5 * mix[k] + 0.5 * ne[k];
    CHECK(mora_loss(subs, ze, ctx) == doctest::Approx(plain_sce(mix, ctx.label)).epsilon(1e-12));
  }
}

TEST_CASE("targeted loss is written against the target") {
  const std::vector<Tensor> subs{Tensor{0.5, 2.0, 1.0}};
  ObjectiveContext ctx;
  ctx.label = 0;
  ctx.target = 1;
  ctx.mode = FormingMode::logits;
  ctx.num_models = 1;
  ctx.beta = 1.0;
  CHECK(mora_loss(subs, subs[0], ctx) == doctest::Approx(sce(scenorm(subs[0], 1), 1)));

  ctx.target = 7;
  CHECK_THROWS_AS(mora_loss(subs, subs[0], ctx), ContractViolation);
}
