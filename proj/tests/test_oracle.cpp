#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "mora/errors.hpp"
#include "mora/oracle.hpp"

using namespace mora;

TEST_CASE("brute force on the analytic boundary") {
  const Ensemble ens = fixtures::boundary_model();
  const auto hit = brute_force_robust(ens, Tensor{0.6}, 0, 0.2);
  CHECK(hit.vulnerable);
  REQUIRE(hit.witness);
  CHECK((*hit.witness)[0] <= 0.5);
  CHECK(hit.grid_resolution == 41);

  CHECK_FALSE(brute_force_robust(ens, Tensor{0.6}, 0, 0.05).vulnerable);
  CHECK_FALSE(brute_force_robust(ens, Tensor{0.6}, 0, 0.0).vulnerable);
}

TEST_CASE("brute force limits") {
  Rng rng(2);
  const Ensemble wide = fixtures::random_ensemble(rng, 4, 2, 2, FormingMode::softmax);
  CHECK_THROWS_AS(brute_force_robust(wide, Tensor{0.5, 0.5, 0.5, 0.5}, 0, 0.1), ComplexityError);
  const Ensemble ens = fixtures::boundary_model();
  CHECK_THROWS_AS(brute_force_robust(ens, Tensor{0.6}, 0, 0.1, 40), ParameterError);
}

TEST_CASE("brute force witness is independent of the thread count") {
  Rng rng(6);
  const Ensemble ens = fixtures::random_ensemble(rng, 2, 3, 3, FormingMode::voting);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = fixtures::uniform_point(rng, 2);
    const std::size_t y = ens.hard_decision(x);
    const auto a = brute_force_robust(ens, x, y, 0.15, 41, 1);
    const auto b = brute_force_robust(ens, x, y, 0.15, 41, 4);
    CHECK(a.vulnerable == b.vulnerable);
    if (a.witness && b.witness) CHECK(*a.witness == *b.witness);
    if (a.witness) CHECK(ens.hard_decision(*a.witness, y) != y);
  }
}

TEST_CASE("closed-form importance weights") {
  CHECK(check_weight_formula(FormingMode::logits, 1.0, 10, 200, 0) == 0.0);
  CHECK(check_weight_formula(FormingMode::softmax, 1.0, 2, 200, 1) <= 1e-5);
  CHECK(check_weight_formula(FormingMode::softmax, 1.0, 10, 200, 2) <= 1e-5);
  CHECK(check_weight_formula(FormingMode::voting, 10.0, 10, 200, 3) <= 1e-5);
  // Moving the label logit instead only agrees in the two-class case.
  CHECK(check_weight_formula(FormingMode::softmax, 1.0, 2, 200, 4, WeightProbe::label) <= 1e-5);
  CHECK(check_weight_formula(FormingMode::softmax, 1.0, 10, 200, 5, WeightProbe::label) > 1e-3);
}
