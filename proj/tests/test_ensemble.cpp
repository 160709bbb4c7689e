#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <algorithm>

#include <json.hpp>

#include "fixtures.hpp"
#include "mora/autodiff.hpp"
#include "mora/errors.hpp"

using namespace mora;

namespace {

Ensemble linear_pair(FormingMode mode) {
  Layer a{Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), Tensor{0.0, 0.0}};
  Layer b{Tensor({2, 2}, {2.0, -1.0, 0.5, 0.5}), Tensor{0.1, -0.2}};
  return Ensemble({MLPClassifier({a}), MLPClassifier({b})}, mode);
}

}  // namespace

TEST_CASE("sub-model logits") {
  Layer id{Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), Tensor{0.0, 0.0}};
  const Ensemble single({MLPClassifier({id})}, FormingMode::logits);
  const auto z = single.forward_subs(Tensor{0.2, 0.8});
  CHECK(z[0] == Tensor{0.2, 0.8});

  const auto pair = linear_pair(FormingMode::logits).forward_subs(Tensor{0.4, 0.6});
  CHECK(pair[1][0] == doctest::Approx(2.0 * 0.4 - 0.6 + 0.1));
  CHECK(pair[1][1] == doctest::Approx(0.5 * 0.4 + 0.5 * 0.6 - 0.2));

  CHECK_THROWS_AS(single.forward_subs(Tensor{0.2}), ContractViolation);
}

TEST_CASE("forming strategies") {
  const Ensemble logits = linear_pair(FormingMode::logits);
  const std::vector<Tensor> subs{Tensor{1.0, 0.0}, Tensor{3.0, 2.0}};
  CHECK(logits.form(subs) == Tensor{2.0, 1.0});

  const Ensemble soft = linear_pair(FormingMode::softmax);
  const std::vector<Tensor> mirrored{Tensor{1.0, 0.0}, Tensor{0.0, 1.0}};
  const Tensor p = soft.form(mirrored);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  Layer id{Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), Tensor{0.0, 0.0}};
  const Ensemble vote({MLPClassifier({id})}, FormingMode::voting, 0.1);
  const std::vector<Tensor> one{Tensor{1.0, 0.0}};
  CHECK(vote.form(one)[0] == doctest::Approx(0.99995).epsilon(1e-5));
}

TEST_CASE("hard decisions and the defender-favouring tie-break") {
  const Ensemble three({fixtures::boundary_model().sub_models()[0],
                        fixtures::boundary_model().sub_models()[0],
                        fixtures::boundary_model().sub_models()[0]},
                       FormingMode::voting);
  const std::vector<Tensor> votes{Tensor{1.0, 0.0}, Tensor{2.0, 0.0}, Tensor{0.0, 1.0}};
  CHECK(three.decide(votes) == 0);

  const Ensemble logits = linear_pair(FormingMode::logits);
  CHECK(logits.decide(std::vector<Tensor>{Tensor{1.0, 0.0}, Tensor{3.0, 2.0}}) == 0);

  const Ensemble two = linear_pair(FormingMode::voting);
  const std::vector<Tensor> split{Tensor{1.0, 0.0}, Tensor{0.0, 1.0}};
  CHECK(two.decide(split, 0) == 0);
  CHECK(two.decide(split, 1) == 1);
  CHECK(two.decide(split) == 0);
}

TEST_CASE("cold voting agrees with the plurality vote") {
  Rng rng(3);
  std::size_t agree = 0, evaluated = 0;
  while (evaluated < 1000) {
    const std::size_t m = 1 + 2 * rng.below(3);
    std::vector<Tensor> subs;
    for (std::size_t i = 0; i < m; ++i) subs.push_back(fixtures::random_tensor(rng, {4}));
    std::vector<MLPClassifier> models(m, fixtures::random_mlp(rng, 2, 4, {}));
    const Ensemble ens(models, FormingMode::voting, 1e-3);
    std::vector<double> counts(4, 0.0);
    for (const auto& z : subs) counts[argmax(z.values())] += 1.0;
    const Tensor formed = ens.form(subs);
    std::vector<double> sorted = counts;
    std::sort(sorted.rbegin(), sorted.rend());
    if (sorted[0] == sorted[1]) continue;
    ++evaluated;
    agree += argmax(formed.values()) == ens.decide(subs) ? 1 : 0;
  }
  CHECK(agree == evaluated);
}

TEST_CASE("graph forward pass matches the plain forward pass") {
  Rng rng(9);
  for (auto mode : {FormingMode::softmax, FormingMode::voting, FormingMode::logits}) {
    const Ensemble ens = fixtures::random_ensemble(rng, 3, 4, 3, mode);
    const Tensor x = fixtures::uniform_point(rng, 3);
    Graph g;
    const Tensor via_graph = ens.forward_ensemble(g, g.constant(x)).value();
    CHECK(relative_error(via_graph, ens.forward_ensemble(x)) < 1e-14);
  }
}

TEST_CASE("ensemble serialisation") {
  Rng rng(21);
  const Ensemble ens = fixtures::random_ensemble(rng, 3, 4, 3, FormingMode::voting, {5, 6});
  const auto dir = std::filesystem::temp_directory_path() / "mora_test_ensemble";
  std::filesystem::create_directories(dir);
  save_ensemble(ens, dir / "e.json");
  const Ensemble back = load_ensemble(dir / "e.json");
  REQUIRE(back.size() == ens.size());
  CHECK(back.mode() == FormingMode::voting);
  for (std::size_t m = 0; m < ens.size(); ++m) {
    const auto& a = ens.sub_models()[m].layers();
    const auto& b = back.sub_models()[m].layers();
    REQUIRE(a.size() == b.size());
    for (std::size_t l = 0; l < a.size(); ++l) {
      CHECK(a[l].weights == b[l].weights);
      CHECK(a[l].bias == b[l].bias);
    }
  }

  auto doc = nlohmann::json::parse(ensemble_to_json(ens));
  auto bad_magic = doc;
  bad_magic["format"] = "something-else";
  CHECK_THROWS_AS(ensemble_from_json(bad_magic.dump()), FormatError);
  auto bad_k = doc;
  bad_k["num_classes"] = 7;
  CHECK_THROWS_AS(ensemble_from_json(bad_k.dump()), SchemaError);
  auto bad_version = doc;
  bad_version["schema_version"] = 99;
  CHECK_THROWS_AS(ensemble_from_json(bad_version.dump()), SchemaError);
  CHECK_THROWS_AS(ensemble_from_json("{not json"), FormatError);
  CHECK_THROWS_AS(load_ensemble(dir / "missing.json"), IoError);
}
