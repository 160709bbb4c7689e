#pragma once

#include <vector>

#include "mora/ensemble.hpp"
#include "mora/rng.hpp"
#include "mora/tensor.hpp"

namespace fixtures {

inline mora::Tensor random_tensor(mora::Rng& rng, mora::Shape shape, double sd = 1.0) {
  mora::Tensor t = mora::Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = sd * rng.normal();
  return t;
}

inline mora::MLPClassifier random_mlp(mora::Rng& rng, std::size_t d, std::size_t k,
                                      std::vector<std::size_t> hidden) {
  std::vector<mora::Layer> layers;
  std::size_t in = d;
  hidden.push_back(k);
  for (std::size_t out : hidden) {
    layers.push_back({random_tensor(rng, {out, in}, 1.0), random_tensor(rng, {out}, 0.3)});
    in = out;
  }
  return mora::MLPClassifier(std::move(layers));
}

inline mora::Ensemble random_ensemble(mora::Rng& rng, std::size_t d, std::size_t k,
                                      std::size_t m, mora::FormingMode mode,
                                      std::vector<std::size_t> hidden = {8}) {
  std::vector<mora::MLPClassifier> subs;
  for (std::size_t i = 0; i < m; ++i) subs.push_back(random_mlp(rng, d, k, hidden));
  return mora::Ensemble(std::move(subs), mode);
}

// Single linear model on [0,1] with z = (x, 1 - x): class 0 iff x > 0.5.
inline mora::Ensemble boundary_model(mora::FormingMode mode = mora::FormingMode::logits) {
  mora::Layer layer{mora::Tensor({2, 1}, {1.0, -1.0}), mora::Tensor{0.0, 1.0}};
  return mora::Ensemble({mora::MLPClassifier({layer})}, mode);
}

inline mora::Tensor uniform_point(mora::Rng& rng, std::size_t d) {
  mora::Tensor x = mora::Tensor::zeros({d});
  for (auto& v : x.values()) v = rng.uniform(0.0, 1.0);
  return x;
}

}  // namespace fixtures
