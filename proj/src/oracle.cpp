#include "mora/oracle.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mora/errors.hpp"
#include "mora/objectives.hpp"
#include "mora/parallel.hpp"
#include "mora/rng.hpp"

namespace mora {

namespace {

Tensor grid_point(const Tensor& x, double eps, std::size_t resolution, std::size_t flat) {
  const std::size_t d = x.size();
  const auto half = static_cast<double>((resolution - 1) / 2);
  Tensor p = x;
  // Row-major: the last axis varies fastest.
  for (std::size_t j = d; j-- > 0;) {
    const auto k = static_cast<double>(flat % resolution) - half;
    flat /= resolution;
    p[j] = std::clamp(x[j] + k * eps / half, 0.0, 1.0);
  }
  return p;
}

}  // namespace

OracleVerdict brute_force_robust(const Ensemble& ens, const Tensor& x, std::size_t y,
                                 double epsilon, std::size_t resolution,
                                 std::size_t threads) {
  const std::size_t d = x.size();
  if (d != ens.input_dim()) throw ContractViolation("oracle: input dimension mismatch");
  if (d > kMaxOracleDim) {
    throw ComplexityError("exhaustive search is limited to d <= " +
                          std::to_string(kMaxOracleDim) + " (got d = " + std::to_string(d) +
                          ")");
  }
  if (resolution < 3 || resolution % 2 == 0) {
    throw ParameterError("oracle resolution must be odd and at least 3");
  }
  if (!(epsilon >= 0.0)) throw ParameterError("epsilon must be non-negative");

  std::size_t total = 1;
  for (std::size_t j = 0; j < d; ++j) total *= resolution;

  OracleVerdict verdict;
  verdict.grid_resolution = resolution;
  if (epsilon == 0.0) {
    if (ens.hard_decision(x, y) != y) {
      verdict.vulnerable = true;
      verdict.witness = x;
    }
    return verdict;
  }

  // Each worker scans a contiguous block; the smallest hit index wins.
  const std::size_t workers = std::max<std::size_t>(1, threads);
  const std::size_t block = (total + workers - 1) / workers;
  std::vector<std::size_t> first_hit(workers, std::numeric_limits<std::size_t>::max());
  parallel_for(workers, workers, [&](std::size_t w) {
    const std::size_t lo = w * block, hi = std::min(total, lo + block);
    for (std::size_t i = lo; i < hi; ++i) {
      if (ens.hard_decision(grid_point(x, epsilon, resolution, i), y) != y) {
        first_hit[w] = i;
        return;
      }
    }
  });
  for (std::size_t hit : first_hit) {
    if (hit == std::numeric_limits<std::size_t>::max()) continue;
    Tensor witness = grid_point(x, epsilon, resolution, hit);
    // Re-verify feasibility and misclassification before reporting.
    bool feasible = linf_distance(witness, x) <= epsilon + 1e-12;
    for (double v : witness.values()) feasible = feasible && v >= 0.0 && v <= 1.0;
    if (!feasible || ens.hard_decision(witness, y) == y) {
      throw ContractViolation("oracle witness failed re-verification");
    }
    verdict.vulnerable = true;
    verdict.witness = std::move(witness);
    break;
  }
  return verdict;
}

double check_weight_formula(FormingMode mode, double tau, std::size_t num_classes,
                            std::size_t trials, std::uint64_t seed, WeightProbe probe) {
  if (num_classes < 2) throw ParameterError("need at least two classes");
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  Rng rng = Rng::derive(seed, 0x77656967ULL);
  const std::size_t y = 0;
  const double h = 1e-4 * (mode == FormingMode::logits ? 1.0 : tau);

  // Forming transform of one sub-model, as in the ensemble (M = 1).
  auto formed = [&](const Tensor& z) {
    return mode == FormingMode::logits ? z : softmax_t(z, tau);
  };

  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor z = Tensor::zeros(Shape{num_classes});
    for (auto& v : z.values()) v = rng.normal(0.0, 2.0);
    // Put the largest logit on the label so that DL > 0.
    std::swap(z[y], z[argmax(z.values())]);
    if (!(dl(z, y) > 0.0)) z[y] += 0.5;
    const std::size_t ru = runner_up(z.values(), y);
    const double margin = z[y] - z[ru];

    // Shift so the label logit is 0: shift-invariant for every forming mode,
    // and puts the moving logit at exactly -DL (or DL).
    Tensor base = z;
    for (auto& v : base.values()) v -= z[probe == WeightProbe::runner_up ? y : ru];
    auto h_of = [&](double m) {
      Tensor zz = base;
      if (probe == WeightProbe::runner_up) {
        zz[ru] = -m;
      } else {
        zz[y] = m;
      }
      const Tensor e = formed(zz);
      return e[y] - e[ru];
    };
    const double up = margin + h, down = margin - h;
    const double numeric = (h_of(up) - h_of(down)) / (up - down);
    const double closed = importance_weight(z, y, mode, tau, 1);
    const double err = std::abs(numeric - closed) / std::max(std::abs(closed), 1e-300);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mora
