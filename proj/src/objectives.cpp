#include "mora/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mora/errors.hpp"

namespace mora {

std::string_view to_string(Weighting w) {
  switch (w) {
    case Weighting::adaptive: return "adaptive";
    case Weighting::indicator: return "indicator";
    case Weighting::uniform: return "uniform";
  }
  return "?";
}

void ObjectiveContext::validate(std::size_t num_classes) const {
  if (label >= num_classes) throw ContractViolation("label out of range");
  if (target && (*target >= num_classes || *target == label)) {
    throw ContractViolation("target must be a valid class different from the label");
  }
  if (!(attack_tau > 0.0)) throw ParameterError("attack_tau must be positive");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  if (num_models == 0) throw ParameterError("num_models must be positive");
}

std::size_t runner_up(std::span<const double> z, std::size_t y) {
  if (z.size() < 2) throw ContractViolation("need at least two classes");
  if (y >= z.size()) throw ContractViolation("label out of range");
  std::size_t best = y == 0 ? 1 : 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (i != y && z[i] > z[best]) best = i;
  }
  return best;
}

double dl(const Tensor& z, std::size_t y) { return z[y] - z[runner_up(z.values(), y)]; }

Var dl(Var z, std::size_t y) {
  return index(z, y) - index(z, runner_up(z.value().values(), y));
}

Tensor scenorm(const Tensor& z, std::size_t y) {
  const double margin = dl(z, y);
  const double inv = margin > 0.0 ? 1.0 / margin : 0.0;
  Tensor out = z;
  for (auto& v : out.values()) v *= inv;
  return out;
}

Var scenorm(Var z, std::size_t y) {
  const double margin = dl(z.value(), y);
  if (!(margin > 0.0)) return scale(z, 0.0);
  // Scaling by a plain number is the gradient barrier on the divisor.
  return scale(z, 1.0 / margin);
}

double importance_weight(const Tensor& z, std::size_t y, FormingMode mode,
                         double attack_tau, std::size_t num_models) {
  if (!(attack_tau > 0.0)) throw ParameterError("attack_tau must be positive");
  if (num_models == 0) throw ParameterError("num_models must be positive");
  const std::size_t r = runner_up(z.values(), y);
  if (!(z[y] - z[r] > 0.0)) return 0.0;
  if (mode == FormingMode::logits) return 1.0;
  const Tensor s = softmax_t(z, attack_tau);
  return s[r] * (1.0 + s[y] - s[r]) / (attack_tau * static_cast<double>(num_models));
}

double sub_model_weight(const Tensor& z, std::size_t y, const ObjectiveContext& ctx) {
  switch (ctx.weighting) {
    case Weighting::adaptive:
      return importance_weight(z, y, ctx.mode, ctx.attack_tau, ctx.num_models);
    case Weighting::indicator:
      return dl(z, y) > 0.0 ? 1.0 : 0.0;
    case Weighting::uniform:
      return 1.0;
  }
  return 0.0;
}

double sce(const Tensor& z, std::size_t y) {
  if (z.size() < 2) throw ContractViolation("sce needs at least two classes");
  return logsumexp(z.values()) - z[y];
}

Var sce(Var z, std::size_t y) {
  if (z.size() < 2) throw ContractViolation("sce needs at least two classes");
  return logsumexp(z) - index(z, y);
}

double cw_loss(const Tensor& z, std::size_t y) { return -dl(z, y); }

Var cw_loss(Var z, std::size_t y) { return scale(dl(z, y), -1.0); }

double nll_avg_prob(const Tensor& p, std::size_t y) {
  return -std::log(std::max(p[y], 1e-12));
}

Var nll_avg_prob(Var p, std::size_t y) { return scale(log_floor(index(p, y)), -1.0); }

Var mora_loss(std::span<const Var> z_subs, Var z_ensemble, const ObjectiveContext& ctx) {
  ctx.validate(z_ensemble.size());
  if (z_subs.size() != ctx.num_models) {
    throw ContractViolation("mora_loss: got " + std::to_string(z_subs.size()) +
                            " sub-model outputs, context says " +
                            std::to_string(ctx.num_models));
  }
  const std::size_t y = ctx.objective_label();
  auto normalise = [&](Var v) { return ctx.normalize ? scenorm(v, y) : v; };

  std::optional<Var> mixed;
  if (ctx.beta != 0.0) {
    std::optional<Var> weighted;
    for (Var z : z_subs) {
      Var term = scale(z, sub_model_weight(z.value(), y, ctx));
      weighted = weighted ? *weighted + term : term;
    }
    mixed = scale(normalise(*weighted), ctx.beta);
  }
  if (ctx.beta != 1.0) {
    Var term = scale(normalise(z_ensemble), 1.0 - ctx.beta);
    mixed = mixed ? *mixed + term : term;
  }
  return sce(*mixed, y);
}

double mora_loss(std::span<const Tensor> z_subs, const Tensor& z_ensemble,
                 const ObjectiveContext& ctx) {
  Graph g;
  std::vector<Var> subs;
  subs.reserve(z_subs.size());
  for (const auto& z : z_subs) subs.push_back(g.constant(z));
  return mora_loss(subs, g.constant(z_ensemble), ctx).value().item();
}

}  // namespace mora
