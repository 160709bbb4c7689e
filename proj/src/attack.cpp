#include "mora/attack.hpp"

#include <cassert>
#include <cmath>
#include <numbers>
#include <string>

#include "mora/errors.hpp"

namespace mora {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("epsilon must be a finite non-negative number");
  }
  if (iterations == 0) throw ParameterError("iterations must be at least 1");
  if (!(nu >= 0.0 && nu <= 1.0)) throw ParameterError("momentum nu must lie in [0, 1]");
  if (attack_tau && !(*attack_tau > 0.0)) throw ParameterError("attack_tau must be positive");
  for (double b : beta_schedule) {
    if (!(b >= 0.0 && b <= 1.0)) throw ParameterError("every beta must lie in [0, 1]");
  }
  if (!(mt_beta >= 0.0 && mt_beta <= 1.0)) throw ParameterError("mt_beta must lie in [0, 1]");
  if (restarts == 0) throw ParameterError("restarts must be at least 1");
  if (pgd_step && !(*pgd_step >= 0.0)) throw ParameterError("pgd_step must be non-negative");
}

double AttackConfig::tau_for(FormingMode mode) const {
  if (attack_tau) return *attack_tau;
  switch (mode) {
    case FormingMode::softmax: return 5.0;
    case FormingMode::voting: return 10.0;
    case FormingMode::logits: return 1.0;
  }
  return 1.0;
}

Tensor project(const Tensor& v, const Tensor& x, double epsilon) {
  if (v.size() != x.size()) throw ContractViolation("project: size mismatch");
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lo = std::max(0.0, x[i] - epsilon);
    const double hi = std::min(1.0, x[i] + epsilon);
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

Tensor random_init(const Tensor& x, double epsilon, Rng& rng) {
  Tensor v = x;
  if (epsilon == 0.0) return v;
  for (auto& e : v.values()) e += rng.uniform(-epsilon, epsilon);
  return project(v, x, epsilon);
}

double cosine_step(std::size_t i, std::size_t total, double epsilon) {
  if (total == 0 || i >= total) throw ContractViolation("cosine_step: need 0 <= i < I");
  return epsilon * (1.0 + std::cos(static_cast<double>(i) * std::numbers::pi /
                                   static_cast<double>(total)));
}

std::size_t count_fooled(std::span<const Tensor> subs, std::size_t y) {
  std::size_t n = 0;
  for (const auto& z : subs) n += dl(z, y) <= 0.0 ? 1 : 0;
  return n;
}

bool verify_success(const Ensemble& ens, const Tensor& x, std::size_t y, double epsilon,
                    const Tensor& adv) {
  if (adv.size() != x.size() || !adv.all_finite()) return false;
  if (linf_distance(adv, x) > epsilon + 1e-9) return false;
  for (double v : adv.values()) {
    if (v < 0.0 || v > 1.0) return false;
  }
  return ens.hard_decision(adv, y) != y;
}

namespace {

void require_clean_correct(const Ensemble& ens, const Tensor& x, std::size_t y) {
  if (x.size() != ens.input_dim()) {
    throw ContractViolation("input has " + std::to_string(x.size()) +
                            " features, ensemble expects " +
                            std::to_string(ens.input_dim()));
  }
  if (y >= ens.num_classes()) throw ContractViolation("label out of range");
  for (double v : x.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractViolation("input lies outside [0,1]^d");
  }
  if (ens.hard_decision(x, y) != y) {
    throw MisclassifiedInput("input is already misclassified by the defense");
  }
}

Var objective_value(const Recipe& recipe, const Ensemble& ens,
                    std::span<const Var> subs, Var z_e, std::size_t y, double beta,
                    std::optional<std::size_t> target, const AttackConfig& cfg) {
  switch (recipe.objective) {
    case Objective::ensemble_sce:
      return sce(z_e, y);
    case Objective::ensemble_cw:
      return cw_loss(z_e, y);
    case Objective::ensemble_nll: {
      std::optional<Var> acc;
      for (Var z : subs) {
        Var p = softmax_t(z, 1.0);
        acc = acc ? *acc + p : p;
      }
      return nll_avg_prob(scale(*acc, 1.0 / static_cast<double>(subs.size())), y);
    }
    case Objective::mora: {
      ObjectiveContext ctx;
      ctx.label = y;
      ctx.target = target;
      ctx.mode = ens.mode();
      ctx.attack_tau = cfg.tau_for(ens.mode());
      ctx.beta = beta;
      ctx.num_models = ens.size();
      ctx.weighting = recipe.weighting;
      ctx.normalize = recipe.normalize;
      return mora_loss(subs, z_e, ctx);
    }
  }
  throw ContractViolation("unknown objective");
}

std::vector<Tensor> values_of(std::span<const Var> vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(v.value());
  return out;
}

/// Folds a finished run into an accumulated multi-run result.
void absorb(AttackResult& acc, AttackResult&& run) {
  const std::size_t offset = acc.iterations_used;
  for (auto& rec : run.trace) {
    rec.iteration += offset;
    acc.trace.push_back(rec);
  }
  acc.iterations_used += run.iterations_used;
  acc.adversarial_example = std::move(run.adversarial_example);
  acc.success = run.success;
  acc.sub_fooled = run.sub_fooled;
}

AttackResult restarted(const Ensemble& ens, const Tensor& x, std::size_t y,
                       const Recipe& recipe, const AttackConfig& cfg, std::size_t iterations,
                       Rng& rng) {
  AttackResult acc;
  for (std::size_t r = 0; r < cfg.restarts && !acc.success; ++r) {
    absorb(acc, run_iterations(ens, x, y, recipe, 0.0, std::nullopt, iterations, cfg, rng));
  }
  return acc;
}

AttackResult beta_sweep(const Ensemble& ens, const Tensor& x, std::size_t y,
                        const Recipe& recipe, const AttackConfig& cfg, Rng& rng) {
  AttackResult acc;
  for (double beta : cfg.beta_schedule) {
    absorb(acc, run_iterations(ens, x, y, recipe, beta, std::nullopt,
                               cfg.per_beta_iterations, cfg, rng));
    if (acc.success) break;
  }
  return acc;
}

std::vector<std::size_t> mt_targets(const AttackConfig& cfg, std::size_t y,
                                    std::size_t num_classes) {
  std::vector<std::size_t> out;
  switch (cfg.mt_targets) {
    case TargetPolicy::none:
      break;
    case TargetPolicy::all:
      for (std::size_t t = 0; t < num_classes; ++t)
        if (t != y) out.push_back(t);
      break;
    case TargetPolicy::explicit_list:
      for (std::size_t t : cfg.mt_target_list)
        if (t != y && t < num_classes) out.push_back(t);
      break;
  }
  return out;
}

void targeted_phase(AttackResult& acc, const Ensemble& ens, const Tensor& x, std::size_t y,
                    const Recipe& recipe, const AttackConfig& cfg, Rng& rng) {
  for (std::size_t t : mt_targets(cfg, y, ens.num_classes())) {
    if (acc.success) break;
    absorb(acc, run_iterations(ens, x, y, recipe, cfg.mt_beta, t,
                               cfg.mt_iterations_per_target, cfg, rng));
  }
}

Recipe mora_recipe(Weighting weighting) {
  Recipe r;
  r.weighting = weighting;
  return r;
}

Recipe baseline_recipe(Objective objective) {
  Recipe r;
  r.objective = objective;
  r.momentum = false;
  r.cosine_step = false;
  return r;
}

Objective pgd_objective(const AttackConfig& cfg) {
  return cfg.pgd_objective == PgdObjective::nll ? Objective::ensemble_nll
                                                : Objective::ensemble_sce;
}

}  // namespace

AttackResult run_iterations(const Ensemble& ens, const Tensor& x, std::size_t y,
                            const Recipe& recipe, double beta,
                            std::optional<std::size_t> target, std::size_t iterations,
                            const AttackConfig& cfg, Rng& rng) {
  const double eps = cfg.epsilon;
  const double nu = recipe.momentum ? cfg.nu : 1.0;
  // Targeted objectives are descended, untargeted ones ascended.
  const double direction = target ? -1.0 : 1.0;

  AttackResult result;
  result.trace.reserve(iterations);
  Tensor current = random_init(x, eps, rng);
  Tensor previous = current;
  Tensor candidate = cfg.literal_momentum ? Tensor::zeros(x.shape()) : current;

  for (std::size_t i = 0; i < iterations; ++i) {
    Graph g;
    Var xv = g.variable(current);
    const std::vector<Var> subs = ens.forward_subs(g, xv);
    const Var z_e = ens.form(g, subs);
    const double dl_e = dl(z_e.value(), y);
    const std::vector<Tensor> sub_values = values_of(subs);

    if (recipe.early_stop && dl_e <= 0.0 && ens.decide(sub_values, y) != y) {
      result.adversarial_example = current;
      result.success = true;
      result.iterations_used = i;
      result.sub_fooled = count_fooled(sub_values, y);
      return result;
    }

    Var loss = objective_value(recipe, ens, subs, z_e, y, beta, target, cfg);
    if (recipe.loss_scale != 1.0) loss = scale(loss, recipe.loss_scale);
    if (!std::isfinite(loss.value().item())) {
      throw DivergenceError("attack objective became non-finite at iteration " +
                            std::to_string(i));
    }
    const Tensor gradient = g.backward(loss)[xv];

    const double alpha = recipe.cosine_step ? cosine_step(i, iterations, eps)
                                            : cfg.pgd_step_size();
    Tensor base = cfg.literal_momentum ? candidate : current;
    for (std::size_t k = 0; k < base.size(); ++k) {
      const double gk = gradient[k];
      const double sign = gk > 0.0 ? 1.0 : (gk < 0.0 ? -1.0 : 0.0);
      base[k] += direction * alpha * sign;
    }
    candidate = project(base, x, eps);

    Tensor next = candidate;
    if (nu != 1.0) {
      for (std::size_t k = 0; k < next.size(); ++k) {
        next[k] = current[k] + nu * (candidate[k] - current[k]) +
                  (1.0 - nu) * (current[k] - previous[k]);
      }
      next = project(next, x, eps);
    }
    assert(linf_distance(next, x) <= eps + 1e-12);

    result.trace.push_back(TraceRecord{i, loss.value().item(), dl_e,
                                       count_fooled(sub_values, y), alpha});
    previous = std::move(current);
    current = std::move(next);
  }

  const std::vector<Tensor> final_subs = ens.forward_subs(current);
  result.success = ens.decide(final_subs, y) != y;
  result.sub_fooled = count_fooled(final_subs, y);
  result.iterations_used = iterations;
  result.adversarial_example = std::move(current);
  return result;
}

AttackResult mora_attack(const Ensemble& ens, const Tensor& x, std::size_t y, double beta,
                         const AttackConfig& cfg, bool no_reweigh, std::uint64_t stream) {
  cfg.validate();
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  require_clean_correct(ens, x, y);
  Rng rng = Rng::derive(cfg.seed, stream);
  return run_iterations(ens, x, y,
                        mora_recipe(no_reweigh ? Weighting::indicator : Weighting::adaptive),
                        beta, std::nullopt, cfg.iterations, cfg, rng);
}

AttackResult mora_sweep(const Ensemble& ens, const Tensor& x, std::size_t y,
                        const AttackConfig& cfg, std::uint64_t stream, bool no_reweigh) {
  cfg.validate();
  require_clean_correct(ens, x, y);
  Rng rng = Rng::derive(cfg.seed, stream);
  return beta_sweep(ens, x, y,
                    mora_recipe(no_reweigh ? Weighting::indicator : Weighting::adaptive),
                    cfg, rng);
}

AttackResult mora_mt(const Ensemble& ens, const Tensor& x, std::size_t y,
                     const AttackConfig& cfg, std::uint64_t stream) {
  cfg.validate();
  require_clean_correct(ens, x, y);
  Rng rng = Rng::derive(cfg.seed, stream);
  const Recipe recipe = mora_recipe(Weighting::adaptive);
  AttackResult acc = beta_sweep(ens, x, y, recipe, cfg, rng);
  targeted_phase(acc, ens, x, y, recipe, cfg, rng);
  return acc;
}

AttackResult pgd_attack(const Ensemble& ens, const Tensor& x, std::size_t y,
                        const AttackConfig& cfg, std::uint64_t stream) {
  cfg.validate();
  require_clean_correct(ens, x, y);
  Rng rng = Rng::derive(cfg.seed, stream);
  return restarted(ens, x, y, baseline_recipe(pgd_objective(cfg)), cfg, cfg.iterations,
                   rng);
}

AttackResult cw_attack(const Ensemble& ens, const Tensor& x, std::size_t y,
                       const AttackConfig& cfg, std::uint64_t stream) {
  cfg.validate();
  require_clean_correct(ens, x, y);
  Rng rng = Rng::derive(cfg.seed, stream);
  return restarted(ens, x, y, baseline_recipe(Objective::ensemble_cw), cfg, cfg.iterations,
                   rng);
}

std::string_view to_string(AblationRung rung) {
  switch (rung) {
    case AblationRung::pgd: return "PGD";
    case AblationRung::momentum: return "+Momentum";
    case AblationRung::early_stop: return "+Early Stop";
    case AblationRung::cosine_step: return "+Cosine Step Size";
    case AblationRung::sub_model_logits: return "+Sub-model Logits";
    case AblationRung::logit_normalization: return "+Logit Normalization";
    case AblationRung::adaptive_reweighing: return "+Adaptive Reweighing";
    case AblationRung::multiple_targets: return "+Multiple Targets";
  }
  return "?";
}

AblationRung ablation_rung(std::size_t index) {
  if (index >= kAblationRungCount) throw ContractViolation("ablation rung out of range");
  return static_cast<AblationRung>(index);
}

AttackResult run_ablation_rung(AblationRung rung, const Ensemble& ens, const Tensor& x,
                               std::size_t y, const AttackConfig& cfg,
                               std::uint64_t stream) {
  cfg.validate();
  require_clean_correct(ens, x, y);
  Rng rng = Rng::derive(cfg.seed, stream);
  const auto level = static_cast<int>(rung);

  Recipe recipe;
  recipe.objective = pgd_objective(cfg);
  recipe.momentum = level >= static_cast<int>(AblationRung::momentum);
  recipe.early_stop = level >= static_cast<int>(AblationRung::early_stop);
  recipe.cosine_step = level >= static_cast<int>(AblationRung::cosine_step);
  if (level < static_cast<int>(AblationRung::sub_model_logits)) {
    return restarted(ens, x, y, recipe, cfg, cfg.per_beta_iterations, rng);
  }
  recipe.objective = Objective::mora;
  recipe.normalize = level >= static_cast<int>(AblationRung::logit_normalization);
  recipe.weighting = level >= static_cast<int>(AblationRung::adaptive_reweighing)
                         ? Weighting::adaptive
                         : Weighting::uniform;
  AttackResult acc = beta_sweep(ens, x, y, recipe, cfg, rng);
  if (rung == AblationRung::multiple_targets) targeted_phase(acc, ens, x, y, recipe, cfg, rng);
  return acc;
}

bool is_known_attack(std::string_view name) {
  return name == "pgd" || name == "cw" || name == "mora" || name == "mora-mt" ||
         name == "mora-noreweigh";
}

AttackResult run_named_attack(std::string_view name, const Ensemble& ens, const Tensor& x,
                              std::size_t y, const AttackConfig& cfg,
                              std::uint64_t stream) {
  if (name == "pgd") return pgd_attack(ens, x, y, cfg, stream);
  if (name == "cw") return cw_attack(ens, x, y, cfg, stream);
  if (name == "mora") return mora_sweep(ens, x, y, cfg, stream);
  if (name == "mora-mt") return mora_mt(ens, x, y, cfg, stream);
  if (name == "mora-noreweigh") return mora_sweep(ens, x, y, cfg, stream, true);
  throw ConfigError("unknown attack '" + std::string(name) + "'");
}

std::size_t attack_budget(std::string_view name, const AttackConfig& cfg,
                          std::size_t num_classes) {
  const std::size_t sweep = cfg.beta_schedule.size() * cfg.per_beta_iterations;
  if (name == "pgd" || name == "cw") return cfg.restarts * cfg.iterations;
  if (name == "mora" || name == "mora-noreweigh") return sweep;
  if (name == "mora-mt") {
    std::size_t targets = 0;
    switch (cfg.mt_targets) {
      case TargetPolicy::none: targets = 0; break;
      case TargetPolicy::all: targets = num_classes - 1; break;
      case TargetPolicy::explicit_list: targets = cfg.mt_target_list.size(); break;
    }
    return sweep + targets * cfg.mt_iterations_per_target;
  }
  throw ConfigError("unknown attack '" + std::string(name) + "'");
}

}  // namespace mora
