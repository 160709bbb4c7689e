#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "mora/ensemble.hpp"
#include "mora/objectives.hpp"
#include "mora/rng.hpp"
#include "mora/tensor.hpp"

namespace mora {

enum class TargetPolicy { all, none, explicit_list };

/// Objective maximised by the plain PGD baseline.
enum class PgdObjective {
  sce,  ///< SCE of the formed ensemble output, taken literally
  nll,  ///< -log of the averaged sub-model probability of the label
};

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  std::size_t iterations = 100;
  double nu = 0.75;
  /// Temperature of the importance weights; unset picks 5 (softmax),
  /// 10 (voting), 1 (logits, where it is unused).
  std::optional<double> attack_tau;
  std::vector<double> beta_schedule{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t per_beta_iterations = 100;
  TargetPolicy mt_targets = TargetPolicy::all;
  std::vector<std::size_t> mt_target_list;
  std::size_t mt_iterations_per_target = 100;
  double mt_beta = 0.5;
  std::size_t restarts = 5;
  /// Unset means epsilon / 4.
  std::optional<double> pgd_step;
  PgdObjective pgd_objective = PgdObjective::sce;
  std::uint64_t seed = 0;
  /// Alg. 1 read literally: mu_0 = 0 and mu_{i+1} = P(mu_i + alpha g).
  bool literal_momentum = false;

  void validate() const;
  double tau_for(FormingMode mode) const;
  double pgd_step_size() const { return pgd_step.value_or(epsilon / 4.0); }
};

struct TraceRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double dl_e = 0.0;
  std::size_t sub_fooled = 0;
  double step_size = 0.0;
};

struct AttackResult {
  Tensor adversarial_example;
  bool success = false;
  std::size_t iterations_used = 0;
  std::size_t sub_fooled = 0;
  std::vector<TraceRecord> trace;
};

enum class Objective { ensemble_sce, ensemble_nll, ensemble_cw, mora };

/// Which pieces of the iterative driver are switched on.
struct Recipe {
  Objective objective = Objective::mora;
  bool momentum = true;
  bool early_stop = true;
  bool cosine_step = true;
  bool normalize = true;
  Weighting weighting = Weighting::adaptive;
  /// Positive factor applied to the loss before differentiation.
  double loss_scale = 1.0;
};

/// Clamp v into [max(0, x - eps), min(1, x + eps)] elementwise.
Tensor project(const Tensor& v, const Tensor& x, double epsilon);
/// project(x + u), u ~ U[-eps, eps]^d.
Tensor random_init(const Tensor& x, double epsilon, Rng& rng);
/// eps * (1 + cos(i pi / total)).
double cosine_step(std::size_t i, std::size_t total, double epsilon);

std::size_t count_fooled(std::span<const Tensor> subs, std::size_t y);

/// True iff adv is feasible for (x, epsilon), lies in [0,1]^d and the exact
/// defense decision differs from y.
bool verify_success(const Ensemble& ens, const Tensor& x, std::size_t y,
                    double epsilon, const Tensor& adv);

/// One run of the sign-gradient driver from a fresh random start.
AttackResult run_iterations(const Ensemble& ens, const Tensor& x, std::size_t y,
                            const Recipe& recipe, double beta,
                            std::optional<std::size_t> target, std::size_t iterations,
                            const AttackConfig& cfg, Rng& rng);

/// One MORA run at a fixed beta for cfg.iterations steps. `stream` selects
/// the per-sample random stream.
AttackResult mora_attack(const Ensemble& ens, const Tensor& x, std::size_t y, double beta,
                         const AttackConfig& cfg, bool no_reweigh = false,
                         std::uint64_t stream = 0);
/// MORA at each beta of the schedule, stopping at the first success.
AttackResult mora_sweep(const Ensemble& ens, const Tensor& x, std::size_t y,
                        const AttackConfig& cfg, std::uint64_t stream = 0,
                        bool no_reweigh = false);
/// mora_sweep, then targeted MORA against every other label on failure.
AttackResult mora_mt(const Ensemble& ens, const Tensor& x, std::size_t y,
                     const AttackConfig& cfg, std::uint64_t stream = 0);
/// Restarted constant-step sign-gradient ascent on the ensemble loss.
AttackResult pgd_attack(const Ensemble& ens, const Tensor& x, std::size_t y,
                        const AttackConfig& cfg, std::uint64_t stream = 0);
AttackResult cw_attack(const Ensemble& ens, const Tensor& x, std::size_t y,
                       const AttackConfig& cfg, std::uint64_t stream = 0);

/// Consecutive-component ladder from plain PGD to MORA-MT.
enum class AblationRung {
  pgd,
  momentum,
  early_stop,
  cosine_step,
  sub_model_logits,
  logit_normalization,
  adaptive_reweighing,
  multiple_targets,
};

inline constexpr std::size_t kAblationRungCount = 8;
std::string_view to_string(AblationRung rung);
AblationRung ablation_rung(std::size_t index);

AttackResult run_ablation_rung(AblationRung rung, const Ensemble& ens, const Tensor& x,
                               std::size_t y, const AttackConfig& cfg,
                               std::uint64_t stream = 0);

/// Attack names understood by run_named_attack: pgd, cw, mora, mora-mt,
/// mora-noreweigh.
AttackResult run_named_attack(std::string_view name, const Ensemble& ens, const Tensor& x,
                              std::size_t y, const AttackConfig& cfg,
                              std::uint64_t stream = 0);
/// Worst-case iteration budget of a named attack.
std::size_t attack_budget(std::string_view name, const AttackConfig& cfg,
                          std::size_t num_classes);
bool is_known_attack(std::string_view name);

}  // namespace mora
