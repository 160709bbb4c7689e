#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>

#include "mora/autodiff.hpp"
#include "mora/ensemble.hpp"
#include "mora/tensor.hpp"

namespace mora {

/// How sub-model logits are weighted inside the auxiliary MORA term.
enum class Weighting {
  adaptive,   ///< closed-form importance weights
  indicator,  ///< 1[DL_m > 0], the "no reweighing" variant
  uniform,    ///< every sub-model weighted 1
};

std::string_view to_string(Weighting w);

struct ObjectiveContext {
  std::size_t label = 0;
  std::optional<std::size_t> target;
  FormingMode mode = FormingMode::softmax;
  double attack_tau = 1.0;
  double beta = 0.5;
  std::size_t num_models = 1;
  Weighting weighting = Weighting::adaptive;
  bool normalize = true;

  /// The label the loss is written against: target when present, else label.
  std::size_t objective_label() const { return target.value_or(label); }
  void validate(std::size_t num_classes) const;
};

/// Index of the largest entry other than y (lowest index among ties).
std::size_t runner_up(std::span<const double> z, std::size_t y);

/// z_y - max_{i != y} z_i.
double dl(const Tensor& z, std::size_t y);
Var dl(Var z, std::size_t y);

/// Logit normalisation: 1[DL > 0] * z / detach(DL).
Tensor scenorm(const Tensor& z, std::size_t y);
Var scenorm(Var z, std::size_t y);

/// Closed-form d DL_E / d DL_m for one sub-model. softmax and voting use
/// s = softmax(z / attack_tau):
///   1[DL > 0] * s_r (1 + s_y - s_r) / (attack_tau * M),  r = runner-up,
/// logits reduces to 1[DL > 0]. Always a plain number (no gradient).
double importance_weight(const Tensor& z, std::size_t y, FormingMode mode,
                         double attack_tau, std::size_t num_models);

/// Weight actually applied under a weighting scheme.
double sub_model_weight(const Tensor& z, std::size_t y, const ObjectiveContext& ctx);

/// Softmax cross-entropy -log softmax(z)_y.
double sce(const Tensor& z, std::size_t y);
Var sce(Var z, std::size_t y);

/// Carlini-Wagner margin -dl(z, y), no confidence offset.
double cw_loss(const Tensor& z, std::size_t y);
Var cw_loss(Var z, std::size_t y);

/// -log max(p_y, 1e-12) for a probability vector p.
double nll_avg_prob(const Tensor& p, std::size_t y);
Var nll_avg_prob(Var p, std::size_t y);

/// SCE(beta N(sum_m w_m z^m) + (1 - beta) N(z_E), y), with y replaced by the
/// target for the targeted variant. Terms whose coefficient is exactly zero
/// are left out, so beta in {0, 1} reduces exactly to one term.
Var mora_loss(std::span<const Var> z_subs, Var z_ensemble, const ObjectiveContext& ctx);
double mora_loss(std::span<const Tensor> z_subs, const Tensor& z_ensemble,
                 const ObjectiveContext& ctx);

}  // namespace mora
