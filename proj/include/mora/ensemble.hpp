#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mora/autodiff.hpp"
#include "mora/tensor.hpp"

namespace mora {

/// How sub-model outputs are combined into the ensemble output.
enum class FormingMode { softmax, voting, logits };

std::string_view to_string(FormingMode mode);
FormingMode parse_forming_mode(std::string_view name);

struct Layer {
  Tensor weights;  // [out, in]
  Tensor bias;     // [out]

  std::size_t in_dim() const { return weights.shape()[1]; }
  std::size_t out_dim() const { return weights.shape()[0]; }
};

/// Affine layers with ReLU between them; the last layer emits K logits.
class MLPClassifier {
 public:
  explicit MLPClassifier(std::vector<Layer> layers);

  std::size_t input_dim() const { return layers_.front().in_dim(); }
  std::size_t num_classes() const { return layers_.back().out_dim(); }
  const std::vector<Layer>& layers() const { return layers_; }

  Tensor logits(const Tensor& x) const;
  /// Logits recorded on g with the weights held constant.
  Var logits(Graph& g, Var x) const;
  /// Logits with caller-provided weight nodes, laid out as
  /// [W0, b0, W1, b1, ...]; used for training.
  static Var logits(Var x, std::span<const Var> params);

 private:
  std::vector<Layer> layers_;
};

class Ensemble {
 public:
  static constexpr double kDefaultVoteTau = 0.1;

  Ensemble(std::vector<MLPClassifier> sub_models, FormingMode mode,
           double vote_tau = kDefaultVoteTau);

  std::size_t size() const { return subs_.size(); }
  std::size_t input_dim() const { return subs_.front().input_dim(); }
  std::size_t num_classes() const { return subs_.front().num_classes(); }
  FormingMode mode() const { return mode_; }
  double vote_tau() const { return vote_tau_; }
  const std::vector<MLPClassifier>& sub_models() const { return subs_; }

  /// Same sub-models under another forming mode.
  Ensemble with_mode(FormingMode mode) const;

  std::vector<Tensor> forward_subs(const Tensor& x) const;
  std::vector<Var> forward_subs(Graph& g, Var x) const;

  /// Mean of the per-mode transform of each sub-model output; voting uses
  /// softmax(z / vote_tau) as a differentiable stand-in for winner-take-all.
  Tensor form(std::span<const Tensor> subs) const;
  Var form(Graph& g, std::span<const Var> subs) const;

  Tensor forward_ensemble(const Tensor& x) const;
  Var forward_ensemble(Graph& g, Var x) const;

  /// Exact defense decision. softmax/logits: argmax of the formed output;
  /// voting: plurality of per-model argmax. If true_label is among the tied
  /// leaders the defense is credited with it, otherwise the lowest tied
  /// index wins.
  std::size_t decide(std::span<const Tensor> subs,
                     std::optional<std::size_t> true_label = std::nullopt) const;
  std::size_t hard_decision(const Tensor& x,
                            std::optional<std::size_t> true_label = std::nullopt) const;

 private:
  void check_input(const Tensor& x) const;

  std::vector<MLPClassifier> subs_;
  FormingMode mode_;
  double vote_tau_;
};

/// Resolves ties among maximal entries of `scores` by the defender-favouring
/// rule used throughout: the true label if tied for first, else lowest index.
std::size_t tie_broken_argmax(std::span<const double> scores,
                              std::optional<std::size_t> true_label);

inline constexpr int kEnsembleSchemaVersion = 1;
inline constexpr std::string_view kEnsembleFormat = "mora-ensemble";

std::string ensemble_to_json(const Ensemble& ens);
Ensemble ensemble_from_json(std::string_view text);
void save_ensemble(const Ensemble& ens, const std::filesystem::path& path);
Ensemble load_ensemble(const std::filesystem::path& path);

}  // namespace mora
