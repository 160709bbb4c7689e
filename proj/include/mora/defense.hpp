#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mora/ensemble.hpp"
#include "mora/tensor.hpp"

namespace mora {

/// Synthetic classification data. Generators: "blobs", "moons" (d=2, K=2),
/// "rings" (d=2), "teacher" (labels from a random MLP, any d and K).
struct DatasetSpec {
  std::string generator = "blobs";
  std::size_t input_dim = 2;
  std::size_t num_classes = 2;
  std::size_t samples = 400;
  double noise = 0.1;
  std::uint64_t seed = 0;
  double test_fraction = 0.3;

  void validate() const;
};

struct Dataset {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

SplitDataset generate_dataset(const DatasetSpec& spec);

/// CSV with header `split,label,x0,...`; values printed round-trip exact.
void save_dataset_csv(const SplitDataset& data, const std::filesystem::path& path);
SplitDataset load_dataset_csv(const std::filesystem::path& path);

enum class Regularizer { none, grad_align, logit_diversity };

std::string_view to_string(Regularizer r);
Regularizer parse_regularizer(std::string_view name);

struct TrainConfig {
  std::size_t num_models = 3;
  std::vector<std::size_t> hidden{32};
  std::size_t epochs = 60;
  double learning_rate = 0.5;
  std::size_t batch_size = 32;
  Regularizer regularizer = Regularizer::none;
  double lambda = 0.0;
  /// PGD adversarial training; off when adv_steps == 0.
  double adv_epsilon = 0.0;
  std::size_t adv_steps = 0;
  FormingMode mode = FormingMode::softmax;
  double vote_tau = Ensemble::kDefaultVoteTau;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainLogRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double regularizer = 0.0;
};

struct TrainResult {
  Ensemble ensemble;
  std::vector<TrainLogRow> log;
};

/// Mini-batch gradient descent on the cross-entropy of the ensemble output
/// (mean logits for logits forming, mean probabilities otherwise) plus
/// lambda times the diversity penalty.
TrainResult train_ensemble(const TrainConfig& cfg, const Dataset& train);

void save_train_log_csv(const std::vector<TrainLogRow>& log,
                        const std::filesystem::path& path);

struct CosineStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t pairs = 0;
};

/// Pairwise cosine similarity of the sub-models' input gradients of their
/// own SCE loss, pooled over the dataset. nullopt when M = 1 (no pairs).
std::optional<CosineStats> grad_cosine_stats(const Ensemble& ens, const Dataset& data);

/// Fraction of samples the exact defense decision gets right.
double accuracy(const Ensemble& ens, const Dataset& data);

}  // namespace mora
