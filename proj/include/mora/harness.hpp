#pragma once

// Command layer behind the `mora` CLI: run-config parsing, the evaluation
// protocol, ablation and sensitivity sweeps, loss surfaces, reports and
// run manifests.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mora/attack.hpp"
#include "mora/defense.hpp"
#include "mora/ensemble.hpp"

namespace mora {

inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr int kConfigSchemaVersion = 1;

/// Process exit codes of the CLI.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitContract = 4,
};

/// Maps an exception thrown by a command to its exit code.
int exit_code_for(const std::exception& e);

struct DefenseSpec {
  std::string id;
  std::filesystem::path model;
};

struct SurfaceSettings {
  std::size_t grid = 21;
  std::size_t direction_steps = 10;
  std::string loss = "mora";  // "mora" or "pgd"
  double beta = 0.5;
  std::optional<std::size_t> sample;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::optional<std::filesystem::path> data;
  DatasetSpec dataset;

  TrainConfig train;
  std::string train_id = "ensemble";

  std::vector<DefenseSpec> defenses;
  AttackConfig attack;
  std::vector<std::string> attacks{"pgd", "mora"};
  std::string attack_name = "mora";
  std::vector<FormingMode> modes;
  std::vector<double> epsilons;
  std::size_t max_samples = 0;
  std::vector<std::size_t> samples;
  bool write_traces = true;

  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  SurfaceSettings surface;
  std::vector<double> sweep_taus{1.0, 2.0, 5.0, 10.0, 20.0};
  std::vector<double> sweep_betas{0.0, 0.25, 0.5, 0.75, 1.0};
  std::optional<std::filesystem::path> report_input;

  /// The document the config was parsed from, after command-line overrides.
  nlohmann::json snapshot;
};

/// Parses a run config; relative paths resolve against base_dir.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
/// Applies --seed / --threads overrides and records them in the snapshot.
void apply_overrides(RunConfig& cfg, std::optional<std::uint64_t> seed,
                     std::optional<std::size_t> threads);

/// One line of the evaluation table. Accuracies are percentages.
struct EvalRow {
  std::string defense;
  std::size_t num_models = 0;
  FormingMode mode = FormingMode::softmax;
  std::string attack;
  double epsilon = 0.0;
  std::size_t budget = 0;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  double mean_iterations_to_success = 0.0;
  double mean_sub_fooled = 0.0;
  std::size_t total = 0;
  std::size_t clean_correct = 0;
  std::size_t survived = 0;
};

/// Outcome of one attack on one test sample.
struct SampleRecord {
  std::size_t sample = 0;
  std::size_t label = 0;
  bool clean_correct = false;
  bool success = false;
  std::size_t iterations = 0;
  std::size_t sub_fooled = 0;
  Tensor adversarial;
  std::vector<TraceRecord> trace;
};

using AttackFn = std::function<AttackResult(const Ensemble&, const Tensor&, std::size_t,
                                            const AttackConfig&, std::uint64_t)>;

/// Runs one attack over the selected test samples (clean-incorrect samples
/// are recorded and skipped). Sample i uses random stream i.
std::vector<SampleRecord> attack_samples(const Ensemble& ens, const Dataset& test,
                                         std::span<const std::size_t> indices,
                                         const AttackFn& attack, const AttackConfig& cfg,
                                         std::size_t threads);
std::vector<SampleRecord> attack_samples(const Ensemble& ens, const Dataset& test,
                                         std::span<const std::size_t> indices,
                                         std::string_view attack, const AttackConfig& cfg,
                                         std::size_t threads);

/// Aggregates sample records; robust = clean-correct and attack failed.
EvalRow summarize(std::string defense, const Ensemble& ens, std::string attack,
                  const AttackConfig& cfg, std::span<const SampleRecord> records);

/// Test samples selected by the config (explicit list, else the first
/// max_samples, else all).
std::vector<std::size_t> selected_samples(const RunConfig& cfg, const Dataset& test);

SplitDataset load_or_generate_data(const RunConfig& cfg);

/// Loss surface around x over the plane spanned by the accumulated attack
/// direction g and a random orthogonal g_perp. Row-major grid values.
struct Surface {
  std::vector<double> offsets;  // grid coordinates along both axes
  std::vector<double> loss;     // offsets.size()^2 values, [i_a][i_r]
};

Surface loss_surface(const Ensemble& ens, const Tensor& x, std::size_t y,
                     const AttackConfig& cfg, const SurfaceSettings& settings,
                     std::uint64_t stream);

/// Verbs: gen-data, train, attack, eval, ablate, surface, sweep-epsilon,
/// sweep-tau, sweep-beta, report. Writes outputs and a manifest to out_dir.
void run_command(std::string_view verb, const RunConfig& cfg,
                 const std::filesystem::path& out_dir,
                 const std::optional<std::filesystem::path>& config_path = std::nullopt);

std::vector<std::string_view> command_names();

std::string sha256_file(const std::filesystem::path& path);

}  // namespace mora
