#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mora/csv.hpp"
#include "mora/errors.hpp"
#include "mora/harness.hpp"

using namespace mora;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mora_test_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json base_config() {
  return json::parse(R"({
    "schema_version": 1, "seed": 3,
    "dataset": {"generator": "blobs", "samples": 200},
    "train": {"id": "ens", "num_models": 2, "hidden": [8], "epochs": 15},
    "defenses": [{"id": "ens", "model": "ens.json"}],
    "attack": {"epsilon": 0.08, "per_beta_iterations": 10, "restarts": 2, "iterations": 10,
               "mt_iterations_per_target": 10},
    "eval": {"attacks": ["pgd", "mora"], "max_samples": 12}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing") {
  const RunConfig cfg = parse_run_config(base_config(), "/base");
  CHECK(cfg.seed == 3);
  CHECK(cfg.attack.seed == 3);
  CHECK(cfg.defenses.at(0).model == fs::path("/base/ens.json"));
  CHECK(cfg.attack.per_beta_iterations == 10);

  auto doc = base_config();
  doc["attack"]["bogus"] = 1;
  CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
  doc = base_config();
  doc["schema_version"] = 2;
  CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
  doc = base_config();
  doc["eval"]["attacks"] = {"fab"};
  CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
  doc = base_config();
  doc["attack"]["mt_targets"] = {1};
  CHECK(parse_run_config(doc, ".").attack.mt_targets == TargetPolicy::explicit_list);

  RunConfig over = parse_run_config(base_config(), ".");
  apply_overrides(over, 9, 4);
  CHECK(over.seed == 9);
  CHECK(over.attack.seed == 9);
  CHECK(over.threads == 4);
  CHECK(over.snapshot["seed"] == 9);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(FormatError("x")) == 3);
  CHECK(exit_code_for(MisclassifiedInput("x")) == 4);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("train, eval and report") {
  const fs::path dir = scratch("pipeline");
  RunConfig cfg = parse_run_config(base_config(), dir);
  run_command("train", cfg, dir);
  CHECK(fs::exists(dir / "ens.json"));
  CHECK(fs::exists(dir / "manifest-train.json"));

  run_command("eval", cfg, dir);
  const CsvTable table = read_csv(dir / "eval.csv");
  REQUIRE(table.rows.size() == 2);
  for (const auto& row : table.rows) {
    CHECK(parse_double(row[table.column("robust_accuracy")]) <=
          parse_double(row[table.column("clean_accuracy")]));
    CHECK(row[table.column("total")] == "12");
  }

  const json manifest = json::parse(slurp(dir / "manifest-eval.json"));
  CHECK(manifest["command"] == "eval");
  CHECK(manifest["outputs"].size() >= 3);
  CHECK(manifest["outputs"][0]["sha256"].get<std::string>().size() == 64);

  run_command("report", cfg, dir);
  const std::string report = slurp(dir / "report.md");
  CHECK(report.find("NOT reproducible") != std::string::npos);
  CHECK(report.find("| ens | 2 |") != std::string::npos);
}

TEST_CASE("zero radius leaves robust accuracy at clean accuracy") {
  const fs::path dir = scratch("zero");
  RunConfig cfg = parse_run_config(base_config(), dir);
  run_command("train", cfg, dir);
  cfg.epsilons = {0.0};
  run_command("eval", cfg, dir);
  const CsvTable table = read_csv(dir / "eval.csv");
  for (const auto& row : table.rows) {
    CHECK(row[table.column("robust_accuracy")] == row[table.column("clean_accuracy")]);
  }
}

TEST_CASE("remaining commands write their tables") {
  const fs::path dir = scratch("commands");
  auto doc = base_config();
  doc["surface"] = {{"grid", 5}, {"direction_steps", 3}};
  doc["sweep"] = {{"taus", {1.0, 5.0}}, {"betas", {0.0, 1.0}}};
  doc["eval"]["modes"] = {"softmax"};
  doc["eval"]["epsilons"] = {0.05, 0.1};
  doc["ablation"] = {{"seeds", {0, 1}}};
  RunConfig cfg = parse_run_config(doc, dir);
  run_command("gen-data", cfg, dir);
  CHECK(fs::exists(dir / "data.csv"));
  run_command("train", cfg, dir);
  for (const char* verb : {"attack", "ablate", "surface", "sweep-epsilon", "sweep-tau", "sweep-beta"}) {
    CAPTURE(verb);
    run_command(verb, cfg, dir);
    CHECK(fs::exists(dir / (std::string("manifest-") + verb + ".json")));
  }
  CHECK(read_csv(dir / "ablation_summary.csv").rows.size() == kAblationRungCount);
  CHECK(read_csv(dir / "surface.csv").rows.size() == 25);
  const CsvTable eps = read_csv(dir / "sweep_epsilon.csv");
  CHECK(eps.rows.size() == 3);
  CHECK(eps.rows[0][eps.column("robust_accuracy")] == eps.rows[0][eps.column("clean_accuracy")]);
  CHECK(parse_double(eps.rows[2][eps.column("robust_accuracy")]) <=
        parse_double(eps.rows[1][eps.column("robust_accuracy")]));
  CHECK(read_csv(dir / "sweep_beta.csv").rows.size() == 2);
}

TEST_CASE("missing inputs are I/O errors") {
  const fs::path dir = scratch("missing");
  RunConfig cfg = parse_run_config(base_config(), dir);
  CHECK_THROWS_AS(run_command("eval", cfg, dir), IoError);
  CHECK_THROWS_AS(load_run_config(dir / "nope.json"), IoError);
  CHECK_THROWS_AS(run_command("dance", cfg, dir), ConfigError);
}
