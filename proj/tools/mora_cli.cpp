#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mora/errors.hpp"
#include "mora/harness.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Model-reweighing attacks against toy ensemble defenses"};
  app.set_version_flag("--version", std::string(mora::kToolVersion));
  app.require_subcommand(1);

  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  app.add_option("--config", config, "run config (JSON)")->required();
  app.add_option("--out", out, "output directory");
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--threads", threads, "worker threads");

  const std::map<std::string, std::string> help{
      {"gen-data", "write the configured synthetic dataset"},
      {"train", "train a toy ensemble defense"},
      {"attack", "run the configured attack on every defense"},
      {"eval", "robust accuracy table over attacks and forming modes"},
      {"ablate", "consecutive-component ablation ladder"},
      {"surface", "loss surface around clean-correct samples"},
      {"sweep-epsilon", "robust accuracy against perturbation budget"},
      {"sweep-tau", "robust accuracy against the weighting temperature"},
      {"sweep-beta", "robust accuracy against a fixed mixing weight"},
      {"report", "markdown summary of an eval table"},
  };
  for (auto verb : mora::command_names()) {
    const std::string name(verb);
    app.add_subcommand(name, help.count(name) ? help.at(name) : "")->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mora::kExitOk : mora::kExitConfig;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    mora::RunConfig cfg = mora::load_run_config(config);
    mora::apply_overrides(cfg, seed, threads);
    mora::run_command(verb, cfg, out, fs::path(config));
  } catch (const std::exception& e) {
    std::cerr << "mora " << verb << ": " << e.what() << '\n';
    return mora::exit_code_for(e);
  }
  return mora::kExitOk;
}
