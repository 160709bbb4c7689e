#include "mora/harness.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mora/csv.hpp"
#include "mora/errors.hpp"
#include "mora/objectives.hpp"
#include "mora/parallel.hpp"
#include "mora/rng.hpp"

namespace mora {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const ContractViolation*>(&e)) return kExitContract;
  return kExitFailure;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

template <class T>
void read_opt(const json& obj, const char* key, std::optional<T>& out, const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return;
  T v{};
  read(obj, key, v, where);
  out = v;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

DatasetSpec parse_dataset(const json& j) {
  check_keys(j, "dataset",
             {"generator", "input_dim", "num_classes", "samples", "noise", "seed",
              "test_fraction"});
  DatasetSpec s;
  read(j, "generator", s.generator, "dataset");
  read(j, "input_dim", s.input_dim, "dataset");
  read(j, "num_classes", s.num_classes, "dataset");
  read(j, "samples", s.samples, "dataset");
  read(j, "noise", s.noise, "dataset");
  read(j, "seed", s.seed, "dataset");
  read(j, "test_fraction", s.test_fraction, "dataset");
  s.validate();
  return s;
}

void parse_train(const json& j, RunConfig& cfg) {
  check_keys(j, "train",
             {"id", "num_models", "hidden", "epochs", "learning_rate", "batch_size",
              "regularizer", "lambda", "adv_epsilon", "adv_steps", "mode", "vote_tau", "seed"});
  TrainConfig& t = cfg.train;
  read(j, "id", cfg.train_id, "train");
  read(j, "num_models", t.num_models, "train");
  read(j, "hidden", t.hidden, "train");
  read(j, "epochs", t.epochs, "train");
  read(j, "learning_rate", t.learning_rate, "train");
  read(j, "batch_size", t.batch_size, "train");
  std::string reg = std::string(to_string(t.regularizer));
  read(j, "regularizer", reg, "train");
  t.regularizer = parse_regularizer(reg);
  read(j, "lambda", t.lambda, "train");
  read(j, "adv_epsilon", t.adv_epsilon, "train");
  read(j, "adv_steps", t.adv_steps, "train");
  std::string mode = std::string(to_string(t.mode));
  read(j, "mode", mode, "train");
  t.mode = parse_forming_mode(mode);
  read(j, "vote_tau", t.vote_tau, "train");
  read(j, "seed", t.seed, "train");
  t.validate();
}

void parse_attack(const json& j, AttackConfig& a) {
  check_keys(j, "attack",
             {"epsilon", "iterations", "nu", "attack_tau", "beta_schedule",
              "per_beta_iterations", "mt_targets", "mt_iterations_per_target", "mt_beta",
              "restarts", "pgd_step", "pgd_objective", "literal_momentum", "seed"});
  read(j, "epsilon", a.epsilon, "attack");
  read(j, "iterations", a.iterations, "attack");
  read(j, "nu", a.nu, "attack");
  read_opt(j, "attack_tau", a.attack_tau, "attack");
  read(j, "beta_schedule", a.beta_schedule, "attack");
  read(j, "per_beta_iterations", a.per_beta_iterations, "attack");
  if (j.contains("mt_targets")) {
    const json& t = j["mt_targets"];
    if (t.is_string() && t == "all") {
      a.mt_targets = TargetPolicy::all;
    } else if (t.is_string() && t == "none") {
      a.mt_targets = TargetPolicy::none;
    } else if (t.is_array()) {
      a.mt_targets = TargetPolicy::explicit_list;
      read(j, "mt_targets", a.mt_target_list, "attack");
    } else {
      throw ConfigError("attack.mt_targets must be \"all\", \"none\" or a list of labels");
    }
  }
  read(j, "mt_iterations_per_target", a.mt_iterations_per_target, "attack");
  read(j, "mt_beta", a.mt_beta, "attack");
  read(j, "restarts", a.restarts, "attack");
  read_opt(j, "pgd_step", a.pgd_step, "attack");
  if (j.contains("pgd_objective")) {
    std::string o;
    read(j, "pgd_objective", o, "attack");
    if (o == "sce") {
      a.pgd_objective = PgdObjective::sce;
    } else if (o == "nll") {
      a.pgd_objective = PgdObjective::nll;
    } else {
      throw ConfigError("attack.pgd_objective must be \"sce\" or \"nll\"");
    }
  }
  read(j, "literal_momentum", a.literal_momentum, "attack");
  read(j, "seed", a.seed, "attack");
  try {
    a.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
}

std::vector<FormingMode> parse_modes(const json& j) {
  std::vector<std::string> names;
  read(j, "modes", names, "eval");
  std::vector<FormingMode> modes;
  for (const auto& n : names) modes.push_back(parse_forming_mode(n));
  return modes;
}

}  // namespace

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
  check_keys(doc, "config",
             {"schema_version", "seed", "threads", "data", "dataset", "train", "defenses",
              "attack", "eval", "ablation", "surface", "sweep", "report"});
  if (!doc.contains("schema_version")) throw ConfigError("config lacks schema_version");
  int version = 0;
  read(doc, "schema_version", version, "config");
  if (version != kConfigSchemaVersion) {
    throw ConfigError("config schema_version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kConfigSchemaVersion) +
                      ")");
  }
  RunConfig cfg;
  cfg.snapshot = doc;
  read(doc, "seed", cfg.seed, "config");
  read(doc, "threads", cfg.threads, "config");
  if (cfg.threads == 0) throw ConfigError("threads must be at least 1");
  cfg.attack.seed = cfg.seed;
  cfg.train.seed = cfg.seed;

  if (doc.contains("data")) {
    std::string p;
    read(doc, "data", p, "config");
    cfg.data = resolve(base_dir, p);
  }
  if (doc.contains("dataset")) cfg.dataset = parse_dataset(doc["dataset"]);
  if (doc.contains("train")) parse_train(doc["train"], cfg);
  if (doc.contains("defenses")) {
    if (!doc["defenses"].is_array()) throw ConfigError("defenses must be a list");
    for (const auto& d : doc["defenses"]) {
      check_keys(d, "defenses[]", {"id", "model"});
      DefenseSpec spec;
      std::string model;
      read(d, "id", spec.id, "defenses[]");
      read(d, "model", model, "defenses[]");
      if (model.empty()) throw ConfigError("defenses[] entry lacks a model path");
      if (spec.id.empty()) spec.id = fs::path(model).stem().string();
      spec.model = resolve(base_dir, model);
      cfg.defenses.push_back(std::move(spec));
    }
  }
  if (doc.contains("attack")) parse_attack(doc["attack"], cfg.attack);
  if (doc.contains("eval")) {
    const json& e = doc["eval"];
    check_keys(e, "eval",
               {"attacks", "attack", "modes", "epsilons", "max_samples", "samples",
                "write_traces"});
    read(e, "attacks", cfg.attacks, "eval");
    read(e, "attack", cfg.attack_name, "eval");
    cfg.modes = parse_modes(e);
    read(e, "epsilons", cfg.epsilons, "eval");
    read(e, "max_samples", cfg.max_samples, "eval");
    read(e, "samples", cfg.samples, "eval");
    read(e, "write_traces", cfg.write_traces, "eval");
  }
  for (const auto& a : cfg.attacks)
    if (!is_known_attack(a)) throw ConfigError("unknown attack '" + a + "'");
  if (!is_known_attack(cfg.attack_name)) {
    throw ConfigError("unknown attack '" + cfg.attack_name + "'");
  }
  for (double e : cfg.epsilons)
    if (!(e >= 0.0)) throw ConfigError("epsilons must be non-negative");
  if (doc.contains("ablation")) {
    check_keys(doc["ablation"], "ablation", {"seeds"});
    read(doc["ablation"], "seeds", cfg.ablation_seeds, "ablation");
    if (cfg.ablation_seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  }
  if (doc.contains("surface")) {
    const json& s = doc["surface"];
    check_keys(s, "surface", {"grid", "direction_steps", "loss", "beta", "sample"});
    read(s, "grid", cfg.surface.grid, "surface");
    read(s, "direction_steps", cfg.surface.direction_steps, "surface");
    read(s, "loss", cfg.surface.loss, "surface");
    read(s, "beta", cfg.surface.beta, "surface");
    read_opt(s, "sample", cfg.surface.sample, "surface");
    if (cfg.surface.grid < 3 || cfg.surface.grid % 2 == 0) {
      throw ConfigError("surface.grid must be odd and at least 3");
    }
    if (cfg.surface.loss != "mora" && cfg.surface.loss != "pgd") {
      throw ConfigError("surface.loss must be \"mora\" or \"pgd\"");
    }
  }
  if (doc.contains("sweep")) {
    check_keys(doc["sweep"], "sweep", {"taus", "betas"});
    read(doc["sweep"], "taus", cfg.sweep_taus, "sweep");
    read(doc["sweep"], "betas", cfg.sweep_betas, "sweep");
    for (double t : cfg.sweep_taus)
      if (!(t > 0.0)) throw ConfigError("sweep.taus must be positive");
    for (double b : cfg.sweep_betas)
      if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("sweep.betas must lie in [0, 1]");
  }
  if (doc.contains("report")) {
    check_keys(doc["report"], "report", {"input"});
    std::string p;
    read(doc["report"], "input", p, "report");
    if (!p.empty()) cfg.report_input = resolve(base_dir, p);
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

void apply_overrides(RunConfig& cfg, std::optional<std::uint64_t> seed,
                     std::optional<std::size_t> threads) {
  if (seed) {
    cfg.seed = *seed;
    cfg.attack.seed = *seed;
    cfg.train.seed = *seed;
    cfg.snapshot["seed"] = *seed;
  }
  if (threads) {
    if (*threads == 0) throw ConfigError("--threads must be at least 1");
    cfg.threads = *threads;
  }
}

// ---------------------------------------------------------------------------
// Evaluation protocol

SplitDataset load_or_generate_data(const RunConfig& cfg) {
  if (cfg.data) {
    if (!fs::exists(*cfg.data)) throw IoError("data file '" + cfg.data->string() + "' not found");
    return load_dataset_csv(*cfg.data);
  }
  return generate_dataset(cfg.dataset);
}

std::vector<std::size_t> selected_samples(const RunConfig& cfg, const Dataset& test) {
  std::vector<std::size_t> out;
  if (!cfg.samples.empty()) {
    for (auto i : cfg.samples) {
      if (i >= test.size()) {
        throw ConfigError("sample index " + std::to_string(i) + " exceeds the test set size " +
                          std::to_string(test.size()));
      }
      out.push_back(i);
    }
    return out;
  }
  const std::size_t n = cfg.max_samples == 0 ? test.size() : std::min(cfg.max_samples, test.size());
  out.resize(n);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

std::vector<SampleRecord> attack_samples(const Ensemble& ens, const Dataset& test,
                                         std::span<const std::size_t> indices,
                                         const AttackFn& attack, const AttackConfig& cfg,
                                         std::size_t threads) {
  if (test.input_dim != ens.input_dim()) {
    throw ContractViolation("test data has " + std::to_string(test.input_dim) +
                            " features, the model expects " + std::to_string(ens.input_dim()));
  }
  std::vector<SampleRecord> out(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    const std::size_t i = indices[k];
    SampleRecord rec;
    rec.sample = i;
    rec.label = test.labels[i];
    rec.adversarial = test.inputs[i];
    rec.clean_correct = ens.hard_decision(test.inputs[i], rec.label) == rec.label;
    // With epsilon = 0 the feasible set is {x}, which is classified correctly.
    if (rec.clean_correct && cfg.epsilon > 0.0) {
      AttackResult r = attack(ens, test.inputs[i], rec.label, cfg, i);
      if (r.success && !verify_success(ens, test.inputs[i], rec.label, cfg.epsilon,
                                       r.adversarial_example)) {
        throw ContractViolation("attack reported an unverifiable success on sample " +
                                std::to_string(i));
      }
      rec.success = r.success;
      rec.iterations = r.iterations_used;
      rec.sub_fooled = r.sub_fooled;
      rec.adversarial = std::move(r.adversarial_example);
      rec.trace = std::move(r.trace);
    }
    out[k] = std::move(rec);
  });
  return out;
}

std::vector<SampleRecord> attack_samples(const Ensemble& ens, const Dataset& test,
                                         std::span<const std::size_t> indices,
                                         std::string_view attack, const AttackConfig& cfg,
                                         std::size_t threads) {
  const std::string name(attack);
  if (!is_known_attack(name)) throw ConfigError("unknown attack '" + name + "'");
  return attack_samples(
      ens, test, indices,
      [name](const Ensemble& e, const Tensor& x, std::size_t y, const AttackConfig& c,
             std::uint64_t stream) { return run_named_attack(name, e, x, y, c, stream); },
      cfg, threads);
}

EvalRow summarize(std::string defense, const Ensemble& ens, std::string attack,
                  const AttackConfig& cfg, std::span<const SampleRecord> records) {
  EvalRow row;
  row.defense = std::move(defense);
  row.num_models = ens.size();
  row.mode = ens.mode();
  row.budget = is_known_attack(attack) ? attack_budget(attack, cfg, ens.num_classes()) : 0;
  row.attack = std::move(attack);
  row.epsilon = cfg.epsilon;
  row.total = records.size();
  double iters = 0.0, fooled = 0.0;
  std::size_t successes = 0;
  for (const auto& r : records) {
    row.clean_correct += r.clean_correct ? 1 : 0;
    row.survived += (r.clean_correct && !r.success) ? 1 : 0;
    if (r.success) {
      ++successes;
      iters += static_cast<double>(r.iterations);
      fooled += static_cast<double>(r.sub_fooled);
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(row.total, 1));
  row.clean_accuracy = 100.0 * static_cast<double>(row.clean_correct) / n;
  row.robust_accuracy = 100.0 * static_cast<double>(row.survived) / n;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  row.mean_iterations_to_success = successes ? iters / static_cast<double>(successes) : nan;
  row.mean_sub_fooled = successes ? fooled / static_cast<double>(successes) : nan;
  return row;
}

// ---------------------------------------------------------------------------
// Loss surfaces

namespace {

Var surface_objective(const SurfaceSettings& s, const Ensemble& ens, std::span<const Var> subs,
                      Var z_e, std::size_t y, const AttackConfig& cfg) {
  if (s.loss == "pgd") {
    if (cfg.pgd_objective == PgdObjective::nll) {
      std::optional<Var> acc;
      for (Var z : subs) {
        Var p = softmax_t(z, 1.0);
        acc = acc ? *acc + p : p;
      }
      return nll_avg_prob(scale(*acc, 1.0 / static_cast<double>(subs.size())), y);
    }
    return sce(z_e, y);
  }
  ObjectiveContext ctx;
  ctx.label = y;
  ctx.mode = ens.mode();
  ctx.attack_tau = cfg.tau_for(ens.mode());
  ctx.beta = s.beta;
  ctx.num_models = ens.size();
  return mora_loss(subs, z_e, ctx);
}

double surface_loss_at(const SurfaceSettings& s, const Ensemble& ens, const Tensor& p,
                       std::size_t y, const AttackConfig& cfg) {
  Graph g;
  Var xv = g.constant(p);
  const auto subs = ens.forward_subs(g, xv);
  return surface_objective(s, ens, subs, ens.form(g, subs), y, cfg).value().item();
}

void normalise(Tensor& v) {
  const double n = l2_norm(v.values());
  if (n > 0.0)
    for (auto& e : v.values()) e /= n;
}

}  // namespace

Surface loss_surface(const Ensemble& ens, const Tensor& x, std::size_t y,
                     const AttackConfig& cfg, const SurfaceSettings& settings,
                     std::uint64_t stream) {
  const double eps = cfg.epsilon;
  Rng rng = Rng::derive(cfg.seed, stream ^ 0x73757266ULL);

  // Accumulate sign-gradient steps from x itself (no random start).
  Tensor cur = x;
  for (std::size_t s = 0; s < settings.direction_steps; ++s) {
    const Tensor gr = grad(
        [&](Graph& g, Var xv) {
          const auto subs = ens.forward_subs(g, xv);
          return surface_objective(settings, ens, subs, ens.form(g, subs), y, cfg);
        },
        cur);
    for (std::size_t k = 0; k < cur.size(); ++k)
      cur[k] += eps / 4.0 * (gr[k] > 0.0 ? 1.0 : (gr[k] < 0.0 ? -1.0 : 0.0));
    cur = project(cur, x, eps);
  }
  Tensor dir = cur;
  for (std::size_t k = 0; k < dir.size(); ++k) dir[k] -= x[k];
  if (l2_norm(dir.values()) == 0.0) {
    for (auto& v : dir.values()) v = rng.normal();
  }
  normalise(dir);

  Tensor perp = Tensor::zeros(x.shape());
  for (auto& v : perp.values()) v = rng.normal();
  double along = 0.0;
  for (std::size_t k = 0; k < perp.size(); ++k) along += perp[k] * dir[k];
  for (std::size_t k = 0; k < perp.size(); ++k) perp[k] -= along * dir[k];
  normalise(perp);

  Surface out;
  const std::size_t n = settings.grid;
  for (std::size_t i = 0; i < n; ++i) {
    out.offsets.push_back(eps * (2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0));
  }
  out.loss.resize(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Tensor p = x;
      for (std::size_t k = 0; k < p.size(); ++k)
        p[k] = x[k] + dir[k] * out.offsets[i] + perp[k] * out.offsets[j];
      out.loss[i * n + j] = surface_loss_at(settings, ens, p, y, cfg);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

class Manifest {
 public:
  Manifest(std::string_view verb, const RunConfig& cfg, fs::path out_dir)
      : verb_(verb), cfg_(cfg), out_dir_(std::move(out_dir)), started_(utc_now()) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  fs::path output(const std::string& name) {
    outputs_.push_back(out_dir_ / name);
    return outputs_.back();
  }
  fs::path file_name() const { return out_dir_ / ("manifest-" + verb_ + ".json"); }

  void write(const std::optional<fs::path>& config_path) const {
    auto digests = [](const std::vector<fs::path>& paths) {
      json arr = json::array();
      for (const auto& p : paths) {
        arr.push_back({{"path", p.string()},
                       {"sha256", fs::exists(p) ? sha256_file(p) : std::string()}});
      }
      return arr;
    };
    std::vector<fs::path> inputs = inputs_;
    if (config_path) inputs.insert(inputs.begin(), *config_path);
    json doc = {{"tool", "mora"},
                {"tool_version", kToolVersion},
                {"command", verb_},
                {"seed", cfg_.seed},
                {"threads", cfg_.threads},
                {"started_at", started_},
                {"finished_at", utc_now()},
                {"config", cfg_.snapshot},
                {"inputs", digests(inputs)},
                {"outputs", digests(outputs_)}};
    std::ofstream out(file_name(), std::ios::binary);
    if (!out) throw IoError("cannot write manifest '" + file_name().string() + "'");
    out << doc.dump(2) << '\n';
  }

 private:
  std::string verb_;
  const RunConfig& cfg_;
  fs::path out_dir_;
  std::string started_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
};

struct LoadedDefense {
  std::string id;
  Ensemble ensemble;
};

std::vector<LoadedDefense> load_defenses(const RunConfig& cfg, Manifest& manifest) {
  if (cfg.defenses.empty()) throw ConfigError("config lists no defenses (models to attack)");
  std::vector<LoadedDefense> out;
  for (const auto& d : cfg.defenses) {
    if (!fs::exists(d.model)) throw IoError("model file '" + d.model.string() + "' not found");
    manifest.input(d.model);
    out.push_back(LoadedDefense{d.id, load_ensemble(d.model)});
  }
  return out;
}

std::vector<Ensemble> mode_variants(const RunConfig& cfg, const Ensemble& ens,
                                    bool all_by_default) {
  std::vector<FormingMode> modes = cfg.modes;
  if (modes.empty()) {
    if (all_by_default) {
      modes = {FormingMode::softmax, FormingMode::voting, FormingMode::logits};
    } else {
      modes = {ens.mode()};
    }
  }
  std::vector<Ensemble> out;
  for (auto m : modes) out.push_back(ens.with_mode(m));
  return out;
}

Dataset test_split(const RunConfig& cfg, Manifest& manifest, const Ensemble* check) {
  if (cfg.data) manifest.input(*cfg.data);
  Dataset test = load_or_generate_data(cfg).test;
  if (check && test.input_dim != check->input_dim()) {
    throw ContractViolation("test data has " + std::to_string(test.input_dim) +
                            " features, the model expects " +
                            std::to_string(check->input_dim()));
  }
  return test;
}

std::vector<std::string> eval_header() {
  return {"defense", "num_models", "mode", "attack", "epsilon", "budget",
          "clean_accuracy", "robust_accuracy", "mean_iterations_to_success",
          "mean_sub_fooled", "total", "clean_correct", "survived"};
}

void write_eval_row(CsvWriter& csv, const EvalRow& r) {
  csv << r.defense << r.num_models << to_string(r.mode) << r.attack << r.epsilon << r.budget
      << r.clean_accuracy << r.robust_accuracy << r.mean_iterations_to_success
      << r.mean_sub_fooled << r.total << r.clean_correct << r.survived;
  csv.end_row();
}

std::vector<std::string> sample_header(std::size_t d) {
  std::vector<std::string> h{"defense", "mode", "attack", "epsilon", "sample", "label",
                             "clean_correct", "success", "iterations", "sub_fooled"};
  for (std::size_t j = 0; j < d; ++j) h.push_back("adv_x" + std::to_string(j));
  return h;
}

const std::vector<std::string> kTraceHeader{"defense", "mode", "attack", "epsilon", "sample",
                                            "iteration", "loss", "dl_e", "sub_fooled",
                                            "step_size"};

/// Per-sample, trace and histogram writers shared by attack and eval.
struct RecordSinks {
  CsvWriter samples;
  std::optional<CsvWriter> traces;
  CsvWriter histogram;

  RecordSinks(Manifest& m, std::string_view prefix, std::size_t d, bool traces_on)
      : samples(m.output(std::string(prefix) + "samples.csv"), sample_header(d)),
        histogram(m.output(std::string(prefix) + "sub_fooled_histogram.csv"),
                  {"defense", "mode", "attack", "epsilon", "sub_fooled", "count"}) {
    if (traces_on) traces.emplace(m.output(std::string(prefix) + "traces.csv"), kTraceHeader);
  }

  void write(const std::string& defense, FormingMode mode, const std::string& attack,
             double eps, std::size_t num_models, std::span<const SampleRecord> records) {
    std::vector<std::size_t> hist(num_models + 1, 0);
    for (const auto& r : records) {
      samples << defense << to_string(mode) << attack << eps << r.sample << r.label
              << r.clean_correct << r.success << r.iterations << r.sub_fooled;
      for (double v : r.adversarial.values()) samples << v;
      samples.end_row();
      if (r.success) ++hist[r.sub_fooled];
      if (traces) {
        for (const auto& t : r.trace) {
          *traces << defense << to_string(mode) << attack << eps << r.sample << t.iteration
                  << t.loss << t.dl_e << t.sub_fooled << t.step_size;
          traces->end_row();
        }
      }
    }
    for (std::size_t k = 0; k < hist.size(); ++k) {
      histogram << defense << to_string(mode) << attack << eps << k << hist[k];
      histogram.end_row();
    }
  }

  void close() {
    samples.close();
    histogram.close();
    if (traces) traces->close();
  }
};

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const RunConfig& cfg, Manifest& m) {
  const SplitDataset data = generate_dataset(cfg.dataset);
  save_dataset_csv(data, m.output("data.csv"));
}

void cmd_train(const RunConfig& cfg, Manifest& m) {
  if (cfg.data) m.input(*cfg.data);
  const SplitDataset data = load_or_generate_data(cfg);
  const TrainResult trained = train_ensemble(cfg.train, data.train);
  save_ensemble(trained.ensemble, m.output(cfg.train_id + ".json"));
  save_train_log_csv(trained.log, m.output(cfg.train_id + "_train_log.csv"));

  CsvWriter summary(m.output(cfg.train_id + "_summary.csv"),
                    {"id", "num_models", "regularizer", "lambda", "train_accuracy",
                     "test_accuracy", "grad_cos_mean", "grad_cos_min", "grad_cos_max"});
  const auto stats = grad_cosine_stats(trained.ensemble, data.test);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  summary << cfg.train_id << trained.ensemble.size() << to_string(cfg.train.regularizer)
          << cfg.train.lambda << accuracy(trained.ensemble, data.train)
          << accuracy(trained.ensemble, data.test) << (stats ? stats->mean : nan)
          << (stats ? stats->min : nan) << (stats ? stats->max : nan);
  summary.end_row();
  summary.close();
}

void cmd_attack(const RunConfig& cfg, Manifest& m) {
  auto defenses = load_defenses(cfg, m);
  const Dataset test = test_split(cfg, m, &defenses.front().ensemble);
  const auto indices = selected_samples(cfg, test);
  const auto& def = defenses.front();
  RecordSinks sinks(m, "attack_", test.input_dim, cfg.write_traces);
  CsvWriter rows(m.output("attack.csv"), eval_header());
  for (const Ensemble& ens : mode_variants(cfg, def.ensemble, false)) {
    const auto records = attack_samples(ens, test, indices, cfg.attack_name, cfg.attack, cfg.threads);
    write_eval_row(rows, summarize(def.id, ens, cfg.attack_name, cfg.attack, records));
    sinks.write(def.id, ens.mode(), cfg.attack_name, cfg.attack.epsilon, ens.size(), records);
  }
  rows.close();
  sinks.close();
}

void cmd_eval(const RunConfig& cfg, Manifest& m) {
  auto defenses = load_defenses(cfg, m);
  const Dataset test = test_split(cfg, m, &defenses.front().ensemble);
  const auto indices = selected_samples(cfg, test);
  const std::vector<double> epsilons =
      cfg.epsilons.empty() ? std::vector<double>{cfg.attack.epsilon} : cfg.epsilons;

  CsvWriter rows(m.output("eval.csv"), eval_header());
  RecordSinks sinks(m, "", test.input_dim, cfg.write_traces);
  for (const auto& def : defenses) {
    if (def.ensemble.input_dim() != test.input_dim) {
      throw ContractViolation("defense '" + def.id + "' does not match the data dimension");
    }
    for (const Ensemble& ens : mode_variants(cfg, def.ensemble, false)) {
      for (const auto& attack : cfg.attacks) {
        for (double eps : epsilons) {
          AttackConfig ac = cfg.attack;
          ac.epsilon = eps;
          const auto records = attack_samples(ens, test, indices, attack, ac, cfg.threads);
          write_eval_row(rows, summarize(def.id, ens, attack, ac, records));
          sinks.write(def.id, ens.mode(), attack, eps, ens.size(), records);
        }
      }
    }
  }
  rows.close();
  sinks.close();
}

void cmd_ablate(const RunConfig& cfg, Manifest& m) {
  auto defenses = load_defenses(cfg, m);
  const Dataset test = test_split(cfg, m, &defenses.front().ensemble);
  const auto indices = selected_samples(cfg, test);
  const auto& def = defenses.front();

  CsvWriter rows(m.output("ablation.csv"),
                 {"defense", "mode", "rung_index", "rung", "seed", "clean_accuracy",
                  "robust_accuracy", "mean_iterations_to_success"});
  CsvWriter summary(m.output("ablation_summary.csv"),
                    {"defense", "mode", "rung_index", "rung", "mean_robust_accuracy",
                     "std_robust_accuracy", "noise_band", "final_within_band"});
  for (const Ensemble& ens : mode_variants(cfg, def.ensemble, false)) {
    std::vector<std::vector<double>> robust(kAblationRungCount);
    for (std::size_t r = 0; r < kAblationRungCount; ++r) {
      const AblationRung rung = ablation_rung(r);
      for (std::uint64_t seed : cfg.ablation_seeds) {
        AttackConfig ac = cfg.attack;
        ac.seed = seed;
        const auto records = attack_samples(
            ens, test, indices,
            [rung](const Ensemble& e, const Tensor& x, std::size_t y, const AttackConfig& c,
                   std::uint64_t stream) { return run_ablation_rung(rung, e, x, y, c, stream); },
            ac, cfg.threads);
        const EvalRow row = summarize(def.id, ens, std::string(to_string(rung)), ac, records);
        robust[r].push_back(row.robust_accuracy);
        rows << def.id << to_string(ens.mode()) << r << to_string(rung) << std::size_t(seed)
             << row.clean_accuracy << row.robust_accuracy << row.mean_iterations_to_success;
        rows.end_row();
      }
    }
    std::vector<double> means, stds;
    for (const auto& v : robust) {
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      means.push_back(mean);
      stds.push_back(v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0);
    }
    const double band = *std::max_element(stds.begin(), stds.end());
    for (std::size_t r = 0; r < kAblationRungCount; ++r) {
      summary << def.id << to_string(ens.mode()) << r << to_string(ablation_rung(r)) << means[r]
              << stds[r] << band << (means.back() <= means[r] + band);
      summary.end_row();
    }
  }
  rows.close();
  summary.close();
}

void cmd_surface(const RunConfig& cfg, Manifest& m) {
  auto defenses = load_defenses(cfg, m);
  const Dataset test = test_split(cfg, m, &defenses.front().ensemble);
  const auto& def = defenses.front();
  CsvWriter grid(m.output("surface.csv"),
                 {"defense", "mode", "loss", "i", "j", "eps_a", "eps_r", "value"});
  CsvWriter info(m.output("surface_info.csv"),
                 {"defense", "mode", "loss", "samples_used", "single_sample"});
  for (const Ensemble& ens : mode_variants(cfg, def.ensemble, false)) {
    std::vector<std::size_t> chosen;
    if (cfg.surface.sample) {
      const std::size_t i = *cfg.surface.sample;
      if (i >= test.size()) throw ConfigError("surface.sample exceeds the test set size");
      chosen.push_back(i);
    } else {
      // Average over clean-correct samples that resist a 10-step PGD.
      Recipe pgd10;
      pgd10.objective = cfg.attack.pgd_objective == PgdObjective::nll ? Objective::ensemble_nll
                                                                       : Objective::ensemble_sce;
      pgd10.momentum = false;
      pgd10.cosine_step = false;
      const auto indices = selected_samples(cfg, test);
      std::vector<char> keep(indices.size(), 0);
      parallel_for(indices.size(), cfg.threads, [&](std::size_t k) {
        const std::size_t i = indices[k];
        if (ens.hard_decision(test.inputs[i], test.labels[i]) != test.labels[i]) return;
        Rng rng = Rng::derive(cfg.attack.seed, i);
        keep[k] = run_iterations(ens, test.inputs[i], test.labels[i], pgd10, 0.0, std::nullopt,
                                 10, cfg.attack, rng)
                          .success
                      ? 0
                      : 1;
      });
      for (std::size_t k = 0; k < indices.size(); ++k)
        if (keep[k]) chosen.push_back(indices[k]);
    }
    std::vector<Surface> surfaces(chosen.size());
    parallel_for(chosen.size(), cfg.threads, [&](std::size_t k) {
      const std::size_t i = chosen[k];
      surfaces[k] = loss_surface(ens, test.inputs[i], test.labels[i], cfg.attack, cfg.surface, i);
    });
    const std::size_t n = cfg.surface.grid;
    std::vector<double> mean(n * n, 0.0);
    for (const auto& s : surfaces)
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += s.loss[c];
    for (auto& v : mean) v /= static_cast<double>(std::max<std::size_t>(1, surfaces.size()));
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double offset_a = cfg.attack.epsilon * (2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0);
        const double offset_r = cfg.attack.epsilon * (2.0 * static_cast<double>(j) / static_cast<double>(n - 1) - 1.0);
        grid << def.id << to_string(ens.mode()) << cfg.surface.loss << i << j << offset_a
             << offset_r << (surfaces.empty() ? nan : mean[i * n + j]);
        grid.end_row();
      }
    }
    info << def.id << to_string(ens.mode()) << cfg.surface.loss << surfaces.size()
         << cfg.surface.sample.has_value();
    info.end_row();
  }
  grid.close();
  info.close();
}

struct SweepPoint {
  double clean = 0.0;
  double robust = 0.0;
};

void cmd_sweep_epsilon(const RunConfig& cfg, Manifest& m) {
  auto defenses = load_defenses(cfg, m);
  const Dataset test = test_split(cfg, m, &defenses.front().ensemble);
  const auto indices = selected_samples(cfg, test);
  std::set<double> eps_set(cfg.epsilons.begin(), cfg.epsilons.end());
  if (eps_set.empty()) eps_set.insert(cfg.attack.epsilon);
  eps_set.insert(0.0);

  CsvWriter rows(m.output("sweep_epsilon.csv"),
                 {"defense", "mode", "attack", "epsilon", "clean_accuracy", "robust_accuracy"});
  for (const auto& def : defenses) {
    for (const Ensemble& ens : mode_variants(cfg, def.ensemble, true)) {
      // Successes at a smaller radius stay feasible at every larger one.
      std::vector<char> broken(indices.size(), 0);
      for (double eps : eps_set) {
        AttackConfig ac = cfg.attack;
        ac.epsilon = eps;
        std::vector<std::size_t> todo;
        for (std::size_t k = 0; k < indices.size(); ++k)
          if (!broken[k]) todo.push_back(indices[k]);
        const auto records = attack_samples(ens, test, todo, cfg.attack_name, ac, cfg.threads);
        std::size_t clean = 0, survived = 0, pos = 0;
        for (std::size_t k = 0; k < indices.size(); ++k) {
          const std::size_t i = indices[k];
          const bool correct = ens.hard_decision(test.inputs[i], test.labels[i]) == test.labels[i];
          clean += correct ? 1 : 0;
          if (!broken[k]) {
            if (records[pos].success) broken[k] = 1;
            ++pos;
          }
          survived += (correct && !broken[k]) ? 1 : 0;
        }
        const double n = static_cast<double>(std::max<std::size_t>(1, indices.size()));
        rows << def.id << to_string(ens.mode()) << cfg.attack_name << eps
             << 100.0 * static_cast<double>(clean) / n << 100.0 * static_cast<double>(survived) / n;
        rows.end_row();
      }
    }
  }
  rows.close();
}

void cmd_sweep_param(const RunConfig& cfg, Manifest& m, bool tau) {
  auto defenses = load_defenses(cfg, m);
  const Dataset test = test_split(cfg, m, &defenses.front().ensemble);
  const auto indices = selected_samples(cfg, test);
  const std::string column = tau ? "tau" : "beta";
  CsvWriter rows(m.output(tau ? "sweep_tau.csv" : "sweep_beta.csv"),
                 {"defense", "mode", column, "clean_accuracy", "robust_accuracy",
                  "mean_iterations_to_success"});
  const auto& values = tau ? cfg.sweep_taus : cfg.sweep_betas;
  for (const auto& def : defenses) {
    for (const Ensemble& ens : mode_variants(cfg, def.ensemble, true)) {
      for (double v : values) {
        AttackConfig ac = cfg.attack;
        std::vector<SampleRecord> records;
        if (tau) {
          ac.attack_tau = v;
          records = attack_samples(ens, test, indices, "mora", ac, cfg.threads);
        } else {
          records = attack_samples(
              ens, test, indices,
              [v](const Ensemble& e, const Tensor& x, std::size_t y, const AttackConfig& c,
                  std::uint64_t stream) { return mora_attack(e, x, y, v, c, false, stream); },
              ac, cfg.threads);
        }
        const EvalRow row = summarize(def.id, ens, "mora", ac, records);
        rows << def.id << to_string(ens.mode()) << v << row.clean_accuracy << row.robust_accuracy
             << row.mean_iterations_to_success;
        rows.end_row();
      }
    }
  }
  rows.close();
}

struct ReferenceRow {
  const char* defense;
  int members;
  double clean, nominal, pgd, cw, mora, mora_mt;
};

// Published CIFAR-10 / ResNet-20 numbers (softmax ensembles, eps = 0.01).
constexpr ReferenceRow kReferenceSheet[] = {
    {"ADP", 3, 92.88, 29.12, 5.98, 7.72, 0.59, 0.34},
    {"ADP", 5, 93.34, 25.14, 7.10, 8.70, 0.97, 0.67},
    {"ADP", 8, 93.48, 20.20, 9.22, 9.59, 1.70, 1.32},
    {"Dverge", 3, 91.99, 47.42, 44.49, 40.17, 25.77, 25.26},
    {"Dverge", 5, 92.38, 55.72, 54.61, 52.83, 40.02, 39.50},
};

void cmd_report(const RunConfig& cfg, Manifest& m, const fs::path& out_dir) {
  const fs::path input = cfg.report_input.value_or(out_dir / "eval.csv");
  if (!fs::exists(input)) throw IoError("report input '" + input.string() + "' not found");
  m.input(input);
  const CsvTable table = read_csv(input);
  const std::size_t c_def = table.column("defense"), c_m = table.column("num_models"),
                    c_mode = table.column("mode"), c_att = table.column("attack"),
                    c_eps = table.column("epsilon"), c_budget = table.column("budget"),
                    c_clean = table.column("clean_accuracy"),
                    c_rob = table.column("robust_accuracy");

  // (defense, M, mode, eps) -> attack -> robust accuracy.
  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<Key, std::map<std::string, std::string>> cells;
  std::map<Key, std::string> clean;
  std::vector<std::string> attacks;
  std::map<std::string, std::string> budgets;
  for (const auto& row : table.rows) {
    const Key key{row[c_def], row[c_m], row[c_mode], row[c_eps]};
    cells[key][row[c_att]] = format_fixed(parse_double(row[c_rob]), 2);
    clean[key] = format_fixed(parse_double(row[c_clean]), 2);
    if (std::find(attacks.begin(), attacks.end(), row[c_att]) == attacks.end()) {
      attacks.push_back(row[c_att]);
      budgets[row[c_att]] = row[c_budget];
    }
  }

  std::ofstream md(m.output("report.md"), std::ios::binary);
  if (!md) throw IoError("cannot write report.md");
  md << "# Robust accuracy (%)\n\n| Defense | # | Mode | eps | Clean |";
  for (const auto& a : attacks) md << ' ' << a << " |";
  md << "\n|---|---|---|---|---|";
  for (std::size_t i = 0; i < attacks.size(); ++i) md << "---|";
  md << "\n| Budget (iterations) | | | | 1 |";
  for (const auto& a : attacks) md << ' ' << budgets[a] << " |";
  md << '\n';
  for (const auto& [key, by_attack] : cells) {
    const auto& [def, members, mode, eps] = key;
    md << "| " << def << " | " << members << " | " << mode << " | " << eps << " | "
       << clean[key] << " |";
    for (const auto& a : attacks) {
      auto it = by_attack.find(a);
      md << ' ' << (it == by_attack.end() ? "-" : it->second) << " |";
    }
    md << '\n';
  }
  md << "\n## Reference sheet (NOT reproducible here)\n\n"
        "Published CIFAR-10 results for ResNet-20 ensembles under softmax forming at "
        "eps = 0.01. They require pre-trained models and GPU-scale evaluation; they are "
        "listed only so the column semantics above can be compared, never the values.\n\n"
        "| Defense | # | Clean | Nominal | PGD | CW | MORA | MORA-MT |\n"
        "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : kReferenceSheet) {
    md << "| " << r.defense << " | " << r.members << " | " << format_fixed(r.clean, 2) << " | "
       << format_fixed(r.nominal, 2) << " | " << format_fixed(r.pgd, 2) << " | "
       << format_fixed(r.cw, 2) << " | " << format_fixed(r.mora, 2) << " | "
       << format_fixed(r.mora_mt, 2) << " |\n";
  }
  md.close();
  if (!md) throw IoError("failed writing report.md");
}

}  // namespace

std::vector<std::string_view> command_names() {
  return {"gen-data", "train", "attack", "eval", "ablate", "surface",
          "sweep-epsilon", "sweep-tau", "sweep-beta", "report"};
}

void run_command(std::string_view verb, const RunConfig& cfg, const fs::path& out_dir,
                 const std::optional<fs::path>& config_path) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "'");
  Manifest m(verb, cfg, out_dir);
  if (verb == "gen-data") {
    cmd_gen_data(cfg, m);
  } else if (verb == "train") {
    cmd_train(cfg, m);
  } else if (verb == "attack") {
    cmd_attack(cfg, m);
  } else if (verb == "eval") {
    cmd_eval(cfg, m);
  } else if (verb == "ablate") {
    cmd_ablate(cfg, m);
  } else if (verb == "surface") {
    cmd_surface(cfg, m);
  } else if (verb == "sweep-epsilon") {
    cmd_sweep_epsilon(cfg, m);
  } else if (verb == "sweep-tau") {
    cmd_sweep_param(cfg, m, true);
  } else if (verb == "sweep-beta") {
    cmd_sweep_param(cfg, m, false);
  } else if (verb == "report") {
    cmd_report(cfg, m, out_dir);
  } else {
    throw ConfigError("unknown command '" + std::string(verb) + "'");
  }
  m.write(config_path);
}

}  // namespace mora
