#include "mora/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mora/attack.hpp"
#include "mora/autodiff.hpp"
#include "mora/csv.hpp"
#include "mora/errors.hpp"
#include "mora/objectives.hpp"
#include "mora/rng.hpp"

namespace mora {

void DatasetSpec::validate() const {
  if (generator != "blobs" && generator != "moons" && generator != "rings" &&
      generator != "teacher") {
    throw ConfigError("unknown dataset generator '" + generator + "'");
  }
  if (input_dim == 0 || num_classes < 2 || samples < 2 * num_classes) {
    throw ConfigError("dataset needs d >= 1, K >= 2 and at least two samples per class");
  }
  if ((generator == "moons" || generator == "rings") && input_dim != 2) {
    throw ConfigError(generator + " is two-dimensional");
  }
  if (generator == "moons" && num_classes != 2) throw ConfigError("moons has two classes");
  if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
}

namespace {

// Affine rescale of every axis onto [0.05, 0.95].
void scale_into_unit_box(std::vector<Tensor>& xs) {
  const std::size_t d = xs.front().size();
  for (std::size_t j = 0; j < d; ++j) {
    double lo = xs.front()[j], hi = lo;
    for (const auto& x : xs) {
      lo = std::min(lo, x[j]);
      hi = std::max(hi, x[j]);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    for (auto& x : xs) x[j] = 0.05 + 0.9 * (x[j] - lo) / span;
  }
}

Tensor blob_point(const std::vector<Tensor>& centers, std::size_t k, double noise, Rng& rng) {
  Tensor x = centers[k];
  for (auto& v : x.values()) v += rng.normal(0.0, noise);
  return x;
}

Tensor moon_point(std::size_t k, double noise, Rng& rng) {
  const double t = rng.uniform(0.0, std::numbers::pi);
  Tensor x = k == 0 ? Tensor{std::cos(t), std::sin(t)}
                    : Tensor{1.0 - std::cos(t), 0.5 - std::sin(t)};
  for (auto& v : x.values()) v += rng.normal(0.0, noise);
  return x;
}

Tensor ring_point(std::size_t k, double noise, Rng& rng) {
  const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = static_cast<double>(k + 1) + rng.normal(0.0, noise);
  return Tensor{r * std::cos(t), r * std::sin(t)};
}

/// Random one-hidden-layer teacher whose biases are shifted until its
/// labels are roughly balanced over the unit cube.
MLPClassifier make_teacher(std::size_t d, std::size_t k, Rng& rng) {
  const std::size_t hidden = 16;
  auto random_matrix = [&](std::size_t rows, std::size_t cols, double sd) {
    std::vector<double> v(rows * cols);
    for (auto& e : v) e = rng.normal(0.0, sd);
    return Tensor(Shape{rows, cols}, std::move(v));
  };
  Tensor w0 = random_matrix(hidden, d, 3.0 / std::sqrt(static_cast<double>(d)));
  Tensor b0 = Tensor::zeros(Shape{hidden});
  for (std::size_t r = 0; r < hidden; ++r) {
    double centre = 0.0;
    for (std::size_t c = 0; c < d; ++c) centre += w0.at(r, c) * 0.5;
    b0[r] = -centre + rng.normal(0.0, 0.5);
  }
  Tensor w1 = random_matrix(k, hidden, 1.0);
  Tensor b1 = Tensor::zeros(Shape{k});

  std::vector<Tensor> pool(2048, Tensor::zeros(Shape{d}));
  for (auto& x : pool)
    for (auto& v : x.values()) v = rng.uniform(0.0, 1.0);
  for (int round = 0; round < 50; ++round) {
    MLPClassifier t({Layer{w0, b0}, Layer{w1, b1}});
    std::vector<double> freq(k, 0.0);
    for (const auto& x : pool) freq[argmax(t.logits(x).values())] += 1.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double share = std::max(freq[c], 1.0) / static_cast<double>(pool.size());
      b1[c] -= 0.5 * std::log(share * static_cast<double>(k));
    }
  }
  return MLPClassifier({Layer{w0, b0}, Layer{w1, b1}});
}

Dataset empty_dataset(const DatasetSpec& spec) {
  Dataset d;
  d.input_dim = spec.input_dim;
  d.num_classes = spec.num_classes;
  return d;
}

}  // namespace

SplitDataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Rng rng = Rng::derive(spec.seed, 0x64617461ULL);
  const std::size_t n = spec.samples, k = spec.num_classes, d = spec.input_dim;

  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
  xs.reserve(n);
  ys.reserve(n);

  if (spec.generator == "teacher") {
    const MLPClassifier teacher = make_teacher(d, k, rng);
    std::vector<std::size_t> quota(k, n / k);
    for (std::size_t c = 0; c < n % k; ++c) ++quota[c];
    std::vector<std::vector<Tensor>> by_class(k);
    std::size_t filled = 0;
    for (std::size_t attempt = 0; filled < n; ++attempt) {
      if (attempt > 2000 * n) {
        throw ConfigError("teacher generator could not balance classes; try another seed");
      }
      Tensor x = Tensor::zeros(Shape{d});
      for (auto& v : x.values()) v = rng.uniform(0.0, 1.0);
      const std::size_t c = argmax(teacher.logits(x).values());
      if (by_class[c].size() < quota[c]) {
        by_class[c].push_back(std::move(x));
        ++filled;
      }
    }
    // Interleave classes so sample i has label i mod K, like the other generators.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % k;
      xs.push_back(std::move(by_class[c][i / k]));
      ys.push_back(c);
    }
  } else {
    std::vector<Tensor> centers;
    if (spec.generator == "blobs") {
      // Evenly spaced on the unit circle in the first two axes.
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t c = 0; c < k; ++c) {
        Tensor centre = Tensor::zeros(Shape{d});
        const double angle = phase + 2.0 * std::numbers::pi * static_cast<double>(c) /
                                         static_cast<double>(k);
        centre[0] = std::cos(angle);
        if (d > 1) centre[1] = std::sin(angle);
        for (std::size_t j = 2; j < d; ++j) centre[j] = rng.normal(0.0, 0.5);
        centers.push_back(std::move(centre));
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % k;
      if (spec.generator == "blobs") {
        xs.push_back(blob_point(centers, c, spec.noise, rng));
      } else if (spec.generator == "moons") {
        xs.push_back(moon_point(c, spec.noise, rng));
      } else {
        xs.push_back(ring_point(c, spec.noise, rng));
      }
      ys.push_back(c);
    }
    scale_into_unit_box(xs);
  }

  // Stratified split: the first round(test_fraction * n_c) shuffled members of
  // each class go to the test set.
  SplitDataset out{empty_dataset(spec), empty_dataset(spec)};
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) members[ys[i]].push_back(i);
  std::vector<bool> is_test(n, false);
  for (auto& m : members) {
    std::shuffle(m.begin(), m.end(), rng.engine());
    const auto n_test = static_cast<std::size_t>(
        std::llround(spec.test_fraction * static_cast<double>(m.size())));
    for (std::size_t j = 0; j < n_test; ++j) is_test[m[j]] = true;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& target = is_test[i] ? out.test : out.train;
    target.inputs.push_back(xs[i]);
    target.labels.push_back(ys[i]);
  }
  return out;
}

void save_dataset_csv(const SplitDataset& data, const std::filesystem::path& path) {
  std::vector<std::string> header{"split", "label"};
  for (std::size_t j = 0; j < data.train.input_dim; ++j) header.push_back("x" + std::to_string(j));
  CsvWriter csv(path, header);
  auto emit = [&](const Dataset& ds, std::string_view split) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      csv << split << ds.labels[i];
      for (double v : ds.inputs[i].values()) csv << v;
      csv.end_row();
    }
  };
  emit(data.train, "train");
  emit(data.test, "test");
  csv.close();
}

SplitDataset load_dataset_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  if (table.header.size() < 3 || table.header[0] != "split" || table.header[1] != "label") {
    throw FormatError("'" + path.string() + "' is not a dataset CSV (split,label,x0,...)");
  }
  SplitDataset out;
  const std::size_t d = table.header.size() - 2;
  std::size_t max_label = 0;
  for (const auto& row : table.rows) {
    Dataset* target = row[0] == "train" ? &out.train : row[0] == "test" ? &out.test : nullptr;
    if (target == nullptr) throw FormatError("unknown split '" + row[0] + "'");
    const auto label = static_cast<std::size_t>(parse_double(row[1]));
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) x[j] = parse_double(row[j + 2]);
    target->inputs.emplace_back(std::move(x));
    target->labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  for (Dataset* ds : {&out.train, &out.test}) {
    ds->input_dim = d;
    ds->num_classes = std::max<std::size_t>(2, max_label + 1);
  }
  return out;
}

std::string_view to_string(Regularizer r) {
  switch (r) {
    case Regularizer::none: return "none";
    case Regularizer::grad_align: return "grad_align";
    case Regularizer::logit_diversity: return "logit_diversity";
  }
  return "?";
}

Regularizer parse_regularizer(std::string_view name) {
  if (name == "none") return Regularizer::none;
  if (name == "grad_align") return Regularizer::grad_align;
  if (name == "logit_diversity") return Regularizer::logit_diversity;
  throw ConfigError("unknown regularizer '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (num_models == 0 || epochs == 0 || batch_size == 0) {
    throw ConfigError("num_models, epochs and batch_size must be positive");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(adv_epsilon >= 0.0)) throw ConfigError("adv_epsilon must be non-negative");
  if (!(vote_tau > 0.0)) throw ConfigError("vote_tau must be positive");
  for (auto h : hidden)
    if (h == 0) throw ConfigError("hidden layer sizes must be positive");
}

namespace {

struct SubModelNodes {
  std::vector<Var> pre;  // pre-activations of hidden layers
  Var logits;
};

SubModelNodes forward_recorded(Var x, std::span<const Var> params) {
  SubModelNodes out;
  const std::size_t depth = params.size() / 2;
  Var h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    Var a = affine(params[2 * l], h, params[2 * l + 1]);
    if (l + 1 < depth) {
      out.pre.push_back(a);
      h = relu(a);
    } else {
      h = a;
    }
  }
  out.logits = h;
  return out;
}

/// d SCE(z, y) / dx written out as graph operations, so that it can itself
/// be differentiated with respect to the weights.
Var input_gradient(Graph& g, const SubModelNodes& nodes, std::span<const Var> params,
                   std::size_t y) {
  const std::size_t k = nodes.logits.size();
  Tensor onehot = Tensor::zeros(Shape{k});
  onehot[y] = 1.0;
  Var delta = softmax_t(nodes.logits, 1.0) - g.constant(onehot);
  const std::size_t depth = params.size() / 2;
  for (std::size_t l = depth; l-- > 0;) {
    Var back = matvec_t(params[2 * l], delta);
    if (l == 0) return back;
    const Tensor& pre = nodes.pre[l - 1].value();
    Tensor mask = pre;
    for (auto& v : mask.values()) v = v > 0.0 ? 1.0 : 0.0;
    delta = back * g.constant(mask);
  }
  return delta;
}

Var smoothed_norm(Var v) { return add_const(sqrt(add_const(dot(v, v), 1e-24)), 1e-12); }

Var mean_pairwise_cosine(std::span<const Var> vs) {
  std::vector<Var> inv_norms;
  for (Var v : vs) inv_norms.push_back(reciprocal(smoothed_norm(v)));
  std::optional<Var> acc;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < vs.size(); ++a) {
    for (std::size_t b = a + 1; b < vs.size(); ++b) {
      Var c = dot(vs[a], vs[b]) * inv_norms[a] * inv_norms[b];
      acc = acc ? *acc + c : c;
      ++pairs;
    }
  }
  return scale(*acc, 1.0 / static_cast<double>(pairs));
}

/// Cross-entropy of the ensemble output: SCE of the mean logits for logits
/// forming, NLL of the mean probability otherwise.
Var ensemble_ce(std::span<const Var> logits, std::size_t y, FormingMode mode) {
  const double inv = 1.0 / static_cast<double>(logits.size());
  std::optional<Var> acc;
  if (mode == FormingMode::logits) {
    for (Var z : logits) acc = acc ? *acc + z : z;
    return sce(scale(*acc, inv), y);
  }
  for (Var z : logits) {
    Var p = softmax_t(z, 1.0);
    acc = acc ? *acc + p : p;
  }
  return nll_avg_prob(scale(*acc, inv), y);
}

std::vector<std::size_t> all_but(std::size_t k, std::size_t y) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i)
    if (i != y) out.push_back(i);
  return out;
}

Ensemble assemble(const std::vector<std::vector<Tensor>>& params, const TrainConfig& cfg) {
  std::vector<MLPClassifier> subs;
  for (const auto& p : params) {
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < p.size(); l += 2) layers.push_back(Layer{p[l], p[l + 1]});
    subs.emplace_back(std::move(layers));
  }
  return Ensemble(std::move(subs), cfg.mode, cfg.vote_tau);
}

/// Sign-gradient PGD on the training loss, used for adversarial training.
Tensor adversarial_input(const Ensemble& ens, const Tensor& x, std::size_t y, double eps,
                         std::size_t steps, Rng& rng) {
  Tensor cur = random_init(x, eps, rng);
  const double step = 2.5 * eps / static_cast<double>(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const Tensor gr = grad(
        [&](Graph& g, Var xv) {
          const auto subs = ens.forward_subs(g, xv);
          return ensemble_ce(subs, y, ens.mode());
        },
        cur);
    for (std::size_t k = 0; k < cur.size(); ++k)
      cur[k] += step * (gr[k] > 0.0 ? 1.0 : (gr[k] < 0.0 ? -1.0 : 0.0));
    cur = project(cur, x, eps);
  }
  return cur;
}

}  // namespace

TrainResult train_ensemble(const TrainConfig& cfg, const Dataset& train) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("training set is empty");
  const std::size_t d = train.input_dim, k = train.num_classes, m = cfg.num_models;

  // params[m] = [W0, b0, W1, b1, ...], He-initialised.
  std::vector<std::vector<Tensor>> params(m);
  for (std::size_t s = 0; s < m; ++s) {
    Rng init = Rng::derive(cfg.seed, 0x696e6974ULL + s);
    std::size_t in = d;
    std::vector<std::size_t> widths = cfg.hidden;
    widths.push_back(k);
    for (std::size_t out : widths) {
      std::vector<double> w(out * in);
      const double sd = std::sqrt(2.0 / static_cast<double>(in));
      for (auto& v : w) v = init.normal(0.0, sd);
      params[s].emplace_back(Shape{out, in}, std::move(w));
      params[s].push_back(Tensor::zeros(Shape{out}));
      in = out;
    }
  }

  Rng order_rng = Rng::derive(cfg.seed, 0x6f72646572ULL);
  Rng adv_rng = Rng::derive(cfg.seed, 0x616476ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const bool regularized = cfg.regularizer != Regularizer::none && cfg.lambda != 0.0;
  const bool adversarial = cfg.adv_steps > 0 && cfg.adv_epsilon > 0.0;

  std::vector<TrainLogRow> log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    double loss_total = 0.0, reg_total = 0.0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);

      std::optional<Ensemble> current;
      if (adversarial) current.emplace(assemble(params, cfg));

      Graph g;
      std::vector<std::vector<Var>> pv(m);
      for (std::size_t s = 0; s < m; ++s)
        for (const auto& p : params[s]) pv[s].push_back(g.variable(p));

      std::optional<Var> objective;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        const std::size_t y = train.labels[idx];
        Tensor input = train.inputs[idx];
        if (adversarial) {
          input = adversarial_input(*current, input, y, cfg.adv_epsilon, cfg.adv_steps, adv_rng);
        }
        Var x = g.constant(input);
        std::vector<SubModelNodes> nodes;
        std::vector<Var> logits;
        for (std::size_t s = 0; s < m; ++s) {
          nodes.push_back(forward_recorded(x, pv[s]));
          logits.push_back(nodes.back().logits);
        }
        Var sample = ensemble_ce(logits, y, cfg.mode);
        loss_total += sample.value().item();
        if (regularized && m > 1) {
          std::vector<Var> feats;
          for (std::size_t s = 0; s < m; ++s) {
            feats.push_back(cfg.regularizer == Regularizer::grad_align
                                ? input_gradient(g, nodes[s], pv[s], y)
                                : gather(logits[s], all_but(k, y)));
          }
          Var penalty = mean_pairwise_cosine(feats);
          reg_total += penalty.value().item();
          sample = sample + scale(penalty, cfg.lambda);
        }
        Var term = scale(sample, inv_batch);
        objective = objective ? *objective + term : term;
      }

      if (!std::isfinite(objective->value().item())) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              " (non-finite loss)");
      }
      const Gradients grads = g.backward(*objective);
      for (std::size_t s = 0; s < m; ++s) {
        for (std::size_t p = 0; p < params[s].size(); ++p) {
          const Tensor gp = grads[pv[s][p]];
          Tensor& target = params[s][p];
          for (std::size_t i = 0; i < target.size(); ++i) target[i] -= cfg.learning_rate * gp[i];
        }
      }
    }

    const Ensemble snapshot = assemble(params, cfg);
    const double n = static_cast<double>(train.size());
    log.push_back(TrainLogRow{epoch, loss_total / n, accuracy(snapshot, train), reg_total / n});
  }
  return TrainResult{assemble(params, cfg), std::move(log)};
}

void save_train_log_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  CsvWriter csv(path, {"epoch", "loss", "accuracy", "regularizer"});
  for (const auto& row : log) {
    csv << row.epoch << row.loss << row.accuracy << row.regularizer;
    csv.end_row();
  }
  csv.close();
}

std::optional<CosineStats> grad_cosine_stats(const Ensemble& ens, const Dataset& data) {
  if (ens.size() < 2 || data.size() == 0) return std::nullopt;
  CosineStats stats;
  stats.min = 1.0;
  stats.max = -1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<Tensor> grads;
    for (const auto& sub : ens.sub_models()) {
      grads.push_back(grad(
          [&](Graph& g, Var xv) { return sce(sub.logits(g, xv), data.labels[i]); },
          data.inputs[i]));
    }
    for (std::size_t a = 0; a < grads.size(); ++a) {
      for (std::size_t b = a + 1; b < grads.size(); ++b) {
        double num = 0.0;
        for (std::size_t j = 0; j < grads[a].size(); ++j) num += grads[a][j] * grads[b][j];
        const double c = std::clamp(num / ((l2_norm(grads[a].values()) + 1e-12) *
                                           (l2_norm(grads[b].values()) + 1e-12)),
                                    -1.0, 1.0);
        total += c;
        stats.min = std::min(stats.min, c);
        stats.max = std::max(stats.max, c);
        ++stats.pairs;
      }
    }
  }
  stats.mean = total / static_cast<double>(stats.pairs);
  return stats;
}

double accuracy(const Ensemble& ens, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    correct += ens.hard_decision(data.inputs[i], data.labels[i]) == data.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace mora
