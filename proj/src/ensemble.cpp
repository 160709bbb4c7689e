#include "mora/ensemble.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mora/errors.hpp"

namespace mora {

using nlohmann::json;

std::string_view to_string(FormingMode mode) {
  switch (mode) {
    case FormingMode::softmax: return "softmax";
    case FormingMode::voting: return "voting";
    case FormingMode::logits: return "logits";
  }
  return "?";
}

FormingMode parse_forming_mode(std::string_view name) {
  if (name == "softmax") return FormingMode::softmax;
  if (name == "voting") return FormingMode::voting;
  if (name == "logits") return FormingMode::logits;
  throw ConfigError("unknown ensemble-forming mode '" + std::string(name) + "'");
}

MLPClassifier::MLPClassifier(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ContractViolation("MLPClassifier needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (layer.weights.rank() != 2 || layer.bias.size() != layer.out_dim()) {
      throw ContractViolation("layer " + std::to_string(l) +
                              ": bias length does not match weight rows");
    }
    if (l > 0 && layer.in_dim() != layers_[l - 1].out_dim()) {
      throw ContractViolation("layer " + std::to_string(l) + " expects " +
                              std::to_string(layer.in_dim()) + " inputs but layer " +
                              std::to_string(l - 1) + " emits " +
                              std::to_string(layers_[l - 1].out_dim()));
    }
  }
}

Tensor MLPClassifier::logits(const Tensor& x) const {
  std::vector<double> h(x.data());
  std::vector<double> next;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const std::size_t rows = layer.out_dim(), cols = layer.in_dim();
    next.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = layer.bias[r];
      for (std::size_t c = 0; c < cols; ++c) acc += layer.weights.at(r, c) * h[c];
      next[r] = (l + 1 < layers_.size() && acc < 0.0) ? 0.0 : acc;
    }
    h.swap(next);
  }
  return Tensor(std::move(h));
}

Var MLPClassifier::logits(Graph& g, Var x) const {
  Var h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = affine(g.constant(layers_[l].weights), h, g.constant(layers_[l].bias));
    if (l + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

Var MLPClassifier::logits(Var x, std::span<const Var> params) {
  const std::size_t depth = params.size() / 2;
  Var h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    h = affine(params[2 * l], h, params[2 * l + 1]);
    if (l + 1 < depth) h = relu(h);
  }
  return h;
}

Ensemble::Ensemble(std::vector<MLPClassifier> sub_models, FormingMode mode,
                   double vote_tau)
    : subs_(std::move(sub_models)), mode_(mode), vote_tau_(vote_tau) {
  if (subs_.empty()) throw ContractViolation("ensemble needs at least one sub-model");
  if (!(vote_tau_ > 0.0)) throw ParameterError("vote_tau must be positive");
  for (const auto& m : subs_) {
    if (m.input_dim() != input_dim() || m.num_classes() != num_classes()) {
      throw ContractViolation("sub-models disagree on input dimension or class count");
    }
  }
  if (num_classes() < 2) throw ContractViolation("ensemble needs at least two classes");
}

Ensemble Ensemble::with_mode(FormingMode mode) const {
  return Ensemble(subs_, mode, vote_tau_);
}

void Ensemble::check_input(const Tensor& x) const {
  if (x.size() != input_dim()) {
    throw ContractViolation("input has " + std::to_string(x.size()) +
                            " features, ensemble expects " + std::to_string(input_dim()));
  }
}

std::vector<Tensor> Ensemble::forward_subs(const Tensor& x) const {
  check_input(x);
  std::vector<Tensor> out;
  out.reserve(subs_.size());
  for (const auto& m : subs_) out.push_back(m.logits(x));
  return out;
}

std::vector<Var> Ensemble::forward_subs(Graph& g, Var x) const {
  check_input(x.value());
  std::vector<Var> out;
  out.reserve(subs_.size());
  for (const auto& m : subs_) out.push_back(m.logits(g, x));
  return out;
}

Tensor Ensemble::form(std::span<const Tensor> subs) const {
  Tensor out = Tensor::zeros(Shape{num_classes()});
  for (const auto& z : subs) {
    const Tensor t = mode_ == FormingMode::logits  ? z
                     : mode_ == FormingMode::softmax ? softmax_t(z, 1.0)
                                                     : softmax_t(z, vote_tau_);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += t[k];
  }
  const double inv = 1.0 / static_cast<double>(subs.size());
  for (auto& v : out.values()) v *= inv;
  return out;
}

Var Ensemble::form(Graph& g, std::span<const Var> subs) const {
  (void)g;
  std::optional<Var> acc;
  for (Var z : subs) {
    Var t = mode_ == FormingMode::logits  ? z
            : mode_ == FormingMode::softmax ? softmax_t(z, 1.0)
                                            : softmax_t(z, vote_tau_);
    acc = acc ? *acc + t : t;
  }
  return scale(*acc, 1.0 / static_cast<double>(subs.size()));
}

Tensor Ensemble::forward_ensemble(const Tensor& x) const {
  const auto subs = forward_subs(x);
  return form(subs);
}

Var Ensemble::forward_ensemble(Graph& g, Var x) const {
  const auto subs = forward_subs(g, x);
  return form(g, subs);
}

std::size_t tie_broken_argmax(std::span<const double> scores,
                              std::optional<std::size_t> true_label) {
  const std::size_t best = argmax(scores);
  if (true_label && *true_label < scores.size() && scores[*true_label] == scores[best]) {
    return *true_label;
  }
  return best;
}

std::size_t Ensemble::decide(std::span<const Tensor> subs,
                             std::optional<std::size_t> true_label) const {
  if (mode_ != FormingMode::voting) {
    const Tensor formed = form(subs);
    return tie_broken_argmax(formed.values(), true_label);
  }
  std::vector<double> votes(num_classes(), 0.0);
  for (const auto& z : subs) votes[tie_broken_argmax(z.values(), true_label)] += 1.0;
  return tie_broken_argmax(votes, true_label);
}

std::size_t Ensemble::hard_decision(const Tensor& x,
                                    std::optional<std::size_t> true_label) const {
  const auto subs = forward_subs(x);
  return decide(subs, true_label);
}

namespace {

json tensor_rows(const Tensor& w) {
  json rows = json::array();
  for (std::size_t r = 0; r < w.shape()[0]; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < w.shape()[1]; ++c) row.push_back(w.at(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

template <class T>
T field(const json& j, const char* name, const std::string& where) {
  if (!j.contains(name)) throw SchemaError(where + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(where + ": field '" + name + "' has the wrong type");
  }
}

}  // namespace

std::string ensemble_to_json(const Ensemble& ens) {
  json models = json::array();
  for (const auto& m : ens.sub_models()) {
    json layers = json::array();
    for (const auto& layer : m.layers()) {
      layers.push_back({{"weights", tensor_rows(layer.weights)},
                        {"bias", layer.bias.data()}});
    }
    models.push_back({{"layers", std::move(layers)}});
  }
  json doc = {{"format", kEnsembleFormat},
              {"schema_version", kEnsembleSchemaVersion},
              {"input_dim", ens.input_dim()},
              {"num_classes", ens.num_classes()},
              {"num_models", ens.size()},
              {"mode", to_string(ens.mode())},
              {"vote_tau", ens.vote_tau()},
              {"models", std::move(models)}};
  return doc.dump(1);
}

Ensemble ensemble_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("model file is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format") || !doc["format"].is_string() ||
      doc["format"].get<std::string>() != kEnsembleFormat) {
    throw FormatError("model file lacks the '" + std::string(kEnsembleFormat) +
                      "' format marker");
  }
  const auto version = field<int>(doc, "schema_version", "model header");
  if (version != kEnsembleSchemaVersion) {
    throw SchemaError("model schema_version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kEnsembleSchemaVersion) + ")");
  }
  const auto d = field<std::size_t>(doc, "input_dim", "model header");
  const auto k = field<std::size_t>(doc, "num_classes", "model header");
  const auto m = field<std::size_t>(doc, "num_models", "model header");
  const auto mode_name = field<std::string>(doc, "mode", "model header");
  const auto vote_tau = field<double>(doc, "vote_tau", "model header");
  FormingMode mode;
  try {
    mode = parse_forming_mode(mode_name);
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("model header: ") + e.what());
  }
  const json& models = doc.contains("models") ? doc["models"] : json();
  if (!models.is_array() || models.size() != m) {
    throw SchemaError("model header declares num_models=" + std::to_string(m) +
                      " but the body has " +
                      std::to_string(models.is_array() ? models.size() : 0));
  }

  std::vector<MLPClassifier> subs;
  for (std::size_t i = 0; i < m; ++i) {
    const std::string where = "models[" + std::to_string(i) + "]";
    const json& layers_json = models[i].contains("layers") ? models[i]["layers"] : json();
    if (!layers_json.is_array() || layers_json.empty()) {
      throw SchemaError(where + ": missing layer list");
    }
    std::vector<Layer> layers;
    for (std::size_t l = 0; l < layers_json.size(); ++l) {
      const std::string lw = where + ".layers[" + std::to_string(l) + "]";
      const auto rows = field<std::vector<std::vector<double>>>(layers_json[l], "weights", lw);
      const auto bias = field<std::vector<double>>(layers_json[l], "bias", lw);
      if (rows.empty()) throw SchemaError(lw + ": empty weight matrix");
      const std::size_t cols = rows.front().size();
      std::vector<double> flat;
      flat.reserve(rows.size() * cols);
      for (const auto& row : rows) {
        if (row.size() != cols) throw SchemaError(lw + ": ragged weight matrix");
        flat.insert(flat.end(), row.begin(), row.end());
      }
      if (bias.size() != rows.size()) throw SchemaError(lw + ": bias length mismatch");
      layers.push_back(Layer{Tensor(Shape{rows.size(), cols}, std::move(flat)),
                             Tensor(bias)});
    }
    try {
      subs.emplace_back(std::move(layers));
    } catch (const ContractViolation& e) {
      throw SchemaError(where + ": " + e.what());
    }
    if (subs.back().input_dim() != d) {
      throw SchemaError(where + " takes " + std::to_string(subs.back().input_dim()) +
                        " inputs but the header declares input_dim=" + std::to_string(d));
    }
    if (subs.back().num_classes() != k) {
      throw SchemaError(where + " emits " + std::to_string(subs.back().num_classes()) +
                        " classes but the header declares num_classes=" +
                        std::to_string(k));
    }
  }
  try {
    return Ensemble(std::move(subs), mode, vote_tau);
  } catch (const ContractViolation& e) {
    throw SchemaError(std::string("model file: ") + e.what());
  }
}

void save_ensemble(const Ensemble& ens, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << ensemble_to_json(ens) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Ensemble load_ensemble(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return ensemble_from_json(buf.str());
}

}  // namespace mora
