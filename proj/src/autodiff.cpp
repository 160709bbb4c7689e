#include "mora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mora/errors.hpp"

namespace mora {

namespace {

Graph& same_graph(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw ContractViolation("operands belong to different graphs");
  }
  return *a.graph;
}

void require_same_size(Var a, Var b, const char* op) {
  if (a.size() != b.size()) {
    throw ContractViolation(std::string(op) + ": size mismatch (" +
                            std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  }
}

void require_single(Var a, const char* op) {
  if (a.size() != 1) {
    throw ContractViolation(std::string(op) + ": expected a single element, got " +
                            std::to_string(a.size()));
  }
}

// Shape of the result of a binary elementwise op; prefers the first operand.
const Shape& result_shape(Var a) { return a.value().shape(); }

}  // namespace

const Tensor& Var::value() const { return graph->value(*this); }

Gradients::Gradients(std::vector<Tensor> adjoints, const Graph& graph)
    : adjoints_(std::move(adjoints)), graph_(&graph) {}

Tensor Gradients::operator[](Var v) const {
  const Tensor& adj = adjoints_.at(v.id);
  if (adj.empty() && graph_->value(v).size() != 0) {
    return Tensor::zeros(graph_->value(v).shape());
  }
  return adj;
}

Var Graph::push(Op op, Tensor value, std::uint32_t a, std::uint32_t b,
                double aux, std::vector<std::size_t> index) {
  nodes_.push_back(Node{op, a, b, aux, std::move(value), std::move(index)});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
  // A constant is a detached leaf: it never receives an adjoint.
  return push(Op::Detach, std::move(value), 0, 0, 1.0);
}

Var Graph::variable(Tensor value) { return push(Op::Leaf, std::move(value), 0); }

void Graph::accumulate(std::vector<Tensor>& adj, std::uint32_t id,
                       const Tensor& contribution) const {
  const Node& n = nodes_[id];
  if (n.op == Op::Detach) return;
  Tensor& slot = adj[id];
  if (slot.empty()) {
    slot = Tensor(n.value.shape(), contribution.data());
    return;
  }
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += contribution[i];
}

Gradients Graph::backward(Var output) const {
  if (output.graph != this) throw ContractViolation("backward: foreign output");
  if (value(output).size() != 1) {
    throw ContractViolation("backward: output is not a scalar (" +
                            std::to_string(value(output).size()) + " elements)");
  }
  std::vector<Tensor> adj(nodes_.size());
  accumulate(adj, output.id, Tensor::filled(value(output).shape(), 1.0));

  for (std::int64_t k = output.id; k >= 0; --k) {
    const auto id = static_cast<std::uint32_t>(k);
    const Node& n = nodes_[id];
    if (adj[id].empty()) continue;
    const Tensor& g = adj[id];
    const Tensor& av = nodes_[n.a].value;

    switch (n.op) {
      case Op::Leaf:
      case Op::Detach:
        break;
      case Op::MatVec: {
        const Tensor& w = av;
        const Tensor& x = nodes_[n.b].value;
        const std::size_t rows = w.shape()[0], cols = w.shape()[1];
        if (nodes_[n.a].op != Op::Detach) {
          Tensor gw = Tensor::zeros(w.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gw.at(r, c) = g[r] * x[c];
          accumulate(adj, n.a, gw);
        }
        if (nodes_[n.b].op != Op::Detach) {
          Tensor gx = Tensor::zeros(x.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gx[c] += w.at(r, c) * g[r];
          accumulate(adj, n.b, gx);
        }
        break;
      }
      case Op::MatVecT: {
        // y = W^T v; dW[r,c] = v[r] g[c], dv = W g.
        const Tensor& w = av;
        const Tensor& v = nodes_[n.b].value;
        const std::size_t rows = w.shape()[0], cols = w.shape()[1];
        if (nodes_[n.a].op != Op::Detach) {
          Tensor gw = Tensor::zeros(w.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gw.at(r, c) = v[r] * g[c];
          accumulate(adj, n.a, gw);
        }
        if (nodes_[n.b].op != Op::Detach) {
          Tensor gv = Tensor::zeros(v.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gv[r] += w.at(r, c) * g[c];
          accumulate(adj, n.b, gv);
        }
        break;
      }
      case Op::Add:
        accumulate(adj, n.a, g);
        accumulate(adj, n.b, g);
        break;
      case Op::Sub: {
        accumulate(adj, n.a, g);
        Tensor neg = g;
        for (auto& v : neg.values()) v = -v;
        accumulate(adj, n.b, neg);
        break;
      }
      case Op::Mul: {
        const Tensor& bv = nodes_[n.b].value;
        Tensor ga = g, gb = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] *= bv[i];
          gb[i] *= av[i];
        }
        accumulate(adj, n.a, ga);
        accumulate(adj, n.b, gb);
        break;
      }
      case Op::Scale: {
        Tensor ga = g;
        for (auto& v : ga.values()) v *= n.aux;
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::MulScalar: {
        const double s = nodes_[n.b].value[0];
        Tensor ga = g;
        double gs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] *= s;
          gs += g[i] * av[i];
        }
        accumulate(adj, n.a, ga);
        accumulate(adj, n.b, Tensor(nodes_[n.b].value.shape(), {gs}));
        break;
      }
      case Op::AddConst:
        accumulate(adj, n.a, g);
        break;
      case Op::Relu: {
        Tensor ga = g;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(av[i] > 0.0)) ga[i] = 0.0;
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::SoftmaxT: {
        const Tensor& s = n.value;
        double inner = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) inner += g[i] * s[i];
        Tensor ga = g;
        for (std::size_t i = 0; i < s.size(); ++i) ga[i] = s[i] * (g[i] - inner) / n.aux;
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::LogSumExp: {
        Tensor s = softmax_t(av, 1.0);
        for (auto& v : s.values()) v *= g[0];
        accumulate(adj, n.a, s);
        break;
      }
      case Op::LogFloor: {
        Tensor ga = g;
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] = av[i] > n.aux ? g[i] / av[i] : 0.0;
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::Index: {
        Tensor ga = Tensor::zeros(av.shape());
        ga[n.index[0]] = g[0];
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::Gather: {
        Tensor ga = Tensor::zeros(av.shape());
        for (std::size_t i = 0; i < n.index.size(); ++i) ga[n.index[i]] += g[i];
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::Sum:
        accumulate(adj, n.a, Tensor::filled(av.shape(), g[0]));
        break;
      case Op::Dot: {
        const Tensor& bv = nodes_[n.b].value;
        Tensor ga = bv, gb = av;
        for (auto& v : ga.values()) v *= g[0];
        for (auto& v : gb.values()) v *= g[0];
        accumulate(adj, n.a, ga);
        accumulate(adj, n.b, gb);
        break;
      }
      case Op::Sqrt: {
        Tensor ga = g;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * 0.5 / n.value[i];
        accumulate(adj, n.a, ga);
        break;
      }
      case Op::Reciprocal: {
        Tensor ga = g;
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] = -g[i] * n.value[i] * n.value[i];
        accumulate(adj, n.a, ga);
        break;
      }
    }
  }
  return Gradients(std::move(adj), *this);
}

Var matvec(Var w, Var x) {
  Graph& g = same_graph(w, x);
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  if (wv.rank() != 2 || wv.shape()[1] != xv.size()) {
    throw ContractViolation("matvec: weight shape does not match input of size " +
                            std::to_string(xv.size()));
  }
  const std::size_t rows = wv.shape()[0], cols = wv.shape()[1];
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wv.at(r, c) * xv[c];
    out[r] = acc;
  }
  return g.push(Graph::Op::MatVec, Tensor(std::move(out)), w.id, x.id);
}

Var matvec_t(Var w, Var v) {
  Graph& g = same_graph(w, v);
  const Tensor& wv = w.value();
  const Tensor& vv = v.value();
  if (wv.rank() != 2 || wv.shape()[0] != vv.size()) {
    throw ContractViolation("matvec_t: weight shape does not match vector of size " +
                            std::to_string(vv.size()));
  }
  const std::size_t rows = wv.shape()[0], cols = wv.shape()[1];
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += wv.at(r, c) * vv[r];
  return g.push(Graph::Op::MatVecT, Tensor(std::move(out)), w.id, v.id);
}

Var affine(Var w, Var x, Var b) { return matvec(w, x) + b; }

Var operator+(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_same_size(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return g.push(Graph::Op::Add, std::move(out), a.id, b.id);
}

Var operator-(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_same_size(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return g.push(Graph::Op::Sub, std::move(out), a.id, b.id);
}

Var operator*(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_same_size(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return g.push(Graph::Op::Mul, std::move(out), a.id, b.id);
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  return a.graph->push(Graph::Op::Scale, std::move(out), a.id, 0, c);
}

Var mul_scalar(Var a, Var s) {
  Graph& g = same_graph(a, s);
  require_single(s, "mul_scalar");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.values()) v *= sv;
  return g.push(Graph::Op::MulScalar, std::move(out), a.id, s.id);
}

Var add_const(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += c;
  return a.graph->push(Graph::Op::AddConst, std::move(out), a.id);
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return a.graph->push(Graph::Op::Relu, std::move(out), a.id);
}

Var softmax_t(Var z, double tau) {
  return z.graph->push(Graph::Op::SoftmaxT, softmax_t(z.value(), tau), z.id, 0, tau);
}

Var logsumexp(Var z) {
  return z.graph->push(Graph::Op::LogSumExp,
                       Tensor::scalar(logsumexp(z.value().values())), z.id);
}

Var log_floor(Var a, double floor) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::log(std::max(v, floor));
  return a.graph->push(Graph::Op::LogFloor, std::move(out), a.id, 0, floor);
}

Var index(Var a, std::size_t i) {
  if (i >= a.size()) {
    throw ContractViolation("index " + std::to_string(i) + " out of range for size " +
                            std::to_string(a.size()));
  }
  return a.graph->push(Graph::Op::Index, Tensor::scalar(a.value()[i]), a.id, 0, 0.0,
                       {i});
}

Var gather(Var a, std::vector<std::size_t> indices) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= a.size()) throw ContractViolation("gather: index out of range");
    out.push_back(a.value()[i]);
  }
  return a.graph->push(Graph::Op::Gather, Tensor(std::move(out)), a.id, 0, 0.0,
                       std::move(indices));
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.graph->push(Graph::Op::Sum, Tensor::scalar(s), a.id);
}

Var dot(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.value()[i] * b.value()[i];
  return g.push(Graph::Op::Dot, Tensor::scalar(s), a.id, b.id);
}

Var sqrt(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::sqrt(v);
  return a.graph->push(Graph::Op::Sqrt, std::move(out), a.id);
}

Var reciprocal(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = 1.0 / v;
  return a.graph->push(Graph::Op::Reciprocal, std::move(out), a.id);
}

Var detach(Var a) { return a.graph->push(Graph::Op::Detach, a.value(), a.id); }

std::pair<double, Tensor> value_and_grad(const ScalarFn& f, const Tensor& x) {
  Graph g;
  Var xv = g.variable(x);
  Var out = f(g, xv);
  if (out.size() != 1) {
    throw ContractViolation("grad: objective is not scalar (" +
                            std::to_string(out.size()) + " elements)");
  }
  const double value = out.value()[0];
  if (!std::isfinite(value)) throw DivergenceError("grad: objective is not finite");
  Tensor dx = g.backward(out)[xv];
  return {value, std::move(dx)};
}

Tensor grad(const ScalarFn& f, const Tensor& x) { return value_and_grad(f, x).second; }

Tensor softmax_t(const Tensor& z, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax_t: temperature must be positive");
  if (z.empty()) throw ContractViolation("softmax_t: empty input");
  const double mx = *std::max_element(z.values().begin(), z.values().end());
  Tensor out = z;
  double total = 0.0;
  for (auto& v : out.values()) {
    v = std::exp((v - mx) / tau);
    total += v;
  }
  for (auto& v : out.values()) v /= total;
  return out;
}

double logsumexp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  return mx + std::log(total);
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   double h) {
  if (!(h > 0.0)) throw ParameterError("finite_diff: step must be positive");
  Tensor out = Tensor::zeros(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace mora
