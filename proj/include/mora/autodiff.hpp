#pragma once

// Reverse-mode differentiation over a fixed operator vocabulary: the affine,
// ReLU, softmax, log-sum-exp, gather and reduction pieces that MLP ensembles
// and the attack objectives are built from.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "mora/tensor.hpp"

namespace mora {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

/// Adjoints produced by Graph::backward.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> adjoints, const Graph& graph);
  /// d(output)/d(v); zeros when v does not influence the output.
  Tensor operator[](Var v) const;

 private:
  std::vector<Tensor> adjoints_;
  const Graph* graph_;
};

/// Records a computation as it is evaluated. One graph per evaluation; a
/// graph is not shared across threads.
class Graph {
 public:
  Graph() { nodes_.reserve(64); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Reverse sweep from a single-element output.
  Gradients backward(Var output) const;

  enum class Op : std::uint8_t {
    Leaf,
    MatVec,
    MatVecT,
    Add,
    Sub,
    Mul,
    Scale,
    MulScalar,
    AddConst,
    Relu,
    SoftmaxT,
    LogSumExp,
    LogFloor,
    Index,
    Gather,
    Sum,
    Dot,
    Sqrt,
    Reciprocal,
    Detach,
  };

  /// Internal: appends a node. Used by the operator functions below.
  Var push(Op op, Tensor value, std::uint32_t a, std::uint32_t b = 0,
           double aux = 0.0, std::vector<std::size_t> index = {});

 private:
  struct Node {
    Op op;
    std::uint32_t a;
    std::uint32_t b;
    double aux;
    Tensor value;
    std::vector<std::size_t> index;
  };

  void accumulate(std::vector<Tensor>& adj, std::uint32_t id,
                  const Tensor& contribution) const;

  std::vector<Node> nodes_;
};

// Operators. Unless stated, operands must live on the same graph and have
// matching shapes.

/// W x for W of shape [m, n] and x of shape [n].
Var matvec(Var w, Var x);
/// W^T v for W of shape [m, n] and v of shape [m].
Var matvec_t(Var w, Var v);
/// W x + b.
Var affine(Var w, Var x, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
/// Elementwise product.
Var operator*(Var a, Var b);
Var scale(Var a, double c);
/// Every entry of a times the single-element s.
Var mul_scalar(Var a, Var s);
Var add_const(Var a, double c);
Var relu(Var a);
/// softmax(z / tau), stabilised by max-subtraction.
Var softmax_t(Var z, double tau);
Var logsumexp(Var z);
/// log(max(a, floor)); zero gradient where the floor is active.
Var log_floor(Var a, double floor = 1e-12);
Var index(Var a, std::size_t i);
Var gather(Var a, std::vector<std::size_t> indices);
Var sum(Var a);
Var dot(Var a, Var b);
Var sqrt(Var a);
Var reciprocal(Var a);
/// Forward identity; blocks every gradient.
Var detach(Var a);

using ScalarFn = std::function<Var(Graph&, Var)>;

/// df/dx. Throws ContractViolation when f is not single-element and
/// DivergenceError when f(x) is not finite.
Tensor grad(const ScalarFn& f, const Tensor& x);
std::pair<double, Tensor> value_and_grad(const ScalarFn& f, const Tensor& x);

/// softmax(z / tau) on plain values.
Tensor softmax_t(const Tensor& z, double tau);
double logsumexp(std::span<const double> z);

/// Central-difference gradient estimate with step h.
Tensor finite_diff(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double h = 1e-5);

}  // namespace mora
