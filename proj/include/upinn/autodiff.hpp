#pragma once

// Scalar reverse-mode automatic differentiation on an append-only tape.
//
// Nodes are recorded in evaluation order, so insertion order is a valid
// topological order and a backward sweep is a single reverse scan.
// Second derivatives are obtained reverse-over-reverse: `derivatives()`
// replays the backward sweep with Var arithmetic, which appends the adjoint
// computation to the same tape. Those derivative nodes can then enter a
// loss that is differentiated once more with `grad()`. A third pass is
// rejected.

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "upinn/error.hpp"

namespace upinn::ad {

class Graph;

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Affine,    // c * a + k, c stored as the local partial
  PowConst,  // a^p, p stored in `param`
  Exp,
  Log,
  Tanh,
  Sigmoid,
  Silu,
  Sqrt,
};

class Var {
 public:
  Var() = default;

  double value() const { return value_; }
  std::uint32_t id() const { return id_; }
  Graph* graph() const { return graph_; }
  std::uint32_t generation() const { return generation_; }
  bool bound() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::uint32_t id, std::uint32_t generation, double value)
      : graph_(graph), id_(id), generation_(generation), value_(value) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
  std::uint32_t generation_ = 0;
  double value_ = 0.0;
};

class Graph {
 public:
  struct Node {
    double value;
    double da;     // local partial w.r.t. first parent
    double db;     // local partial w.r.t. second parent
    double param;  // exponent for PowConst, offset for Affine
    std::uint32_t a;
    std::uint32_t b;
    Op op;
    std::uint8_t order;  // 0 for primal nodes, 1 for nodes recorded by derivatives()
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var lift(double x);

  // Drops every node and invalidates all outstanding Vars.
  void reset();

  std::size_t size() const { return nodes_.size(); }
  std::uint32_t generation() const { return generation_; }
  const Node& node(const Var& v) const;

  // Reverse sweep from `output` with seed 1. Previous adjoints are cleared.
  void backward(const Var& output);
  // Additional reverse sweep whose adjoints are added to the current ones.
  void backward_accumulate(std::span<const std::pair<Var, double>> seeds);
  double adjoint(const Var& v) const;

  // d output / d wrt_i as Vars recorded on this tape (reverse-over-reverse).
  std::vector<Var> derivatives(const Var& output, std::span<const Var> wrt);

  // Construction primitives used by the operator overloads.
  Var unary(Op op, const Var& a, double value, double partial, double param = 0.0);
  Var binary(Op op, const Var& a, const Var& b, double value, double da, double db);
  void check(const Var& v) const;

 private:
  Var handle(std::uint32_t id) const;
  Var local_adjoint(const Node& n, std::uint32_t id, const Var& adj, bool second);
  void sweep(std::uint32_t top);

  std::vector<Node> nodes_;
  std::vector<double> adjoints_;
  std::uint32_t generation_ = 1;
  std::uint8_t recording_order_ = 0;
};

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);

Var operator+(const Var& a, double b);
Var operator+(double a, const Var& b);
Var operator-(const Var& a, double b);
Var operator-(double a, const Var& b);
Var operator*(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator/(const Var& a, double b);
Var operator/(double a, const Var& b);

Var& operator+=(Var& a, const Var& b);
Var& operator-=(Var& a, const Var& b);
Var& operator*=(Var& a, const Var& b);

Var exp(const Var& x);
Var log(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var silu(const Var& x);
Var sqrt(const Var& x);
Var pow(const Var& x, double p);
Var square(const Var& x);

// Gradient of `output` w.r.t. each Var in `wrt`; unreachable Vars get 0.
std::vector<double> grad(const Var& output, std::span<const Var> wrt);

// Parameter gradient of a loss assembled from input derivatives:
// d/dparams loss(d output / d inputs). `build_loss` receives the first-order
// derivative Vars and returns the scalar loss.
std::vector<double> grad_of_grad(const Var& output, std::span<const Var> inputs,
                                 const std::function<Var(std::span<const Var>)>& build_loss,
                                 std::span<const Var> params);

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

}  // namespace upinn::ad
