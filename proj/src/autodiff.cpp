#include "upinn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace upinn::ad {

namespace {

void require_finite(double v, const char* op) {
  if (!std::isfinite(v)) {
    throw NonFiniteError(std::string("non-finite result in ") + op);
  }
}

double logistic(double x) {
  // Split on sign so exp() never overflows.
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

bool is_binary(Op op) {
  return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div;
}

struct OrderGuard {
  std::uint8_t& slot;
  std::uint8_t saved;
  OrderGuard(std::uint8_t& s, std::uint8_t value) : slot(s), saved(s) { slot = value; }
  ~OrderGuard() { slot = saved; }
};

}  // namespace

Var Graph::lift(double x) {
  if (!std::isfinite(x)) {
    throw NonFiniteError("lift of non-finite value");
  }
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(Node{x, 0.0, 0.0, 0.0, 0, 0, Op::Leaf, recording_order_});
  return Var(this, id, generation_, x);
}

void Graph::reset() {
  nodes_.clear();
  adjoints_.clear();
  ++generation_;
}

void Graph::check(const Var& v) const {
  if (v.graph() != this || v.generation() != generation_ || v.id() >= nodes_.size()) {
    throw GenerationError("Var does not belong to the current graph generation");
  }
}

const Graph::Node& Graph::node(const Var& v) const {
  check(v);
  return nodes_[v.id()];
}

Var Graph::handle(std::uint32_t id) const {
  return Var(const_cast<Graph*>(this), id, generation_, nodes_[id].value);
}

Var Graph::unary(Op op, const Var& a, double value, double partial, double param) {
  check(a);
  require_finite(value, "unary op");
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(Node{value, partial, 0.0, param, a.id(), 0, op, recording_order_});
  return Var(this, id, generation_, value);
}

Var Graph::binary(Op op, const Var& a, const Var& b, double value, double da, double db) {
  check(a);
  check(b);
  require_finite(value, "binary op");
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(Node{value, da, db, 0.0, a.id(), b.id(), op, recording_order_});
  return Var(this, id, generation_, value);
}

void Graph::sweep(std::uint32_t top) {
  for (std::int64_t i = top; i >= 0; --i) {
    const double adj = adjoints_[i];
    if (adj == 0.0) {
      continue;
    }
    const Node& n = nodes_[i];
    if (n.op == Op::Leaf) {
      continue;
    }
    adjoints_[n.a] += adj * n.da;
    if (is_binary(n.op)) {
      adjoints_[n.b] += adj * n.db;
    }
  }
}

void Graph::backward(const Var& output) {
  check(output);
  adjoints_.assign(nodes_.size(), 0.0);
  adjoints_[output.id()] = 1.0;
  sweep(output.id());
}

void Graph::backward_accumulate(std::span<const std::pair<Var, double>> seeds) {
  std::vector<double> previous = std::move(adjoints_);
  previous.resize(nodes_.size(), 0.0);
  adjoints_.assign(nodes_.size(), 0.0);
  std::uint32_t top = 0;
  for (const auto& [v, seed] : seeds) {
    check(v);
    if (!std::isfinite(seed)) {
      throw NonFiniteError("non-finite adjoint seed");
    }
    adjoints_[v.id()] += seed;
    top = std::max(top, v.id());
  }
  if (!seeds.empty()) {
    sweep(top);
  }
  for (std::size_t i = 0; i < adjoints_.size(); ++i) {
    adjoints_[i] += previous[i];
  }
}

double Graph::adjoint(const Var& v) const {
  check(v);
  if (v.id() >= adjoints_.size()) {
    return 0.0;
  }
  return adjoints_[v.id()];
}

// Contribution of `adj` (the adjoint of node `id`) to one of its parents,
// expressed in Var arithmetic so it can itself be differentiated.
Var Graph::local_adjoint(const Node& n, std::uint32_t id, const Var& adj, bool second) {
  const Var out = handle(id);
  const Var a = handle(n.a);
  switch (n.op) {
    case Op::Add:
      return adj;
    case Op::Sub:
      return second ? -adj : adj;
    case Op::Mul:
      return second ? adj * a : adj * handle(n.b);
    case Op::Div: {
      const Var b = handle(n.b);
      return second ? -(adj * out) / b : adj / b;
    }
    case Op::Neg:
      return -adj;
    case Op::Affine:
      return n.da == 1.0 ? adj : adj * n.da;
    case Op::PowConst:
      return adj * (n.param * pow(a, n.param - 1.0));
    case Op::Exp:
      return adj * out;
    case Op::Log:
      return adj / a;
    case Op::Tanh:
      return adj * (1.0 - out * out);
    case Op::Sigmoid:
      return adj * (out * (1.0 - out));
    case Op::Silu: {
      const Var s = sigmoid(a);
      return adj * (s * (1.0 + a * (1.0 - s)));
    }
    case Op::Sqrt:
      return adj * (0.5 / out);
    case Op::Leaf:
      break;
  }
  throw Error("local_adjoint called on a leaf");
}

std::vector<Var> Graph::derivatives(const Var& output, std::span<const Var> wrt) {
  check(output);
  for (const auto& w : wrt) {
    check(w);
  }
  OrderGuard guard(recording_order_, 1);

  const std::uint32_t top = output.id();
  std::vector<Var> adj(top + 1);
  std::vector<char> has(top + 1, 0);
  adj[top] = lift(1.0);
  has[top] = 1;

  auto accumulate = [&](std::uint32_t p, const Var& c) {
    if (has[p]) {
      adj[p] = adj[p] + c;
    } else {
      adj[p] = c;
      has[p] = 1;
    }
  };

  for (std::int64_t i = top; i >= 0; --i) {
    if (!has[i]) {
      continue;
    }
    const Node n = nodes_[i];  // copy: the loop appends to nodes_
    if (n.order != 0) {
      throw UnsupportedOrderError("derivatives() over derivative nodes (third order) is not supported");
    }
    if (n.op == Op::Leaf) {
      continue;
    }
    const Var a_adj = adj[i];
    accumulate(n.a, local_adjoint(n, static_cast<std::uint32_t>(i), a_adj, false));
    if (is_binary(n.op)) {
      accumulate(n.b, local_adjoint(n, static_cast<std::uint32_t>(i), a_adj, true));
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    out.push_back(w.id() <= top && has[w.id()] ? adj[w.id()] : lift(0.0));
  }
  return out;
}

namespace {

Graph& graph_of(const Var& a) {
  if (a.graph() == nullptr) {
    throw GenerationError("unbound Var");
  }
  return *a.graph();
}

Graph& graph_of(const Var& a, const Var& b) {
  if (a.graph() != b.graph() || a.generation() != b.generation()) {
    throw GenerationError("operands belong to different graphs or generations");
  }
  return graph_of(a);
}

Var affine(const Var& a, double c, double k) {
  return graph_of(a).unary(Op::Affine, a, c * a.value() + k, c, k);
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  return graph_of(a, b).binary(Op::Add, a, b, a.value() + b.value(), 1.0, 1.0);
}

Var operator-(const Var& a, const Var& b) {
  return graph_of(a, b).binary(Op::Sub, a, b, a.value() - b.value(), 1.0, -1.0);
}

Var operator*(const Var& a, const Var& b) {
  return graph_of(a, b).binary(Op::Mul, a, b, a.value() * b.value(), b.value(), a.value());
}

Var operator/(const Var& a, const Var& b) {
  if (b.value() == 0.0) {
    throw DomainError("division by zero");
  }
  const double q = a.value() / b.value();
  return graph_of(a, b).binary(Op::Div, a, b, q, 1.0 / b.value(), -q / b.value());
}

Var operator-(const Var& a) { return graph_of(a).unary(Op::Neg, a, -a.value(), -1.0); }

Var operator+(const Var& a, double b) { return affine(a, 1.0, b); }
Var operator+(double a, const Var& b) { return affine(b, 1.0, a); }
Var operator-(const Var& a, double b) { return affine(a, 1.0, -b); }
Var operator-(double a, const Var& b) { return affine(b, -1.0, a); }
Var operator*(const Var& a, double b) { return affine(a, b, 0.0); }
Var operator*(double a, const Var& b) { return affine(b, a, 0.0); }

Var operator/(const Var& a, double b) {
  if (b == 0.0) {
    throw DomainError("division by zero");
  }
  return affine(a, 1.0 / b, 0.0);
}

Var operator/(double a, const Var& b) { return pow(b, -1.0) * a; }

Var& operator+=(Var& a, const Var& b) { return a = a + b; }
Var& operator-=(Var& a, const Var& b) { return a = a - b; }
Var& operator*=(Var& a, const Var& b) { return a = a * b; }

Var exp(const Var& x) {
  const double e = std::exp(x.value());
  return graph_of(x).unary(Op::Exp, x, e, e);
}

Var log(const Var& x) {
  if (!(x.value() > 0.0)) {
    throw DomainError("log of non-positive value");
  }
  return graph_of(x).unary(Op::Log, x, std::log(x.value()), 1.0 / x.value());
}

Var tanh(const Var& x) {
  const double t = std::tanh(x.value());
  return graph_of(x).unary(Op::Tanh, x, t, 1.0 - t * t);
}

Var sigmoid(const Var& x) {
  const double s = logistic(x.value());
  return graph_of(x).unary(Op::Sigmoid, x, s, s * (1.0 - s));
}

Var silu(const Var& x) {
  const double v = x.value();
  const double s = logistic(v);
  return graph_of(x).unary(Op::Silu, x, v * s, s * (1.0 + v * (1.0 - s)));
}

Var sqrt(const Var& x) {
  if (!(x.value() > 0.0)) {
    throw DomainError("sqrt of non-positive value");
  }
  const double r = std::sqrt(x.value());
  return graph_of(x).unary(Op::Sqrt, x, r, 0.5 / r);
}

Var pow(const Var& x, double p) {
  const double v = x.value();
  if (v <= 0.0 && p != std::floor(p)) {
    throw DomainError("non-integer power of non-positive value");
  }
  if (v == 0.0 && p < 1.0) {
    throw DomainError("power with exponent < 1 at zero");
  }
  return graph_of(x).unary(Op::PowConst, x, std::pow(v, p), p * std::pow(v, p - 1.0), p);
}

Var square(const Var& x) { return x * x; }

std::vector<double> grad(const Var& output, std::span<const Var> wrt) {
  Graph& g = graph_of(output);
  g.backward(output);
  std::vector<double> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    out.push_back(g.adjoint(w));
  }
  return out;
}

std::vector<double> grad_of_grad(const Var& output, std::span<const Var> inputs,
                                 const std::function<Var(std::span<const Var>)>& build_loss,
                                 std::span<const Var> params) {
  Graph& g = graph_of(output);
  const std::vector<Var> first = g.derivatives(output, inputs);
  const Var loss = build_loss(first);
  return grad(loss, params);
}

}  // namespace upinn::ad
