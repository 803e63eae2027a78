#include "upinn/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <random>

#include "upinn/error.hpp"

namespace upinn::nn {

using RowMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

Activation parse_activation(const std::string& name) {
  if (name == "tanh") {
    return Activation::Tanh;
  }
  if (name == "silu") {
    return Activation::Silu;
  }
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "silu"; }

std::vector<std::size_t> MLPSpec::widths() const {
  std::vector<std::size_t> w;
  w.reserve(hidden.size() + 2);
  w.push_back(input_dim);
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(output_dim);
  return w;
}

std::size_t MLPSpec::parameter_count() const {
  const auto w = widths();
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    n += w[i] * w[i + 1] + w[i + 1];
  }
  return n;
}

void MLPSpec::validate() const {
  for (auto w : widths()) {
    if (w == 0) {
      throw ConfigError("network widths must be >= 1");
    }
  }
}

MLP::MLP(MLPSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const auto w = spec_.widths();
  std::size_t offset = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    LayerLayout l{w[i], w[i + 1], offset, offset + w[i] * w[i + 1], true};
    l.activated = !(spec_.final_linear && i + 2 == w.size());
    offset = l.bias_offset + l.out;
    layers_.push_back(l);
  }
  params_.assign(offset, 0.0);
}

std::vector<std::pair<std::string, std::span<const double>>> MLP::named_params() const {
  std::vector<std::pair<std::string, std::span<const double>>> out;
  const std::span<const double> all = params_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    out.emplace_back("layer" + std::to_string(i) + ".weight",
                     all.subspan(l.weight_offset, l.in * l.out));
    out.emplace_back("layer" + std::to_string(i) + ".bias", all.subspan(l.bias_offset, l.out));
  }
  return out;
}

MLP init(const MLPSpec& spec, std::uint64_t seed) {
  MLP net(spec);
  std::mt19937_64 rng(seed);
  auto p = net.params();
  for (const auto& l : net.layers()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t k = 0; k < l.in * l.out; ++k) {
      p[l.weight_offset + k] = dist(rng);
    }
  }
  return net;
}

void freeze(MLP& net) { net.freeze(); }

namespace {

struct ActivationDerivs {
  double value;
  double first;
  double second;
};

inline ActivationDerivs activate(Activation a, double x) {
  if (a == Activation::Tanh) {
    const double t = std::tanh(x);
    const double d1 = 1.0 - t * t;
    return {t, d1, -2.0 * t * d1};
  }
  const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return {x * s, s * (1.0 + x * (1.0 - s)), s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))};
}

template <typename T>
T apply(Activation a, const T& x) {
  using std::tanh;
  if (a == Activation::Tanh) {
    return tanh(x);
  }
  if constexpr (std::is_same_v<T, double>) {
    return activate(a, x).value;
  } else {
    return ad::silu(x);
  }
}

}  // namespace

std::vector<double> forward(const MLP& net, std::span<const double> x) {
  if (x.size() != net.spec().input_dim) {
    throw DimensionError("forward: input has " + std::to_string(x.size()) + " entries, expected " +
                         std::to_string(net.spec().input_dim));
  }
  std::vector<double> z(x.begin(), x.end());
  const auto p = net.params();
  for (const auto& l : net.layers()) {
    std::vector<double> next(l.out);
    for (std::size_t r = 0; r < l.out; ++r) {
      double acc = p[l.bias_offset + r];
      for (std::size_t c = 0; c < l.in; ++c) {
        acc += p[l.weight_offset + r * l.in + c] * z[c];
      }
      next[r] = l.activated ? apply(net.spec().activation, acc) : acc;
    }
    z = std::move(next);
  }
  return z;
}

std::vector<ad::Var> lift_params(ad::Graph& g, const MLP& net) {
  std::vector<ad::Var> out;
  out.reserve(net.params().size());
  for (double v : net.params()) {
    out.push_back(g.lift(v));
  }
  return out;
}

std::vector<ad::Var> forward(const MLP& net, std::span<const ad::Var> params,
                             std::span<const ad::Var> x) {
  if (x.size() != net.spec().input_dim) {
    throw DimensionError("forward: input dimension mismatch");
  }
  if (params.size() != net.params().size()) {
    throw DimensionError("forward: parameter vector does not match network");
  }
  std::vector<ad::Var> z(x.begin(), x.end());
  for (const auto& l : net.layers()) {
    std::vector<ad::Var> next;
    next.reserve(l.out);
    for (std::size_t r = 0; r < l.out; ++r) {
      ad::Var acc = params[l.bias_offset + r];
      for (std::size_t c = 0; c < l.in; ++c) {
        acc = acc + params[l.weight_offset + r * l.in + c] * z[c];
      }
      next.push_back(l.activated ? apply(net.spec().activation, acc) : acc);
    }
    z = std::move(next);
  }
  return z;
}

Jet::Jet(std::size_t rows, std::size_t points, std::size_t tangents)
    : data(Matrix::Zero(rows, points * (tangents + 1))), points(points), tangents(tangents) {}

Jet Jet::seeded(const Matrix& x, std::span<const std::size_t> directions) {
  Jet j(x.rows(), x.cols(), directions.size());
  j.value() = x;
  for (std::size_t k = 0; k < directions.size(); ++k) {
    if (directions[k] >= static_cast<std::size_t>(x.rows())) {
      throw DimensionError("tangent direction out of range");
    }
    j.tangent(k).row(directions[k]).setOnes();
  }
  return j;
}

Jet Jet::slice(std::size_t first, std::size_t count) const {
  Jet j(data.rows(), count, tangents);
  for (std::size_t s = 0; s <= tangents; ++s) {
    j.data.middleCols(s * count, count) = data.middleCols(s * points + first, count);
  }
  return j;
}

Jet BatchPass::forward(const MLP& net, const Jet& input) {
  if (static_cast<std::size_t>(input.data.rows()) != net.spec().input_dim) {
    throw DimensionError("batched forward: input dimension mismatch");
  }
  const std::size_t b = input.points;
  points_ = b;
  tangents_ = input.tangents;
  caches_.resize(net.layers().size());
  const auto p = net.params();
  const Activation act = net.spec().activation;

  Matrix current = input.data;
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const auto& l = net.layers()[li];
    Cache& c = caches_[li];
    c.input = std::move(current);
    // Owned copies: Eigen's kernels pick code paths by alignment, and the
    // parameter buffer's alignment is not fixed, which would make sums
    // depend on where the allocator placed it.
    const Matrix w = ConstRowMap(p.data() + l.weight_offset, l.out, l.in);
    const Eigen::VectorXd bias = ConstVecMap(p.data() + l.bias_offset, l.out);
    c.pre.noalias() = w * c.input;
    c.pre.leftCols(b).colwise() += bias;

    current.resize(l.out, c.pre.cols());
    if (!l.activated) {
      current = c.pre;
      continue;
    }
    c.d1.resize(l.out, b);
    c.d2.resize(l.out, b);
    for (Eigen::Index col = 0; col < static_cast<Eigen::Index>(b); ++col) {
      for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(l.out); ++r) {
        const auto d = activate(act, c.pre(r, col));
        c.d1(r, col) = d.first;
        c.d2(r, col) = d.second;
        current(r, col) = d.value;
        for (std::size_t k = 0; k < tangents_; ++k) {
          const Eigen::Index tc = static_cast<Eigen::Index>(b * (k + 1)) + col;
          current(r, tc) = d.first * c.pre(r, tc);
        }
      }
    }
  }
  Jet out;
  out.data = std::move(current);
  out.points = b;
  out.tangents = tangents_;
  return out;
}

Jet BatchPass::backward(const MLP& net, const Jet& output_adjoint, std::span<double> grad,
                        bool want_input_adjoint) {
  if (caches_.size() != net.layers().size() || output_adjoint.points != points_ ||
      output_adjoint.tangents != tangents_) {
    throw DimensionError("batched backward: adjoint does not match the forward pass");
  }
  if (!grad.empty() && grad.size() != net.params().size()) {
    throw DimensionError("batched backward: gradient buffer size mismatch");
  }
  const std::size_t b = points_;
  const auto p = net.params();

  Matrix g = output_adjoint.data;
  for (std::size_t li = net.layers().size(); li-- > 0;) {
    const auto& l = net.layers()[li];
    const Cache& c = caches_[li];
    if (l.activated) {
      // d/d pre of  h = s(a)  and  h_k = s'(a) a_k.
      for (Eigen::Index col = 0; col < static_cast<Eigen::Index>(b); ++col) {
        for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(l.out); ++r) {
          const double d1 = c.d1(r, col);
          const double d2 = c.d2(r, col);
          double ga = g(r, col) * d1;
          for (std::size_t k = 0; k < tangents_; ++k) {
            const Eigen::Index tc = static_cast<Eigen::Index>(b * (k + 1)) + col;
            ga += g(r, tc) * d2 * c.pre(r, tc);
            g(r, tc) *= d1;
          }
          g(r, col) = ga;
        }
      }
    }
    if (!grad.empty()) {
      RowMap gw(grad.data() + l.weight_offset, l.out, l.in);
      VecMap gb(grad.data() + l.bias_offset, l.out);
      const Matrix dw = g * c.input.transpose();
      const Eigen::VectorXd db = g.leftCols(b).rowwise().sum();
      gw += dw;
      gb += db;
    }
    if (li == 0 && !want_input_adjoint) {
      return {};
    }
    const Matrix w = ConstRowMap(p.data() + l.weight_offset, l.out, l.in);
    Matrix next = w.transpose() * g;
    g = std::move(next);
  }
  Jet in;
  in.data = std::move(g);
  in.points = b;
  in.tangents = tangents_;
  return in;
}

void MultiHeadModel::validate() const {
  for (const auto& grp : groups) {
    if (grp.heads.size() != family.size()) {
      throw ConfigError("group '" + grp.name + "' must have exactly one head per family element");
    }
    for (const auto& h : grp.heads) {
      if (h.spec().input_dim != grp.body.spec().output_dim) {
        throw DimensionError("head input dimension differs from body latent dimension");
      }
    }
  }
}

std::vector<double> latent(const MultiHeadModel& model, std::size_t group,
                           std::span<const double> x) {
  if (group >= model.groups.size()) {
    throw DimensionError("latent: body index out of range");
  }
  return forward(model.groups[group].body, x);
}

std::uint64_t parameter_hash(const MLP& net) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : net.params()) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char byte : bytes) {
      h ^= byte;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace upinn::nn
