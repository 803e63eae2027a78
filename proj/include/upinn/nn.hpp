#pragma once

// Fully-connected networks used as bodies and heads.
//
// Two evaluation routes share one parameter store:
//  * a scalar route on the autodiff tape (forward(Graph&, ...)), used for
//    small problems and as an independent check;
//  * a batched route (BatchPass) that propagates values together with
//    directional input derivatives ("tangents") through the layers and
//    back-propagates adjoints of both. This is the training path: it gives
//    d(network)/d(inputs) and the parameter gradient of any loss built from
//    values and tangents.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "upinn/autodiff.hpp"

namespace upinn::nn {

enum class Activation { Tanh, Silu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

struct MLPSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 1;
  Activation activation = Activation::Tanh;
  // Heads end in a linear projection; bodies apply the activation after
  // every layer so the latent vector is the last layer's activations.
  bool final_linear = true;

  // input, hidden..., output
  std::vector<std::size_t> widths() const;
  std::size_t parameter_count() const;
  void validate() const;

  bool operator==(const MLPSpec&) const = default;
};

struct LayerLayout {
  std::size_t in;
  std::size_t out;
  std::size_t weight_offset;  // row-major [out][in]
  std::size_t bias_offset;
  bool activated;
};

class MLP {
 public:
  MLP() = default;
  explicit MLP(MLPSpec spec);

  const MLPSpec& spec() const { return spec_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  const std::vector<LayerLayout>& layers() const { return layers_; }

  // "layer{i}.weight" / "layer{i}.bias"
  std::vector<std::pair<std::string, std::span<const double>>> named_params() const;

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

 private:
  MLPSpec spec_;
  std::vector<LayerLayout> layers_;
  std::vector<double> params_;
  bool frozen_ = false;
};

// Glorot-uniform weights, zero biases; reproducible for a given seed.
MLP init(const MLPSpec& spec, std::uint64_t seed);
void freeze(MLP& net);

std::vector<double> forward(const MLP& net, std::span<const double> x);

std::vector<ad::Var> lift_params(ad::Graph& g, const MLP& net);
std::vector<ad::Var> forward(const MLP& net, std::span<const ad::Var> params,
                             std::span<const ad::Var> x);

using Matrix = Eigen::MatrixXd;

// Batch of points with K tangent directions, stored side by side so every
// layer is a single matrix product: columns [0,B) hold values, columns
// [B(k+1), B(k+2)) hold tangent k. Rows are features.
struct Jet {
  Matrix data;
  std::size_t points = 0;
  std::size_t tangents = 0;

  Jet() = default;
  Jet(std::size_t rows, std::size_t points, std::size_t tangents);

  auto value() { return data.leftCols(points); }
  auto value() const { return data.leftCols(points); }
  auto tangent(std::size_t k) { return data.middleCols(points * (k + 1), points); }
  auto tangent(std::size_t k) const { return data.middleCols(points * (k + 1), points); }

  // Input jet for inputs x (features x points) with unit tangents along the
  // given input coordinates.
  static Jet seeded(const Matrix& x, std::span<const std::size_t> directions);
  // Column block [first, first+count) of every slot.
  Jet slice(std::size_t first, std::size_t count) const;
};

// One forward/backward evaluation of a network on a batch. Keeps the layer
// caches needed by backward().
class BatchPass {
 public:
  Jet forward(const MLP& net, const Jet& input);

  // `output_adjoint` has the shape of the forward output. Parameter
  // gradients are accumulated into `grad` unless it is empty. Returns the
  // adjoint of the input jet when `want_input_adjoint` is set.
  Jet backward(const MLP& net, const Jet& output_adjoint, std::span<double> grad,
               bool want_input_adjoint);

 private:
  struct Cache {
    Matrix input;
    Matrix pre;  // pre-activation values and tangents
    Matrix d1;   // activation first and second derivatives at the values
    Matrix d2;
  };
  std::vector<Cache> caches_;
  std::size_t points_ = 0;
  std::size_t tangents_ = 0;
};

struct BodyGroup {
  std::string name;
  MLP body;
  std::vector<MLP> heads;  // indexed by family element
};

struct MultiHeadModel {
  std::vector<BodyGroup> groups;  // one per unknown function (plus free functions)
  std::vector<double> family;     // head index -> family parameter value

  std::size_t head_count() const { return family.size(); }
  void validate() const;
};

// Last-layer activations of a body at one input point.
std::vector<double> latent(const MultiHeadModel& model, std::size_t group,
                           std::span<const double> x);

// FNV-1a over the little-endian bytes of the parameters.
std::uint64_t parameter_hash(const MLP& net);

}  // namespace upinn::nn
