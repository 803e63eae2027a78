#pragma once

// Experiment configuration. Documents are JSON; every object is checked
// against its allowed keys before anything is computed. Missing keys take
// per-problem defaults.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "upinn/nn.hpp"
#include "upinn/optim.hpp"
#include "upinn/problems.hpp"

namespace upinn::config {

using json = nlohmann::json;

struct NetConfig {
  std::vector<std::size_t> hidden;
  std::size_t latent = 0;  // bodies only
  nn::Activation activation = nn::Activation::Tanh;
};

struct OptimConfig {
  optim::AdamConfig adam;
  double decay_pct = 0.0;  // percent per period
  std::size_t period = 1;

  optim::StepScheduler scheduler() const {
    return {adam.lr, decay_pct / 100.0, period};
  }
};

struct RegConfig {
  bool enabled = false;
  double lambda = 0.0;
  std::size_t every = 100;  // metric epochs are multiples of this
  bool active() const { return enabled && lambda > 0.0; }
};

struct TransferConfig {
  std::optional<double> param;
  std::size_t epochs = 0;
  OptimConfig optim;
};

struct EvalConfig {
  std::size_t points = 1000;
  std::string oracle = "rk45";
  double rtol = 1e-9;
  double atol = 1e-12;
  double rk4_step = 1e-4;
  std::size_t efe_u_points = 33;
  std::size_t v_points = 101;
};

enum class Reduction { Mean, Sum };

struct TrainConfig {
  std::string name;
  std::string problem;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::string output_dir;

  std::vector<double> heads;
  problems::SamplerConfig sampler;
  double rho = 0.0;  // flame / vdp stiffness scale
  problems::EfeOptions efe;

  NetConfig body;
  NetConfig head;
  NetConfig free_body;  // EFE free function V
  NetConfig free_head;

  OptimConfig optim;
  RegConfig ur;
  RegConfig jr;
  Reduction reduction = Reduction::Mean;
  std::size_t checkpoint_every = 10000;
  std::size_t record_every = 1;

  TransferConfig transfer;
  EvalConfig eval;
};

// Throws ConfigError on unknown keys, wrong types or invalid values.
TrainConfig parse(const json& doc);
TrainConfig parse_text(const std::string& text);
TrainConfig load(const std::string& path);

// Fully resolved document; parse(to_json(c)) reproduces c.
json to_json(const TrainConfig& c);

// FNV-1a over the canonical dump of to_json(c).
std::uint64_t hash(const TrainConfig& c);

// Non-fatal findings, e.g. lambda outside the usual operating range.
std::vector<std::string> warnings(const TrainConfig& c);

std::unique_ptr<problems::Problem> make_problem(const TrainConfig& c);

nn::MLPSpec body_spec(const TrainConfig& c, std::size_t input_dim);
nn::MLPSpec head_spec(const TrainConfig& c, std::size_t latent);
nn::MLPSpec free_body_spec(const TrainConfig& c);
nn::MLPSpec free_head_spec(const TrainConfig& c);

// Derived seed for an independent stream (splitmix64 of the inputs).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace upinn::config
