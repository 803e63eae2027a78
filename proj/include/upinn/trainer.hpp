#pragma once

// Multi-head body training, transfer to a new family value with the bodies
// frozen, evaluation against oracles, and UR-on/off ablations.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "upinn/config.hpp"
#include "upinn/nn.hpp"
#include "upinn/problems.hpp"

namespace upinn::trainer {

struct SqrtgStats {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

struct RunRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::vector<double> l_de;  // per head
  double l_ur = 0.0;         // active latent regularizer (UR, or JR baseline)
  double l_tot = 0.0;
  std::optional<SqrtgStats> sqrtg;  // metric epochs only
};

struct MetricRow {
  std::size_t epoch = 0;
  std::string group;
  SqrtgStats stats;
};

struct RunRecord {
  std::vector<RunRow> rows;
  std::vector<MetricRow> metrics;
  std::string checkpoint;
  double wall_seconds = 0.0;

  std::string to_csv() const;
  std::string metrics_csv() const;
};

struct Hooks {
  // Called every checkpoint_every epochs and after the last epoch, with the
  // number of completed epochs and the sampler RNG state.
  std::function<void(const nn::MultiHeadModel&, std::size_t epoch, const std::string& rng)>
      checkpoint;
  std::function<void(const RunRow&)> progress;
};

struct TrainResult {
  nn::MultiHeadModel model;
  RunRecord record;
};

// Solution bodies and heads (one group per unknown function) plus, for EFE,
// the free-function group last.
nn::MultiHeadModel build_model(const config::TrainConfig& cfg, const problems::Problem& problem);

// Throws NumericalAbort naming the epoch on a non-finite loss or gradient.
TrainResult train_body(const config::TrainConfig& cfg, const problems::Problem& problem,
                       const Hooks& hooks = {});

// Freezes copies of the trained bodies and trains one fresh head per group
// for `param`. The returned model has a single family element.
TrainResult transfer(const nn::MultiHeadModel& trained, double param,
                     const config::TrainConfig& cfg, const problems::Problem& problem,
                     const Hooks& hooks = {});

// sqrt(g) statistics of each solution body over the given batches.
std::vector<SqrtgStats> sqrtg_stats(const nn::MultiHeadModel& model,
                                    const problems::Problem& problem,
                                    const std::vector<problems::HeadBatch>& batches);

struct LossEval {
  std::vector<double> l_de;  // per head
  double l_reg = 0.0;
  double total = 0.0;
  // Flattened over trainable networks in model order (each group's body,
  // then its heads); empty unless requested.
  std::vector<double> grad;
};

// One loss evaluation as done by a training step. The regularizer is
// recorded when `metric` is set and cfg enables UR or JR.
LossEval loss_and_grad(const nn::MultiHeadModel& model, const problems::Problem& problem,
                       const std::vector<problems::HeadBatch>& batches,
                       const config::TrainConfig& cfg, bool metric, bool want_grad);

// Pooled over all solution bodies.
SqrtgStats pool(const std::vector<SqrtgStats>& stats);

// Constrained solution values on a batch per head: [head][function][column].
std::vector<std::vector<std::vector<double>>> solve(const nn::MultiHeadModel& model,
                                                    const problems::Problem& problem,
                                                    const std::vector<problems::HeadBatch>& b);

struct HeadReport {
  double param = 0.0;
  double rms_percent = 0.0;
  double max_re_percent = 0.0;
  std::vector<double> t;
  std::vector<double> y_nn;
  std::vector<double> y_oracle;
  std::vector<double> re_percent;

  std::string plot_csv() const;
};

struct EfeHeadReport {
  double param = 0.0;
  std::vector<double> residual_rms;  // one per residual
  std::vector<double> phi;
  std::vector<double> v;
  std::vector<double> dv;

  std::string v_table_csv() const;
};

struct EvalReport {
  std::string problem;
  std::string oracle;
  std::vector<HeadReport> heads;
  std::vector<EfeHeadReport> efe;
  std::vector<SqrtgStats> sqrtg;  // per solution body on the evaluation grid
  double lipschitz = 0.0;

  double rms_percent() const;     // worst head
  double max_re_percent() const;  // worst head
  nlohmann::json to_json() const;
};

// oracle: rk45 | rk4 | implicit (flame only). EFE uses residual norms and
// ignores the oracle.
EvalReport evaluate(const nn::MultiHeadModel& model, const problems::Problem& problem,
                    const config::TrainConfig& cfg, const std::string& oracle);

struct AblationRun {
  std::uint64_t seed = 0;
  bool ur = false;
  RunRecord body;
  RunRecord transfer;
  double tl_rms_percent = 0.0;
  double sqrtg_mean = 0.0;
};

struct AblationResult {
  std::vector<AblationRun> runs;  // seed-major, UR run first

  double median_rms(bool ur) const;
  double win_rate() const;  // fraction of seeds where UR's TL RMS <= no-UR's
  bool sqrtg_lower_everywhere() const;
  std::string to_csv() const;
};

// Seeds cfg.seed, cfg.seed+1, ...; each seed trains a body with UR on and
// off, transfers to cfg.transfer.param and evaluates the transferred head.
AblationResult ablate(const config::TrainConfig& cfg, std::size_t seeds, std::size_t jobs,
                      const std::function<void(const std::string&)>& log = {});

std::string format_double(double v);

}  // namespace upinn::trainer
