#include "upinn/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "upinn/autodiff.hpp"
#include "upinn/error.hpp"
#include "upinn/geometry.hpp"
#include "upinn/optim.hpp"
#include "upinn/reference.hpp"

namespace upinn::trainer {

using ad::Var;
using nn::BatchPass;
using nn::Jet;
using nn::Matrix;
using problems::HeadBatch;

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

namespace {

enum class RegMode { None, Ur, Jr };

struct Grads {
  std::vector<std::vector<double>> body;                // empty when frozen
  std::vector<std::vector<std::vector<double>>> heads;  // [group][head]

  explicit Grads(const nn::MultiHeadModel& m) {
    for (const auto& g : m.groups) {
      body.emplace_back(g.body.frozen() ? 0 : g.body.params().size(), 0.0);
      heads.emplace_back();
      for (const auto& h : g.heads) {
        heads.back().emplace_back(h.frozen() ? 0 : h.params().size(), 0.0);
      }
    }
  }

  void zero() {
    for (auto& b : body) std::fill(b.begin(), b.end(), 0.0);
    for (auto& hs : heads)
      for (auto& h : hs) std::fill(h.begin(), h.end(), 0.0);
  }
};

// What a forward evaluation can hand back besides the losses.
struct Capture {
  bool values = false;     // constrained solution values
  bool residuals = false;  // residual values
  bool jacobians = false;  // d(raw outputs)/d(body inputs), needs metric
  bool free = false;       // phi and V per point

  std::vector<std::vector<std::vector<double>>> val;  // [head][function][col]
  std::vector<std::vector<std::vector<double>>> res;  // [head][residual][col]
  std::vector<Eigen::MatrixXd> jac;                   // per point, F x n
  std::vector<std::vector<double>> phi;               // [head][col]
};

struct EpochOut {
  std::vector<double> l_de;
  double l_reg = 0.0;
  std::vector<SqrtgStats> sqrtg;  // per solution body, metric epochs only
};

SqrtgStats stats_of(const std::vector<double>& v) {
  SqrtgStats s;
  if (v.empty()) {
    return s;
  }
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += x;
  s.mean = acc / static_cast<double>(v.size());
  s.count = v.size();
  return s;
}

// One evaluation of the multi-head model on a batch: batched network passes
// for values and input derivatives, pointwise losses on the tape, and the
// adjoints fed back through the batched passes.
class Engine {
 public:
  Engine(const problems::Problem& p, config::Reduction reduction)
      : problem_(p),
        reduction_(reduction),
        functions_(p.function_count()),
        n_(p.input_dim()),
        shift_(p.input_shift()),
        scale_(p.input_scale()),
        free_(p.free_function_argument().has_value()) {}

  EpochOut run(const nn::MultiHeadModel& m, const std::vector<HeadBatch>& batches, bool metric,
               RegMode mode, double lambda, Grads* grads, Capture* cap = nullptr) {
    const std::size_t heads = m.head_count();
    if (batches.size() != heads) {
      throw DimensionError("engine: one batch per head expected");
    }
    if (m.groups.size() != functions_ + (free_ ? 1 : 0)) {
      throw DimensionError("engine: model groups do not match the problem");
    }
    std::vector<std::size_t> off(heads + 1, 0);
    for (std::size_t a = 0; a < heads; ++a) {
      off[a + 1] = off[a] + static_cast<std::size_t>(batches[a].x.cols());
    }
    const std::size_t total = off[heads];

    Matrix xhat(n_, total);
    for (std::size_t a = 0; a < heads; ++a) {
      for (Eigen::Index j = 0; j < batches[a].x.cols(); ++j) {
        for (std::size_t mu = 0; mu < n_; ++mu) {
          xhat(mu, off[a] + j) = (batches[a].x(mu, j) - shift_[mu]) / scale_[mu];
        }
      }
    }
    std::vector<std::size_t> dirs;
    if (metric) {
      for (std::size_t mu = 0; mu < n_; ++mu) dirs.push_back(mu);
    } else {
      dirs.push_back(0);
    }
    const std::size_t K = dirs.size();
    const Jet input = Jet::seeded(xhat, dirs);

    body_pass_.resize(m.groups.size());
    head_pass_.resize(m.groups.size());
    std::vector<Jet> body_out(functions_);
    std::vector<std::vector<Jet>> head_out(functions_);
    for (std::size_t g = 0; g < functions_; ++g) {
      body_out[g] = body_pass_[g].forward(m.groups[g].body, input);
      head_pass_[g].resize(heads);
      head_out[g].resize(heads);
      for (std::size_t a = 0; a < heads; ++a) {
        head_out[g][a] = head_pass_[g][a].forward(m.groups[g].heads[a],
                                                  body_out[g].slice(off[a], off[a + 1] - off[a]));
      }
    }

    graph_.reset();
    const double inv_t = 1.0 / scale_[0];
    const std::size_t F = functions_;
    raw_.assign(F * total, Var());
    raw_d_.assign(F * total, Var());
    val_.assign(F * total, Var());
    der_.assign(F * total, Var());
    std::vector<Var> rv(F), rd(F), vv(F), vd(F);
    for (std::size_t a = 0; a < heads; ++a) {
      const std::size_t b = off[a + 1] - off[a];
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t c = off[a] + j;
        for (std::size_t f = 0; f < F; ++f) {
          rv[f] = raw_[f * total + c] = graph_.lift(head_out[f][a].value()(0, j));
          rd[f] = raw_d_[f * total + c] = graph_.lift(head_out[f][a].tangent(0)(0, j) * inv_t);
        }
        problems::Point p{point(batches[a], j), batches[a].param, batches[a].tag[j]};
        problem_.constrain(p, rv, rd, vv, vd);
        for (std::size_t f = 0; f < F; ++f) {
          val_[f * total + c] = vv[f];
          der_[f * total + c] = vd[f];
        }
      }
    }

    // Free function V(phi) evaluated on the constrained phi values.
    const std::size_t fg = F;  // free group index
    Jet free_in;
    std::vector<Jet> free_head_out;
    if (free_) {
      const std::size_t arg = *problem_.free_function_argument();
      Matrix vx(2, total);
      for (std::size_t a = 0; a < heads; ++a) {
        for (std::size_t c = off[a]; c < off[a + 1]; ++c) {
          vx(0, c) = val_[arg * total + c].value();
          vx(1, c) = (batches[a].param - shift_[n_ - 1]) / scale_[n_ - 1];
        }
      }
      const std::size_t d0[] = {0};
      free_in = Jet::seeded(vx, d0);
      const Jet lat = body_pass_[fg].forward(m.groups[fg].body, free_in);
      head_pass_[fg].resize(heads);
      free_head_out.resize(heads);
      v_.assign(total, Var());
      dv_.assign(total, Var());
      for (std::size_t a = 0; a < heads; ++a) {
        const std::size_t b = off[a + 1] - off[a];
        free_head_out[a] = head_pass_[fg][a].forward(m.groups[fg].heads[a], lat.slice(off[a], b));
        for (std::size_t j = 0; j < b; ++j) {
          v_[off[a] + j] = graph_.lift(free_head_out[a].value()(0, j));
          dv_[off[a] + j] = graph_.lift(free_head_out[a].tangent(0)(0, j));
        }
      }
    }

    // Residuals and per-head DE losses.
    EpochOut out;
    const std::size_t R = problem_.residual_count();
    std::vector<Var> r(R);
    std::vector<Var> head_loss(heads);
    if (cap) {
      if (cap->values) cap->val.assign(heads, {});
      if (cap->residuals) cap->res.assign(heads, {});
      if (cap->free) cap->phi.assign(heads, {});
    }
    for (std::size_t a = 0; a < heads; ++a) {
      const std::size_t b = off[a + 1] - off[a];
      if (cap && cap->values) cap->val[a].assign(F, std::vector<double>(b));
      if (cap && cap->residuals) cap->res[a].assign(R, std::vector<double>(b));
      Var acc = graph_.lift(0.0);
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t c = off[a] + j;
        for (std::size_t f = 0; f < F; ++f) {
          vv[f] = val_[f * total + c];
          vd[f] = der_[f * total + c];
          if (cap && cap->values) cap->val[a][f][j] = vv[f].value();
        }
        problems::Point p{point(batches[a], j), batches[a].param, batches[a].tag[j]};
        problem_.residuals(p, vv, vd, free_ ? &v_[c] : nullptr, free_ ? &dv_[c] : nullptr, r);
        for (std::size_t k = 0; k < R; ++k) {
          acc = acc + ad::square(r[k]);
          if (cap && cap->residuals) cap->res[a][k][j] = r[k].value();
        }
        if (cap && cap->free) {
          cap->phi[a].push_back(val_[*problem_.free_function_argument() * total + c].value());
        }
      }
      head_loss[a] = reduction_ == config::Reduction::Mean ? acc * (1.0 / static_cast<double>(b))
                                                           : acc;
      out.l_de.push_back(head_loss[a].value());
    }
    Var loss = head_loss[0];
    for (std::size_t a = 1; a < heads; ++a) {
      loss = loss + head_loss[a];
    }

    // Latent geometry on metric epochs.
    std::vector<std::vector<Var>> jac_leaves;
    const bool recorded = metric && mode != RegMode::None && lambda > 0.0;
    if (metric) {
      Var reg;
      bool have_reg = false;
      jac_leaves.resize(F);
      for (std::size_t g = 0; g < F; ++g) {
        const std::size_t d = m.groups[g].body.spec().output_dim;
        const Jet& h = body_out[g];
        std::vector<double> sq;
        sq.reserve(total);
        if (recorded) {
          jac_leaves[g].resize(total * n_ * d);
          std::vector<geometry::MetricSample<Var>> samples;
          samples.reserve(total);
          for (std::size_t c = 0; c < total; ++c) {
            std::vector<Var> jv(n_ * d);
            for (std::size_t mu = 0; mu < n_; ++mu) {
              for (std::size_t i = 0; i < d; ++i) {
                jv[mu * d + i] = jac_leaves[g][c * n_ * d + mu * d + i] =
                    graph_.lift(h.tangent(mu)(i, c));
              }
            }
            samples.push_back(geometry::make_sample<Var>({}, std::move(jv), n_, d));
            sq.push_back(samples.back().sqrt_det.value());
          }
          Var term = mode == RegMode::Ur
                         ? geometry::ur_loss<Var>(samples, lambda)
                         : geometry::jr_loss<Var>(samples, lambda);
          reg = have_reg ? reg + term : term;
          have_reg = true;
        } else {
          std::vector<double> jv(n_ * d);
          for (std::size_t c = 0; c < total; ++c) {
            for (std::size_t mu = 0; mu < n_; ++mu) {
              for (std::size_t i = 0; i < d; ++i) {
                jv[mu * d + i] = h.tangent(mu)(i, c);
              }
            }
            sq.push_back(geometry::make_sample<double>({}, jv, n_, d).sqrt_det);
          }
        }
        out.sqrtg.push_back(stats_of(sq));
      }
      if (have_reg) {
        out.l_reg = reg.value();
        loss = loss + reg;
      }
      if (cap && cap->jacobians) {
        cap->jac.clear();
        for (std::size_t a = 0; a < heads; ++a) {
          for (std::size_t j = 0; j < off[a + 1] - off[a]; ++j) {
            Eigen::MatrixXd J(F, n_);
            for (std::size_t f = 0; f < F; ++f) {
              for (std::size_t mu = 0; mu < n_; ++mu) {
                J(f, mu) = head_out[f][a].tangent(mu)(0, j);
              }
            }
            cap->jac.push_back(std::move(J));
          }
        }
      }
    }

    if (!std::isfinite(loss.value())) {
      throw NonFiniteError("non-finite loss");
    }
    if (grads == nullptr) {
      return out;
    }

    graph_.backward(loss);

    if (free_) {
      // dL/dV, dL/dV' -> V nets -> dL/dphi, then continue the sweep from phi.
      Jet lat_adj(m.groups[fg].body.spec().output_dim, total, 1);
      for (std::size_t a = 0; a < heads; ++a) {
        const std::size_t b = off[a + 1] - off[a];
        Jet oa(1, b, 1);
        for (std::size_t j = 0; j < b; ++j) {
          oa.value()(0, j) = graph_.adjoint(v_[off[a] + j]);
          oa.tangent(0)(0, j) = graph_.adjoint(dv_[off[a] + j]);
        }
        const Jet ia = head_pass_[fg][a].backward(m.groups[fg].heads[a], oa,
                                                  grads->heads[fg][a], true);
        add_slice(lat_adj, ia, off[a], b);
      }
      const Jet in_adj =
          body_pass_[fg].backward(m.groups[fg].body, lat_adj, grads->body[fg], true);
      const std::size_t arg = *problem_.free_function_argument();
      std::vector<std::pair<Var, double>> seeds;
      seeds.reserve(total);
      for (std::size_t c = 0; c < total; ++c) {
        seeds.emplace_back(val_[arg * total + c], in_adj.value()(0, c));
      }
      graph_.backward_accumulate(seeds);
    }

    for (std::size_t g = 0; g < F; ++g) {
      const auto& grp = m.groups[g];
      const std::size_t d = grp.body.spec().output_dim;
      const bool body_trainable = !grp.body.frozen();
      Jet lat_adj(d, total, K);
      for (std::size_t a = 0; a < heads; ++a) {
        const std::size_t b = off[a + 1] - off[a];
        Jet oa(1, b, K);
        for (std::size_t j = 0; j < b; ++j) {
          oa.value()(0, j) = graph_.adjoint(raw_[g * total + off[a] + j]);
          oa.tangent(0)(0, j) = graph_.adjoint(raw_d_[g * total + off[a] + j]) * inv_t;
        }
        const Jet ia =
            head_pass_[g][a].backward(grp.heads[a], oa, grads->heads[g][a], body_trainable);
        if (body_trainable) {
          add_slice(lat_adj, ia, off[a], b);
        }
      }
      if (!body_trainable) {
        continue;
      }
      if (recorded) {
        for (std::size_t c = 0; c < total; ++c) {
          for (std::size_t mu = 0; mu < n_; ++mu) {
            for (std::size_t i = 0; i < d; ++i) {
              lat_adj.tangent(mu)(i, c) += graph_.adjoint(jac_leaves[g][c * n_ * d + mu * d + i]);
            }
          }
        }
      }
      body_pass_[g].backward(grp.body, lat_adj, grads->body[g], false);
    }
    return out;
  }

 private:
  static std::span<const double> point(const HeadBatch& b, std::size_t j) {
    return {b.x.data() + j * static_cast<std::size_t>(b.x.rows()),
            static_cast<std::size_t>(b.x.rows())};
  }

  static void add_slice(Jet& dst, const Jet& src, std::size_t first, std::size_t count) {
    for (std::size_t s = 0; s <= dst.tangents; ++s) {
      dst.data.middleCols(s * dst.points + first, count) += src.data.middleCols(s * count, count);
    }
  }

  const problems::Problem& problem_;
  config::Reduction reduction_;
  std::size_t functions_;
  std::size_t n_;
  std::vector<double> shift_;
  std::vector<double> scale_;
  bool free_;

  ad::Graph graph_;
  std::vector<BatchPass> body_pass_;
  std::vector<std::vector<BatchPass>> head_pass_;
  std::vector<Var> raw_, raw_d_, val_, der_, v_, dv_;
};

std::vector<optim::ParamGroup> param_groups(nn::MultiHeadModel& m, const Grads& g) {
  std::vector<optim::ParamGroup> out;
  for (std::size_t i = 0; i < m.groups.size(); ++i) {
    auto& grp = m.groups[i];
    out.push_back({grp.body.params(), g.body[i], grp.body.frozen()});
    for (std::size_t a = 0; a < grp.heads.size(); ++a) {
      out.push_back({grp.heads[a].params(), g.heads[i][a], grp.heads[a].frozen()});
    }
  }
  return out;
}

std::string rng_state(const problems::Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

struct LoopSpec {
  std::size_t epochs = 0;
  config::OptimConfig optim;
  problems::SamplerConfig sampler;
  RegMode mode = RegMode::None;
  double lambda = 0.0;
  std::size_t every = 0;  // 0: no metric epochs
  std::size_t record_every = 1;
  std::size_t checkpoint_every = 0;
  std::uint64_t rng_seed = 0;
  config::Reduction reduction = config::Reduction::Mean;
};

RunRecord run_loop(nn::MultiHeadModel& model, const problems::Problem& problem,
                   const LoopSpec& spec, const Hooks& hooks) {
  const auto start = std::chrono::steady_clock::now();
  RunRecord rec;
  Engine engine(problem, spec.reduction);
  Grads grads(model);
  optim::Adam adam(spec.optim.adam);
  const auto sched = spec.optim.scheduler();
  problems::Rng rng(spec.rng_seed);
  auto groups = param_groups(model, grads);
  std::vector<std::string> names;
  for (std::size_t g = 0; g < problem.function_count(); ++g) {
    names.push_back(model.groups[g].name);
  }

  for (std::size_t e = 0; e < spec.epochs; ++e) {
    const double lr = sched.lr_at(e);
    const bool metric = spec.every > 0 && e % spec.every == 0;
    EpochOut res;
    try {
      adam.set_lr(lr);
      const auto batches = problem.sample(model.family, spec.sampler, rng);
      grads.zero();
      res = engine.run(model, batches, metric, spec.mode, spec.lambda, &grads);
      adam.step(groups);
    } catch (const NonFiniteError& err) {
      throw NumericalAbort(e, err.what());
    } catch (const DomainError& err) {
      throw NumericalAbort(e, err.what());
    }

    RunRow row;
    row.epoch = e;
    row.lr = lr;
    row.l_de = res.l_de;
    row.l_ur = res.l_reg;
    double tot = 0.0;
    for (double v : row.l_de) tot += v;
    row.l_tot = tot + row.l_ur;
    if (metric) {
      row.sqrtg = pool(res.sqrtg);
      for (std::size_t g = 0; g < res.sqrtg.size(); ++g) {
        rec.metrics.push_back({e, names[g], res.sqrtg[g]});
      }
    }
    if (e % spec.record_every == 0 || metric || e + 1 == spec.epochs) {
      if (hooks.progress) hooks.progress(row);
      rec.rows.push_back(std::move(row));
    }
    if (hooks.checkpoint && spec.checkpoint_every > 0 && (e + 1) % spec.checkpoint_every == 0 &&
        e + 1 != spec.epochs) {
      hooks.checkpoint(model, e + 1, rng_state(rng));
    }
  }
  if (hooks.checkpoint) {
    hooks.checkpoint(model, spec.epochs, rng_state(rng));
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ------------------------------------------------------------------ record

std::string RunRecord::to_csv() const {
  std::ostringstream os;
  const std::size_t heads = rows.empty() ? 0 : rows.front().l_de.size();
  os << "epoch,lr";
  for (std::size_t a = 0; a < heads; ++a) os << ",l_de_head_" << a;
  os << ",l_ur,l_tot,sqrtg_min,sqrtg_mean,sqrtg_max\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << format_double(r.lr);
    for (double v : r.l_de) os << ',' << format_double(v);
    os << ',' << format_double(r.l_ur) << ',' << format_double(r.l_tot);
    if (r.sqrtg) {
      os << ',' << format_double(r.sqrtg->min) << ',' << format_double(r.sqrtg->mean) << ','
         << format_double(r.sqrtg->max);
    } else {
      os << ",,,";
    }
    os << '\n';
  }
  return os.str();
}

std::string RunRecord::metrics_csv() const {
  std::ostringstream os;
  os << "epoch,group,sqrtg_min,sqrtg_mean,sqrtg_max\n";
  for (const auto& m : metrics) {
    os << m.epoch << ',' << m.group << ',' << format_double(m.stats.min) << ','
       << format_double(m.stats.mean) << ',' << format_double(m.stats.max) << '\n';
  }
  return os.str();
}

SqrtgStats pool(const std::vector<SqrtgStats>& stats) {
  SqrtgStats s;
  if (stats.empty()) return s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  double acc = 0.0;
  for (const auto& x : stats) {
    s.min = std::min(s.min, x.min);
    s.max = std::max(s.max, x.max);
    acc += x.mean * static_cast<double>(x.count);
    s.count += x.count;
  }
  s.mean = s.count ? acc / static_cast<double>(s.count) : 0.0;
  return s;
}

// ------------------------------------------------------------------- model

nn::MultiHeadModel build_model(const config::TrainConfig& cfg, const problems::Problem& problem) {
  nn::MultiHeadModel m;
  m.family = cfg.heads;
  const auto names = problem.function_names();
  const auto bspec = config::body_spec(cfg, problem.input_dim());
  const auto hspec = config::head_spec(cfg, cfg.body.latent);
  auto add = [&](const std::string& name, const nn::MLPSpec& bs, const nn::MLPSpec& hs,
                 std::uint64_t g) {
    nn::BodyGroup grp;
    grp.name = name;
    grp.body = nn::init(bs, config::derive_seed(cfg.seed, g, 0));
    for (std::size_t a = 0; a < m.family.size(); ++a) {
      grp.heads.push_back(nn::init(hs, config::derive_seed(cfg.seed, g, a + 1)));
    }
    m.groups.push_back(std::move(grp));
  };
  for (std::size_t g = 0; g < names.size(); ++g) {
    add(names[g], bspec, hspec, g);
  }
  if (problem.free_function_argument()) {
    add("V", config::free_body_spec(cfg), config::free_head_spec(cfg), names.size());
  }
  m.validate();
  return m;
}

TrainResult train_body(const config::TrainConfig& cfg, const problems::Problem& problem,
                       const Hooks& hooks) {
  TrainResult out;
  out.model = build_model(cfg, problem);
  LoopSpec spec;
  spec.epochs = cfg.epochs;
  spec.optim = cfg.optim;
  spec.sampler = cfg.sampler;
  if (cfg.ur.enabled) {
    spec.mode = RegMode::Ur;
    spec.lambda = cfg.ur.lambda;
    spec.every = cfg.ur.every;
  } else if (cfg.jr.enabled) {
    spec.mode = RegMode::Jr;
    spec.lambda = cfg.jr.lambda;
    spec.every = cfg.jr.every;
  } else {
    // sqrt(g) is still logged on the same schedule.
    spec.every = cfg.ur.every;
  }
  spec.record_every = cfg.record_every;
  spec.checkpoint_every = cfg.checkpoint_every;
  spec.rng_seed = config::derive_seed(cfg.seed, 0x5a3d1e);
  spec.reduction = cfg.reduction;
  out.record = run_loop(out.model, problem, spec, hooks);
  return out;
}

TrainResult transfer(const nn::MultiHeadModel& trained, double param,
                     const config::TrainConfig& cfg, const problems::Problem& problem,
                     const Hooks& hooks) {
  (void)problem.domain(param);
  TrainResult out;
  out.model.family = {param};
  for (std::size_t g = 0; g < trained.groups.size(); ++g) {
    const auto& src = trained.groups[g];
    if (src.heads.empty()) {
      throw ConfigError("transfer: trained model has no heads");
    }
    nn::BodyGroup grp;
    grp.name = src.name;
    grp.body = src.body;
    nn::freeze(grp.body);
    grp.heads.push_back(nn::init(src.heads.front().spec(),
                                 config::derive_seed(cfg.seed, 0x7e + g,
                                                     std::bit_cast<std::uint64_t>(param))));
    out.model.groups.push_back(std::move(grp));
  }
  out.model.validate();
  LoopSpec spec;
  spec.epochs = cfg.transfer.epochs;
  spec.optim = cfg.transfer.optim;
  spec.sampler = cfg.sampler;
  spec.sampler.domain_param.reset();  // the new value's own domain
  spec.mode = RegMode::None;
  spec.every = 0;
  spec.record_every = cfg.record_every;
  spec.checkpoint_every = cfg.checkpoint_every;
  spec.rng_seed = config::derive_seed(cfg.seed, 0x7f, std::bit_cast<std::uint64_t>(param));
  spec.reduction = cfg.reduction;
  out.record = run_loop(out.model, problem, spec, hooks);
  return out;
}

std::vector<SqrtgStats> sqrtg_stats(const nn::MultiHeadModel& model,
                                    const problems::Problem& problem,
                                    const std::vector<HeadBatch>& batches) {
  Engine engine(problem, config::Reduction::Mean);
  return engine.run(model, batches, true, RegMode::None, 0.0, nullptr).sqrtg;
}

LossEval loss_and_grad(const nn::MultiHeadModel& model, const problems::Problem& problem,
                       const std::vector<HeadBatch>& batches, const config::TrainConfig& cfg,
                       bool metric, bool want_grad) {
  RegMode mode = RegMode::None;
  double lambda = 0.0;
  if (cfg.ur.enabled) {
    mode = RegMode::Ur;
    lambda = cfg.ur.lambda;
  } else if (cfg.jr.enabled) {
    mode = RegMode::Jr;
    lambda = cfg.jr.lambda;
  }
  Engine engine(problem, cfg.reduction);
  Grads grads(model);
  const auto res = engine.run(model, batches, metric, mode, lambda, want_grad ? &grads : nullptr);
  LossEval out;
  out.l_de = res.l_de;
  out.l_reg = res.l_reg;
  for (double v : res.l_de) out.total += v;
  out.total += res.l_reg;
  if (want_grad) {
    for (std::size_t g = 0; g < model.groups.size(); ++g) {
      out.grad.insert(out.grad.end(), grads.body[g].begin(), grads.body[g].end());
      for (const auto& h : grads.heads[g]) out.grad.insert(out.grad.end(), h.begin(), h.end());
    }
  }
  return out;
}

std::vector<std::vector<std::vector<double>>> solve(const nn::MultiHeadModel& model,
                                                    const problems::Problem& problem,
                                                    const std::vector<HeadBatch>& b) {
  Engine engine(problem, config::Reduction::Mean);
  Capture cap;
  cap.values = true;
  engine.run(model, b, false, RegMode::None, 0.0, nullptr, &cap);
  return cap.val;
}

// -------------------------------------------------------------- evaluation

std::string HeadReport::plot_csv() const {
  std::ostringstream os;
  os << "t,y_nn,y_oracle,re_percent\n";
  for (std::size_t i = 0; i < t.size(); ++i) {
    os << format_double(t[i]) << ',' << format_double(y_nn[i]) << ','
       << format_double(y_oracle[i]) << ',' << format_double(re_percent[i]) << '\n';
  }
  return os.str();
}

std::string EfeHeadReport::v_table_csv() const {
  std::ostringstream os;
  os << "phi,V,dV\n";
  for (std::size_t i = 0; i < phi.size(); ++i) {
    os << format_double(phi[i]) << ',' << format_double(v[i]) << ',' << format_double(dv[i])
       << '\n';
  }
  return os.str();
}

double EvalReport::rms_percent() const {
  double w = 0.0;
  for (const auto& h : heads) w = std::max(w, h.rms_percent);
  return w;
}

double EvalReport::max_re_percent() const {
  double w = 0.0;
  for (const auto& h : heads) w = std::max(w, h.max_re_percent);
  return w;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["problem"] = problem;
  j["oracle"] = oracle;
  j["lipschitz"] = lipschitz;
  nlohmann::json sq = nlohmann::json::array();
  for (const auto& s : sqrtg) {
    sq.push_back({{"min", s.min}, {"mean", s.mean}, {"max", s.max}});
  }
  j["sqrtg"] = sq;
  if (!heads.empty()) {
    j["rms_percent"] = rms_percent();
    j["max_re_percent"] = max_re_percent();
    nlohmann::json hs = nlohmann::json::array();
    for (const auto& h : heads) {
      hs.push_back({{"param", h.param},
                    {"rms_percent", h.rms_percent},
                    {"max_re_percent", h.max_re_percent}});
    }
    j["heads"] = hs;
  }
  if (!efe.empty()) {
    nlohmann::json hs = nlohmann::json::array();
    for (const auto& h : efe) {
      hs.push_back({{"param", h.param}, {"residual_rms", h.residual_rms}});
    }
    j["heads"] = hs;
  }
  return j;
}

EvalReport evaluate(const nn::MultiHeadModel& model, const problems::Problem& problem,
                    const config::TrainConfig& cfg, const std::string& oracle) {
  EvalReport rep;
  rep.problem = problem.name();
  rep.oracle = oracle;
  const bool efe = problem.free_function_argument().has_value();
  if (!efe && oracle != "rk45" && oracle != "rk4" && oracle != "implicit") {
    throw ConfigError("oracle must be rk45, rk4 or implicit");
  }
  if (!efe && oracle == "implicit" && problem.name() != "flame") {
    throw ConfigError("the implicit oracle exists only for the flame problem");
  }
  const auto batches =
      problem.grid(model.family, efe ? cfg.eval.efe_u_points : cfg.eval.points);

  Engine engine(problem, config::Reduction::Mean);
  Capture cap;
  cap.values = true;
  cap.residuals = efe;
  cap.jacobians = true;
  cap.free = efe;
  const auto res = engine.run(model, batches, true, RegMode::None, 0.0, nullptr, &cap);
  rep.sqrtg = res.sqrtg;
  rep.lipschitz = cap.jac.size() >= 2 ? geometry::lipschitz_diagnostic(cap.jac) : 0.0;

  if (!efe) {
    const std::size_t comp = problem.compared_function();
    for (std::size_t a = 0; a < batches.size(); ++a) {
      HeadReport h;
      h.param = batches[a].param;
      const auto ode = problem.ode(h.param);
      if (!ode) throw ConfigError("problem has no ODE oracle");
      std::optional<reference::Trajectory> traj;
      if (oracle == "rk45") traj = reference::rk45(*ode, cfg.eval.rtol, cfg.eval.atol);
      if (oracle == "rk4") traj = reference::rk4(*ode, cfg.eval.rk4_step);
      for (Eigen::Index j = 0; j < batches[a].x.cols(); ++j) {
        const double t = batches[a].x(0, j);
        h.t.push_back(t);
        h.y_nn.push_back(cap.val[a][comp][static_cast<std::size_t>(j)]);
        h.y_oracle.push_back(traj ? traj->at(t)[comp]
                                  : reference::flame_implicit_solution(t, h.param, cfg.rho));
      }
      h.re_percent = reference::relative_error(h.y_oracle, h.y_nn);
      h.rms_percent = reference::rms(h.re_percent);
      h.max_re_percent = *std::max_element(h.re_percent.begin(), h.re_percent.end());
      rep.heads.push_back(std::move(h));
    }
    return rep;
  }

  // EFE: residual norms and the recovered V(phi) per head.
  const std::size_t vg = model.groups.size() - 1;
  const auto shift = problem.input_shift();
  const auto scale = problem.input_scale();
  for (std::size_t a = 0; a < batches.size(); ++a) {
    EfeHeadReport h;
    h.param = batches[a].param;
    for (const auto& r : cap.res[a]) {
      h.residual_rms.push_back(reference::rms(r));
    }
    const auto [lo_it, hi_it] = std::minmax_element(cap.phi[a].begin(), cap.phi[a].end());
    const double lo = *lo_it;
    const double hi = *hi_it > lo ? *hi_it : lo + 1.0;
    const std::size_t np = cfg.eval.v_points;
    Matrix vx(2, np);
    for (std::size_t k = 0; k < np; ++k) {
      vx(0, k) = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(np - 1);
      vx(1, k) = (h.param - shift.back()) / scale.back();
    }
    const std::size_t d0[] = {0};
    BatchPass bp, hp;
    const Jet lat = bp.forward(model.groups[vg].body, Jet::seeded(vx, d0));
    const Jet vo = hp.forward(model.groups[vg].heads[a], lat);
    for (std::size_t k = 0; k < np; ++k) {
      h.phi.push_back(vx(0, k));
      h.v.push_back(vo.value()(0, k));
      h.dv.push_back(vo.tangent(0)(0, k));
    }
    rep.efe.push_back(std::move(h));
  }
  return rep;
}

// ---------------------------------------------------------------- ablation

double AblationResult::median_rms(bool ur) const {
  std::vector<double> v;
  for (const auto& r : runs) {
    if (r.ur == ur) v.push_back(r.tl_rms_percent);
  }
  return median(v);
}

double AblationResult::win_rate() const {
  std::size_t wins = 0, seeds = 0;
  for (std::size_t i = 0; i + 1 < runs.size(); i += 2) {
    ++seeds;
    if (runs[i].tl_rms_percent <= runs[i + 1].tl_rms_percent) ++wins;
  }
  return seeds ? static_cast<double>(wins) / static_cast<double>(seeds) : 0.0;
}

bool AblationResult::sqrtg_lower_everywhere() const {
  for (std::size_t i = 0; i + 1 < runs.size(); i += 2) {
    if (!(runs[i].sqrtg_mean < runs[i + 1].sqrtg_mean)) return false;
  }
  return !runs.empty();
}

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << "seed,tl_rms_ur,tl_rms_noreg,sqrtg_mean_ur,sqrtg_mean_noreg,ur_better,"
        "median_tl_rms_ur,median_tl_rms_noreg,win_rate\n";
  for (std::size_t i = 0; i + 1 < runs.size(); i += 2) {
    const auto& u = runs[i];
    const auto& n = runs[i + 1];
    os << u.seed << ',' << format_double(u.tl_rms_percent) << ','
       << format_double(n.tl_rms_percent) << ',' << format_double(u.sqrtg_mean) << ','
       << format_double(n.sqrtg_mean) << ',' << (u.tl_rms_percent <= n.tl_rms_percent ? 1 : 0)
       << ",,,\n";
  }
  os << "all,,,,,," << format_double(median_rms(true)) << ',' << format_double(median_rms(false))
     << ',' << format_double(win_rate()) << '\n';
  return os.str();
}

AblationResult ablate(const config::TrainConfig& cfg, std::size_t seeds, std::size_t jobs,
                      const std::function<void(const std::string&)>& log) {
  if (seeds == 0) {
    throw ConfigError("ablate needs at least one seed");
  }
  if (!cfg.transfer.param) {
    throw ConfigError("ablate needs transfer.param in the config");
  }
  AblationResult result;
  result.runs.resize(2 * seeds);
  std::mutex log_mutex;
  auto job = [&](std::size_t idx) {
    config::TrainConfig c = cfg;
    c.seed = cfg.seed + idx / 2;
    c.ur.enabled = idx % 2 == 0;
    c.jr.enabled = false;
    const auto problem = config::make_problem(c);
    AblationRun run;
    run.seed = c.seed;
    run.ur = c.ur.enabled;
    auto body = train_body(c, *problem);
    run.body = std::move(body.record);
    const auto grid = problem->grid(body.model.family, c.eval.points);
    run.sqrtg_mean = pool(sqrtg_stats(body.model, *problem, grid)).mean;
    auto tl = transfer(body.model, *c.transfer.param, c, *problem);
    run.transfer = std::move(tl.record);
    run.tl_rms_percent = evaluate(tl.model, *problem, c, c.eval.oracle).rms_percent();
    if (log) {
      std::lock_guard<std::mutex> lock(log_mutex);
      std::ostringstream os;
      os << "seed " << run.seed << (run.ur ? " ur" : " noreg") << ": tl_rms "
         << run.tl_rms_percent << "% sqrtg_mean " << run.sqrtg_mean;
      log(os.str());
    }
    result.runs[idx] = std::move(run);
  };
  const std::size_t total = 2 * seeds;
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, total));
  if (workers == 1) {
    for (std::size_t i = 0; i < total; ++i) job(i);
    return result;
  }
  std::vector<std::thread> pool_threads;
  std::mutex next_mutex;
  std::size_t next = 0;
  std::exception_ptr failure;
  for (std::size_t w = 0; w < workers; ++w) {
    pool_threads.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(next_mutex);
          if (next >= total || failure) return;
          i = next++;
        }
        try {
          job(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(next_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool_threads) t.join();
  if (failure) std::rethrow_exception(failure);
  return result;
}

}  // namespace upinn::trainer
