#include <doctest.h>

#include <cmath>

#include "upinn/checkpoint.hpp"
#include "upinn/config.hpp"
#include "upinn/error.hpp"
#include "upinn/trainer.hpp"

using namespace upinn;

namespace {

config::TrainConfig tiny(const std::string& problem, const std::string& extra = "") {
  std::string doc = R"({"problem": ")" + problem + R"(", "seed": 3, "epochs": 12,
    "body": {"hidden": [6], "latent": 4}, "head": {"hidden": [5]},
    "sampler": {"points": 7},
    "ur": {"enabled": true, "lambda": 0.01, "every": 4})";
  if (problem == "efe") {
    doc += R"(, "heads": [3.0, 2.0], "problem_options": {"bundle_points": 2},
      "free_body": {"hidden": [4], "latent": 3}, "free_head": {"hidden": [3]},
      "eval": {"efe_u_points": 5, "v_points": 4})";
  } else {
    doc += R"(, "eval": {"points": 20})";
  }
  doc += extra + "}";
  return config::parse_text(doc);
}

std::vector<double*> trainable(nn::MultiHeadModel& m) {
  std::vector<double*> out;
  for (auto& g : m.groups) {
    if (!g.body.frozen())
      for (double& v : g.body.params()) out.push_back(&v);
    for (auto& h : g.heads)
      if (!h.frozen())
        for (double& v : h.params()) out.push_back(&v);
  }
  return out;
}

void check_gradient(const config::TrainConfig& cfg, bool metric) {
  const auto problem = config::make_problem(cfg);
  auto model = trainer::build_model(cfg, *problem);
  problems::Rng rng(1);
  const auto batches = problem->sample(model.family, cfg.sampler, rng);
  const auto ev = trainer::loss_and_grad(model, *problem, batches, cfg, metric, true);
  auto ptrs = trainable(model);
  REQUIRE(ptrs.size() == ev.grad.size());
  double scale = 0.0;
  for (double g : ev.grad) scale = std::max(scale, std::abs(g));
  std::size_t bad = 0;
  for (std::size_t i = 0; i < ptrs.size(); i += 3) {
    const double keep = *ptrs[i];
    const double h = 1e-6;
    *ptrs[i] = keep + h;
    const double up = trainer::loss_and_grad(model, *problem, batches, cfg, metric, false).total;
    *ptrs[i] = keep - h;
    const double dn = trainer::loss_and_grad(model, *problem, batches, cfg, metric, false).total;
    *ptrs[i] = keep;
    const double fd = (up - dn) / (2 * h);
    if (std::abs(fd - ev.grad[i]) > 1e-6 * std::max(scale, 1e-3) + 1e-5 * std::abs(fd)) {
      ++bad;
      MESSAGE("param " << i << " fd " << fd << " ad " << ev.grad[i]);
    }
  }
  CHECK(bad == 0);
}

}  // namespace

TEST_CASE("training gradient matches finite differences") {
  for (const char* p : {"flame", "vdp", "efe"}) {
    CAPTURE(p);
    check_gradient(tiny(p), false);
    check_gradient(tiny(p), true);
    check_gradient(tiny(p, R"(, "ur": {"enabled": false}, "jr": {"enabled": true, "lambda": 0.02})"),
                   true);
  }
}

TEST_CASE("frozen bodies get no gradient but heads still train") {
  const auto cfg = tiny("vdp");
  const auto problem = config::make_problem(cfg);
  auto model = trainer::build_model(cfg, *problem);
  for (auto& g : model.groups) nn::freeze(g.body);
  problems::Rng rng(1);
  const auto b = problem->sample(model.family, cfg.sampler, rng);
  const auto ev = trainer::loss_and_grad(model, *problem, b, cfg, true, true);
  std::size_t heads = 0;
  for (const auto& g : model.groups)
    for (const auto& h : g.heads) heads += h.params().size();
  CHECK(ev.grad.size() == heads);
}

TEST_CASE("loss additivity and record layout") {
  for (const char* p : {"flame", "vdp", "efe"}) {
    const auto cfg = tiny(p);
    const auto problem = config::make_problem(cfg);
    const auto res = trainer::train_body(cfg, *problem);
    REQUIRE(res.record.rows.size() == cfg.epochs);
    for (const auto& r : res.record.rows) {
      double s = r.l_ur;
      for (double v : r.l_de) s += v;
      CHECK(std::abs(s - r.l_tot) <= 1e-12 * std::max(1.0, std::abs(r.l_tot)));
      CHECK(r.l_de.size() == cfg.heads.size());
      const bool metric = r.epoch % cfg.ur.every == 0;
      CHECK(r.sqrtg.has_value() == metric);
      if (!metric) CHECK(r.l_ur == 0.0);
      if (metric) CHECK(r.l_ur > 0.0);
    }
    const auto csv = res.record.to_csv();
    CHECK(csv.rfind("epoch,lr,l_de_head_0,", 0) == 0);
    CHECK(csv.find("l_ur,l_tot,sqrtg_min,sqrtg_mean,sqrtg_max\n") != std::string::npos);
  }
}

TEST_CASE("zero epochs gives the initialization") {
  auto cfg = tiny("flame");
  cfg.epochs = 0;
  const auto problem = config::make_problem(cfg);
  const auto res = trainer::train_body(cfg, *problem);
  const auto init = trainer::build_model(cfg, *problem);
  CHECK(res.record.rows.empty());
  for (std::size_t g = 0; g < init.groups.size(); ++g) {
    CHECK(nn::parameter_hash(res.model.groups[g].body) ==
          nn::parameter_hash(init.groups[g].body));
  }
}

TEST_CASE("UR disabled and lambda = 0 train identically") {
  auto off = tiny("vdp");
  off.ur.enabled = false;
  auto zero = tiny("vdp");
  zero.ur.lambda = 0.0;
  const auto problem = config::make_problem(off);
  const auto a = trainer::train_body(off, *problem);
  const auto b = trainer::train_body(zero, *problem);
  CHECK(a.record.to_csv() == b.record.to_csv());
  for (std::size_t g = 0; g < a.model.groups.size(); ++g) {
    CHECK(nn::parameter_hash(a.model.groups[g].body) == nn::parameter_hash(b.model.groups[g].body));
  }
}

TEST_CASE("seed determinism") {
  const auto cfg = tiny("efe");
  const auto problem = config::make_problem(cfg);
  const auto a = trainer::train_body(cfg, *problem);
  const auto b = trainer::train_body(cfg, *problem);
  CHECK(a.record.to_csv() == b.record.to_csv());
  CHECK(a.record.metrics_csv() == b.record.metrics_csv());
  auto other = cfg;
  other.seed = 4;
  CHECK(trainer::train_body(other, *problem).record.to_csv() != a.record.to_csv());
}

TEST_CASE("checkpoint hook cadence") {
  auto cfg = tiny("flame");
  cfg.checkpoint_every = 5;
  const auto problem = config::make_problem(cfg);
  std::vector<std::size_t> seen;
  trainer::Hooks hooks;
  hooks.checkpoint = [&](const nn::MultiHeadModel&, std::size_t e, const std::string& rng) {
    seen.push_back(e);
    CHECK_FALSE(rng.empty());
  };
  trainer::train_body(cfg, *problem, hooks);
  CHECK(seen == std::vector<std::size_t>{5, 10, 12});
}

TEST_CASE("transfer keeps bodies bitwise and trains only the new head") {
  for (const char* p : {"flame", "vdp", "efe"}) {
    auto cfg = tiny(p);
    cfg.transfer.epochs = 6;
    const auto problem = config::make_problem(cfg);
    const auto body = trainer::train_body(cfg, *problem);
    const double param = std::string(p) == "flame" ? 0.018 : std::string(p) == "vdp" ? 1.75 : 1.2;
    const std::string before = checkpoint::serialize({"body", {}, 0, body.model, 0, "", {}});
    const auto tl = trainer::transfer(body.model, param, cfg, *problem);
    CHECK(checkpoint::serialize({"body", {}, 0, body.model, 0, "", {}}) == before);
    REQUIRE(tl.model.groups.size() == body.model.groups.size());
    CHECK(tl.model.family == std::vector<double>{param});
    for (std::size_t g = 0; g < tl.model.groups.size(); ++g) {
      CHECK(tl.model.groups[g].body.frozen());
      CHECK(nn::parameter_hash(tl.model.groups[g].body) ==
            nn::parameter_hash(body.model.groups[g].body));
      CHECK(tl.model.groups[g].heads.size() == 1);
    }
    CHECK(tl.record.rows.size() == 6);
    for (const auto& r : tl.record.rows) {
      CHECK(r.l_ur == 0.0);
      CHECK_FALSE(r.sqrtg.has_value());
    }

    auto zero = cfg;
    zero.transfer.epochs = 0;
    const auto z = trainer::transfer(body.model, param, zero, *problem);
    CHECK(z.record.rows.empty());
    CHECK(nn::parameter_hash(z.model.groups[0].body) ==
          nn::parameter_hash(body.model.groups[0].body));
  }
}

TEST_CASE("evaluate") {
  const auto cfg = tiny("flame");
  const auto problem = config::make_problem(cfg);
  const auto res = trainer::train_body(cfg, *problem);
  const auto rep = trainer::evaluate(res.model, *problem, cfg, "rk45");
  REQUIRE(rep.heads.size() == 4);
  CHECK(rep.heads[0].t.size() == 20);
  CHECK(rep.rms_percent() >= rep.heads[1].rms_percent);
  CHECK(rep.max_re_percent() >= rep.rms_percent());
  CHECK(rep.sqrtg.size() == 1);
  CHECK(rep.lipschitz >= 0.0);
  CHECK(rep.heads[0].plot_csv().rfind("t,y_nn,y_oracle,re_percent\n", 0) == 0);
  const auto j = rep.to_json();
  CHECK(j.contains("rms_percent"));
  CHECK(j.contains("max_re_percent"));
  const auto imp = trainer::evaluate(res.model, *problem, cfg, "implicit");
  CHECK(std::abs(imp.rms_percent() - rep.rms_percent()) < 1e-4);

  const auto vcfg = tiny("vdp");
  const auto vp = config::make_problem(vcfg);
  const auto vm = trainer::build_model(vcfg, *vp);
  CHECK_THROWS_AS(trainer::evaluate(vm, *vp, vcfg, "implicit"), ConfigError);

  const auto ecfg = tiny("efe");
  const auto ep = config::make_problem(ecfg);
  const auto em = trainer::build_model(ecfg, *ep);
  const auto er = trainer::evaluate(em, *ep, ecfg, "rk45");
  REQUIRE(er.efe.size() == 2);
  CHECK(er.efe[0].residual_rms.size() == 7);
  CHECK(er.efe[0].phi.size() == 4);
  CHECK(er.efe[0].v_table_csv().rfind("phi,V,dV\n", 0) == 0);
  CHECK(er.sqrtg.size() == 6);
}

TEST_CASE("a perfect copy of the oracle scores zero") {
  const auto problem = problems::make_flame();
  const auto tr = reference::rk45(*problem->ode(0.02), 1e-9, 1e-12);
  std::vector<double> y;
  for (const auto& v : tr.y) y.push_back(v[0]);
  CHECK(reference::rms(reference::relative_error(y, y)) == 0.0);
}

TEST_CASE("numerical abort names the epoch") {
  auto cfg = tiny("flame");
  cfg.optim.adam.lr = 1e200;
  const auto problem = config::make_problem(cfg);
  try {
    trainer::train_body(cfg, *problem);
    FAIL("expected NumericalAbort");
  } catch (const NumericalAbort& e) {
    CHECK(std::string(e.what()).find("epoch " + std::to_string(e.epoch)) != std::string::npos);
  }
}

TEST_CASE("ablation bookkeeping") {
  auto cfg = tiny("flame", R"(, "transfer": {"param": 0.016, "epochs": 3})");
  cfg.epochs = 4;
  const auto a = trainer::ablate(cfg, 2, 1);
  REQUIRE(a.runs.size() == 4);
  CHECK(a.runs[0].ur);
  CHECK_FALSE(a.runs[1].ur);
  CHECK(a.runs[0].seed == a.runs[1].seed);
  CHECK(a.runs[2].seed == cfg.seed + 1);
  const auto csv = a.to_csv();
  CHECK(csv.find("median_tl_rms_ur") != std::string::npos);
  CHECK(csv.find("win_rate") != std::string::npos);
  const auto b = trainer::ablate(cfg, 2, 2);
  CHECK(b.to_csv() == csv);
  CHECK_THROWS_AS(trainer::ablate(cfg, 0, 1), ConfigError);
}
