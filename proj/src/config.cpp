#include "upinn/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "upinn/error.hpp"

namespace upinn::config {

namespace {

// Reads one object, remembering which keys were consumed so leftovers can
// be reported as unknown.
class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) {
      throw ConfigError(where() + " must be an object");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  const json& at(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  std::string child(const std::string& key) const { return path_ + "." + key; }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number()) throw ConfigError(child(key) + " must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(child(key) + " must be finite");
    return x;
  }

  std::uint64_t uint(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError(child(key) + " must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) throw ConfigError(child(key) + " must be true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_string()) throw ConfigError(child(key) + " must be a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_array()) throw ConfigError(child(key) + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(child(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_array()) throw ConfigError(child(key) + " must be an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 1) {
        throw ConfigError(child(key) + " entries must be integers >= 1");
      }
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) {
        throw ConfigError("unknown key " + child(k));
      }
    }
  }

 private:
  std::string where() const { return path_.empty() ? "document" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

struct Defaults {
  double rho;
  std::vector<std::size_t> body_hidden;
  std::size_t latent;
  std::vector<std::size_t> head_hidden;
  double lr;
  double decay_pct;
  std::size_t period;
  double ur_lambda;
  std::size_t ur_every;
  double tl_lr;
  double tl_decay_pct;
  std::size_t tl_period;
  std::size_t points;
};

Defaults defaults_for(const std::string& problem) {
  if (problem == "flame") {
    return {300.0, {64, 64, 64}, 64, {32, 32}, 1e-3, 5.0, 15000, 5e-7, 100, 5e-3, 2.5, 2500, 100};
  }
  if (problem == "vdp") {
    return {10.0, {64, 64, 64, 64}, 128, {64, 64}, 1e-3, 2.5, 15000, 4e-5, 100, 1e-3, 4.0, 70000,
            100};
  }
  if (problem == "efe") {
    return {0.0, {32, 32, 32, 32}, 128, {16, 16}, 1e-3, 1.5, 5000, 5e-8, 500, 1e-3, 1.5, 5000, 16};
  }
  throw ConfigError("problem must be one of flame, vdp, efe (got '" + problem + "')");
}

NetConfig read_net(Reader& parent, const std::string& key, NetConfig fallback, bool body) {
  if (!parent.has(key)) {
    return fallback;
  }
  Reader r(parent.at(key), parent.child(key));
  NetConfig n = fallback;
  n.hidden = r.sizes("hidden", fallback.hidden);
  if (body) {
    n.latent = r.uint("latent", fallback.latent);
    if (n.latent == 0) throw ConfigError(r.child("latent") + " must be >= 1");
  }
  const std::string act = r.string("activation", nn::to_string(fallback.activation));
  try {
    n.activation = nn::parse_activation(act);
  } catch (const std::exception&) {
    throw ConfigError(r.child("activation") + " must be tanh or silu");
  }
  r.finish();
  return n;
}

OptimConfig read_optim(Reader& parent, const std::string& opt_key, const std::string& sched_key,
                       OptimConfig fallback) {
  OptimConfig o = fallback;
  if (parent.has(opt_key)) {
    Reader r(parent.at(opt_key), parent.child(opt_key));
    o.adam.lr = r.number("lr", o.adam.lr);
    o.adam.beta1 = r.number("beta1", o.adam.beta1);
    o.adam.beta2 = r.number("beta2", o.adam.beta2);
    o.adam.eps = r.number("eps", o.adam.eps);
    o.adam.clip_norm = r.number("clip_norm", o.adam.clip_norm);
    r.finish();
  }
  if (parent.has(sched_key)) {
    Reader r(parent.at(sched_key), parent.child(sched_key));
    o.decay_pct = r.number("decay_pct", o.decay_pct);
    o.period = r.uint("period", o.period);
    r.finish();
  }
  if (!(o.adam.lr > 0.0)) throw ConfigError(parent.child(opt_key) + ".lr must be > 0");
  if (o.adam.beta1 < 0.0 || o.adam.beta1 >= 1.0 || o.adam.beta2 < 0.0 || o.adam.beta2 >= 1.0) {
    throw ConfigError(parent.child(opt_key) + ": betas must lie in [0, 1)");
  }
  if (!(o.adam.eps > 0.0)) throw ConfigError(parent.child(opt_key) + ".eps must be > 0");
  if (o.adam.clip_norm < 0.0) throw ConfigError(parent.child(opt_key) + ".clip_norm must be >= 0");
  if (o.decay_pct < 0.0 || o.decay_pct >= 100.0) {
    throw ConfigError(parent.child(sched_key) + ".decay_pct must lie in [0, 100)");
  }
  if (o.period == 0) throw ConfigError(parent.child(sched_key) + ".period must be >= 1");
  return o;
}

RegConfig read_reg(Reader& parent, const std::string& key, RegConfig fallback) {
  RegConfig g = fallback;
  if (parent.has(key)) {
    Reader r(parent.at(key), parent.child(key));
    g.enabled = r.boolean("enabled", g.enabled);
    g.lambda = r.number("lambda", g.lambda);
    g.every = r.uint("every", g.every);
    r.finish();
  }
  if (g.lambda < 0.0) throw ConfigError(parent.child(key) + ".lambda must be >= 0");
  if (g.every == 0) throw ConfigError(parent.child(key) + ".every must be >= 1");
  return g;
}

json net_json(const NetConfig& n, bool body) {
  json j;
  j["hidden"] = n.hidden;
  if (body) j["latent"] = n.latent;
  j["activation"] = nn::to_string(n.activation);
  return j;
}

json optim_json(const OptimConfig& o) {
  return {{"lr", o.adam.lr},
          {"beta1", o.adam.beta1},
          {"beta2", o.adam.beta2},
          {"eps", o.adam.eps},
          {"clip_norm", o.adam.clip_norm}};
}

json sched_json(const OptimConfig& o) {
  return {{"decay_pct", o.decay_pct}, {"period", o.period}};
}

}  // namespace

TrainConfig parse(const json& doc) {
  Reader r(doc, "");
  TrainConfig c;
  if (!r.has("problem")) {
    throw ConfigError("missing required key .problem");
  }
  c.problem = r.string("problem", "");
  const Defaults d = defaults_for(c.problem);
  const bool efe = c.problem == "efe";

  c.name = r.string("name", c.problem + "_body");
  if (c.name.empty() || c.name.find('/') != std::string::npos) {
    throw ConfigError(".name must be a non-empty file stem");
  }
  c.seed = r.uint("seed", 0);
  c.epochs = r.uint("epochs", 0);
  c.output_dir = r.string("output_dir", "out/" + c.name);
  if (c.output_dir.empty()) throw ConfigError(".output_dir must not be empty");
  c.reduction = Reduction::Mean;
  {
    const std::string red = r.string("loss_reduction", "mean");
    if (red == "mean") {
      c.reduction = Reduction::Mean;
    } else if (red == "sum") {
      c.reduction = Reduction::Sum;
    } else {
      throw ConfigError(".loss_reduction must be mean or sum");
    }
  }
  c.checkpoint_every = r.uint("checkpoint_every", 10000);
  if (c.checkpoint_every == 0) throw ConfigError(".checkpoint_every must be >= 1");
  c.record_every = r.uint("record_every", 1);
  if (c.record_every == 0) throw ConfigError(".record_every must be >= 1");

  // problem-specific block
  c.rho = d.rho;
  if (r.has("problem_options")) {
    Reader p(r.at("problem_options"), ".problem_options");
    if (efe) {
      c.efe.bundle_points = p.uint("bundle_points", c.efe.bundle_points);
      c.efe.pt_lo = p.number("pt_lo", c.efe.pt_lo);
      c.efe.pt_hi = p.number("pt_hi", c.efe.pt_hi);
      if (p.has("bundle_csv")) {
        const auto& m = p.at("bundle_csv");
        if (!m.is_object()) throw ConfigError(".problem_options.bundle_csv must map phi_M to paths");
        for (const auto& [k, v] : m.items()) {
          double phi = 0.0;
          try {
            std::size_t used = 0;
            phi = std::stod(k, &used);
            if (used != k.size()) throw std::invalid_argument(k);
          } catch (const std::logic_error&) {
            throw ConfigError(".problem_options.bundle_csv keys must be phi_M values");
          }
          if (!v.is_string()) throw ConfigError(".problem_options.bundle_csv values must be paths");
          c.efe.bundle_csv.emplace_back(phi, v.get<std::string>());
        }
      }
      if (c.efe.bundle_points == 0) {
        throw ConfigError(".problem_options.bundle_points must be >= 1");
      }
      if (!(c.efe.pt_lo > 0.0) || c.efe.pt_hi < c.efe.pt_lo) {
        throw ConfigError(".problem_options needs 0 < pt_lo <= pt_hi");
      }
    } else {
      c.rho = p.number("rho", c.rho);
      if (!(c.rho > 0.0)) throw ConfigError(".problem_options.rho must be > 0");
    }
    p.finish();
  }

  const auto problem = make_problem(c);
  const auto fam = problem->family();
  c.heads = r.numbers("heads", fam.grid);
  if (c.heads.empty()) throw ConfigError(".heads must not be empty");
  {
    std::set<double> uniq(c.heads.begin(), c.heads.end());
    if (uniq.size() != c.heads.size()) throw ConfigError(".heads must be distinct");
  }

  c.sampler.points = d.points;
  if (c.problem == "flame") c.sampler.domain_param = fam.lo;
  if (r.has("sampler")) {
    Reader s(r.at("sampler"), ".sampler");
    c.sampler.points = s.uint("points", c.sampler.points);
    c.sampler.noise = s.number("noise", c.sampler.noise);
    c.sampler.jitter = s.boolean("jitter", c.sampler.jitter);
    if (s.has("domain_param")) {
      if (s.at("domain_param").is_null()) {
        c.sampler.domain_param.reset();
      } else {
        c.sampler.domain_param = s.number("domain_param", 0.0);
      }
    }
    s.finish();
  }
  if (c.sampler.points < 2) throw ConfigError(".sampler.points must be >= 2");
  if (c.sampler.noise < 0.0 || c.sampler.noise > 1.0) {
    throw ConfigError(".sampler.noise must lie in [0, 1]");
  }
  for (double h : c.heads) {
    (void)problem->domain(h);  // validates the family value
  }
  if (c.sampler.domain_param) (void)problem->domain(*c.sampler.domain_param);

  c.body = read_net(r, "body", {d.body_hidden, d.latent, nn::Activation::Tanh}, true);
  c.head = read_net(r, "head", {d.head_hidden, 0, nn::Activation::Tanh}, false);
  if (efe) {
    c.free_body = read_net(r, "free_body", {{32, 32, 32}, 128, nn::Activation::Silu}, true);
    c.free_head = read_net(r, "free_head", {{64, 64}, 0, nn::Activation::Silu}, false);
  } else if (r.has("free_body") || r.has("free_head")) {
    throw ConfigError("free_body/free_head only apply to the efe problem");
  }

  OptimConfig base;
  base.adam.lr = d.lr;
  base.decay_pct = d.decay_pct;
  base.period = d.period;
  c.optim = read_optim(r, "optimizer", "scheduler", base);

  c.ur = read_reg(r, "ur", {false, d.ur_lambda, d.ur_every});
  c.jr = read_reg(r, "jr", {false, 0.0, d.ur_every});
  if (c.ur.enabled && c.jr.enabled) {
    throw ConfigError("ur and jr cannot both be enabled");
  }

  OptimConfig tl;
  tl.adam.lr = d.tl_lr;
  tl.decay_pct = d.tl_decay_pct;
  tl.period = d.tl_period;
  c.transfer.optim = tl;
  if (r.has("transfer")) {
    Reader t(r.at("transfer"), ".transfer");
    if (t.has("param")) c.transfer.param = t.number("param", 0.0);
    c.transfer.epochs = t.uint("epochs", 0);
    c.transfer.optim = read_optim(t, "optimizer", "scheduler", tl);
    t.finish();
    if (c.transfer.param) (void)problem->domain(*c.transfer.param);
  }

  if (r.has("eval")) {
    Reader e(r.at("eval"), ".eval");
    c.eval.points = e.uint("points", c.eval.points);
    c.eval.oracle = e.string("oracle", c.eval.oracle);
    c.eval.rtol = e.number("rtol", c.eval.rtol);
    c.eval.atol = e.number("atol", c.eval.atol);
    c.eval.rk4_step = e.number("rk4_step", c.eval.rk4_step);
    c.eval.efe_u_points = e.uint("efe_u_points", c.eval.efe_u_points);
    c.eval.v_points = e.uint("v_points", c.eval.v_points);
    e.finish();
  }
  if (c.eval.points < 2 || c.eval.efe_u_points < 2 || c.eval.v_points < 2) {
    throw ConfigError(".eval point counts must be >= 2");
  }
  if (c.eval.oracle != "rk45" && c.eval.oracle != "rk4" && c.eval.oracle != "implicit") {
    throw ConfigError(".eval.oracle must be rk45, rk4 or implicit");
  }
  if (!(c.eval.rtol > 0.0) || !(c.eval.atol > 0.0) || !(c.eval.rk4_step > 0.0)) {
    throw ConfigError(".eval tolerances and step must be > 0");
  }

  r.finish();

  // Architecture sanity.
  body_spec(c, problem->input_dim()).validate();
  head_spec(c, c.body.latent).validate();
  if (efe) {
    free_body_spec(c).validate();
    free_head_spec(c).validate();
  }
  return c;
}

TrainConfig parse_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return parse(doc);
}

TrainConfig load(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw ConfigError("cannot open config " + path);
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str());
}

json to_json(const TrainConfig& c) {
  json j;
  j["name"] = c.name;
  j["problem"] = c.problem;
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["output_dir"] = c.output_dir;
  j["heads"] = c.heads;
  j["loss_reduction"] = c.reduction == Reduction::Mean ? "mean" : "sum";
  j["checkpoint_every"] = c.checkpoint_every;
  j["record_every"] = c.record_every;
  if (c.problem == "efe") {
    json csv = json::object();
    for (const auto& [phi, path] : c.efe.bundle_csv) {
      std::ostringstream k;
      k.precision(17);
      k << phi;
      csv[k.str()] = path;
    }
    j["problem_options"] = {{"bundle_points", c.efe.bundle_points},
                            {"pt_lo", c.efe.pt_lo},
                            {"pt_hi", c.efe.pt_hi},
                            {"bundle_csv", csv}};
  } else {
    j["problem_options"] = {{"rho", c.rho}};
  }
  j["sampler"] = {{"points", c.sampler.points},
                  {"noise", c.sampler.noise},
                  {"jitter", c.sampler.jitter},
                  {"domain_param", c.sampler.domain_param ? json(*c.sampler.domain_param)
                                                          : json(nullptr)}};
  j["body"] = net_json(c.body, true);
  j["head"] = net_json(c.head, false);
  if (c.problem == "efe") {
    j["free_body"] = net_json(c.free_body, true);
    j["free_head"] = net_json(c.free_head, false);
  }
  j["optimizer"] = optim_json(c.optim);
  j["scheduler"] = sched_json(c.optim);
  j["ur"] = {{"enabled", c.ur.enabled}, {"lambda", c.ur.lambda}, {"every", c.ur.every}};
  j["jr"] = {{"enabled", c.jr.enabled}, {"lambda", c.jr.lambda}, {"every", c.jr.every}};
  json t = {{"epochs", c.transfer.epochs},
            {"optimizer", optim_json(c.transfer.optim)},
            {"scheduler", sched_json(c.transfer.optim)}};
  if (c.transfer.param) t["param"] = *c.transfer.param;
  j["transfer"] = t;
  j["eval"] = {{"points", c.eval.points},       {"oracle", c.eval.oracle},
               {"rtol", c.eval.rtol},           {"atol", c.eval.atol},
               {"rk4_step", c.eval.rk4_step},   {"efe_u_points", c.eval.efe_u_points},
               {"v_points", c.eval.v_points}};
  return j;
}

std::uint64_t hash(const TrainConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::string> warnings(const TrainConfig& c) {
  std::vector<std::string> w;
  auto check = [&](const RegConfig& g, const char* what) {
    if (g.enabled && (g.lambda < 1e-8 || g.lambda > 5e-5)) {
      std::ostringstream os;
      os << what << ".lambda = " << g.lambda << " is outside [1e-8, 5e-5]";
      w.push_back(os.str());
    }
  };
  check(c.ur, "ur");
  check(c.jr, "jr");
  return w;
}

std::unique_ptr<problems::Problem> make_problem(const TrainConfig& c) {
  if (c.problem == "flame") return problems::make_flame({c.rho});
  if (c.problem == "vdp") return problems::make_vdp({c.rho});
  if (c.problem == "efe") return problems::make_efe(c.efe);
  throw ConfigError("unknown problem '" + c.problem + "'");
}

nn::MLPSpec body_spec(const TrainConfig& c, std::size_t input_dim) {
  return {input_dim, c.body.hidden, c.body.latent, c.body.activation, false};
}

nn::MLPSpec head_spec(const TrainConfig& c, std::size_t latent) {
  return {latent, c.head.hidden, 1, c.head.activation, true};
}

nn::MLPSpec free_body_spec(const TrainConfig& c) {
  return {2, c.free_body.hidden, c.free_body.latent, c.free_body.activation, false};
}

nn::MLPSpec free_head_spec(const TrainConfig& c) {
  return {c.free_body.latent, c.free_head.hidden, 1, c.free_head.activation, true};
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ULL + 1));
}

}  // namespace upinn::config
