#include "upinn/problems.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "upinn/error.hpp"

namespace upinn::problems {

using ad::Var;

double toy_entropy(double T, double phi_m) {
  if (!(T > 0.0) || !(phi_m > 0.0)) {
    throw DomainError("toy_entropy needs T > 0 and phi_M > 0");
  }
  const double pt = std::numbers::pi * T;
  return std::numbers::pi * pt * pt * pt * (1.0 + (pt - 1.0) * (pt - 1.0) / (2.0 * phi_m * phi_m));
}

std::vector<BundlePoint> toy_bundle(double phi_m, std::size_t n, double pt_lo, double pt_hi) {
  if (n == 0 || !(pt_lo > 0.0) || pt_hi < pt_lo) {
    throw ConfigError("toy bundle needs n >= 1 and 0 < pt_lo <= pt_hi");
  }
  std::vector<BundlePoint> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pt = n == 1 ? 0.5 * (pt_lo + pt_hi)
                             : pt_lo + (pt_hi - pt_lo) * static_cast<double>(i) /
                                           static_cast<double>(n - 1);
    out[i].index = i;
    out[i].T = pt / std::numbers::pi;
    out[i].S = toy_entropy(out[i].T, phi_m);
  }
  return out;
}

std::vector<BundlePoint> parse_bundle_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto trim = [](std::string s) {
    s.erase(std::remove_if(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); }),
            s.end());
    return s;
  };
  if (!std::getline(in, line) || trim(line) != "i,T,S") {
    throw ConfigError("bundle CSV must start with header i,T,S");
  }
  std::vector<BundlePoint> out;
  std::set<std::size_t> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    std::istringstream row(line);
    std::string a, b, c, extra;
    if (!std::getline(row, a, ',') || !std::getline(row, b, ',') || !std::getline(row, c, ',') ||
        std::getline(row, extra, ',')) {
      throw ConfigError("bundle CSV line " + std::to_string(lineno) + ": expected 3 columns");
    }
    BundlePoint p;
    try {
      std::size_t used = 0;
      const long long idx = std::stoll(a, &used);
      if (used != a.size() || idx < 0) {
        throw std::invalid_argument(a);
      }
      p.index = static_cast<std::size_t>(idx);
      p.T = std::stod(b, &used);
      if (used != b.size()) throw std::invalid_argument(b);
      p.S = std::stod(c, &used);
      if (used != c.size()) throw std::invalid_argument(c);
    } catch (const std::logic_error&) {
      throw ConfigError("bundle CSV line " + std::to_string(lineno) + ": malformed number");
    }
    if (!(p.T > 0.0) || !(p.S > 0.0) || !std::isfinite(p.T) || !std::isfinite(p.S)) {
      throw ConfigError("bundle CSV line " + std::to_string(lineno) + ": T and S must be > 0");
    }
    if (!seen.insert(p.index).second) {
      throw ConfigError("bundle CSV line " + std::to_string(lineno) + ": duplicate index");
    }
    out.push_back(p);
  }
  if (out.empty()) {
    throw ConfigError("bundle CSV has no rows");
  }
  std::sort(out.begin(), out.end(),
            [](const BundlePoint& x, const BundlePoint& y) { return x.index < y.index; });
  return out;
}

std::vector<BundlePoint> read_bundle_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw ConfigError("cannot open bundle CSV " + path);
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_bundle_csv(ss.str());
}

std::vector<double> chebyshev_lobatto(std::size_t n) {
  if (n < 2) {
    throw ConfigError("Chebyshev-Lobatto grid needs at least 2 nodes");
  }
  std::vector<double> u(n);
  for (std::size_t k = 0; k < n; ++k) {
    u[k] = 0.5 * (1.0 - std::cos(std::numbers::pi * static_cast<double>(k) /
                                 static_cast<double>(n - 1)));
  }
  u.front() = 0.0;
  u.back() = 1.0;
  return u;
}

std::vector<double> jitter_grid(std::span<const double> base, double noise, double lo, double hi,
                                Rng& rng) {
  std::vector<double> out(base.begin(), base.end());
  if (noise < 0.0) {
    throw ConfigError("sampler noise must be >= 0");
  }
  if (noise == 0.0 || out.empty()) {
    return out;
  }
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double spacing = hi - lo;
    if (k > 0) spacing = std::min(spacing, base[k] - base[k - 1]);
    if (k + 1 < base.size()) spacing = std::min(spacing, base[k + 1] - base[k]);
    out[k] = std::clamp(base[k] + unit(rng) * noise * spacing, lo, hi);
  }
  return out;
}

// ---------------------------------------------------------------- base

std::vector<double> Problem::base_points(double param, std::size_t n) const {
  if (n < 2) {
    throw ConfigError("sampler needs at least 2 points");
  }
  const auto [lo, hi] = domain(param);
  std::vector<double> t(n);
  for (std::size_t k = 0; k < n; ++k) {
    t[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
  }
  t.back() = hi;
  return t;
}

std::vector<HeadBatch> Problem::mesh(std::span<const double> params,
                                     std::span<const double> points) const {
  std::vector<HeadBatch> out;
  for (double p : params) {
    HeadBatch b;
    b.param = p;
    b.x.resize(2, static_cast<Eigen::Index>(points.size()));
    for (std::size_t k = 0; k < points.size(); ++k) {
      b.x(0, static_cast<Eigen::Index>(k)) = points[k];
      b.x(1, static_cast<Eigen::Index>(k)) = p;
    }
    b.tag.assign(points.size(), 0);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<HeadBatch> Problem::sample(std::span<const double> params, const SamplerConfig& cfg,
                                       Rng& rng) const {
  if (params.empty()) {
    throw ConfigError("sample: no family values");
  }
  const double dp = cfg.domain_param.value_or(params.front());
  auto pts = base_points(dp, cfg.points);
  if (cfg.jitter) {
    const auto [lo, hi] = domain(dp);
    pts = jitter_grid(pts, cfg.noise, lo, hi, rng);
  }
  return mesh(params, pts);
}

std::vector<HeadBatch> Problem::grid(std::span<const double> params, std::size_t points) const {
  std::vector<HeadBatch> out;
  for (double p : params) {
    auto b = mesh(std::span<const double>(&p, 1), base_points(p, points));
    out.push_back(std::move(b.front()));
  }
  return out;
}

namespace {

void check_arity(std::span<const Var> a, std::span<const Var> b, std::size_t n, const char* who) {
  if (a.size() != n || b.size() != n) {
    throw DimensionError(std::string(who) + ": wrong number of functions");
  }
}

// ---------------------------------------------------------------- flame

class Flame final : public Problem {
 public:
  explicit Flame(FlameOptions opt) : opt_(opt) {
    if (!(opt_.rho > 0.0)) {
      throw ConfigError("flame: rho must be positive");
    }
  }

  std::string name() const override { return "flame"; }
  std::size_t input_dim() const override { return 2; }
  std::vector<std::string> function_names() const override { return {"y"}; }
  std::size_t residual_count() const override { return 1; }
  FamilyParam family() const override {
    FamilyParam f{"delta", 0.02, 0.04, {}};
    for (int k = 0; k < 4; ++k) {
      f.grid.push_back(0.02 + 0.02 * k / 3.0);
    }
    return f;
  }
  std::vector<double> input_shift() const override { return {0.0, 0.03}; }
  std::vector<double> input_scale() const override {
    return {flame_t_max(0.02, opt_.rho), 0.01};
  }
  std::pair<double, double> domain(double delta) const override {
    if (!(delta > 0.0 && delta < 1.0)) {
      throw DomainError("flame: delta must lie in (0, 1)");
    }
    return {0.0, flame_t_max(delta, opt_.rho)};
  }

  void constrain(const Point& p, std::span<const Var> raw, std::span<const Var> raw_d,
                 std::span<Var> val, std::span<Var> der) const override {
    check_arity(raw, raw_d, 1, "flame");
    auto [y, dy] = flame_constraint(p.x[0], p.param, raw[0], raw_d[0]);
    val[0] = y;
    der[0] = dy;
  }

  void residuals(const Point&, std::span<const Var> val, std::span<const Var> der, const Var*,
                 const Var*, std::span<Var> out) const override {
    out[0] = flame_residual(val[0], der[0], opt_.rho);
  }

  std::optional<reference::OdeProblem> ode(double delta) const override {
    reference::OdeProblem o;
    const double rho = opt_.rho;
    o.rhs = [rho](double, std::span<const double> y, std::span<double> dy) {
      dy[0] = rho * (y[0] * y[0] - y[0] * y[0] * y[0]);
    };
    std::tie(o.t0, o.t1) = domain(delta);
    o.y0 = {delta};
    return o;
  }

 private:
  FlameOptions opt_;
};

// ------------------------------------------------------------ van der Pol

class Vdp final : public Problem {
 public:
  explicit Vdp(VdpOptions opt) : opt_(opt) {}

  std::string name() const override { return "vdp"; }
  std::size_t input_dim() const override { return 2; }
  std::vector<std::string> function_names() const override { return {"x", "y"}; }
  std::size_t residual_count() const override { return 2; }
  FamilyParam family() const override {
    return {"a", 0.0, 1.5, {0.0, 0.375, 0.75, 1.125, 1.5}};
  }
  std::vector<double> input_shift() const override { return {0.0, 0.75}; }
  std::vector<double> input_scale() const override { return {1.0, 0.75}; }
  std::pair<double, double> domain(double) const override { return {0.0, 1.0}; }

  void constrain(const Point& p, std::span<const Var> raw, std::span<const Var> raw_d,
                 std::span<Var> val, std::span<Var> der) const override {
    check_arity(raw, raw_d, 2, "vdp");
    auto c = vdp_constraint(p.x[0], raw[0], raw[1], raw_d[0], raw_d[1]);
    val[0] = c[0];
    val[1] = c[1];
    der[0] = c[2];
    der[1] = c[3];
  }

  void residuals(const Point& p, std::span<const Var> val, std::span<const Var> der, const Var*,
                 const Var*, std::span<Var> out) const override {
    auto [r1, r2] = vdp_residuals(p.param, val[0], val[1], der[0], der[1], opt_.rho);
    out[0] = r1;
    out[1] = r2;
  }

  std::optional<reference::OdeProblem> ode(double a) const override {
    reference::OdeProblem o;
    const double rho = opt_.rho;
    o.rhs = [rho, a](double, std::span<const double> s, std::span<double> ds) {
      ds[0] = rho * s[1];
      ds[1] = rho * (a * (1.0 - s[0] * s[0]) * s[1] - s[0]);
    };
    o.t0 = 0.0;
    o.t1 = 1.0;
    o.y0 = {1.0, 0.0};
    return o;
  }

 private:
  VdpOptions opt_;
};

// -------------------------------------------------------------------- EFE

class Efe final : public Problem {
 public:
  explicit Efe(EfeOptions opt) : opt_(std::move(opt)) {
    if (opt_.bundle_points == 0) {
      throw ConfigError("efe: bundle_points must be >= 1");
    }
  }

  std::string name() const override { return "efe"; }
  // (u, s = i/(N-1), phi_M)
  std::size_t input_dim() const override { return 3; }
  std::vector<std::string> function_names() const override {
    return {"Sigma", "A", "phi", "nu_Sigma", "nu_A", "nu_phi"};
  }
  std::size_t residual_count() const override { return 7; }
  FamilyParam family() const override { return {"phi_M", 1.0, 3.0, {3.0, 2.0, 1.5, 1.08, 1.0}}; }
  std::vector<double> input_shift() const override { return {0.0, 0.0, 2.0}; }
  std::vector<double> input_scale() const override { return {1.0, 1.0, 1.0}; }
  std::pair<double, double> domain(double) const override { return {0.0, 1.0}; }

  const std::vector<BundlePoint>& bundle(double phi_m) const {
    auto it = cache_.find(phi_m);
    if (it != cache_.end()) {
      return it->second;
    }
    std::vector<BundlePoint> b;
    const auto csv = std::find_if(opt_.bundle_csv.begin(), opt_.bundle_csv.end(),
                                  [&](const auto& e) { return e.first == phi_m; });
    if (csv != opt_.bundle_csv.end()) {
      b = read_bundle_csv(csv->second);
    } else {
      b = toy_bundle(phi_m, opt_.bundle_points, opt_.pt_lo, opt_.pt_hi);
    }
    return cache_.emplace(phi_m, std::move(b)).first->second;
  }

  void constrain(const Point& p, std::span<const Var> raw, std::span<const Var> raw_d,
                 std::span<Var> val, std::span<Var> der) const override {
    check_arity(raw, raw_d, kEfeFunctions, "efe");
    const auto& b = bundle(p.param);
    if (p.tag >= b.size()) {
      throw DimensionError("efe: bundle index out of range");
    }
    EfeState<Var> r;
    for (std::size_t k = 0; k < kEfeFunctions; ++k) {
      r.f[k] = raw[k];
      r.df[k] = raw_d[k];
    }
    const auto s = efe_constraint(p.x[0], b[p.tag], r);
    for (std::size_t k = 0; k < kEfeFunctions; ++k) {
      val[k] = s.f[k];
      der[k] = s.df[k];
    }
  }

  std::optional<std::size_t> free_function_argument() const override { return kPhi; }

  void residuals(const Point& p, std::span<const Var> val, std::span<const Var> der,
                 const Var* v, const Var* dv, std::span<Var> out) const override {
    if (v == nullptr || dv == nullptr) {
      throw DimensionError("efe: residuals need the free function V");
    }
    EfeState<Var> s;
    for (std::size_t k = 0; k < kEfeFunctions; ++k) {
      s.f[k] = val[k];
      s.df[k] = der[k];
    }
    const auto r = efe_residuals(p.x[0], s, *v, *dv);
    std::copy(r.begin(), r.end(), out.begin());
  }

 protected:
  std::vector<double> base_points(double, std::size_t n) const override {
    return chebyshev_lobatto(n);
  }

  std::vector<HeadBatch> mesh(std::span<const double> params,
                              std::span<const double> points) const override {
    std::vector<HeadBatch> out;
    for (double p : params) {
      const auto& b = bundle(p);
      HeadBatch h;
      h.param = p;
      const auto cols = static_cast<Eigen::Index>(points.size() * b.size());
      h.x.resize(3, cols);
      h.tag.resize(static_cast<std::size_t>(cols));
      Eigen::Index c = 0;
      for (std::size_t i = 0; i < b.size(); ++i) {
        const double s =
            b.size() == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(b.size() - 1);
        for (double u : points) {
          h.x(0, c) = u;
          h.x(1, c) = s;
          h.x(2, c) = p;
          h.tag[static_cast<std::size_t>(c)] = i;
          ++c;
        }
      }
      out.push_back(std::move(h));
    }
    return out;
  }

 private:
  EfeOptions opt_;
  mutable std::map<double, std::vector<BundlePoint>> cache_;
};

}  // namespace

std::unique_ptr<Problem> make_flame(FlameOptions opt) { return std::make_unique<Flame>(opt); }
std::unique_ptr<Problem> make_vdp(VdpOptions opt) { return std::make_unique<Vdp>(opt); }
std::unique_ptr<Problem> make_efe(EfeOptions opt) { return std::make_unique<Efe>(std::move(opt)); }

const std::vector<BundlePoint>& efe_bundle(const Problem& efe, double phi_m) {
  const auto* p = dynamic_cast<const Efe*>(&efe);
  if (p == nullptr) {
    throw ConfigError("efe_bundle: problem is not efe");
  }
  return p->bundle(phi_m);
}

}  // namespace upinn::problems
