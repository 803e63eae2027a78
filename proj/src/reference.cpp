#include "upinn/reference.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "upinn/error.hpp"

namespace upinn::reference {

namespace {

void check_state(std::span<const double> y, double t) {
  for (double v : y) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite state at t=" << t;
      throw NonFiniteError(os.str());
    }
  }
}

void validate(const OdeProblem& p) {
  if (!p.rhs) {
    throw ConfigError("ODE problem has no right-hand side");
  }
  if (p.t1 < p.t0) {
    throw ConfigError("ODE problem needs t1 >= t0");
  }
  if (p.y0.empty()) {
    throw ConfigError("ODE problem has an empty initial state");
  }
  check_state(p.y0, p.t0);
}

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

}  // namespace

std::vector<double> Trajectory::at(double time) const {
  if (t.empty()) {
    throw DimensionError("empty trajectory");
  }
  if (t.size() == 1 || time <= t.front()) {
    return y.front();
  }
  if (time >= t.back()) {
    return y.back();
  }
  const auto it = std::upper_bound(t.begin(), t.end(), time);
  const std::size_t i = static_cast<std::size_t>(it - t.begin()) - 1;
  const double h = t[i + 1] - t[i];
  const double s = (time - t[i]) / h;
  std::vector<double> out(dim());
  if (interpolation == Interpolation::Linear || dydt.size() != y.size()) {
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k] = (1.0 - s) * y[i][k] + s * y[i + 1][k];
    }
    return out;
  }
  const double h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
  const double h10 = s * (1.0 - s) * (1.0 - s);
  const double h01 = s * s * (3.0 - 2.0 * s);
  const double h11 = s * s * (s - 1.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = h00 * y[i][k] + h10 * h * dydt[i][k] + h01 * y[i + 1][k] + h11 * h * dydt[i + 1][k];
  }
  return out;
}

std::string Trajectory::to_csv(std::span<const std::string> names) const {
  std::ostringstream os;
  os << std::setprecision(17) << "t";
  for (std::size_t k = 0; k < dim(); ++k) {
    os << ',' << (k < names.size() ? names[k] : "y" + std::to_string(k));
  }
  os << '\n';
  for (std::size_t i = 0; i < t.size(); ++i) {
    os << t[i];
    for (double v : y[i]) {
      os << ',' << v;
    }
    os << '\n';
  }
  return os.str();
}

Trajectory rk4(const OdeProblem& p, double step) {
  validate(p);
  if (!(step > 0.0)) {
    throw ConfigError("rk4 needs a positive step");
  }
  const std::size_t m = p.y0.size();
  Trajectory tr;
  tr.method = "rk4";
  tr.interpolation = Interpolation::Linear;
  tr.t.push_back(p.t0);
  tr.y.push_back(p.y0);

  std::vector<double> y = p.y0, k1(m), k2(m), k3(m), k4(m), tmp(m);
  double t = p.t0;
  const auto steps = static_cast<std::size_t>(std::ceil((p.t1 - p.t0) / step - 1e-12));
  for (std::size_t n = 0; n < steps; ++n) {
    const double h = std::min(step, p.t1 - t);
    if (h <= 0.0) {
      break;
    }
    p.rhs(t, y, k1);
    for (std::size_t i = 0; i < m; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
    p.rhs(t + 0.5 * h, tmp, k2);
    for (std::size_t i = 0; i < m; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
    p.rhs(t + 0.5 * h, tmp, k3);
    for (std::size_t i = 0; i < m; ++i) tmp[i] = y[i] + h * k3[i];
    p.rhs(t + h, tmp, k4);
    for (std::size_t i = 0; i < m; ++i) {
      y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    t = n + 1 == steps ? p.t1 : t + h;
    check_state(y, t);
    tr.t.push_back(t);
    tr.y.push_back(y);
  }
  return tr;
}

Trajectory rk45(const OdeProblem& p, double rtol, double atol) {
  validate(p);
  if (!(rtol > 0.0) || !(atol > 0.0)) {
    throw ConfigError("rk45 needs positive tolerances");
  }
  const std::size_t m = p.y0.size();
  Trajectory tr;
  tr.method = "rk45";
  tr.interpolation = Interpolation::CubicHermite;

  std::vector<double> y = p.y0;
  std::vector<double> k1(m), k2(m), k3(m), k4(m), k5(m), k6(m), k7(m), tmp(m), y5(m);
  double t = p.t0;
  p.rhs(t, y, k1);
  tr.t.push_back(t);
  tr.y.push_back(y);
  tr.dydt.push_back(k1);
  if (p.t1 == p.t0) {
    return tr;
  }

  auto norm = [&](std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double sc = atol + rtol * std::abs(y[i]);
      s += (v[i] / sc) * (v[i] / sc);
    }
    return std::sqrt(s / static_cast<double>(m));
  };

  // Initial step (Hairer, Norsett & Wanner, II.4).
  double h;
  {
    const double d0 = norm(y);
    const double d1 = norm(k1);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, p.t1 - p.t0);
    for (std::size_t i = 0; i < m; ++i) tmp[i] = y[i] + h0 * k1[i];
    p.rhs(t + h0, tmp, k2);
    for (std::size_t i = 0; i < m; ++i) k3[i] = (k2[i] - k1[i]) / h0;
    const double d2 = norm(k3);
    const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                                 : std::pow(0.01 / std::max(d1, d2), 0.2);
    h = std::min(100.0 * h0, h1);
  }

  const double span = p.t1 - p.t0;
  std::size_t guard = 0;
  while (t < p.t1) {
    if (++guard > 10'000'000) {
      throw NonFiniteError("rk45: step budget exhausted");
    }
    if (h < 1e-14 * std::max(1.0, std::abs(t)) || h < 1e-16 * span) {
      std::ostringstream os;
      os << "rk45: step size underflow at t=" << t;
      throw NonFiniteError(os.str());
    }
    const bool last = t + h >= p.t1;
    if (last) {
      h = p.t1 - t;
    }
    for (std::size_t i = 0; i < m; ++i) tmp[i] = y[i] + h * a21 * k1[i];
    p.rhs(t + c2 * h, tmp, k2);
    for (std::size_t i = 0; i < m; ++i) tmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
    p.rhs(t + c3 * h, tmp, k3);
    for (std::size_t i = 0; i < m; ++i)
      tmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    p.rhs(t + c4 * h, tmp, k4);
    for (std::size_t i = 0; i < m; ++i)
      tmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    p.rhs(t + c5 * h, tmp, k5);
    for (std::size_t i = 0; i < m; ++i)
      tmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    p.rhs(t + h, tmp, k6);
    for (std::size_t i = 0; i < m; ++i)
      y5[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    p.rhs(t + h, y5, k7);

    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double e =
          h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
      const double sc = atol + rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
      err += (e / sc) * (e / sc);
    }
    err = std::sqrt(err / static_cast<double>(m));
    if (!std::isfinite(err)) {
      err = 1e10;
    }

    if (err <= 1.0) {
      t = last ? p.t1 : t + h;
      y = y5;
      check_state(y, t);
      k1 = k7;  // first-same-as-last
      tr.t.push_back(t);
      tr.y.push_back(y);
      tr.dydt.push_back(k1);
      const double fac = err == 0.0 ? 5.0 : std::min(5.0, 0.9 * std::pow(err, -0.2));
      h *= fac;
    } else {
      h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
    }
  }
  return tr;
}

double flame_implicit_check(double t, double y, double delta, double rho) {
  if (!(y > 0.0 && y < 1.0)) {
    throw DomainError("flame_implicit_check: y must lie in (0, 1)");
  }
  if (!(delta > 0.0 && delta < 1.0)) {
    throw DomainError("flame_implicit_check: delta must lie in (0, 1)");
  }
  const double lhs = 1.0 / y + std::log(1.0 / y - 1.0);
  const double rhs = 1.0 / delta + std::log(1.0 / delta - 1.0) - rho * t;
  return lhs - rhs;
}

double flame_implicit_solution(double t, double delta, double rho) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw DomainError("flame_implicit_solution: delta must lie in (0, 1)");
  }
  // 1/y + ln(1/y - 1) = 1 + e^z + z with y = 1 / (1 + e^z).
  const double c = 1.0 / delta + std::log(1.0 / delta - 1.0) - rho * t;
  double lo = std::min(c - 2.0, 0.0);
  double hi = c > 1.0 ? std::log(c) : c;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (1.0 + std::exp(mid) + mid < c) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 1.0 / (1.0 + std::exp(0.5 * (lo + hi)));
}

std::vector<double> relative_error(std::span<const double> y_ref, std::span<const double> y_nn) {
  if (y_ref.size() != y_nn.size()) {
    throw DimensionError("relative_error: length mismatch");
  }
  std::vector<double> re(y_ref.size());
  for (std::size_t i = 0; i < re.size(); ++i) {
    re[i] = std::abs(y_ref[i] - y_nn[i]) / (1.0 + std::abs(y_ref[i])) * 100.0;
  }
  return re;
}

double rms(std::span<const double> values) {
  if (values.empty()) {
    return 0.0;
  }
  double s = 0.0;
  for (double v : values) {
    s += v * v;
  }
  return std::sqrt(s / static_cast<double>(values.size()));
}

}  // namespace upinn::reference
