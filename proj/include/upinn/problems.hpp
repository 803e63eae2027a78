#pragma once

// The three DE families: flame equation, van der Pol oscillator and the
// EFE inverse problem. Residual and constraint formulas are templates so
// tests evaluate them on doubles and training records them on the tape.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "upinn/autodiff.hpp"
#include "upinn/reference.hpp"

namespace upinn::problems {

using Rng = std::mt19937_64;
using Matrix = Eigen::MatrixXd;

namespace detail {
inline double exp_of(double x) { return std::exp(x); }
}  // namespace detail

// ---------------------------------------------------------------- flame

template <typename T>
T flame_residual(const T& y, const T& dydt, double rho = 300.0) {
  return dydt - rho * (y * y - y * y * y);
}

// y = delta + (1 - e^{-t}) N. Returns {y, dy/dt}.
template <typename T>
std::pair<T, T> flame_constraint(double t, double delta, const T& raw, const T& raw_dt) {
  const double e = detail::exp_of(-t);
  return {raw * (1.0 - e) + delta, raw * e + raw_dt * (1.0 - e)};
}

inline double flame_t_max(double delta, double rho = 300.0) { return 2.0 / (delta * rho); }

// ------------------------------------------------------------ van der Pol

template <typename T>
std::pair<T, T> vdp_residuals(double a, const T& x, const T& y, const T& dxdt, const T& dydt,
                              double rho = 10.0) {
  T r1 = dxdt - rho * y;
  T r2 = dydt - rho * (a * ((1.0 - x * x) * y) - x);
  return {r1, r2};
}

// x = 1 + (1 - e^{-t}) Nx, y = (1 - e^{-t}) Ny. Returns {x, y, x', y'}.
template <typename T>
std::array<T, 4> vdp_constraint(double t, const T& nx, const T& ny, const T& nx_dt,
                                const T& ny_dt) {
  const double e = detail::exp_of(-t);
  return {nx * (1.0 - e) + 1.0, ny * (1.0 - e), nx * e + nx_dt * (1.0 - e),
          ny * e + ny_dt * (1.0 - e)};
}

// -------------------------------------------------------------------- EFE

// Function order: Sigma, A, phi, nu_Sigma, nu_A, nu_phi.
enum EfeFunction : std::size_t { kSigma = 0, kA, kPhi, kNuSigma, kNuA, kNuPhi, kEfeFunctions };

template <typename T>
struct EfeState {
  std::array<T, kEfeFunctions> f;   // values
  std::array<T, kEfeFunctions> df;  // d/du
};

template <typename T>
std::array<T, 7> efe_residuals(double u, const EfeState<T>& s, const T& V, const T& dV) {
  const T& Sg = s.f[kSigma];
  const T& A = s.f[kA];
  const T& nS = s.f[kNuSigma];
  const T& nA = s.f[kNuA];
  const T& nP = s.f[kNuPhi];
  const double u2 = u * u;
  std::array<T, 7> r{
      nS - s.df[kSigma],
      nA - s.df[kA],
      nP - s.df[kPhi],
      s.df[kNuSigma] + (2.0 / 3.0) * (Sg * (nP * nP)),
      u2 * (Sg * s.df[kNuA]) + (8.0 / 3.0) * (V * Sg) + nA * (3.0 * u2 * nS - 5.0 * u * Sg) +
          A * (8.0 * Sg - 6.0 * u * nS),
      u2 * (Sg * A * s.df[kNuPhi]) - Sg * dV +
          nP * (-3.0 * u * (A * Sg) + u2 * (Sg * nA) + 3.0 * u2 * (nS * A)),
      (u * nS - Sg) * (u2 * (Sg * nA) + 2.0 * u2 * (A * nS) - 4.0 * u * (A * Sg)) -
          (2.0 / 3.0) * u * (Sg * Sg) * (u2 * (A * (nP * nP)) - 2.0 * V),
  };
  return r;
}

struct BundlePoint {
  std::size_t index = 0;
  double T = 0.0;
  double S = 0.0;
  double sigma_bc() const { return std::cbrt(S / std::numbers::pi); }
  double nu_a_bc() const { return -4.0 * std::numbers::pi * T; }
};

// Trial functions satisfying the boundary values at u = 0 and u = 1.
template <typename T>
EfeState<T> efe_constraint(double u, const BundlePoint& bc, const EfeState<T>& raw) {
  const double w = u * (1.0 - u);
  const double dw = 1.0 - 2.0 * u;
  const double e0 = detail::exp_of(-u);         // 1 - e0 vanishes at u = 0
  const double e1 = detail::exp_of(-(1.0 - u)); // 1 - e1 vanishes at u = 1
  const double sb = bc.sigma_bc();
  EfeState<T> s;
  s.f[kSigma] = raw.f[kSigma] * w + ((1.0 - u) + u * sb);
  s.df[kSigma] = raw.f[kSigma] * dw + raw.df[kSigma] * w + (sb - 1.0);
  s.f[kA] = raw.f[kA] * w + (1.0 - u);
  s.df[kA] = raw.f[kA] * dw + raw.df[kA] * w - 1.0;
  s.f[kPhi] = raw.f[kPhi] * (1.0 - e0);
  s.df[kPhi] = raw.f[kPhi] * e0 + raw.df[kPhi] * (1.0 - e0);
  s.f[kNuSigma] = raw.f[kNuSigma];
  s.df[kNuSigma] = raw.df[kNuSigma];
  s.f[kNuA] = raw.f[kNuA] * (1.0 - e1) + bc.nu_a_bc();
  s.df[kNuA] = raw.df[kNuA] * (1.0 - e1) - raw.f[kNuA] * e1;
  s.f[kNuPhi] = raw.f[kNuPhi] * (1.0 - e0) + 1.0;
  s.df[kNuPhi] = raw.f[kNuPhi] * e0 + raw.df[kNuPhi] * (1.0 - e0);
  return s;
}

// Analytic stand-in for the entropy curve:
// S = pi^4 T^3 (1 + (pi T - 1)^2 / (2 phi_M^2)).
// Conformal S ~ T^3 scaling with a bump that sharpens as phi_M decreases;
// T = 1/pi gives S = pi.
double toy_entropy(double T, double phi_m);

// n points with pi T evenly spaced in [pt_lo, pt_hi].
std::vector<BundlePoint> toy_bundle(double phi_m, std::size_t n, double pt_lo = 0.7,
                                    double pt_hi = 1.3);

// CSV with header and columns i,T,S. Rejects non-positive T or S and
// duplicate indices; the result is sorted by index.
std::vector<BundlePoint> read_bundle_csv(const std::string& path);
std::vector<BundlePoint> parse_bundle_csv(const std::string& text);

// Chebyshev-Gauss-Lobatto nodes on [0, 1], ascending.
std::vector<double> chebyshev_lobatto(std::size_t n);

// ------------------------------------------------------------- sampling

struct SamplerConfig {
  std::size_t points = 100;   // along the independent variable
  double noise = 0.5;         // jitter amplitude, in units of local spacing
  bool jitter = true;
  // Flame: family value whose t-domain is used for body training.
  std::optional<double> domain_param;
};

// Base grid with per-point uniform jitter of +-noise*spacing, clamped to
// [lo, hi]. Spacing is measured to the nearer neighbour.
std::vector<double> jitter_grid(std::span<const double> base, double noise, double lo, double hi,
                                Rng& rng);

struct HeadBatch {
  double param = 0.0;
  Matrix x;                        // physical inputs, n x B
  std::vector<std::size_t> tag;    // EFE: bundle index per column
};

// ------------------------------------------------------------ interface

struct FamilyParam {
  std::string name;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<double> grid;  // one head per value
};

// Per-point data handed to the constraint and residual layers.
struct Point {
  std::span<const double> x;  // physical inputs
  double param = 0.0;
  std::size_t tag = 0;
};

class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::string name() const = 0;
  // Inputs are (independent variable, bundle coordinates..., family value).
  virtual std::size_t input_dim() const = 0;
  virtual std::vector<std::string> function_names() const = 0;
  std::size_t function_count() const { return function_names().size(); }
  virtual std::size_t residual_count() const = 0;
  virtual FamilyParam family() const = 0;

  // Body inputs are (x - shift) / scale, fixed per problem.
  virtual std::vector<double> input_shift() const = 0;
  virtual std::vector<double> input_scale() const = 0;

  // Range of the independent variable for a family value.
  virtual std::pair<double, double> domain(double param) const = 0;

  virtual std::vector<HeadBatch> sample(std::span<const double> params, const SamplerConfig& cfg,
                                        Rng& rng) const;
  // Evaluation grid without noise.
  virtual std::vector<HeadBatch> grid(std::span<const double> params, std::size_t points) const;

  // raw/raw_d: network outputs and their derivatives along the independent
  // variable, one per function. Writes constrained values and derivatives.
  virtual void constrain(const Point& p, std::span<const ad::Var> raw,
                         std::span<const ad::Var> raw_d, std::span<ad::Var> val,
                         std::span<ad::Var> der) const = 0;

  // Free function V(phi): index of the function feeding its argument.
  virtual std::optional<std::size_t> free_function_argument() const { return std::nullopt; }

  // v/dv are the free function and its derivative (ignored when absent).
  virtual void residuals(const Point& p, std::span<const ad::Var> val,
                         std::span<const ad::Var> der, const ad::Var* v, const ad::Var* dv,
                         std::span<ad::Var> out) const = 0;

  // Classical oracle for a family value, if the family has one.
  virtual std::optional<reference::OdeProblem> ode(double /*param*/) const { return std::nullopt; }
  // Index of the function compared against the oracle.
  virtual std::size_t compared_function() const { return 0; }

 protected:
  // Independent-variable samples shared by all heads.
  virtual std::vector<double> base_points(double param, std::size_t n) const;
  virtual std::vector<HeadBatch> mesh(std::span<const double> params,
                                      std::span<const double> points) const;
};

struct FlameOptions {
  double rho = 300.0;
};

struct VdpOptions {
  double rho = 10.0;
};

struct EfeOptions {
  std::size_t bundle_points = 5;
  double pt_lo = 0.7;
  double pt_hi = 1.3;
  // phi_M -> CSV path; families missing here use the toy curve.
  std::vector<std::pair<double, std::string>> bundle_csv;
};

std::unique_ptr<Problem> make_flame(FlameOptions opt = {});
std::unique_ptr<Problem> make_vdp(VdpOptions opt = {});
std::unique_ptr<Problem> make_efe(EfeOptions opt = {});

// Bundle used by the EFE problem for a family value.
const std::vector<BundlePoint>& efe_bundle(const Problem& efe, double phi_m);

}  // namespace upinn::problems
