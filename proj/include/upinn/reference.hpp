#pragma once

// Classical ODE oracles and the error metrics used to compare network
// solutions against them.

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace upinn::reference {

using Rhs = std::function<void(double t, std::span<const double> y, std::span<double> dydt)>;

struct OdeProblem {
  Rhs rhs;
  double t0 = 0.0;
  double t1 = 1.0;
  std::vector<double> y0;
};

enum class Interpolation { Linear, CubicHermite };

struct Trajectory {
  std::string method;
  Interpolation interpolation = Interpolation::Linear;
  std::vector<double> t;
  std::vector<std::vector<double>> y;
  std::vector<std::vector<double>> dydt;  // filled for Hermite output

  std::size_t dim() const { return y.empty() ? 0 : y.front().size(); }
  // Dense output at any t in [t.front(), t.back()].
  std::vector<double> at(double time) const;

  // t, y_0, ..., y_{m-1}
  std::string to_csv(std::span<const std::string> names) const;
};

// Classical fixed-step fourth-order Runge-Kutta; the last step is shortened
// to land on t1.
Trajectory rk4(const OdeProblem& problem, double step);

// Adaptive Dormand-Prince 5(4) with cubic Hermite dense output.
Trajectory rk45(const OdeProblem& problem, double rtol, double atol);

// [1/y + ln(1/y - 1)] - [1/delta + ln(1/delta - 1) - rho t], zero on the
// exact solution of y' = rho (y^2 - y^3), y(0) = delta.
double flame_implicit_check(double t, double y, double delta, double rho);

// Exact flame solution at t, from the implicit relation above solved in
// z = ln(1/y - 1), where it is monotone and well conditioned.
double flame_implicit_solution(double t, double delta, double rho);

// Pointwise |ref - nn| / (1 + |ref|) * 100.
std::vector<double> relative_error(std::span<const double> y_ref, std::span<const double> y_nn);

// Root of the mean of squared values.
double rms(std::span<const double> values);

}  // namespace upinn::reference
