#pragma once

// Geometry of the latent hypersurface Omega(x) = (x, H(x)).
//
// With A the n x d latent Jacobian (A[mu][i] = dH_i/dx^mu), the induced
// metric is g = I_n + A A^T and its determinant is >= 1, with equality iff
// A = 0. The routines are templated on the scalar so the same code evaluates
// plain doubles and records onto the autodiff tape.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "upinn/autodiff.hpp"
#include "upinn/error.hpp"

namespace upinn::geometry {

namespace detail {

inline bool finite(double x) { return std::isfinite(x); }
inline bool finite(const ad::Var& x) { return std::isfinite(x.value()); }

inline double sqrt_of(double x) { return std::sqrt(x); }
inline ad::Var sqrt_of(const ad::Var& x) { return ad::sqrt(x); }

}  // namespace detail

// (x, H) concatenated in that order.
std::vector<double> embed(std::span<const double> x, std::span<const double> h);

// I_n + A A^T for a row-major n x d Jacobian. Returns row-major n x n.
template <typename T>
std::vector<T> induced_metric(std::span<const T> jacobian, std::size_t n, std::size_t d) {
  if (jacobian.size() != n * d) {
    throw DimensionError("induced_metric: jacobian has wrong size");
  }
  for (const auto& a : jacobian) {
    if (!detail::finite(a)) {
      throw NonFiniteError("induced_metric: non-finite jacobian entry");
    }
  }
  if (d == 0) {
    throw DimensionError("induced_metric: recorded metric needs d >= 1");
  }
  std::vector<T> g(n * n);
  for (std::size_t mu = 0; mu < n; ++mu) {
    for (std::size_t nu = mu; nu < n; ++nu) {
      T acc = jacobian[mu * d] * jacobian[nu * d];
      for (std::size_t i = 1; i < d; ++i) {
        acc = acc + jacobian[mu * d + i] * jacobian[nu * d + i];
      }
      g[mu * n + nu] = mu == nu ? acc + 1.0 : acc;
      g[nu * n + mu] = g[mu * n + nu];
    }
  }
  return g;
}

template <>
inline std::vector<double> induced_metric<double>(std::span<const double> jacobian, std::size_t n,
                                                  std::size_t d) {
  if (jacobian.size() != n * d) {
    throw DimensionError("induced_metric: jacobian has wrong size");
  }
  std::vector<double> g(n * n, 0.0);
  for (std::size_t mu = 0; mu < n; ++mu) {
    for (std::size_t nu = mu; nu < n; ++nu) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double a = jacobian[mu * d + i];
        const double b = jacobian[nu * d + i];
        if (!std::isfinite(a) || !std::isfinite(b)) {
          throw NonFiniteError("induced_metric: non-finite jacobian entry");
        }
        acc += a * b;
      }
      g[mu * n + nu] = (mu == nu ? 1.0 : 0.0) + acc;
      g[nu * n + mu] = g[mu * n + nu];
    }
  }
  return g;
}

// Determinant of a symmetric positive-definite n x n matrix (row-major).
// Closed forms for n <= 3, elimination without pivoting otherwise (its
// pivots are all positive exactly when the matrix is positive definite).
template <typename T>
T metric_det(std::span<const T> g, std::size_t n) {
  using ad::value_of;
  if (g.size() != n * n || n == 0) {
    throw DimensionError("metric_det: matrix has wrong size");
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r + 1; c < n; ++c) {
      if (value_of(g[r * n + c]) != value_of(g[c * n + r])) {
        throw DomainError("metric_det: matrix is not symmetric");
      }
    }
  }
  auto at = [&](std::size_t r, std::size_t c) -> const T& { return g[r * n + c]; };
  if (n <= 3) {
    // Sylvester's criterion on the leading minors.
    if (!(value_of(at(0, 0)) > 0.0)) {
      throw DomainError("metric_det: matrix is not positive definite");
    }
    if (n == 1) {
      return at(0, 0);
    }
    T m2 = at(0, 0) * at(1, 1) - at(0, 1) * at(1, 0);
    if (!(value_of(m2) > 0.0)) {
      throw DomainError("metric_det: matrix is not positive definite");
    }
    if (n == 2) {
      return m2;
    }
    T det = at(0, 0) * (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1)) -
            at(0, 1) * (at(1, 0) * at(2, 2) - at(1, 2) * at(2, 0)) +
            at(0, 2) * (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0));
    if (!(value_of(det) > 0.0)) {
      throw DomainError("metric_det: matrix is not positive definite");
    }
    return det;
  }
  std::vector<T> u(g.begin(), g.end());
  T det = u[0];
  for (std::size_t k = 0; k < n; ++k) {
    const T pivot = u[k * n + k];
    if (!(value_of(pivot) > 0.0)) {
      throw DomainError("metric_det: matrix is not positive definite");
    }
    if (k > 0) {
      det = det * pivot;
    }
    for (std::size_t r = k + 1; r < n; ++r) {
      const T f = u[r * n + k] / pivot;
      for (std::size_t c = k + 1; c < n; ++c) {
        u[r * n + c] = u[r * n + c] - f * u[k * n + c];
      }
    }
  }
  return det;
}

// 1 + J^2 + (a11 a22 - a12 a21)^2 for n = d = 2, J^2 the squared Frobenius
// norm of the Jacobian.
double det_closed_form_2x2(std::span<const double> jacobian);

template <typename T>
struct MetricSample {
  std::vector<double> point;
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<T> jacobian;  // row-major n x d
  std::vector<T> metric;    // row-major n x n
  T det;
  T sqrt_det;
};

template <typename T>
MetricSample<T> make_sample(std::vector<double> point, std::vector<T> jacobian, std::size_t n,
                            std::size_t d) {
  MetricSample<T> s;
  s.point = std::move(point);
  s.n = n;
  s.d = d;
  s.jacobian = std::move(jacobian);
  s.metric = induced_metric<T>(s.jacobian, n, d);
  s.det = metric_det<T>(s.metric, n);
  if (!(ad::value_of(s.det) > 0.0)) {
    throw DomainError("metric determinant is not positive");
  }
  s.sqrt_det = detail::sqrt_of(s.det);
  return s;
}

// lambda * sum_batch (sqrt(g) - 1)^2
template <typename T>
T ur_loss(std::span<const MetricSample<T>> samples, double lambda) {
  if (lambda < 0.0) {
    throw DomainError("ur_loss: lambda must be >= 0");
  }
  if (samples.empty()) {
    throw DimensionError("ur_loss: empty batch");
  }
  T acc = (samples[0].sqrt_det - 1.0) * (samples[0].sqrt_det - 1.0);
  for (std::size_t b = 1; b < samples.size(); ++b) {
    const T e = samples[b].sqrt_det - 1.0;
    acc = acc + e * e;
  }
  if (!detail::finite(acc)) {
    throw NonFiniteError("ur_loss: non-finite sqrt(g)");
  }
  return acc * lambda;
}

// lambda_jr * sum_batch ||A||_F^2
template <typename T>
T jr_loss(std::span<const MetricSample<T>> samples, double lambda) {
  if (lambda < 0.0) {
    throw DomainError("jr_loss: lambda must be >= 0");
  }
  if (samples.empty() || samples[0].jacobian.empty()) {
    throw DimensionError("jr_loss: empty batch");
  }
  T acc = samples[0].jacobian[0] * samples[0].jacobian[0];
  bool first = true;
  for (const auto& s : samples) {
    for (const auto& a : s.jacobian) {
      if (first) {
        first = false;
        continue;
      }
      acc = acc + a * a;
    }
  }
  if (!detail::finite(acc)) {
    throw NonFiniteError("jr_loss: non-finite jacobian");
  }
  return acc * lambda;
}

// Largest spectral norm of the solution-output Jacobians at the probe
// points; an upper bound on the Lipschitz constant over the probed set.
double lipschitz_diagnostic(std::span<const Eigen::MatrixXd> output_jacobians);

}  // namespace upinn::geometry
