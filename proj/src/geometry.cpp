#include "upinn/geometry.hpp"

#include <algorithm>

namespace upinn::geometry {

std::vector<double> embed(std::span<const double> x, std::span<const double> h) {
  std::vector<double> omega;
  omega.reserve(x.size() + h.size());
  omega.insert(omega.end(), x.begin(), x.end());
  omega.insert(omega.end(), h.begin(), h.end());
  return omega;
}

double det_closed_form_2x2(std::span<const double> a) {
  if (a.size() != 4) {
    throw DimensionError("det_closed_form_2x2 expects a 2x2 jacobian");
  }
  double frob = 0.0;
  for (double x : a) {
    frob += x * x;
  }
  const double minor = a[0] * a[3] - a[1] * a[2];
  return 1.0 + frob + minor * minor;
}

double lipschitz_diagnostic(std::span<const Eigen::MatrixXd> output_jacobians) {
  if (output_jacobians.size() < 2) {
    throw DimensionError("lipschitz_diagnostic needs at least two probe points");
  }
  double best = 0.0;
  for (const auto& j : output_jacobians) {
    if (j.size() == 0) {
      continue;
    }
    if (!j.allFinite()) {
      throw NonFiniteError("lipschitz_diagnostic: non-finite jacobian");
    }
    double norm = 0.0;
    if (j.rows() == 1 || j.cols() == 1) {
      norm = j.norm();
    } else {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(j);
      norm = svd.singularValues()(0);
    }
    best = std::max(best, norm);
  }
  return best;
}

}  // namespace upinn::geometry
