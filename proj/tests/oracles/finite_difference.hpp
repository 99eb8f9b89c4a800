#pragma once

// Central finite differences over an Eigen block, perturbing entries in place.

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Core>

namespace oracle {

/// d f / d block, with f re-evaluated after each +/- step on a single entry.
template <class Derived>
Eigen::MatrixXd central_difference(Eigen::MatrixBase<Derived>& block,
                                   const std::function<double()>& f, double step = 1e-5) {
  Eigen::MatrixXd grad(block.rows(), block.cols());
  for (Eigen::Index i = 0; i < block.rows(); ++i) {
    for (Eigen::Index j = 0; j < block.cols(); ++j) {
      const double saved = block(i, j);
      block(i, j) = saved + step;
      const double plus = f();
      block(i, j) = saved - step;
      const double minus = f();
      block(i, j) = saved;
      grad(i, j) = (plus - minus) / (2.0 * step);
    }
  }
  return grad;
}

/// Norm-wise relative error |a - b| / max(|a|, |b|); zero when both vanish.
inline double gradient_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale == 0.0) return 0.0;
  return (analytic - numeric).norm() / scale;
}

}  // namespace oracle
