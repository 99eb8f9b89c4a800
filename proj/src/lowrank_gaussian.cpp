#include "structobs/lowrank_gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/SVD>

#include "structobs/errors.hpp"

namespace structobs {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

void require(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + " has non-finite entries");
}

// R x R inverse of the capacitance, from its Cholesky factor.
Matrix capacitance_inverse(const CapacitanceCache& cache) {
  const Index r = cache.m.rows();
  return cache.chol_m.solve(Matrix::Identity(r, r));
}

}  // namespace

LowRankGaussian::LowRankGaussian(Vector mu, Matrix cov_factor, Vector cov_diag)
    : mu_(std::move(mu)), cov_factor_(std::move(cov_factor)), cov_diag_(std::move(cov_diag)) {
  require(cov_factor_.rows() == mu_.size(),
          "cov_factor has " + std::to_string(cov_factor_.rows()) + " rows, expected " +
              std::to_string(mu_.size()));
  require(cov_diag_.size() == mu_.size(), "cov_diag length does not match mu");
  require(cov_factor_.cols() <= mu_.size(), "rank exceeds dimension");
  if (!(cov_diag_.array() > 0.0).all() || !cov_diag_.allFinite()) {
    throw std::invalid_argument("cov_diag must be finite and strictly positive");
  }
}

LowRankGaussian LowRankGaussian::with_constant_diag(Vector mu, Matrix cov_factor,
                                                    double epsilon) {
  const Index s = mu.size();
  return LowRankGaussian(std::move(mu), std::move(cov_factor), Vector::Constant(s, epsilon));
}

LowRankGaussian LowRankGaussian::with_mu(Vector mu) const {
  return LowRankGaussian(std::move(mu), cov_factor_, cov_diag_);
}

LowRankGaussian LowRankGaussian::with_cov_factor(Matrix cov_factor) const {
  return LowRankGaussian(mu_, std::move(cov_factor), cov_diag_);
}

CapacitanceCache build_cache(const LowRankGaussian& dist) {
  const Matrix& p = dist.cov_factor();
  const Vector& d = dist.cov_diag();
  const Index r = dist.rank();

  CapacitanceCache cache;
  cache.scaled_factor = p.array().colwise() / d.array();
  cache.m = Matrix::Identity(r, r);
  cache.m.noalias() += p.transpose() * cache.scaled_factor;
  cache.chol_m.compute(cache.m);
  if (cache.chol_m.info() != Eigen::Success) {
    throw NumericalError("capacitance matrix is not positive definite");
  }
  const double logdet_m =
      2.0 * cache.chol_m.matrixLLT().diagonal().array().log().sum();
  cache.logdet_sigma = logdet_m + d.array().log().sum();
  if (!std::isfinite(cache.logdet_sigma)) {
    throw NumericalError("log det of covariance is not finite");
  }
  return cache;
}

Vector apply_precision(const LowRankGaussian& dist, const CapacitanceCache& cache,
                       const Vector& v) {
  require(v.size() == dist.size(), "vector length does not match distribution");
  Vector u = v.cwiseQuotient(dist.cov_diag());
  if (dist.rank() == 0) return u;
  const Vector t = dist.cov_factor().transpose() * u;
  u.noalias() -= cache.scaled_factor * cache.chol_m.solve(t);
  return u;
}

Vector precision_diagonal(const LowRankGaussian& dist, const CapacitanceCache& cache) {
  Vector diag = dist.cov_diag().cwiseInverse();
  if (dist.rank() == 0) return diag;
  // rows of D^-1 P L^-T, one per pixel
  const Matrix y = cache.chol_m.matrixL().solve(cache.scaled_factor.transpose());
  diag -= y.colwise().squaredNorm().transpose();
  return diag;
}

Vector marginal_variance(const LowRankGaussian& dist) {
  return dist.cov_diag() + dist.cov_factor().rowwise().squaredNorm();
}

double log_prob(const LowRankGaussian& dist, const Vector& x) {
  return log_prob(dist, build_cache(dist), x);
}

double log_prob(const LowRankGaussian& dist, const CapacitanceCache& cache, const Vector& x) {
  require(x.size() == dist.size(), "observation length " + std::to_string(x.size()) +
                                       " does not match distribution size " +
                                       std::to_string(dist.size()));
  require_finite(x, "observation");
  const Vector v = x - dist.mu();
  const Vector u = v.cwiseQuotient(dist.cov_diag());
  double quad = v.dot(u);
  if (dist.rank() > 0) {
    const Vector t = dist.cov_factor().transpose() * u;
    quad -= cache.chol_m.matrixL().solve(t).squaredNorm();
  }
  return -0.5 * (static_cast<double>(dist.size()) * kLog2Pi + cache.logdet_sigma + quad);
}

DistributionGrad DistributionGrad::zeros(Index size, Index rank) {
  return {Vector::Zero(size), Matrix::Zero(size, rank), Vector::Zero(size)};
}

DistributionGrad& DistributionGrad::operator+=(const DistributionGrad& other) {
  mu += other.mu;
  cov_factor += other.cov_factor;
  cov_diag += other.cov_diag;
  return *this;
}

DistributionGrad& DistributionGrad::operator*=(double scale) {
  mu *= scale;
  cov_factor *= scale;
  cov_diag *= scale;
  return *this;
}

DistributionGrad log_prob_grad(const LowRankGaussian& dist, const Vector& x) {
  return log_prob_grad(dist, build_cache(dist), x);
}

// d log p / d Sigma = -1/2 (Sigma^-1 - a a^T) with a = Sigma^-1 (x - mu), and
// Sigma^-1 P = D^-1 P M^-1.
DistributionGrad log_prob_grad(const LowRankGaussian& dist, const CapacitanceCache& cache,
                               const Vector& x) {
  require(x.size() == dist.size(), "observation length does not match distribution");
  require_finite(x, "observation");
  const Vector alpha = apply_precision(dist, cache, x - dist.mu());

  DistributionGrad grad;
  grad.mu = alpha;
  if (dist.rank() > 0) {
    const Matrix precision_p = cache.scaled_factor * capacitance_inverse(cache);
    const Eigen::RowVectorXd alpha_p = alpha.transpose() * dist.cov_factor();
    grad.cov_factor = alpha * alpha_p - precision_p;
  } else {
    grad.cov_factor = Matrix::Zero(dist.size(), 0);
  }
  grad.cov_diag = 0.5 * (alpha.array().square() - precision_diagonal(dist, cache).array());
  return grad;
}

MeanLogProb mean_log_prob_with_grad(const LowRankGaussian& dist, const Matrix& samples) {
  require(samples.cols() == dist.size(), "sample width does not match distribution");
  require(samples.rows() > 0, "no samples");
  if (!samples.allFinite()) throw std::invalid_argument("samples have non-finite entries");

  const CapacitanceCache cache = build_cache(dist);
  const double n = static_cast<double>(samples.rows());
  const Matrix& p = dist.cov_factor();

  // one row per sample
  const Matrix v = samples.rowwise() - dist.mu().transpose();
  const Matrix u = v.array().rowwise() / dist.cov_diag().transpose().array();
  Eigen::ArrayXd quad = (v.array() * u.array()).rowwise().sum();
  Matrix alpha = u;
  Matrix precision_p = Matrix::Zero(dist.size(), dist.rank());
  if (dist.rank() > 0) {
    const Matrix t = u * p;  // n x R
    const Matrix lt = cache.chol_m.matrixL().solve(t.transpose());
    quad -= lt.colwise().squaredNorm().transpose().array();
    const Matrix minv = capacitance_inverse(cache);
    alpha.noalias() -= (t * minv) * cache.scaled_factor.transpose();
    precision_p = cache.scaled_factor * minv;
  }

  MeanLogProb out;
  out.value = -0.5 * (static_cast<double>(dist.size()) * kLog2Pi + cache.logdet_sigma +
                      quad.mean());
  out.grad.mu = alpha.colwise().mean().transpose();
  if (dist.rank() > 0) {
    out.grad.cov_factor = (alpha.transpose() * (alpha * p)) / n - precision_p;
  } else {
    out.grad.cov_factor = Matrix::Zero(dist.size(), 0);
  }
  const Vector mean_alpha_sq = alpha.array().square().colwise().mean().transpose();
  out.grad.cov_diag = 0.5 * (mean_alpha_sq - precision_diagonal(dist, cache));
  return out;
}

double entropy(const LowRankGaussian& dist) { return entropy(dist, build_cache(dist)); }

double entropy(const LowRankGaussian& dist, const CapacitanceCache& cache) {
  return 0.5 * static_cast<double>(dist.size()) * (1.0 + kLog2Pi) + 0.5 * cache.logdet_sigma;
}

DistributionGrad entropy_grad(const LowRankGaussian& dist) {
  return entropy_grad(dist, build_cache(dist));
}

// dH = 1/2 tr(Sigma^-1 dSigma)
DistributionGrad entropy_grad(const LowRankGaussian& dist, const CapacitanceCache& cache) {
  DistributionGrad grad;
  grad.mu = Vector::Zero(dist.size());
  if (dist.rank() > 0) {
    grad.cov_factor = cache.scaled_factor * capacitance_inverse(cache);
  } else {
    grad.cov_factor = Matrix::Zero(dist.size(), 0);
  }
  grad.cov_diag = 0.5 * precision_diagonal(dist, cache);
  return grad;
}

Vector sample(const LowRankGaussian& dist, const ObservationNoise& noise) {
  require(noise.omega_p.size() == dist.rank(),
          "omega_p length " + std::to_string(noise.omega_p.size()) + " does not match rank " +
              std::to_string(dist.rank()));
  require(noise.omega_d.size() == dist.size(), "omega_d length does not match distribution");
  Vector y = dist.mu();
  if (dist.rank() > 0) y.noalias() += dist.cov_factor() * noise.omega_p;
  y.array() += dist.cov_diag().array().sqrt() * noise.omega_d.array();
  return y;
}

Vector slerp(const Vector& a, const Vector& b, double t) {
  require(a.size() == b.size(), "slerp endpoints differ in length");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("slerp factor outside [0, 1]");
  const double norm_a = a.norm();
  const double norm_b = b.norm();
  if (norm_a == 0.0 || norm_b == 0.0) {
    throw DegenerateInputError("slerp endpoint has zero norm");
  }
  const double cos_omega = std::clamp(a.dot(b) / (norm_a * norm_b), -1.0, 1.0);
  const double omega = std::acos(cos_omega);
  const double sin_omega = std::sin(omega);
  if (sin_omega < 1e-10) {
    throw DegenerateInputError("slerp endpoints are parallel or antipodal");
  }
  return (std::sin((1.0 - t) * omega) / sin_omega) * a + (std::sin(t * omega) / sin_omega) * b;
}

Vector slerp_interpolate(const LowRankGaussian& dist, const ObservationNoise& noise_a,
                         const ObservationNoise& noise_b, double t) {
  ObservationNoise mixed{slerp(noise_a.omega_p, noise_b.omega_p, t), noise_a.omega_d};
  return sample(dist, mixed);
}

ComponentDecomposition principal_components(const Matrix& cov_factor) {
  ComponentDecomposition out;
  if (cov_factor.cols() == 0) {
    out.u = Matrix::Zero(cov_factor.rows(), 0);
    out.singular_values = Vector::Zero(0);
    out.v = Matrix::Zero(0, 0);
    return out;
  }
  Eigen::JacobiSVD<Matrix> svd(cov_factor, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD of covariance factor failed");
  out.u = svd.matrixU();
  out.singular_values = svd.singularValues();
  out.v = svd.matrixV();
  if (!out.u.allFinite() || !out.v.allFinite()) {
    throw NumericalError("SVD of covariance factor produced non-finite values");
  }
  for (Index j = 0; j < out.u.cols(); ++j) {
    Index pivot = 0;
    out.u.col(j).cwiseAbs().maxCoeff(&pivot);
    if (out.u(pivot, j) < 0.0) {
      out.u.col(j) *= -1.0;
      out.v.col(j) *= -1.0;
    }
  }
  return out;
}

LowRankGaussian scale_components(const LowRankGaussian& dist, const Vector& scales) {
  require(scales.size() == dist.rank(), "expected " + std::to_string(dist.rank()) +
                                            " scaling coefficients, got " +
                                            std::to_string(scales.size()));
  const ComponentDecomposition pcs = principal_components(dist.cov_factor());
  const Vector scaled = pcs.singular_values.cwiseProduct(scales);
  Matrix factor = pcs.u * scaled.asDiagonal() * pcs.v.transpose();
  return dist.with_cov_factor(std::move(factor));
}

std::vector<Index> complement_indices(Index size, std::span<const Index> edit_indices) {
  std::vector<bool> edited(static_cast<std::size_t>(size), false);
  for (Index i : edit_indices) {
    if (i < 0 || i >= size) throw std::out_of_range("edit index out of range");
    edited[static_cast<std::size_t>(i)] = true;
  }
  std::vector<Index> rest;
  rest.reserve(static_cast<std::size_t>(size));
  for (Index i = 0; i < size; ++i) {
    if (!edited[static_cast<std::size_t>(i)]) rest.push_back(i);
  }
  return rest;
}

Vector condition_on_edit(const LowRankGaussian& dist, std::span<const Index> edit_indices,
                         const Vector& edit_values, const ConditionOptions& options) {
  const Index s = dist.size();
  const auto k = static_cast<Index>(edit_indices.size());
  require(edit_values.size() == k, "edit values and indices differ in length");
  if (k == 0) throw DegenerateInputError("no pixels to condition on");
  if (k >= s) throw DegenerateInputError("every pixel is edited");
  if (edit_indices.size() > options.max_edits) {
    throw LimitExceededError("edit count " + std::to_string(k) + " exceeds limit " +
                             std::to_string(options.max_edits));
  }
  require_finite(edit_values, "edit values");

  const std::vector<Index> rest = complement_indices(s, edit_indices);
  if (static_cast<Index>(rest.size()) != s - k) {
    throw std::invalid_argument("edit indices are not distinct");
  }

  const Matrix& p = dist.cov_factor();
  const Index r = dist.rank();
  Matrix p2(k, r);
  Vector innovation(k);
  Matrix sigma22 = Matrix::Zero(k, k);
  for (Index j = 0; j < k; ++j) {
    const Index i = edit_indices[static_cast<std::size_t>(j)];
    p2.row(j) = p.row(i);
    innovation[j] = edit_values[j] - dist.mu()[i];
    sigma22(j, j) = dist.cov_diag()[i];
  }
  if (r > 0) sigma22.noalias() += p2 * p2.transpose();

  const Eigen::LLT<Matrix> chol(sigma22);
  if (chol.info() != Eigen::Success) throw NumericalError("edited covariance block is singular");
  // Sigma_12 Sigma_22^-1 b = P_1 (P_2^T Sigma_22^-1 b)
  const Vector weights = p2.transpose() * chol.solve(innovation);

  Vector out(s - k);
  for (Index j = 0; j < s - k; ++j) {
    const Index i = rest[static_cast<std::size_t>(j)];
    out[j] = dist.mu()[i] + (r > 0 ? p.row(i).dot(weights) : 0.0);
  }
  return out;
}

Vector conditioned_image(const LowRankGaussian& dist, std::span<const Index> edit_indices,
                         const Vector& edit_values, const ConditionOptions& options) {
  const Vector unedited = condition_on_edit(dist, edit_indices, edit_values, options);
  const std::vector<Index> rest = complement_indices(dist.size(), edit_indices);
  Vector image(dist.size());
  for (std::size_t j = 0; j < rest.size(); ++j) image[rest[j]] = unedited[static_cast<Index>(j)];
  for (std::size_t j = 0; j < edit_indices.size(); ++j) {
    image[edit_indices[j]] = edit_values[static_cast<Index>(j)];
  }
  return image;
}

}  // namespace structobs
