#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace structobs {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Multivariate normal over a flattened image with covariance
/// Sigma = P P^T + diag(d), P of shape S x R and d > 0.
///
/// The S x S covariance is never formed; every operation below runs in
/// O(S R^2) time or better. Instances are immutable.
class LowRankGaussian {
 public:
  LowRankGaussian(Vector mu, Matrix cov_factor, Vector cov_diag);

  /// Diagonal fixed to a broadcast constant, D = epsilon * I.
  static LowRankGaussian with_constant_diag(Vector mu, Matrix cov_factor,
                                            double epsilon);

  Index size() const { return mu_.size(); }
  Index rank() const { return cov_factor_.cols(); }

  const Vector& mu() const { return mu_; }
  const Matrix& cov_factor() const { return cov_factor_; }
  const Vector& cov_diag() const { return cov_diag_; }

  LowRankGaussian with_mu(Vector mu) const;
  LowRankGaussian with_cov_factor(Matrix cov_factor) const;

 private:
  Vector mu_;
  Matrix cov_factor_;
  Vector cov_diag_;
};

/// Woodbury capacitance M = I_R + P^T D^-1 P and its Cholesky factor, plus
/// log det Sigma from the matrix determinant lemma.
struct CapacitanceCache {
  Matrix m;
  Eigen::LLT<Matrix> chol_m;
  double logdet_sigma = 0.0;
  Matrix scaled_factor;  // D^-1 P
};

CapacitanceCache build_cache(const LowRankGaussian& dist);

/// Sigma^-1 v via Woodbury.
Vector apply_precision(const LowRankGaussian& dist, const CapacitanceCache& cache,
                       const Vector& v);

/// diag(Sigma^-1).
Vector precision_diagonal(const LowRankGaussian& dist, const CapacitanceCache& cache);

/// Per-pixel marginal variance, diag(Sigma) = d + rowwise |P|^2.
Vector marginal_variance(const LowRankGaussian& dist);

double log_prob(const LowRankGaussian& dist, const Vector& x);
double log_prob(const LowRankGaussian& dist, const CapacitanceCache& cache,
                const Vector& x);

/// Gradient with respect to each parameter block of the distribution.
struct DistributionGrad {
  Vector mu;
  Matrix cov_factor;
  Vector cov_diag;

  static DistributionGrad zeros(Index size, Index rank);
  DistributionGrad& operator+=(const DistributionGrad& other);
  DistributionGrad& operator*=(double scale);
};

DistributionGrad log_prob_grad(const LowRankGaussian& dist, const Vector& x);
DistributionGrad log_prob_grad(const LowRankGaussian& dist,
                               const CapacitanceCache& cache, const Vector& x);

/// Mean log-density of the rows of `samples` and its gradient, computed in one
/// pass: the sample-independent parts of the gradient are shared.
struct MeanLogProb {
  double value = 0.0;
  DistributionGrad grad;
};
MeanLogProb mean_log_prob_with_grad(const LowRankGaussian& dist, const Matrix& samples);

double entropy(const LowRankGaussian& dist);
double entropy(const LowRankGaussian& dist, const CapacitanceCache& cache);

/// The mu block is always zero.
DistributionGrad entropy_grad(const LowRankGaussian& dist);
DistributionGrad entropy_grad(const LowRankGaussian& dist, const CapacitanceCache& cache);

/// Auxiliary noise (omega_p, omega_d) that fully determines a sample.
struct ObservationNoise {
  Vector omega_p;  // length R
  Vector omega_d;  // length S

  template <class Rng>
  static ObservationNoise standard_normal(Index rank, Index size, Rng& rng) {
    std::normal_distribution<double> normal;
    ObservationNoise noise{Vector(rank), Vector(size)};
    for (Index i = 0; i < rank; ++i) noise.omega_p[i] = normal(rng);
    for (Index i = 0; i < size; ++i) noise.omega_d[i] = normal(rng);
    return noise;
  }
};

/// y = mu + P omega_p + sqrt(d) .* omega_d
Vector sample(const LowRankGaussian& dist, const ObservationNoise& noise);

/// Spherical interpolation with omega = arccos(<a,b> / (|a||b|)).
/// Throws DegenerateInputError for zero-norm, parallel or antipodal input.
Vector slerp(const Vector& a, const Vector& b, double t);

/// Sample with omega_p slerped between the endpoints and omega_d held at
/// noise_a's value.
Vector slerp_interpolate(const LowRankGaussian& dist, const ObservationNoise& noise_a,
                         const ObservationNoise& noise_b, double t);

/// Thin SVD P = U diag(s) V^T with s descending and the largest-magnitude
/// entry of each column of U positive.
struct ComponentDecomposition {
  Matrix u;
  Vector singular_values;
  Matrix v;
};
ComponentDecomposition principal_components(const Matrix& cov_factor);

/// Copy of dist with P replaced by U diag(s .* a) V^T.
LowRankGaussian scale_components(const LowRankGaussian& dist, const Vector& scales);

struct ConditionOptions {
  std::size_t max_edits = 4096;
};

/// Mean of the unedited pixels given x[edit_indices] = edit_values:
///   mu_1 + Sigma_12 Sigma_22^-1 (b - mu_2)
/// with Sigma_22 formed densely (k x k). Entries are returned in ascending
/// order of pixel index.
Vector condition_on_edit(const LowRankGaussian& dist, std::span<const Index> edit_indices,
                         const Vector& edit_values, const ConditionOptions& options = {});

/// Full image after an edit: edited pixels carry their values, the rest the
/// conditional mean.
Vector conditioned_image(const LowRankGaussian& dist, std::span<const Index> edit_indices,
                         const Vector& edit_values, const ConditionOptions& options = {});

/// Pixel indices not present in edit_indices, ascending.
std::vector<Index> complement_indices(Index size, std::span<const Index> edit_indices);

}  // namespace structobs
