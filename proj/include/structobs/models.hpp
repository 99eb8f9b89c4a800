#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "structobs/constrained_optimizer.hpp"
#include "structobs/lowrank_gaussian.hpp"
#include "structobs/parameters.hpp"

namespace structobs {

/// Default constant diagonal used when the diagonal head is disabled.
inline constexpr double kDefaultEpsilon = 1e-5;

struct DiagonalGaussian {
  Vector mean;
  Vector log_var;
};

/// z = mean + exp(log_var / 2) .* eps
Vector reparameterize(const DiagonalGaussian& q, const Vector& eps);

/// KL(q || N(0, I)) = 1/2 sum(exp(log_var) + mean^2 - 1 - log_var)
double kl_to_standard_normal(const DiagonalGaussian& q);

/// Posterior parameters for a batch, one row per image.
struct EncodedBatch {
  Matrix mean;
  Matrix log_var;

  DiagonalGaussian row(Index i) const { return {mean.row(i).transpose(), log_var.row(i).transpose()}; }
};

/// Batch-averaged single-sample ELBO terms.
struct ElboTerms {
  double nll = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
};

/// Loss at the current parameters and its gradient for every block.
struct BatchObjective {
  LossBreakdown loss;
  GradList grads;
};

struct VaeConfig {
  Index image_size = 256;
  Index latent_dim = 16;
  Index rank = 8;
  std::vector<Index> hidden = {256, 128};
  bool epsilon_mode = false;
  double epsilon = kDefaultEpsilon;
};

enum class DecoderHead { mean, factor, diag };

/// Dense encoder to a diagonal Gaussian posterior and a dense decoder with
/// three affine heads producing (mu, P, log d). Hidden layers use tanh.
///
/// Parameters live in a single ParamList so that the optimizer, the freeze
/// mask and checkpointing all see the same blocks.
class VaeModel {
 public:
  /// Random fan-in initialization from `seed`. The mean head's bias starts at
  /// `data_mean` (0.5 when empty), the factor head at exactly zero, and the
  /// diagonal head's bias at log(initial_variance).
  VaeModel(VaeConfig config, std::uint64_t seed, const Vector& data_mean = {},
           double initial_variance = 1e-2);

  /// Restore from previously saved blocks; names and shapes must match.
  VaeModel(VaeConfig config, ParamList params);

  const VaeConfig& config() const { return config_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

  EncodedBatch encode(const Matrix& images) const;
  LowRankGaussian decode(const Vector& z) const;

  ElboTerms elbo_terms(const Matrix& images, const Matrix& eps) const;

  /// Lagrangian of the batch and its gradient by backpropagation. Frozen heads
  /// are treated as constants: no gradient reaches them or flows through them.
  BatchObjective objective(const Matrix& images, const Matrix& eps,
                           const LagrangianState& state) const;

  void set_head_frozen(DecoderHead head, bool frozen);
  bool head_frozen(DecoderHead head) const;
  bool has_head(DecoderHead head) const;

  /// Re-draw the factor head's final weights at a small scale. Needed when
  /// unfreezing: P = 0 is a stationary point of the likelihood in P.
  void perturb_factor_head(std::mt19937_64& rng, double scale = 1e-2);

 private:
  struct Layer {
    std::size_t weight;
    std::size_t bias;
  };
  struct Forward;

  void build_layout();
  void initialize(std::uint64_t seed, const Vector& data_mean, double initial_variance);
  Forward forward(const Matrix& images, const Matrix& eps) const;
  std::vector<std::size_t> head_blocks(DecoderHead head) const;

  VaeConfig config_;
  ParamList params_;
  std::vector<Layer> encoder_;
  std::vector<Layer> trunk_;
  Layer mean_head_{};
  Layer factor_head_{};
  std::optional<Layer> diag_head_;
};

/// The observational distribution as free parameters with no network:
/// blocks "dist.mu" (S x 1), "dist.cov_factor" (S x R) and, unless in
/// epsilon mode, "dist.log_diag" (S x 1).
class DistOnlyModel {
 public:
  DistOnlyModel(Index image_size, Index rank, bool epsilon_mode = false,
                double epsilon = kDefaultEpsilon);
  explicit DistOnlyModel(ParamList params, double epsilon = kDefaultEpsilon);

  static DistOnlyModel initialized(Index image_size, Index rank, std::uint64_t seed,
                                   bool epsilon_mode = false, double epsilon = kDefaultEpsilon);

  Index image_size() const { return params_[0].value.rows(); }
  Index rank() const { return params_[1].value.cols(); }
  bool epsilon_mode() const { return params_.size() == 2; }
  double epsilon() const { return epsilon_; }

  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

  LowRankGaussian distribution() const;

  BatchObjective objective(const Matrix& images, const LagrangianState& state) const;

 private:
  ParamList params_;
  double epsilon_;
};

/// Entropy of an isotropic Gaussian on `size` pixels with the given per-pixel
/// variance; the default entropy slack for desk-scale runs.
double isotropic_entropy(Index size, double pixel_variance);

struct FitConfig {
  Index rank = 2;
  int epochs = 200;
  Index batch_size = 500;
  std::uint64_t seed = 0;
  double learning_rate = 1e-2;
  bool epsilon_mode = false;
  double epsilon = kDefaultEpsilon;
  /// Entropy slack xi_H = isotropic_entropy(S, target_pixel_variance).
  double target_pixel_variance = 1e-3;
  double damping = 1.0;
  double multiplier_lr = 1e-2;
  /// Called once per epoch with (epoch, mean loss over the epoch).
  std::function<void(int, const LossBreakdown&)> on_epoch;
};

/// Fit a DistOnlyModel to the rows of `images` by minimizing the mean negative
/// log-likelihood under the entropy constraint.
/// Throws NumericalError if the loss becomes non-finite.
DistOnlyModel fit_dist_only(const Matrix& images, const FitConfig& config);

}  // namespace structobs
