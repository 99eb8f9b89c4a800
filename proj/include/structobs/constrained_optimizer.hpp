#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "structobs/parameters.hpp"

namespace structobs {

/// Multipliers and targets of the two soft constraints
///   KL <= xi_kl   and   entropy <= xi_h
/// handled with the modified differential method of multipliers.
struct LagrangianState {
  double beta = 0.0;      // KL multiplier, >= 0
  double lambda_h = 0.0;  // entropy multiplier, >= 0
  double xi_kl = 0.0;
  double xi_h = 0.0;
  double damping = 1.0;
  double multiplier_lr = 1e-2;
  bool kl_enabled = true;
  bool entropy_enabled = true;
};

struct LossBreakdown {
  double nll = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double lagrangian = 0.0;
};

/// Penalty of one "value <= slack" constraint with violation g = value - slack:
///   multiplier * g + damping / 2 * max(0, g)^2
double constraint_penalty(double multiplier, double violation, double damping);

/// d penalty / d value.
double constraint_slope(double multiplier, double violation, double damping);

/// Gradient ascent on the multiplier, clamped at zero.
double ascend_multiplier(double multiplier, double violation, double learning_rate);

/// Objective minimized by the trainer:
///   nll + beta (kl - xi_kl) + lambda_h (entropy - xi_h) + damping terms.
/// Throws std::invalid_argument on non-finite input.
LossBreakdown lagrangian_value(double nll, double kl, double entropy, const LagrangianState& state);

/// Partial derivatives of lagrangian_value with respect to (nll, kl, entropy).
struct LagrangianWeights {
  double nll = 1.0;
  double kl = 0.0;
  double entropy = 0.0;
};
LagrangianWeights lagrangian_weights(double kl, double entropy, const LagrangianState& state);

LagrangianState update_multipliers(LagrangianState state, double kl, double entropy);

/// CSV row `step,nll,kl,entropy,beta,lambda_h,lagrangian`.
std::string training_log_header();
std::string training_log_row(std::int64_t step, const LossBreakdown& loss,
                             const LagrangianState& state);

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First-order parameter optimizer. Blocks with trainable == false are left
/// untouched, and so are their moments.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {});

  void step(ParamList& params, const GradList& grads);

  const OptimizerConfig& config() const { return config_; }

  // Per-block state; empty until the first step.
  std::vector<Eigen::MatrixXd> first_moment;
  std::vector<Eigen::MatrixXd> second_moment;
  std::vector<std::int64_t> step_count;

 private:
  void ensure_state(const ParamList& params);

  OptimizerConfig config_;
};

}  // namespace structobs
