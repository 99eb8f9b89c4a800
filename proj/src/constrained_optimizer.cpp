#include "structobs/constrained_optimizer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "structobs/errors.hpp"

namespace structobs {

namespace {

std::string format_double(double value) {
  char buffer[32];
  const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, result.ptr);
}

}  // namespace

double constraint_penalty(double multiplier, double violation, double damping) {
  const double active = std::max(0.0, violation);
  return multiplier * violation + 0.5 * damping * active * active;
}

double constraint_slope(double multiplier, double violation, double damping) {
  return multiplier + damping * std::max(0.0, violation);
}

double ascend_multiplier(double multiplier, double violation, double learning_rate) {
  return std::max(0.0, multiplier + learning_rate * violation);
}

LossBreakdown lagrangian_value(double nll, double kl, double entropy,
                               const LagrangianState& state) {
  if (!std::isfinite(nll) || !std::isfinite(kl) || !std::isfinite(entropy)) {
    throw std::invalid_argument("non-finite loss term");
  }
  LossBreakdown out{nll, kl, entropy, nll};
  if (state.kl_enabled) {
    out.lagrangian += constraint_penalty(state.beta, kl - state.xi_kl, state.damping);
  }
  if (state.entropy_enabled) {
    out.lagrangian += constraint_penalty(state.lambda_h, entropy - state.xi_h, state.damping);
  }
  return out;
}

LagrangianWeights lagrangian_weights(double kl, double entropy, const LagrangianState& state) {
  LagrangianWeights w;
  if (state.kl_enabled) w.kl = constraint_slope(state.beta, kl - state.xi_kl, state.damping);
  if (state.entropy_enabled) {
    w.entropy = constraint_slope(state.lambda_h, entropy - state.xi_h, state.damping);
  }
  return w;
}

LagrangianState update_multipliers(LagrangianState state, double kl, double entropy) {
  if (state.kl_enabled) {
    state.beta = ascend_multiplier(state.beta, kl - state.xi_kl, state.multiplier_lr);
  }
  if (state.entropy_enabled) {
    state.lambda_h = ascend_multiplier(state.lambda_h, entropy - state.xi_h, state.multiplier_lr);
  }
  return state;
}

std::string training_log_header() { return "step,nll,kl,entropy,beta,lambda_h,lagrangian"; }

std::string training_log_row(std::int64_t step, const LossBreakdown& loss,
                             const LagrangianState& state) {
  std::string row = std::to_string(step);
  for (double v : {loss.nll, loss.kl, loss.entropy, state.beta, state.lambda_h, loss.lagrangian}) {
    row += ',';
    row += format_double(v);
  }
  return row;
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
}

void Optimizer::ensure_state(const ParamList& params) {
  if (step_count.size() == params.size()) return;
  if (!step_count.empty()) throw DimensionError("optimizer state does not match parameter list");
  for (const auto& p : params) {
    first_moment.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
    second_moment.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
    step_count.push_back(0);
  }
}

void Optimizer::step(ParamList& params, const GradList& grads) {
  if (grads.size() != params.size()) throw DimensionError("gradient list length mismatch");
  ensure_state(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) {
      throw DimensionError("gradient shape mismatch for block " + p.name);
    }
    if (!p.trainable) continue;

    if (config_.kind == OptimizerKind::sgd) {
      p.value.noalias() -= config_.learning_rate * g;
      continue;
    }
    auto& m = first_moment[i];
    auto& v = second_moment[i];
    const std::int64_t t = ++step_count[i];
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
    p.value.array() -= config_.learning_rate * (m.array() / c1) /
                       ((v.array() / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace structobs
