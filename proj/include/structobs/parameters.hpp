#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace structobs {

/// A named, independently freezable block of model parameters.
struct ParamBlock {
  std::string name;
  Eigen::MatrixXd value;
  bool trainable = true;
};

using ParamList = std::vector<ParamBlock>;

/// Gradients aligned index-for-index with a ParamList.
using GradList = std::vector<Eigen::MatrixXd>;

inline GradList zero_grads(const ParamList& params) {
  GradList grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
  return grads;
}

inline std::size_t find_param(const ParamList& params, std::string_view name) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == name) return i;
  }
  return params.size();
}

}  // namespace structobs
