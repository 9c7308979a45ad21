#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace kkth::data {

// Sampled benchmark data: the first n_train rows are the training split, the
// next n_val rows the validation split.
struct Dataset {
  Eigen::MatrixXd inputs;   // N x m
  Eigen::MatrixXd targets;  // N x p
  int n_train = 0;
  int n_val = 0;
  std::uint64_t seed = 0;

  int total() const { return static_cast<int>(inputs.rows()); }

  Eigen::Ref<const Eigen::MatrixXd> train_inputs() const { return inputs.topRows(n_train); }
  Eigen::Ref<const Eigen::MatrixXd> train_targets() const { return targets.topRows(n_train); }
  Eigen::Ref<const Eigen::MatrixXd> val_inputs() const {
    return inputs.middleRows(n_train, n_val);
  }
  Eigen::Ref<const Eigen::MatrixXd> val_targets() const {
    return targets.middleRows(n_train, n_val);
  }
};

}  // namespace kkth::data
