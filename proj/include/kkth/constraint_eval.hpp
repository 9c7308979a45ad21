#pragma once

#include <Eigen/Dense>

#include "kkth/expr.hpp"

// Index-compiled constraint residuals and output gradients: the hot-loop
// counterpart of eval_nf / differentiate_nf on named points.

namespace kkth::expr {

class CompiledSet {
 public:
  CompiledSet() = default;
  explicit CompiledSet(const ConstraintSet& cs);

  int n_eq() const { return static_cast<int>(eq_.size()); }
  int n_ineq() const { return static_cast<int>(in_.size()); }
  int n_total() const { return n_eq() + n_ineq(); }
  int outputs() const { return p_; }

  double eq_value(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;
  double ineq_value(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;
  // d residual / d y
  Eigen::RowVectorXd eq_gradient(int k, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y) const;
  Eigen::RowVectorXd ineq_gradient(int k, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& y) const;

  // (mean |h|, mean max(g, 0)) over rows.
  std::pair<double, double> mean_violations(Eigen::Ref<const Eigen::MatrixXd> X,
                                            Eigen::Ref<const Eigen::MatrixXd> Y) const;

 private:
  struct Factor {
    bool is_output = false;
    int index = -1;
    double exp_value = 1.0;
    long long exp_int = 1;
    bool integral = true;
  };
  struct Term {
    double coeff = 0.0;
    std::vector<Factor> factors;
  };
  struct Fn {
    std::vector<Term> terms;
    double eval(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;
  };

  Fn compile(const NormalForm& nf, const ConstraintSet& cs) const;

  std::vector<Fn> eq_, in_;
  std::vector<std::vector<Fn>> eq_grad_, in_grad_;  // [constraint][output]
  int p_ = 0;
};

}  // namespace kkth::expr
