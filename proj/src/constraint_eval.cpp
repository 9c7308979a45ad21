#include "kkth/constraint_eval.hpp"

#include <cmath>

namespace kkth::expr {

double CompiledSet::Fn::eval(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  double acc = 0.0;
  for (const auto& t : terms) {
    double v = t.coeff;
    for (const auto& f : t.factors) {
      double base = f.is_output ? y(f.index) : x(f.index);
      v *= f.integral ? std::pow(base, static_cast<double>(f.exp_int))
                      : std::pow(base, f.exp_value);
    }
    acc += v;
  }
  return acc;
}

CompiledSet::Fn CompiledSet::compile(const NormalForm& nf, const ConstraintSet& cs) const {
  Fn fn;
  for (const auto& m : nf.monomials) {
    if (m.has_opaque())
      throw std::invalid_argument("constraint with composite factors cannot be compiled");
    Term t;
    t.coeff = m.coeff;
    for (const auto& p : m.powers) {
      Factor f;
      f.is_output = p.cls == VarClass::Output;
      const auto& names = f.is_output ? cs.outputs : cs.inputs;
      for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == p.name) f.index = static_cast<int>(i);
      if (f.index < 0) throw std::invalid_argument("unknown variable: " + p.name);
      f.exp_value = p.exp.value();
      f.exp_int = p.exp.num;
      f.integral = p.exp.is_integer();
      t.factors.push_back(f);
    }
    fn.terms.push_back(std::move(t));
  }
  return fn;
}

CompiledSet::CompiledSet(const ConstraintSet& cs) {
  p_ = static_cast<int>(cs.outputs.size());
  for (const auto& c : cs.equalities) {
    eq_.push_back(compile(c.cleared, cs));
    std::vector<Fn> grads;
    for (const auto& out : cs.outputs)
      grads.push_back(compile(differentiate_nf(c.cleared, out), cs));
    eq_grad_.push_back(std::move(grads));
  }
  for (const auto& c : cs.inequalities) {
    in_.push_back(compile(c.cleared, cs));
    std::vector<Fn> grads;
    for (const auto& out : cs.outputs)
      grads.push_back(compile(differentiate_nf(c.cleared, out), cs));
    in_grad_.push_back(std::move(grads));
  }
}

double CompiledSet::eq_value(int k, const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return eq_[static_cast<std::size_t>(k)].eval(x, y);
}

double CompiledSet::ineq_value(int k, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& y) const {
  return in_[static_cast<std::size_t>(k)].eval(x, y);
}

Eigen::RowVectorXd CompiledSet::eq_gradient(int k, const Eigen::VectorXd& x,
                                            const Eigen::VectorXd& y) const {
  Eigen::RowVectorXd g(p_);
  for (int j = 0; j < p_; ++j)
    g(j) = eq_grad_[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)].eval(x, y);
  return g;
}

Eigen::RowVectorXd CompiledSet::ineq_gradient(int k, const Eigen::VectorXd& x,
                                              const Eigen::VectorXd& y) const {
  Eigen::RowVectorXd g(p_);
  for (int j = 0; j < p_; ++j)
    g(j) = in_grad_[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)].eval(x, y);
  return g;
}

std::pair<double, double> CompiledSet::mean_violations(
    Eigen::Ref<const Eigen::MatrixXd> X, Eigen::Ref<const Eigen::MatrixXd> Y) const {
  double sum_h = 0.0, sum_g = 0.0;
  const int n = static_cast<int>(X.rows());
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x = X.row(i);
    Eigen::VectorXd y = Y.row(i);
    for (const auto& fn : eq_) sum_h += std::fabs(fn.eval(x, y));
    for (const auto& fn : in_) sum_g += std::max(fn.eval(x, y), 0.0);
  }
  double mh = eq_.empty() ? 0.0 : sum_h / static_cast<double>(n * n_eq());
  double mg = in_.empty() ? 0.0 : sum_g / static_cast<double>(n * n_ineq());
  return {mh, mg};
}

}  // namespace kkth::expr
