#include <Eigen/Dense>
#include <cmath>

#include "kkth/solver.hpp"

// Closed-form projection onto constraint sets that are affine in the outputs:
// y = y0 - B^T (B B^T)^{-1} (B y0 + A x + A_x exp(x) - b), with a
// Moore-Penrose pseudo-inverse when B carries dependent or zero rows.

namespace kkth::solver {

using compiler::RowKind;
using compiler::StructuredSystem;
using expr::Monomial;
using expr::NormalForm;

namespace {

// Pseudo-inverse of a symmetric PSD matrix via its eigendecomposition.
Eigen::MatrixXd pinv_psd(const Eigen::MatrixXd& S, int& rank) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(S);
  const auto& vals = eig.eigenvalues();
  double tol = std::max(1e-13, vals.cwiseAbs().maxCoeff() * 1e-12) *
               static_cast<double>(S.rows());
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(vals.size());
  rank = 0;
  for (int i = 0; i < vals.size(); ++i) {
    if (vals(i) > tol) {
      inv(i) = 1.0 / vals(i);
      ++rank;
    }
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

AffineProjector build_affine_projector(const Eigen::MatrixXd& B_active, const Eigen::MatrixXd& A,
                                       const Eigen::MatrixXd& Ax, const Eigen::VectorXd& b,
                                       bool pseudo_inverse) {
  const int r = static_cast<int>(B_active.rows());
  const int p = static_cast<int>(B_active.cols());
  Eigen::MatrixXd BBt = B_active * B_active.transpose();
  int rank = 0;
  Eigen::MatrixXd inv;
  if (pseudo_inverse) {
    inv = pinv_psd(BBt, rank);
  } else {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(BBt);
    rank = static_cast<int>(lu.rank());
    if (rank < r)
      throw SolverError("B B^T is rank deficient (rank " + std::to_string(rank) + " of " +
                        std::to_string(r) + "); use the pseudo-inverse mode");
    inv = lu.inverse();
  }
  AffineProjector pr;
  pr.rank = rank;
  pr.Bactive = B_active;
  pr.update = B_active.transpose() * inv;
  pr.Bstar = Eigen::MatrixXd::Identity(p, p) - pr.update * B_active;
  pr.Astar = -pr.update * A;
  pr.Axstar = -pr.update * Ax;
  pr.bstar = pr.update * b;
  return pr;
}

AffineProjector build_affine_projector(const StructuredSystem& sys, bool pseudo_inverse,
                                       bool active_rows_only) {
  if (sys.catalog.q() != 0)
    throw SolverError("constraint set is not affine in the outputs (auxiliaries present)");
  if (sys.is_kkt)
    throw SolverError("affine projector expects the feasibility transform, not a KKT system");
  // With active_rows_only, keep the constraint rows that touch y; otherwise
  // take the full block-1 system (zero rows drop out of the pseudo-inverse).
  std::vector<int> rows;
  for (int i = 0; i < sys.n_rows(); ++i) {
    const auto& row = sys.rows[i];
    if (row.kind == RowKind::IneqFeasibility)
      throw SolverError("affine projector does not handle inequalities");
    if (active_rows_only && (row.kind != RowKind::Equality || row.by.cwiseAbs().sum() == 0.0))
      continue;
    rows.push_back(i);
  }
  const int r = static_cast<int>(rows.size());
  Eigen::MatrixXd B(r, sys.catalog.p()), A(r, sys.catalog.m_aug()), Ax(r, sys.catalog.m_aug());
  Eigen::VectorXd b(r);
  for (int i = 0; i < r; ++i) {
    const auto& row = sys.rows[rows[static_cast<std::size_t>(i)]];
    B.row(i) = row.by;
    A.row(i) = row.a;
    Ax.row(i) = row.ax;
    b(i) = row.rhs;
  }
  return build_affine_projector(B, A, Ax, b, pseudo_inverse);
}

Eigen::VectorXd project_affine(const AffineProjector& pr, const Eigen::VectorXd& x_aug,
                               const Eigen::VectorXd& y0_hat) {
  Eigen::VectorXd y = pr.Bstar * y0_hat + pr.bstar;
  if (pr.Astar.cols() > 0) y += pr.Astar * x_aug;
  for (int c = 0; c < pr.Axstar.cols(); ++c) {
    if (pr.Axstar.col(c).cwiseAbs().sum() == 0.0) continue;
    y += pr.Axstar.col(c) * std::exp(x_aug(c));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Per-sample affine projection for x-dependent output coefficients.

AffineTemplate extract_affine_template(const expr::ConstraintSet& cs) {
  cs.validate();
  if (!cs.inequalities.empty())
    throw SolverError("affine template does not handle inequalities");
  AffineTemplate tpl;
  tpl.cs = cs;
  const int p = static_cast<int>(cs.outputs.size());
  tpl.coeff.resize(cs.equalities.size());
  tpl.rhs.resize(cs.equalities.size());
  for (std::size_t k = 0; k < cs.equalities.size(); ++k) {
    tpl.coeff[k].resize(static_cast<std::size_t>(p));
    for (const Monomial& m : cs.equalities[k].cleared.monomials) {
      if (m.has_opaque())
        throw SolverError("affine template: composite factor in " + cs.equalities[k].label);
      int out_idx = -1;
      Monomial rest = m;
      rest.powers.clear();
      for (const auto& pw : m.powers) {
        if (pw.cls == expr::VarClass::Output) {
          if (out_idx >= 0 || pw.exp != expr::Rational(1))
            throw SolverError("constraint " + cs.equalities[k].label +
                              " is not affine in the outputs");
          for (int j = 0; j < p; ++j)
            if (cs.outputs[static_cast<std::size_t>(j)] == pw.name) out_idx = j;
        } else {
          rest.powers.push_back(pw);
          if (!pw.exp.is_zero()) tpl.input_dependent = true;
        }
      }
      if (out_idx >= 0) {
        tpl.coeff[k][static_cast<std::size_t>(out_idx)].monomials.push_back(rest);
      } else {
        Monomial moved = rest;
        moved.coeff = -moved.coeff;  // input-only terms move to the right-hand side
        tpl.rhs[k].monomials.push_back(moved);
      }
    }
  }
  // x-dependence only matters when it multiplies an output
  tpl.input_dependent = false;
  for (const auto& row : tpl.coeff)
    for (const auto& cell : row)
      for (const auto& m : cell.monomials)
        if (!m.powers.empty()) tpl.input_dependent = true;
  return tpl;
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> instantiate_affine(const AffineTemplate& tpl,
                                                               const Eigen::VectorXd& x_raw) {
  const int p = static_cast<int>(tpl.cs.outputs.size());
  const int r = static_cast<int>(tpl.coeff.size());
  expr::Point point;
  for (std::size_t i = 0; i < tpl.cs.inputs.size(); ++i)
    point[tpl.cs.inputs[i]] = x_raw(static_cast<int>(i));
  Eigen::MatrixXd B(r, p);
  Eigen::VectorXd rhs(r);
  for (int k = 0; k < r; ++k) {
    for (int j = 0; j < p; ++j)
      B(k, j) = eval_nf(tpl.coeff[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)],
                        point);
    rhs(k) = eval_nf(tpl.rhs[static_cast<std::size_t>(k)], point);
  }
  return {B, rhs};
}

Eigen::VectorXd project_affine(const AffineTemplate& tpl, const Eigen::VectorXd& x_raw,
                               const Eigen::VectorXd& y0_hat, bool pseudo_inverse) {
  auto [B, rhs] = instantiate_affine(tpl, x_raw);
  Eigen::VectorXd r = B * y0_hat - rhs;
  Eigen::MatrixXd BBt = B * B.transpose();
  if (pseudo_inverse) {
    int rank = 0;
    return y0_hat - B.transpose() * (pinv_psd(BBt, rank) * r);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(BBt);
  if (llt.info() != Eigen::Success)
    throw SolverError("affine projection: B B^T not positive definite");
  return y0_hat - B.transpose() * llt.solve(r);
}

}  // namespace kkth::solver
