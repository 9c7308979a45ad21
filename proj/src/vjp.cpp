#include <Eigen/Cholesky>
#include <cmath>

#include "kkth/solver.hpp"

// Gradients of the projection map y0_hat -> y_proj. The implicit route
// differentiates F(tau*; y0_hat) = 0 at the solution; the forward-sensitivity
// route (in solver.cpp's iteration loop) differentiates the unrolled iterates
// and needs the initialization derivatives computed here.

namespace kkth::solver {

using compiler::AuxVar;
using compiler::Col;
using compiler::ColClass;
using compiler::MultVar;

namespace detail {

void complete_aux_jacobian(const compiler::StructuredSystem& sys, const Eigen::VectorXd& x_aug,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& lambda,
                           double eps_log, Eigen::VectorXd& z, Eigen::MatrixXd& dz_dy,
                           Eigen::MatrixXd& dz_dl) {
  const auto& cat = sys.catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  z.setConstant(q, std::numeric_limits<double>::quiet_NaN());
  dz_dy.setZero(q, p);
  dz_dl.setZero(q, L);
  std::vector<char> done(static_cast<std::size_t>(std::max(q, 1)), 0);
  Eigen::RowVectorXd dy(p), dl(L);

  auto fetch = [&](Col c, bool& ok, Eigen::RowVectorXd& out_dy, Eigen::RowVectorXd& out_dl,
                   double& val) {
    out_dy.setZero(p);
    out_dl.setZero(L);
    switch (c.cls) {
      case ColClass::Input:
        val = x_aug(c.idx);
        return;
      case ColClass::Output:
        val = y(c.idx);
        out_dy(c.idx) = 1.0;
        return;
      case ColClass::Mult:
        val = lambda(c.idx);
        out_dl(c.idx) = 1.0;
        return;
      case ColClass::Aux:
        if (!done[static_cast<std::size_t>(c.idx)]) {
          ok = false;
          val = 0.0;
          return;
        }
        val = z(c.idx);
        out_dy = dz_dy.row(c.idx);
        out_dl = dz_dl.row(c.idx);
        return;
    }
    ok = false;
  };

  int remaining = q;
  for (int pass = 0; pass <= q && remaining > 0; ++pass) {
    for (int i = 0; i < q; ++i) {
      if (done[static_cast<std::size_t>(i)]) continue;
      const AuxVar& v = cat.aux[i];
      bool ok = true;
      double val = 0.0;
      switch (v.kind) {
        case AuxVar::Kind::ExpOfCol: {
          double ref;
          fetch(v.ref, ok, dy, dl, ref);
          if (!ok) break;
          val = std::exp(ref);
          dy *= val;
          dl *= val;
          break;
        }
        case AuxVar::Kind::LogOfCol: {
          double ref;
          fetch(v.ref, ok, dy, dl, ref);
          if (!ok) break;
          if (ref > eps_log) {
            val = std::log(ref);
            dy /= ref;
            dl /= ref;
          } else {
            val = std::log(eps_log);
            dy.setZero();
            dl.setZero();
          }
          break;
        }
        case AuxVar::Kind::Affine: {
          val = v.affine_const;
          dy.setZero();
          dl.setZero();
          Eigen::RowVectorXd tdy(p), tdl(L);
          for (const auto& [c, w] : v.affine) {
            double ref;
            fetch(c, ok, tdy, tdl, ref);
            if (!ok) break;
            val += w * ref;
            dy += w * tdy;
            dl += w * tdl;
          }
          break;
        }
      }
      if (ok) {
        z(i) = val;
        dz_dy.row(i) = dy;
        dz_dl.row(i) = dl;
        done[static_cast<std::size_t>(i)] = 1;
        --remaining;
      }
    }
  }
  if (remaining > 0) throw std::logic_error("auxiliary definitions contain a cycle");
}

}  // namespace detail

void Projector::init_sensitivity(const Eigen::VectorXd& x_aug, const Eigen::VectorXd& y0_hat,
                                 const SolverConfig& cfg, Eigen::MatrixXd& sens) const {
  const auto& cat = sys_->catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  sens.setZero(p + q + L, p);
  sens.topRows(p).setIdentity();

  Eigen::MatrixXd dlam = Eigen::MatrixXd::Zero(L, p);
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(L);
  if (!sys_->fb_chains.empty()) {
    Eigen::VectorXd z0;
    Eigen::MatrixXd dz0_dy, dz0_dl;
    detail::complete_aux_jacobian(*sys_, x_aug, y0_hat, lam, cfg.eps_log, z0, dz0_dy, dz0_dl);
    for (const auto& chain : sys_->fb_chains) {
      const auto& feas = sys_->rows[chain.feas_row];
      double g = feas.a.dot(x_aug) + feas.by.dot(y0_hat) + feas.cz.dot(z0) - feas.rhs;
      Eigen::RowVectorXd dg = feas.by + feas.cz * dz0_dy;
      lam(chain.mu_col) = std::max(g, 0.0) + cfg.eps_init;
      lam(chain.s_col) = std::max(-g, 0.0) + cfg.eps_init;
      if (g > 0.0) dlam.row(chain.mu_col) = dg;
      if (g < 0.0) dlam.row(chain.s_col) = -dg;
    }
  }
  for (int i = 0; i < L; ++i) {
    auto kind = cat.mults[i].kind;
    if (kind == MultVar::Kind::EqSplitPlus || kind == MultVar::Kind::EqSplitMinus)
      lam(i) = cfg.eps_init;
  }

  // Mirror initial_tau: the lift sees eps-inflated positive multipliers, and
  // the inflated entries are constants with respect to y0_hat.
  Eigen::VectorXd lam_lift = lam;
  Eigen::MatrixXd dlam_lift = dlam;
  for (int i = 0; i < L; ++i) {
    if (cat.mults[i].kind == MultVar::Kind::EqPos && lam_lift(i) < cfg.eps_init) {
      lam_lift(i) = cfg.eps_init;
      dlam_lift.row(i).setZero();
    }
  }
  Eigen::VectorXd z;
  Eigen::MatrixXd dz_dy, dz_dl;
  detail::complete_aux_jacobian(*sys_, x_aug, y0_hat, lam_lift, cfg.eps_log, z, dz_dy, dz_dl);
  sens.middleRows(p, q) = dz_dy + dz_dl * dlam_lift;
  sens.bottomRows(L) = dlam;
}

Eigen::VectorXd Projector::vjp(const Eigen::VectorXd& x_raw, const ProjectionResult& solution,
                               const Eigen::VectorXd& upstream, const SolverConfig& cfg,
                               bool allow_unconverged) const {
  if (!solution.converged && !allow_unconverged)
    throw SolverError("projection gradient undefined: solve did not converge");
  const auto& cat = sys_->catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  if (upstream.size() != p) throw std::invalid_argument("upstream dimension mismatch");
  Eigen::VectorXd tau(p + q + L);
  tau << solution.y_proj, solution.z, solution.lambda;

  const int n = static_cast<int>(solve_rows_.size());
  Eigen::MatrixXd jac(n, n_unknowns_);
  eval_jacobian(tau, jac);

  // (J^T J + gamma_a I) g = Q^T v solved through the stacked QR factor so the
  // flat log-chain directions keep their accuracy.
  double scale = std::max(1.0, jac.cwiseAbs().maxCoeff());
  double gamma_a = cfg.adjoint_tikhonov * scale * scale;
  Eigen::MatrixXd stacked(n + n_unknowns_, n_unknowns_);
  stacked.topRows(n) = jac;
  stacked.bottomRows(n_unknowns_) =
      std::sqrt(gamma_a) * Eigen::MatrixXd::Identity(n_unknowns_, n_unknowns_);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(stacked);
  Eigen::MatrixXd R =
      qr.matrixQR().topRows(n_unknowns_).template triangularView<Eigen::Upper>();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_unknowns_);
  rhs.head(p) = upstream;
  Eigen::VectorXd tmp = R.transpose().triangularView<Eigen::Lower>().solve(rhs);
  Eigen::VectorXd g = R.triangularView<Eigen::Upper>().solve(tmp);
  if (!g.allFinite()) throw SolverError("adjoint normal solve failed");
  Eigen::VectorXd w = jac * g;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(p);
  for (const auto& [row, j] : stat_) out(j) = w(row);
  (void)x_raw;
  return out;
}

}  // namespace kkth::solver
