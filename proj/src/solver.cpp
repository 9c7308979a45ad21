#include "kkth/solver.hpp"

#include <Eigen/Cholesky>
#include <cmath>

namespace kkth::solver {

using compiler::KktSystem;
using compiler::MultVar;
using compiler::Row;
using compiler::RowKind;
using compiler::StructuredSystem;

namespace {
constexpr double kExpArgLimit = 700.0;  // exp() overflow guard
}

void SolverConfig::validate() const {
  if (max_iters < 1) throw std::invalid_argument("solver: max_iters must be >= 1");
  if (!(tol > 0.0)) throw std::invalid_argument("solver: tol must be positive");
  if (!(tikhonov > 0.0)) throw std::invalid_argument("solver: tikhonov must be positive");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("solver: alpha in (0,1]");
  if (!(eps_init > 0.0)) throw std::invalid_argument("solver: eps_init must be positive");
  if (!(eps_log > 0.0)) throw std::invalid_argument("solver: eps_log must be positive");
  if (shrink <= 0.0 || shrink >= 1.0) throw std::invalid_argument("solver: shrink in (0,1)");
}

// ---------------------------------------------------------------------------
// Full-row residual and Jacobian (reference implementations).

Eigen::VectorXd residual(const StructuredSystem& sys, const Eigen::VectorXd& x_raw,
                         const Eigen::VectorXd& y0_hat, const Eigen::VectorXd& tau) {
  const auto& cat = sys.catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  if (tau.size() != p + q + L) throw std::invalid_argument("tau dimension mismatch");
  Eigen::VectorXd x_aug = sys.lift_inputs(x_raw);
  Eigen::VectorXd f(sys.n_rows());
  const auto y = tau.head(p);
  const auto z = tau.segment(p, q);
  const auto lam = tau.tail(L);
  for (int i = 0; i < sys.n_rows(); ++i) {
    const Row& row = sys.rows[i];
    double v = row.a.dot(x_aug) + row.by.dot(y) + row.cz.dot(z) + row.cl.dot(lam) - row.rhs;
    if (row.stat_output >= 0) v -= y0_hat(row.stat_output);
    for (int j = 0; j < row.ax.size(); ++j)
      if (row.ax(j) != 0.0) v += row.ax(j) * std::exp(x_aug(j));
    if (row.exp_index >= 0) {
      const auto& h = sys.hrows[row.exp_index];
      double w = h.hy.dot(y) + h.hz.dot(z);
      if (w > kExpArgLimit)
        throw SolverError("exp overflow in row '" + row.label + "'");
      v -= row.exp_coeff * std::exp(w);
    }
    f(i) = v;
  }
  return f;
}

Eigen::MatrixXd jacobian(const StructuredSystem& sys, const Eigen::VectorXd& x_raw,
                         const Eigen::VectorXd& tau) {
  (void)x_raw;
  const auto& cat = sys.catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  if (tau.size() != p + q + L) throw std::invalid_argument("tau dimension mismatch");
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(sys.n_rows(), p + q + L);
  const auto y = tau.head(p);
  const auto z = tau.segment(p, q);
  for (int i = 0; i < sys.n_rows(); ++i) {
    const Row& row = sys.rows[i];
    jac.block(i, 0, 1, p) = row.by;
    jac.block(i, p, 1, q) = row.cz;
    jac.block(i, p + q, 1, L) = row.cl;
    if (row.exp_index >= 0) {
      const auto& h = sys.hrows[row.exp_index];
      double w = h.hy.dot(y) + h.hz.dot(z);
      if (w > kExpArgLimit)
        throw SolverError("exp overflow in row '" + row.label + "'");
      double scale = row.exp_coeff * std::exp(w);
      jac.block(i, 0, 1, p) -= scale * h.hy;
      jac.block(i, p, 1, q) -= scale * h.hz;
    }
  }
  return jac;
}

// ---------------------------------------------------------------------------
// Projector

Projector::Projector(const KktSystem& sys) : sys_(&sys) {
  const auto& cat = sys.catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  n_unknowns_ = p + q + L;
  for (int i = 0; i < sys.n_rows(); ++i) {
    const Row& row = sys.rows[i];
    bool has_unknown = row.exp_index >= 0 || row.by.cwiseAbs().sum() > 0.0 ||
                       row.cz.cwiseAbs().sum() > 0.0 || row.cl.cwiseAbs().sum() > 0.0;
    if (has_unknown) solve_rows_.push_back(i);
  }
  const int n = static_cast<int>(solve_rows_.size());
  M_.setZero(n, n_unknowns_);
  for (int r = 0; r < n; ++r) {
    const Row& row = sys.rows[solve_rows_[r]];
    M_.block(r, 0, 1, p) = row.by;
    M_.block(r, p, 1, q) = row.cz;
    M_.block(r, p + q, 1, L) = row.cl;
    if (row.exp_index >= 0) {
      ExpTerm term;
      term.solve_row = r;
      term.coeff = row.exp_coeff;
      term.h.setZero(n_unknowns_);
      term.h.head(p) = sys.hrows[row.exp_index].hy;
      term.h.segment(p, q) = sys.hrows[row.exp_index].hz;
      exp_terms_.push_back(std::move(term));
    }
    if (row.kind == RowKind::Stationarity) stat_.emplace_back(r, row.stat_output);
  }
  for (int i = 0; i < L; ++i) {
    switch (cat.mults[i].kind) {
      case MultVar::Kind::EqPos:
      case MultVar::Kind::EqSplitPlus:
      case MultVar::Kind::EqSplitMinus:
      case MultVar::Kind::IneqMult:
      case MultVar::Kind::IneqSlack:
        positive_cols_.push_back(p + q + i);
        break;
      default:
        break;
    }
  }
}

Eigen::VectorXd Projector::row_constants(const Eigen::VectorXd& x_aug,
                                         const Eigen::VectorXd& y0_hat) const {
  Eigen::VectorXd consts(static_cast<int>(solve_rows_.size()));
  for (std::size_t r = 0; r < solve_rows_.size(); ++r) {
    const Row& row = sys_->rows[solve_rows_[r]];
    double v = row.a.dot(x_aug) - row.rhs;
    if (row.stat_output >= 0) v -= y0_hat(row.stat_output);
    for (int j = 0; j < row.ax.size(); ++j)
      if (row.ax(j) != 0.0) v += row.ax(j) * std::exp(x_aug(j));
    consts(static_cast<int>(r)) = v;
  }
  return consts;
}

void Projector::eval_residual(const Eigen::VectorXd& consts, const Eigen::VectorXd& tau,
                              Eigen::VectorXd& f, bool& overflow) const {
  f.noalias() = M_ * tau;
  f += consts;
  overflow = false;
  for (const auto& term : exp_terms_) {
    double w = term.h.dot(tau);
    if (w > kExpArgLimit) {
      overflow = true;
      return;
    }
    f(term.solve_row) -= term.coeff * std::exp(w);
  }
}

void Projector::eval_jacobian(const Eigen::VectorXd& tau, Eigen::MatrixXd& jac) const {
  jac = M_;
  for (const auto& term : exp_terms_) {
    double w = term.h.dot(tau);
    double scale = term.coeff * std::exp(std::min(w, kExpArgLimit));
    jac.row(term.solve_row) -= scale * term.h;
  }
}

Eigen::VectorXd Projector::initial_tau(const Eigen::VectorXd& x_aug,
                                       const Eigen::VectorXd& y0_hat,
                                       const SolverConfig& cfg) const {
  const auto& cat = sys_->catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  Eigen::VectorXd y = y0_hat;
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(L);
  if (!sys_->fb_chains.empty()) {
    Eigen::VectorXd z0 = sys_->complete_aux(x_aug, y, lam, cfg.eps_log);
    for (const auto& chain : sys_->fb_chains) {
      double g = sys_->eval_inequality(chain.ineq_index, x_aug, y, z0);
      lam(chain.mu_col) = std::max(g, 0.0) + cfg.eps_init;
      lam(chain.s_col) = std::max(-g, 0.0) + cfg.eps_init;
    }
  }
  for (int i = 0; i < L; ++i) {
    auto kind = cat.mults[i].kind;
    if (kind == MultVar::Kind::EqSplitPlus || kind == MultVar::Kind::EqSplitMinus)
      lam(i) = cfg.eps_init;
  }
  // Auxiliaries are lifted at eps-inflated positive multipliers: a multiplier
  // starting at zero would park its log chain at log(eps_log), where the
  // exponential rows have no gradient left to escape with.
  Eigen::VectorXd lam_lift = lam;
  for (int i = 0; i < L; ++i)
    if (cat.mults[i].kind == MultVar::Kind::EqPos)
      lam_lift(i) = std::max(lam_lift(i), cfg.eps_init);
  Eigen::VectorXd z = sys_->complete_aux(x_aug, y, lam_lift, cfg.eps_log);
  Eigen::VectorXd tau(p + q + L);
  tau << y, z, lam;
  return tau;
}

ProjectionResult Projector::project(const Eigen::VectorXd& x_raw, const Eigen::VectorXd& y0_hat,
                                    const SolverConfig& cfg) const {
  return run(x_raw, y0_hat, cfg, nullptr);
}

ProjectionResult Projector::project_with_sensitivity(const Eigen::VectorXd& x_raw,
                                                     const Eigen::VectorXd& y0_hat,
                                                     const SolverConfig& cfg,
                                                     Eigen::MatrixXd& dy_dy0) const {
  return run(x_raw, y0_hat, cfg, &dy_dy0);
}

// Damped Gauss-Newton on the solve rows. The Tikhonov weight follows the
// residual (gamma = gamma0 * min(1, |F|^2), escalated tenfold on rejected
// steps) and the damped system is solved through a QR factorization of the
// stacked matrix [J; sqrt(gamma) I] so the vanishing-curvature directions of
// the log chains survive in floating point. Exp-parameterized multiplier
// columns are clamped multiplicatively to stay positive. After each accepted
// step the auxiliaries are re-centered onto their defining chains whenever
// that lowers the residual, and the last few iterations fall back to Newton
// on the reduced (y, lambda) system, which stays regular at complementarity
// kinks where the chain curvature dies.
//
// With `dy_dy0` non-null, forward sensitivities d tau / d y0_hat are
// propagated through the initialization and every accepted step of the plain
// iteration (no re-centering/polish; the step size is treated as constant).
ProjectionResult Projector::run(const Eigen::VectorXd& x_raw, const Eigen::VectorXd& y0_hat,
                                const SolverConfig& cfg, Eigen::MatrixXd* dy_dy0) const {
  cfg.validate();
  const auto& cat = sys_->catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  const int n = static_cast<int>(solve_rows_.size());
  if (y0_hat.size() != p) throw std::invalid_argument("y0_hat dimension mismatch");
  if (!y0_hat.allFinite()) throw std::invalid_argument("y0_hat must be finite");

  Eigen::VectorXd x_aug = sys_->lift_inputs(x_raw, cfg.eps_log);
  Eigen::VectorXd consts = row_constants(x_aug, y0_hat);
  Eigen::VectorXd tau = initial_tau(x_aug, y0_hat, cfg);

  const bool with_sens = dy_dy0 != nullptr;
  Eigen::MatrixXd sens;  // n_unknowns x p
  if (with_sens) init_sensitivity(x_aug, y0_hat, cfg, sens);

  auto clamp_positive = [&](Eigen::VectorXd trial, const Eigen::VectorXd& from) {
    for (int col : positive_cols_)
      trial(col) = std::max(trial(col), 1e-4 * from(col));
    return trial;
  };

  ProjectionResult result;
  Eigen::VectorXd f(n), f_trial(n);
  bool overflow = false;
  eval_residual(consts, tau, f, overflow);
  if (overflow) throw SolverError("exp overflow at the initial iterate");

  Eigen::VectorXd best_tau = tau;
  Eigen::MatrixXd best_sens = sens;
  double best_inf = f.lpNorm<Eigen::Infinity>();
  double merit = 0.5 * f.squaredNorm();

  Eigen::MatrixXd jac(n, n_unknowns_);
  Eigen::MatrixXd stacked(n + n_unknowns_, n_unknowns_);
  Eigen::VectorXd stacked_rhs = Eigen::VectorXd::Zero(n + n_unknowns_);
  double boost = 1.0;
  int escalations = 0;
  int iters = 0;

  Eigen::MatrixXd P;  // stationarity selector: dF/dy0_hat = -P
  if (with_sens) {
    P.setZero(n, p);
    for (const auto& [row, out] : stat_) P(row, out) = 1.0;
  }

  // Reserve tail iterations for the reduced polish (not in sensitivity mode).
  const int polish_budget = (!with_sens && cfg.max_iters >= 12) ? 6 : 0;
  const int k_main = cfg.max_iters - polish_budget;

  for (int k = 0; k < k_main && best_inf > cfg.tol; ++k) {
    eval_jacobian(tau, jac);
    Eigen::VectorXd grad = jac.transpose() * f;
    double fi = f.lpNorm<Eigen::Infinity>();
    double gamma = cfg.tikhonov * std::min(1.0, fi * fi) * boost + 1e-300;

    stacked.topRows(n) = jac;
    stacked.bottomRows(n_unknowns_) =
        std::sqrt(gamma) * Eigen::MatrixXd::Identity(n_unknowns_, n_unknowns_);
    stacked_rhs.head(n) = -f;
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(stacked);
    Eigen::VectorXd delta = qr.solve(stacked_rhs);
    if (!delta.allFinite()) {
      boost *= 10.0;
      if (++escalations > cfg.max_gamma_escalations)
        throw SolverError("Gauss-Newton linear solve failed after Tikhonov escalation");
      continue;
    }
    double slope = grad.dot(delta);
    if (!(slope < 0.0)) break;  // merit stationary up to rounding

    double alpha = cfg.alpha;
    bool accepted = false;
    Eigen::VectorXd candidate;
    if (cfg.step == StepPolicy::Fixed) {
      candidate = clamp_positive(tau + alpha * delta, tau);
      eval_residual(consts, candidate, f_trial, overflow);
      if (overflow) break;
      accepted = true;
    } else {
      for (int bt = 0; bt < cfg.max_backtracks; ++bt) {
        candidate = clamp_positive(tau + alpha * delta, tau);
        eval_residual(consts, candidate, f_trial, overflow);
        if (!overflow) {
          double m_trial = 0.5 * f_trial.squaredNorm();
          if (m_trial <= merit + cfg.armijo_c * alpha * slope) {
            accepted = true;
            break;
          }
        }
        alpha *= cfg.shrink;
      }
    }
    if (!accepted) {
      ++iters;
      boost *= 10.0;
      if (boost > 1e12) break;
      continue;
    }
    boost = 1.0;

    if (with_sens) {
      // dDelta = -Mn^{-1} (dMn Delta + dJ^T f + J^T df), df = J S - P, with
      // Mn = J^T J + gamma I = R^T R from the stacked factorization.
      Eigen::MatrixXd R = qr.matrixQR()
                              .topRows(n_unknowns_)
                              .template triangularView<Eigen::Upper>();
      Eigen::VectorXd jdelta = jac * delta;
      Eigen::MatrixXd dF = jac * sens - P;
      Eigen::MatrixXd rhs(n_unknowns_, p);
      for (int col = 0; col < p; ++col) {
        Eigen::VectorXd acc = jac.transpose() * dF.col(col);
        for (const auto& term : exp_terms_) {
          double w = term.h.dot(tau);
          double scale = term.coeff * std::exp(std::min(w, kExpArgLimit));
          double dw = term.h.dot(sens.col(col));
          double c = -scale * dw;  // dJ row = c * h
          acc += c * (f(term.solve_row) + jdelta(term.solve_row)) * term.h.transpose();
          acc += c * (term.h.dot(delta)) * jac.row(term.solve_row).transpose();
        }
        rhs.col(col) = acc;
      }
      Eigen::MatrixXd step = R.transpose().triangularView<Eigen::Lower>().solve(rhs);
      sens -= alpha * R.triangularView<Eigen::Upper>().solve(step);
    }

    tau = candidate;
    f = f_trial;
    merit = 0.5 * f.squaredNorm();
    ++iters;
    double inf = f.lpNorm<Eigen::Infinity>();
    if (inf < best_inf) {
      best_inf = inf;
      best_tau = tau;
      if (with_sens) best_sens = sens;
    }

    if (!with_sens) {
      // Opportunistic re-centering of the auxiliaries onto their chains.
      Eigen::VectorXd centered(n_unknowns_);
      centered << tau.head(p),
          sys_->complete_aux(x_aug, tau.head(p), tau.tail(L), cfg.eps_log), tau.tail(L);
      Eigen::VectorXd f_centered(n);
      eval_residual(consts, centered, f_centered, overflow);
      if (!overflow) {
        double inf_centered = f_centered.lpNorm<Eigen::Infinity>();
        if (inf_centered < inf) {
          tau = centered;
          f = f_centered;
          merit = 0.5 * f.squaredNorm();
          if (inf_centered < best_inf) {
            best_inf = inf_centered;
            best_tau = tau;
          }
        }
      }
    }
  }

  if (polish_budget > 0 && best_inf > cfg.tol)
    iters += polish_reduced(x_aug, consts, cfg, polish_budget, best_tau, best_inf);

  result.y_proj = best_tau.head(p);
  result.z = best_tau.segment(p, q);
  result.lambda = best_tau.tail(L);
  result.residual_inf = best_inf;
  result.iters = iters;
  result.converged = best_inf <= cfg.tol;
  result.gamma_escalations = escalations;
  if (with_sens) *dy_dy0 = best_sens.topRows(p);
  return result;
}

int Projector::polish_reduced(const Eigen::VectorXd& x_aug, const Eigen::VectorXd& consts,
                              const SolverConfig& cfg, int budget, Eigen::VectorXd& best_tau,
                              double& best_inf) const {
  const auto& cat = sys_->catalog;
  const int p = cat.p(), q = cat.q(), L = cat.n_lambda();
  const int n = static_cast<int>(solve_rows_.size());
  const int nr = p + L;
  Eigen::VectorXd y = best_tau.head(p);
  Eigen::VectorXd lam = best_tau.tail(L);
  Eigen::VectorXd f(n), f_trial(n);
  bool overflow = false;
  int steps = 0;
  for (; steps < budget; ++steps) {
    Eigen::VectorXd z;
    Eigen::MatrixXd dz_dy, dz_dl;
    detail::complete_aux_jacobian(*sys_, x_aug, y, lam, cfg.eps_log, z, dz_dy, dz_dl);
    Eigen::VectorXd tau(n_unknowns_);
    tau << y, z, lam;
    eval_residual(consts, tau, f, overflow);
    if (overflow) break;
    double fi = f.lpNorm<Eigen::Infinity>();
    if (fi < best_inf) {
      best_inf = fi;
      best_tau = tau;
    }
    if (best_inf <= cfg.tol) break;

    Eigen::MatrixXd jac(n, n_unknowns_);
    eval_jacobian(tau, jac);
    Eigen::MatrixXd reduced(n, nr);
    reduced.leftCols(p) = jac.leftCols(p) + jac.middleCols(p, q) * dz_dy;
    reduced.rightCols(L) = jac.rightCols(L) + jac.middleCols(p, q) * dz_dl;
    double gamma = 1e-3 * cfg.tikhonov * std::min(1.0, fi * fi) + 1e-300;
    Eigen::MatrixXd stacked(n + nr, nr);
    stacked.topRows(n) = reduced;
    stacked.bottomRows(nr) = std::sqrt(gamma) * Eigen::MatrixXd::Identity(nr, nr);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + nr);
    rhs.head(n) = -f;
    Eigen::VectorXd delta = stacked.householderQr().solve(rhs);
    if (!delta.allFinite()) break;

    double alpha = 1.0;
    bool improved = false;
    for (int bt = 0; bt < 12; ++bt) {
      Eigen::VectorXd y_t = y + alpha * delta.head(p);
      Eigen::VectorXd lam_t = lam + alpha * delta.tail(L);
      for (int col : positive_cols_) {
        int idx = col - p - q;
        lam_t(idx) = std::max(lam_t(idx), 1e-4 * lam(idx));
      }
      Eigen::VectorXd z_t = sys_->complete_aux(x_aug, y_t, lam_t, cfg.eps_log);
      Eigen::VectorXd tau_t(n_unknowns_);
      tau_t << y_t, z_t, lam_t;
      eval_residual(consts, tau_t, f_trial, overflow);
      if (!overflow && f_trial.lpNorm<Eigen::Infinity>() < fi) {
        y = y_t;
        lam = lam_t;
        improved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!improved) break;
  }
  return steps;
}

ProjectionResult project_newton(const KktSystem& sys, const Eigen::VectorXd& x_raw,
                                const Eigen::VectorXd& y0_hat, const SolverConfig& cfg) {
  Projector proj(sys);
  return proj.project(x_raw, y0_hat, cfg);
}

Eigen::VectorXd projection_vjp(const KktSystem& sys, const Eigen::VectorXd& x_raw,
                               const ProjectionResult& solution, const Eigen::VectorXd& upstream,
                               const SolverConfig& cfg) {
  Projector proj(sys);
  return proj.vjp(x_raw, solution, upstream, cfg);
}

}  // namespace kkth::solver
