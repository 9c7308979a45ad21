#include <Eigen/Dense>
#include <cmath>

#include "kkth/rng.hpp"
#include "kkth/solver.hpp"

// Test-only projection oracle, independent of the log-exponential route:
// rho-continuation penalty least squares with multistart, then plain Newton on
// the untransformed KKT conditions of the active set.

namespace kkth::solver {

using expr::NormalForm;
using expr::Point;

namespace {

struct ConstraintCalc {
  const expr::ConstraintSet* cs;
  int p = 0, ne = 0, ni = 0;
  std::vector<NormalForm> h, g;
  std::vector<std::vector<NormalForm>> dh, dg;
  std::vector<std::vector<std::vector<NormalForm>>> d2h, d2g;
  Point point;  // inputs bound once; outputs rebound per evaluation

  ConstraintCalc(const expr::ConstraintSet& set, const Eigen::VectorXd& x_raw) : cs(&set) {
    p = static_cast<int>(set.outputs.size());
    ne = static_cast<int>(set.equalities.size());
    ni = static_cast<int>(set.inequalities.size());
    auto build = [&](const std::vector<expr::Constraint>& src, std::vector<NormalForm>& val,
                     std::vector<std::vector<NormalForm>>& grad,
                     std::vector<std::vector<std::vector<NormalForm>>>& hess) {
      for (const auto& c : src) {
        val.push_back(c.cleared);
        std::vector<NormalForm> gk;
        std::vector<std::vector<NormalForm>> hk;
        for (int j = 0; j < p; ++j) {
          gk.push_back(expr::differentiate_nf(c.cleared, set.outputs[j]));
          std::vector<NormalForm> hrow;
          for (int l = 0; l < p; ++l)
            hrow.push_back(expr::differentiate_nf(gk.back(), set.outputs[l]));
          hk.push_back(std::move(hrow));
        }
        grad.push_back(std::move(gk));
        hess.push_back(std::move(hk));
      }
    };
    build(set.equalities, h, dh, d2h);
    build(set.inequalities, g, dg, d2g);
    for (std::size_t i = 0; i < set.inputs.size(); ++i)
      point[set.inputs[i]] = x_raw(static_cast<int>(i));
  }

  void bind(const Eigen::VectorXd& y) {
    for (int j = 0; j < p; ++j) point[cs->outputs[j]] = y(j);
  }

  double value(const NormalForm& nf) { return expr::eval_nf(nf, point); }

  Eigen::VectorXd h_values(const Eigen::VectorXd& y) {
    bind(y);
    Eigen::VectorXd out(ne);
    for (int k = 0; k < ne; ++k) out(k) = value(h[k]);
    return out;
  }
  Eigen::VectorXd g_values(const Eigen::VectorXd& y) {
    bind(y);
    Eigen::VectorXd out(ni);
    for (int k = 0; k < ni; ++k) out(k) = value(g[k]);
    return out;
  }
  Eigen::RowVectorXd h_grad(int k, const Eigen::VectorXd& y) {
    bind(y);
    Eigen::RowVectorXd out(p);
    for (int j = 0; j < p; ++j) out(j) = value(dh[k][j]);
    return out;
  }
  Eigen::RowVectorXd g_grad(int k, const Eigen::VectorXd& y) {
    bind(y);
    Eigen::RowVectorXd out(p);
    for (int j = 0; j < p; ++j) out(j) = value(dg[k][j]);
    return out;
  }
  Eigen::MatrixXd h_hess(int k, const Eigen::VectorXd& y) {
    bind(y);
    Eigen::MatrixXd out(p, p);
    for (int j = 0; j < p; ++j)
      for (int l = 0; l < p; ++l) out(j, l) = value(d2h[k][j][l]);
    return out;
  }
  Eigen::MatrixXd g_hess(int k, const Eigen::VectorXd& y) {
    bind(y);
    Eigen::MatrixXd out(p, p);
    for (int j = 0; j < p; ++j)
      for (int l = 0; l < p; ++l) out(j, l) = value(d2g[k][j][l]);
    return out;
  }
};

// Levenberg-Marquardt pass on 0.5 || y - y0 ||^2 + rho (||h||^2 + ||max(g,0)||^2).
Eigen::VectorXd penalty_descent(ConstraintCalc& calc, const Eigen::VectorXd& y0,
                                Eigen::VectorXd y) {
  const int p = calc.p;
  for (double rho : {1e2, 1e4, 1e6, 1e8, 1e10, 1e12}) {
    double damp = 1e-4;
    for (int it = 0; it < 120; ++it) {
      Eigen::VectorXd hv = calc.h_values(y);
      Eigen::VectorXd gv = calc.g_values(y);
      const double w = std::sqrt(2.0 * rho);
      Eigen::VectorXd r(p + calc.ne + calc.ni);
      Eigen::MatrixXd J(p + calc.ne + calc.ni, p);
      r.head(p) = y - y0;
      J.topRows(p).setIdentity();
      for (int k = 0; k < calc.ne; ++k) {
        r(p + k) = w * hv(k);
        J.row(p + k) = w * calc.h_grad(k, y);
      }
      for (int k = 0; k < calc.ni; ++k) {
        bool active = gv(k) > 0.0;
        r(p + calc.ne + k) = active ? w * gv(k) : 0.0;
        J.row(p + calc.ne + k) = active ? (w * calc.g_grad(k, y)).eval()
                                        : Eigen::RowVectorXd::Zero(p).eval();
      }
      Eigen::VectorXd grad = J.transpose() * r;
      if (grad.lpNorm<Eigen::Infinity>() < 1e-14 * rho) break;
      Eigen::MatrixXd N = J.transpose() * J;
      double obj = 0.5 * r.squaredNorm();
      bool moved = false;
      for (int tries = 0; tries < 25; ++tries) {
        Eigen::MatrixXd Nd = N;
        Nd.diagonal().array() += damp;
        Eigen::VectorXd step = Nd.llt().solve(-grad);
        Eigen::VectorXd y_trial = y + step;
        Eigen::VectorXd ht = calc.h_values(y_trial);
        Eigen::VectorXd gt = calc.g_values(y_trial);
        double obj_t = 0.5 * (y_trial - y0).squaredNorm() + rho * ht.squaredNorm();
        for (int k = 0; k < calc.ni; ++k) obj_t += rho * std::pow(std::max(gt(k), 0.0), 2);
        if (obj_t < obj) {
          y = y_trial;
          damp = std::max(damp * 0.3, 1e-12);
          moved = true;
          break;
        }
        damp *= 10.0;
      }
      if (!moved) break;
    }
  }
  return y;
}

struct PolishResult {
  Eigen::VectorXd y;
  bool ok = false;
};

// Newton on the smooth KKT system of the current active set.
PolishResult polish(ConstraintCalc& calc, const Eigen::VectorXd& y0, Eigen::VectorXd y,
                    double tol) {
  const int p = calc.p;
  std::vector<int> active;
  {
    Eigen::VectorXd gv = calc.g_values(y);
    for (int k = 0; k < calc.ni; ++k)
      if (gv(k) > -1e-6) active.push_back(k);
  }
  for (int round = 0; round < calc.ni + 2; ++round) {
    const int na = static_cast<int>(active.size());
    const int dim = p + calc.ne + na;
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
    v.head(p) = y;
    bool newton_ok = false;
    for (int it = 0; it < 60; ++it) {
      Eigen::VectorXd yc = v.head(p);
      Eigen::VectorXd mu = v.segment(p, calc.ne);
      Eigen::VectorXd nu = v.tail(na);
      Eigen::VectorXd F(dim);
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd sg = yc - y0;
      Eigen::MatrixXd Hy = Eigen::MatrixXd::Identity(p, p);
      for (int k = 0; k < calc.ne; ++k) {
        Eigen::RowVectorXd gr = calc.h_grad(k, yc);
        sg += mu(k) * gr.transpose();
        Hy += mu(k) * calc.h_hess(k, yc);
        J.block(p + k, 0, 1, p) = gr;
        J.block(0, p + k, p, 1) = gr.transpose();
      }
      for (int a = 0; a < na; ++a) {
        Eigen::RowVectorXd gr = calc.g_grad(active[a], yc);
        sg += nu(a) * gr.transpose();
        Hy += nu(a) * calc.g_hess(active[a], yc);
        J.block(p + calc.ne + a, 0, 1, p) = gr;
        J.block(0, p + calc.ne + a, p, 1) = gr.transpose();
      }
      F.head(p) = sg;
      F.segment(p, calc.ne) = calc.h_values(yc);
      Eigen::VectorXd gv = calc.g_values(yc);
      for (int a = 0; a < na; ++a) F(p + calc.ne + a) = gv(active[a]);
      J.topLeftCorner(p, p) = Hy;
      if (F.lpNorm<Eigen::Infinity>() <= tol) {
        newton_ok = true;
        break;
      }
      Eigen::MatrixXd Jd = J;
      Jd.diagonal().array() += 1e-12;
      Eigen::VectorXd step = Jd.fullPivLu().solve(-F);
      if (!step.allFinite()) break;
      double scale = 1.0;
      if (step.lpNorm<Eigen::Infinity>() > 10.0)
        scale = 10.0 / step.lpNorm<Eigen::Infinity>();
      v += scale * step;
    }
    if (!newton_ok) return {y, false};
    y = v.head(p);
    // Active-set consistency: nonnegative duals, feasible inactive rows.
    Eigen::VectorXd nu = v.tail(na);
    int drop = -1;
    for (int a = 0; a < na; ++a)
      if (nu(a) < -1e-9) drop = a;
    if (drop >= 0) {
      active.erase(active.begin() + drop);
      continue;
    }
    Eigen::VectorXd gv = calc.g_values(y);
    int add = -1;
    for (int k = 0; k < calc.ni; ++k) {
      if (std::find(active.begin(), active.end(), k) != active.end()) continue;
      if (gv(k) > 1e-9) add = k;
    }
    if (add >= 0) {
      active.push_back(add);
      continue;
    }
    return {y, true};
  }
  return {y, false};
}

Eigen::VectorXd oracle_completion(const expr::ConstraintSet& cs, const Eigen::VectorXd& x_raw,
                                  const Eigen::VectorXd& y0, const OracleOptions& opts) {
  const int d = static_cast<int>(opts.free_lo.size());
  if (d == 0 || opts.free_hi.size() != d)
    throw OracleFailure("completion oracle needs free-variable bounds");
  auto objective = [&](const Eigen::VectorXd& f) {
    return (opts.completion(f, x_raw) - y0).squaredNorm();
  };
  CounterRng rng(opts.seed);
  Eigen::VectorXd best_f;
  double best_obj = std::numeric_limits<double>::infinity();
  for (int start = 0; start < std::max(opts.multistarts, 1); ++start) {
    Eigen::VectorXd f(d);
    for (int i = 0; i < d; ++i)
      f(i) = start == 0 ? 0.5 * (opts.free_lo(i) + opts.free_hi(i))
                        : rng.uniform(opts.free_lo(i), opts.free_hi(i));
    // LM with central finite-difference Jacobians of the completion residual.
    double damp = 1e-6;
    for (int it = 0; it < 200; ++it) {
      Eigen::VectorXd r = opts.completion(f, x_raw) - y0;
      Eigen::MatrixXd J(r.size(), d);
      for (int i = 0; i < d; ++i) {
        double step = 1e-6 * std::max(1.0, std::fabs(f(i)));
        Eigen::VectorXd fp = f, fm = f;
        fp(i) += step;
        fm(i) -= step;
        J.col(i) = (opts.completion(fp, x_raw) - opts.completion(fm, x_raw)) / (2 * step);
      }
      Eigen::VectorXd grad = J.transpose() * r;
      if (grad.lpNorm<Eigen::Infinity>() < 1e-12) break;
      Eigen::MatrixXd N = J.transpose() * J;
      bool moved = false;
      for (int tries = 0; tries < 20; ++tries) {
        Eigen::MatrixXd Nd = N;
        Nd.diagonal().array() += damp;
        Eigen::VectorXd step = Nd.llt().solve(-grad);
        Eigen::VectorXd ft = f + step;
        if (objective(ft) < r.squaredNorm()) {
          f = ft;
          damp = std::max(damp * 0.3, 1e-14);
          moved = true;
          break;
        }
        damp *= 10.0;
      }
      if (!moved) break;
    }
    double obj = objective(f);
    if (obj < best_obj) {
      best_obj = obj;
      best_f = f;
    }
  }
  if (!best_f.size()) throw OracleFailure("completion oracle found no candidate");
  return opts.completion(best_f, x_raw);
}

}  // namespace

Eigen::VectorXd project_oracle(const expr::ConstraintSet& cs, const Eigen::VectorXd& x_raw,
                               const Eigen::VectorXd& y0_hat, const OracleOptions& opts) {
  if (opts.completion) return oracle_completion(cs, x_raw, y0_hat, opts);
  const int p = static_cast<int>(cs.outputs.size());
  if (p > 3)
    throw OracleFailure("direct oracle limited to <= 3 outputs; provide a completion map");
  ConstraintCalc calc(cs, x_raw);

  CounterRng rng(opts.seed);
  double radius = 1.0 + y0_hat.cwiseAbs().maxCoeff();
  Eigen::VectorXd best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int start = 0; start < std::max(opts.multistarts, 1); ++start) {
    Eigen::VectorXd y = y0_hat;
    if (start > 0)
      for (int j = 0; j < p; ++j) y(j) += radius * rng.uniform(-1.0, 1.0);
    y = penalty_descent(calc, y0_hat, y);
    PolishResult pol = polish(calc, y0_hat, y, opts.tol);
    if (!pol.ok) continue;
    Eigen::VectorXd hv = calc.h_values(pol.y);
    Eigen::VectorXd gv = calc.g_values(pol.y);
    if (hv.size() && hv.lpNorm<Eigen::Infinity>() > 1e-9) continue;
    bool gfeasible = true;
    for (int k = 0; k < calc.ni; ++k)
      if (gv(k) > 1e-9) gfeasible = false;
    if (!gfeasible) continue;
    double dist = (pol.y - y0_hat).norm();
    if (dist < best_dist) {
      best_dist = dist;
      best = pol.y;
    }
  }
  if (!best.size()) throw OracleFailure("projection oracle did not converge");
  return best;
}

}  // namespace kkth::solver
