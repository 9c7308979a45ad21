#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <stdexcept>

#include "kkth/compiler.hpp"

// Per-sample solution of the compiled KKT system: damped Tikhonov-regularized
// Gauss-Newton iteration, closed-form projectors for constraint sets affine in
// the outputs, and the gradients that make the projection trainable.

namespace kkth::solver {

struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class StepPolicy { Fixed, Backtracking };

struct SolverConfig {
  int max_iters = 30;          // K
  double tol = 1e-10;          // infinity-norm stopping tolerance on F
  double tikhonov = 1e-3;      // gamma
  StepPolicy step = StepPolicy::Backtracking;
  double alpha = 1.0;          // fixed step size / initial trial step
  double armijo_c = 1e-4;
  double shrink = 0.5;
  int max_backtracks = 40;
  double eps_init = 1e-3;      // multiplier/slack initialization offset
  double eps_log = 1e-12;      // log-argument clamp in lifts
  int max_gamma_escalations = 3;
  double adjoint_tikhonov = 1e-14;  // regularization of the adjoint solve

  void validate() const;
};

struct ProjectionResult {
  Eigen::VectorXd y_proj;
  Eigen::VectorXd z;
  Eigen::VectorXd lambda;
  double residual_inf = std::numeric_limits<double>::infinity();
  int iters = 0;
  bool converged = false;
  int gamma_escalations = 0;
};

// ---------------------------------------------------------------------------
// Free-function interface over the full row set (tests, CLI).

// F(tau) per the structured blocks; tau = [y | z | lambda]. Pure-input rows
// evaluate from the lift and are ~0 by construction.
Eigen::VectorXd residual(const compiler::StructuredSystem& sys, const Eigen::VectorXd& x_raw,
                         const Eigen::VectorXd& y0_hat, const Eigen::VectorXd& tau);

// dF/dtau; block 3 rows carry -G L H with L = diag(exp(H_y y + H_z z)).
Eigen::MatrixXd jacobian(const compiler::StructuredSystem& sys, const Eigen::VectorXd& x_raw,
                         const Eigen::VectorXd& tau);

// ---------------------------------------------------------------------------
// Projector: reusable per-system state, safe to share across threads.

class Projector {
 public:
  explicit Projector(const compiler::KktSystem& sys);

  const compiler::KktSystem& system() const { return *sys_; }

  ProjectionResult project(const Eigen::VectorXd& x_raw, const Eigen::VectorXd& y0_hat,
                           const SolverConfig& cfg) const;

  // Implicit-function-theorem vector-Jacobian product at a solution:
  // upstream gradient over y_proj -> gradient over y0_hat.
  Eigen::VectorXd vjp(const Eigen::VectorXd& x_raw, const ProjectionResult& solution,
                      const Eigen::VectorXd& upstream, const SolverConfig& cfg,
                      bool allow_unconverged = false) const;

  // Forward-sensitivity variant differentiating through the iterates
  // (unrolled backpropagation); returns d y_proj / d y0_hat alongside.
  ProjectionResult project_with_sensitivity(const Eigen::VectorXd& x_raw,
                                            const Eigen::VectorXd& y0_hat,
                                            const SolverConfig& cfg,
                                            Eigen::MatrixXd& dy_dy0) const;

  Eigen::VectorXd initial_tau(const Eigen::VectorXd& x_aug, const Eigen::VectorXd& y0_hat,
                              const SolverConfig& cfg) const;

 private:
  struct ExpTerm {
    int solve_row;
    double coeff;
    Eigen::RowVectorXd h;  // over tau
  };

  const compiler::KktSystem* sys_;
  int n_unknowns_ = 0;
  std::vector<int> solve_rows_;             // rows with unknown coefficients
  Eigen::MatrixXd M_;                       // linear part over tau, solve rows
  std::vector<ExpTerm> exp_terms_;
  std::vector<std::pair<int, int>> stat_;   // (solve-row position, output index)
  std::vector<int> positive_cols_;          // exp-parameterized multiplier slots

  Eigen::VectorXd row_constants(const Eigen::VectorXd& x_aug,
                                const Eigen::VectorXd& y0_hat) const;
  void eval_residual(const Eigen::VectorXd& consts, const Eigen::VectorXd& tau,
                     Eigen::VectorXd& f, bool& overflow) const;
  void eval_jacobian(const Eigen::VectorXd& tau, Eigen::MatrixXd& jac) const;
  void init_sensitivity(const Eigen::VectorXd& x_aug, const Eigen::VectorXd& y0_hat,
                        const SolverConfig& cfg, Eigen::MatrixXd& sens) const;
  ProjectionResult run(const Eigen::VectorXd& x_raw, const Eigen::VectorXd& y0_hat,
                       const SolverConfig& cfg, Eigen::MatrixXd* dy_dy0) const;
  // Newton on the reduced unknowns (y, lambda) with the auxiliaries
  // eliminated through their defining chains; regularizes the endgame where
  // chain curvature vanishes.
  int polish_reduced(const Eigen::VectorXd& x_aug, const Eigen::VectorXd& consts,
                     const SolverConfig& cfg, int budget, Eigen::VectorXd& best_tau,
                     double& best_inf) const;
};

namespace detail {
// complete_aux together with d z / d (y, lambda), by forward accumulation.
void complete_aux_jacobian(const compiler::StructuredSystem& sys, const Eigen::VectorXd& x_aug,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& lambda,
                           double eps_log, Eigen::VectorXd& z, Eigen::MatrixXd& dz_dy,
                           Eigen::MatrixXd& dz_dl);
}  // namespace detail

// Spec-level wrappers.
ProjectionResult project_newton(const compiler::KktSystem& sys, const Eigen::VectorXd& x_raw,
                                const Eigen::VectorXd& y0_hat, const SolverConfig& cfg = {});

Eigen::VectorXd projection_vjp(const compiler::KktSystem& sys, const Eigen::VectorXd& x_raw,
                               const ProjectionResult& solution,
                               const Eigen::VectorXd& upstream, const SolverConfig& cfg = {});

// ---------------------------------------------------------------------------
// Analytic projectors for constraint sets affine in the outputs.

struct AffineProjector {
  Eigen::MatrixXd Astar;    // over augmented inputs
  Eigen::MatrixXd Bstar;    // p x p orthogonal-complement projector
  Eigen::MatrixXd Axstar;   // over exp(augmented inputs)
  Eigen::VectorXd bstar;
  Eigen::MatrixXd Bactive;  // constraint rows used
  Eigen::MatrixXd update;   // B^T (B B^T)^+ : the per-residual update coefficients
  int rank = 0;
};

// Eq. 22-style construction. Without pseudo_inverse, a rank-deficient B B^T
// is an error carrying the rank report.
AffineProjector build_affine_projector(const Eigen::MatrixXd& B_active,
                                       const Eigen::MatrixXd& A, const Eigen::MatrixXd& Ax,
                                       const Eigen::VectorXd& b, bool pseudo_inverse = false);

// Extracts (A, B, A_x, b) from a feasibility transform whose constraints are
// affine in y (no output auxiliaries, no inequalities).
AffineProjector build_affine_projector(const compiler::StructuredSystem& sys,
                                       bool pseudo_inverse = false, bool active_rows_only = true);

Eigen::VectorXd project_affine(const AffineProjector& pr, const Eigen::VectorXd& x_aug,
                               const Eigen::VectorXd& y0_hat);

// Constraint sets that are affine in y for each fixed input (coefficients may
// depend on x, e.g. bilinear input-output terms) project through a per-sample
// instantiation.
struct AffineTemplate {
  expr::ConstraintSet cs;
  std::vector<std::vector<expr::NormalForm>> coeff;  // [constraint][output]
  std::vector<expr::NormalForm> rhs;                 // input-only side
  bool input_dependent = false;
};

AffineTemplate extract_affine_template(const expr::ConstraintSet& cs);

// Numeric (B, rhs) at one sample.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> instantiate_affine(const AffineTemplate& tpl,
                                                               const Eigen::VectorXd& x_raw);

Eigen::VectorXd project_affine(const AffineTemplate& tpl, const Eigen::VectorXd& x_raw,
                               const Eigen::VectorXd& y0_hat, bool pseudo_inverse = true);

// ---------------------------------------------------------------------------
// Brute-force projection oracle (tests only): rho-continuation penalty descent
// with multistart, polished by plain Newton on the untransformed KKT system.

struct OracleFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OracleOptions {
  int multistarts = 8;
  double tol = 1e-11;
  std::uint64_t seed = 1234;
  // Optional reduction for larger systems: maps free coordinates to a full
  // feasible output vector; bounds delimit the multistart box.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> completion;
  Eigen::VectorXd free_lo, free_hi;
};

Eigen::VectorXd project_oracle(const expr::ConstraintSet& cs, const Eigen::VectorXd& x_raw,
                               const Eigen::VectorXd& y0_hat, const OracleOptions& opts = {});

}  // namespace kkth::solver
