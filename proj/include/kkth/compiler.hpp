#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kkth/expr.hpp"

// Compiles a ConstraintSet into the structured log-exponential system
//
//   A x + B y + A_x exp(x) + C_z z + C_lambda lambda = b        (block 1)
//   D_y y + D_z z + D_lambda lambda = d                         (block 2)
//   E_y y + E_z z + E_lambda lambda = G exp(H_y y + H_z z)      (block 3)
//
// and, on top of that, assembles the full KKT system of the projection
// problem: stationarity rows, slack feasibility rows, and smoothed
// Fischer-Burmeister complementarity chains.

namespace kkth::compiler {

struct CompileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Columns and catalogs

enum class ColClass { Input, Output, Aux, Mult };

struct Col {
  ColClass cls = ColClass::Input;
  int idx = -1;
  bool operator==(const Col& o) const { return cls == o.cls && idx == o.idx; }
  bool operator<(const Col& o) const {
    return cls != o.cls ? cls < o.cls : idx < o.idx;
  }
};

struct InputVar {
  enum class Kind { Base, Monomial, Log };
  std::string name;
  Kind kind = Kind::Base;
  int ref = -1;  // Base: raw input index; Log: input catalog index
  std::vector<std::pair<int, expr::Rational>> powers;  // Monomial: raw index ^ r
};

struct AuxVar {
  enum class Kind { ExpOfCol, LogOfCol, Affine };
  std::string name;
  Kind kind = Kind::ExpOfCol;
  Col ref;                                      // ExpOfCol / LogOfCol
  std::vector<std::pair<Col, double>> affine;   // Affine terms
  double affine_const = 0.0;
};

struct MultVar {
  enum class Kind { EqFree, EqPos, EqSplitPlus, EqSplitMinus, IneqAlias, IneqMult, IneqSlack };
  std::string name;
  Kind kind = Kind::EqFree;
  int constraint_index = -1;  // equality index, or inequality index for the last three
};

struct VariableCatalog {
  std::vector<std::string> raw_inputs;  // m
  std::vector<InputVar> inputs;         // m' >= m, bases first in raw order
  std::vector<std::string> outputs;     // p
  std::vector<AuxVar> aux;              // q
  std::vector<MultVar> mults;           // |lambda|

  int m() const { return static_cast<int>(raw_inputs.size()); }
  int m_aug() const { return static_cast<int>(inputs.size()); }
  int p() const { return static_cast<int>(outputs.size()); }
  int q() const { return static_cast<int>(aux.size()); }
  int n_lambda() const { return static_cast<int>(mults.size()); }
  int n_unknowns() const { return p() + q() + n_lambda(); }
};

// ---------------------------------------------------------------------------
// Rows

enum class RowBlock { Constraint = 1, Affine = 2, Exponential = 3 };

enum class RowKind {
  Stationarity,
  Equality,
  AliasCoupling,
  IneqFeasibility,
  FbSum,
  AuxRelation,
  AuxLink,      // Style-A link rows (v - dup = 0)
  AuxExp,
  InputRelation,
  InputExp,
};

struct Row {
  std::string label;
  RowBlock block = RowBlock::Constraint;
  RowKind kind = RowKind::Equality;
  Eigen::RowVectorXd a;    // over augmented inputs
  Eigen::RowVectorXd ax;   // over exp(augmented inputs)
  Eigen::RowVectorXd by;   // over outputs
  Eigen::RowVectorXd cz;   // over aux
  Eigen::RowVectorXd cl;   // over multipliers
  double rhs = 0.0;
  int stat_output = -1;    // stationarity hook: rhs picks up +y0_hat[stat_output]
  int exp_index = -1;      // block-3 rows: index into hrows
  double exp_coeff = 0.0;  // G entry for that exponential
  int defines_aux = -1;    // auxiliary column this row defines, if any
};

struct HRow {
  Eigen::RowVectorXd hy;  // over outputs
  Eigen::RowVectorXd hz;  // over aux
};

struct FbChain {
  int ineq_index = -1;
  int alias_col = -1;  // stationarity multiplier (mu^E slot)
  int mu_col = -1;     // mu^I
  int s_col = -1;      // slack
  std::array<int, 10> z{};  // aux columns z1..z10 of the smoothing chain
  int feas_row = -1;        // g + s = 0
  int sum_row = -1;         // z8 - mu - s = 0
};

// ---------------------------------------------------------------------------
// Systems

enum class MultiplierMode {
  PaperExact,   // chained equality multipliers become lambda = e^z (positive)
  SignedSplit,  // chained equality multipliers split as lambda = e^u - e^v
  Strict,       // chained equality multipliers are a compile error
};

struct CompileOptions {
  MultiplierMode multiplier_mode = MultiplierMode::PaperExact;
  bool positive_inputs = true;  // inputs may enter log chains
};

struct StructuredSystem {
  VariableCatalog catalog;
  std::vector<Row> rows;
  std::vector<HRow> hrows;
  bool is_kkt = false;
  CompileOptions options;

  std::vector<int> stationarity_rows;  // p entries when is_kkt
  std::vector<FbChain> fb_chains;
  std::vector<std::string> source;  // labels + rendered constraints, for dumps

  int n_rows() const { return static_cast<int>(rows.size()); }

  // Dense per-block matrices in canonical (declaration) order.
  struct Blocks {
    std::vector<int> r1, r2, r3;
    Eigen::MatrixXd A, B, Ax, Cz, Cl;
    Eigen::VectorXd b;
    Eigen::MatrixXd Dy, Dz, Dl;
    Eigen::VectorXd d;
    Eigen::MatrixXd Ey, Ez, El, G, Hy, Hz;
  };
  Blocks blocks() const;

  // Evaluates the augmented input vector for one raw sample.
  Eigen::VectorXd lift_inputs(const Eigen::VectorXd& x_raw, double eps_log = 1e-12) const;

  // Completes the auxiliary variables from (x, y, lambda); log arguments are
  // clamped at eps_log.
  Eigen::VectorXd complete_aux(const Eigen::VectorXd& x_aug, const Eigen::VectorXd& y,
                               const Eigen::VectorXd& lambda, double eps_log = 1e-12) const;

  // g_k(x, y) recovered from the slack-feasibility row of inequality k.
  double eval_inequality(int k, const Eigen::VectorXd& x_aug, const Eigen::VectorXd& y,
                         const Eigen::VectorXd& z) const;
};

struct KktSystem : StructuredSystem {};

// ---------------------------------------------------------------------------
// Operations

// Log-exponential transformation of the constraints alone (no KKT rows);
// exponential equations define dedicated auxiliaries, as in the paper's
// worked single-constraint example.
StructuredSystem logexp_transform(const expr::ConstraintSet& cs, CompileOptions opts = {});

// Full KKT system of the projection problem. `sys` must be the
// logexp_transform of the same constraint set (its input augmentation is
// reused and revalidated).
KktSystem assemble_kkt(const StructuredSystem& sys, const expr::ConstraintSet& cs,
                       CompileOptions opts = {});

KktSystem compile_kkt(const expr::ConstraintSet& cs, CompileOptions opts = {});

// Deterministic text dump; load_system(emit_system(s)) reproduces s and the
// round trip is byte-identical.
std::string emit_system(const StructuredSystem& sys);
StructuredSystem load_system(const std::string& text);

// Structural audit: every column referenced, every auxiliary defined exactly
// once, stationarity block is the identity on y.
struct AuditReport {
  bool ok = true;
  std::vector<std::string> problems;
};
AuditReport audit(const StructuredSystem& sys);

// Comparison helper for golden-matrix tests: equality of two matrices up to
// row permutation and per-row sign flips (columns already aligned).
bool matches_up_to_row_permutation(const Eigen::MatrixXd& lhs, const Eigen::MatrixXd& rhs,
                                   double tol = 0.0);

}  // namespace kkth::compiler
