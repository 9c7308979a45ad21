#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Algebraic constraint front end: expression ASTs over declared input/output
// variables, an infix parser, evaluation, and normalization to signed
// monomials (the form the system compiler consumes).

namespace kkth::expr {

// ---------------------------------------------------------------------------
// Rational exponents (kept exact so compiled chain coefficients stay exact).

struct Rational {
  long long num = 0;
  long long den = 1;  // always > 0, gcd(|num|, den) == 1

  Rational() = default;
  Rational(long long n) : num(n), den(1) {}  // NOLINT(google-explicit-constructor)
  Rational(long long n, long long d);

  bool is_integer() const { return den == 1; }
  bool is_zero() const { return num == 0; }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  Rational operator+(const Rational& o) const;
  Rational operator-(const Rational& o) const;
  Rational operator*(const Rational& o) const;
  Rational operator-() const { return Rational(-num, den); }
  bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
  bool operator!=(const Rational& o) const { return !(*this == o); }
};

std::string to_string(const Rational& r);

// ---------------------------------------------------------------------------
// Expression tree.

enum class VarClass { Input, Output };

class Expr;
using ExprPtr = std::shared_ptr<const Expr>;

class Expr {
 public:
  enum class Kind { Const, Var, Sum, Product, Power, Exp, Log };

  Kind kind = Kind::Const;

  // Const
  double value = 0.0;
  // Var
  std::string name;
  VarClass var_class = VarClass::Input;
  // Sum: signed terms, coefficient * subexpression
  std::vector<std::pair<double, ExprPtr>> terms;
  // Product
  std::vector<ExprPtr> factors;
  // Power
  ExprPtr base;
  Rational exponent;
  // Exp / Log
  ExprPtr arg;
};

// Node factories. They maintain the structural invariants: a Sum has >= 1
// terms, a Product >= 2 factors (fewer collapse), Power exponents 0/1 are
// simplified away.
ExprPtr constant(double v);
ExprPtr variable(const std::string& name, VarClass cls);
ExprPtr sum(std::vector<std::pair<double, ExprPtr>> terms);
ExprPtr product(std::vector<ExprPtr> factors);
ExprPtr power(ExprPtr base, Rational exponent);
ExprPtr exp_of(ExprPtr arg);
ExprPtr log_of(ExprPtr arg);

bool structurally_equal(const ExprPtr& a, const ExprPtr& b);

// ---------------------------------------------------------------------------
// Errors.

struct ParseError : std::runtime_error {
  ParseError(std::size_t position, const std::string& what)
      : std::runtime_error("parse error at " + std::to_string(position) + ": " + what),
        position(position) {}
  std::size_t position;
};

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Evaluation.

using Point = std::map<std::string, double>;

// Standard real evaluation. Throws EvalError on unbound variables, log of a
// non-positive argument, 0 raised to a negative power, or a non-integer power
// of a negative base.
double eval_expr(const ExprPtr& e, const Point& point);

// ---------------------------------------------------------------------------
// Normal form: sum of signed monomials. Each monomial is a coefficient times
// a product of Var^rational factors; exp/log subexpressions (and powers of
// sums that cannot be expanded) are retained as opaque factors.

struct VarPow {
  std::string name;
  VarClass cls = VarClass::Input;
  Rational exp;
};

struct Monomial {
  double coeff = 1.0;
  std::vector<VarPow> powers;    // unique names, first-appearance order
  std::vector<ExprPtr> opaque;   // composite factors kept unexpanded

  bool is_constant() const { return powers.empty() && opaque.empty(); }
  bool has_opaque() const { return !opaque.empty(); }
  bool has_negative_power() const;
};

struct NormalForm {
  std::vector<Monomial> monomials;
};

NormalForm normalize_nf(const ExprPtr& e);
ExprPtr nf_to_expr(const NormalForm& nf);

// Spec operation: Sum-of-monomials Expr, evaluation-equivalent to the input.
ExprPtr normalize(const ExprPtr& e);

double eval_nf(const NormalForm& nf, const Point& point);

// d(nf)/d(var) as a normal form. Throws EvalError if the variable occurs
// inside an opaque factor.
NormalForm differentiate_nf(const NormalForm& nf, const std::string& var);

// ---------------------------------------------------------------------------
// Constraints.

enum class Relation { Eq, Le };

struct Constraint {
  ExprPtr lhs;                 // relation is "lhs REL 0" (rhs already folded)
  Relation rel = Relation::Eq;
  std::string label;
  // Monomial form with quotients cleared (each constraint multiplied through
  // by the denominators of its negative-power monomials; valid on domains
  // where those factors stay nonzero). `note` records the multiplier.
  NormalForm cleared;
  std::string note;
};

struct VariableDecls {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  bool is_input(const std::string& n) const;
  bool is_output(const std::string& n) const;
  bool is_declared(const std::string& n) const { return is_input(n) || is_output(n); }
  void validate() const;  // unique, nonempty names; no cross-class duplicates
};

// Parses a single relation "lhs = rhs" or "lhs <= rhs" over declared
// variables.  ">=" is rejected; callers rewrite g >= 0 as -g <= 0.
Constraint parse_constraint(const std::string& text, const VariableDecls& decls,
                            const std::string& label = "");

// Expression-only entry point (used by tests and pieces that need bare terms).
ExprPtr parse_expression(const std::string& text, const VariableDecls& decls);

std::string render(const ExprPtr& e);
std::string render(const Constraint& c);

struct ConstraintSet {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<Constraint> equalities;
  std::vector<Constraint> inequalities;

  VariableDecls decls() const { return VariableDecls{inputs, outputs}; }
  void validate() const;  // |equalities| <= p, all referenced vars declared
};

// Constraint file format: `inputs:`/`outputs:` headers, then one labelled
// relation per line ("label : relation"); `#` starts a comment.
ConstraintSet parse_constraint_file(const std::string& text);
ConstraintSet load_constraint_file(const std::string& path);

// Residual helpers used by metrics and oracles. Values of h_k (equalities,
// in order) and g_k (inequalities) at a point.
std::vector<double> equality_residuals(const ConstraintSet& cs, const Point& p);
std::vector<double> inequality_values(const ConstraintSet& cs, const Point& p);

Point make_point(const ConstraintSet& cs, const std::vector<double>& x,
                 const std::vector<double>& y);

}  // namespace kkth::expr
