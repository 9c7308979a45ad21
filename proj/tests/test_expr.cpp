#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "kkth/expr.hpp"
#include "kkth/rng.hpp"

using namespace kkth;
using namespace kkth::expr;

namespace {

const VariableDecls kDecls1{{"x"}, {"y1", "y2"}};

Point random_point(const VariableDecls& decls, CounterRng& rng, double lo = 0.5,
                   double hi = 2.0) {
  Point p;
  for (const auto& n : decls.inputs) p[n] = rng.uniform(lo, hi);
  for (const auto& n : decls.outputs) p[n] = rng.uniform(lo, hi);
  return p;
}

bool close_rel(double a, double b, double tol) {
  double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) <= tol * scale;
}

}  // namespace

TEST_CASE("parse example 1 constraint: five-term sum, equality") {
  Constraint c = parse_constraint("y1 - y2^3 - 12*x^2 + 6*x - 6 = 0", kDecls1, "h1");
  CHECK(c.rel == Relation::Eq);
  REQUIRE(c.lhs->kind == Expr::Kind::Sum);
  CHECK(c.lhs->terms.size() == 5);
  CHECK(c.cleared.monomials.size() == 5);
}

TEST_CASE("parse inequality y - x <= 0") {
  VariableDecls decls{{"x"}, {"y"}};
  Constraint c = parse_constraint("y - x <= 0", decls);
  CHECK(c.rel == Relation::Le);
  Point p{{"x", 2.0}, {"y", 0.5}};
  CHECK(eval_expr(c.lhs, p) == doctest::Approx(-1.5));
}

TEST_CASE("undeclared variable is a parse error with position") {
  VariableDecls decls{{"x"}, {"y"}};
  CHECK_THROWS_AS(parse_constraint("x1 = 0", decls), ParseError);
  try {
    parse_constraint("y + x1 = 0", decls);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.position == 4);
    CHECK(std::string(e.what()).find("x1") != std::string::npos);
  }
}

TEST_CASE(">= is rejected") {
  VariableDecls decls{{"x"}, {"y"}};
  CHECK_THROWS_AS(parse_constraint("y >= x", decls), ParseError);
}

TEST_CASE("eval at constructed feasible points") {
  Constraint c = parse_constraint("y1 - y2^3 - 12*x^2 + 6*x - 6 = 0", kDecls1);
  CHECK(eval_expr(c.lhs, Point{{"x", 1.0}, {"y1", 13.0}, {"y2", 1.0}}) == doctest::Approx(0.0));
  CHECK(eval_expr(c.lhs, Point{{"x", 1.0}, {"y1", 0.0}, {"y2", 0.0}}) == doctest::Approx(-12.0));

  VariableDecls d2{{"x1", "x2"}, {"y1", "y2"}};
  Constraint c2 = parse_constraint("y1 + (1/2)*y2 = 3*x1^2 + 2*x2^3", d2);
  CHECK(eval_expr(c2.lhs, Point{{"x1", 1.0}, {"x2", 1.0}, {"y1", 3.0}, {"y2", 4.0}}) ==
        doctest::Approx(0.0));
}

TEST_CASE("eval domain errors") {
  VariableDecls decls{{"x"}, {"y"}};
  ExprPtr e = parse_expression("log(x)", decls);
  CHECK_THROWS_AS(eval_expr(e, Point{{"x", -1.0}}), EvalError);
  ExprPtr f = parse_expression("x^(-1)", decls);
  CHECK_THROWS_AS(eval_expr(f, Point{{"x", 0.0}}), EvalError);
  CHECK_THROWS_AS(eval_expr(e, Point{{"y", 1.0}}), EvalError);
}

TEST_CASE("normalize example 1: monomial coefficients in appearance order") {
  Constraint c = parse_constraint("y1 - y2^3 - 12*x^2 + 6*x - 6 = 0", kDecls1);
  const auto& ms = c.cleared.monomials;
  REQUIRE(ms.size() == 5);
  CHECK(ms[0].coeff == 1.0);
  CHECK(ms[0].powers.size() == 1);
  CHECK(ms[0].powers[0].name == "y1");
  CHECK(ms[1].coeff == -1.0);
  CHECK(ms[1].powers[0].name == "y2");
  CHECK(ms[1].powers[0].exp == Rational(3));
  CHECK(ms[2].coeff == -12.0);
  CHECK(ms[3].coeff == 6.0);
  CHECK(ms[4].coeff == -6.0);
  CHECK(ms[4].is_constant());
}

TEST_CASE("quotient clearing: R = L / FD becomes R*FD - L") {
  VariableDecls decls{{"R"}, {"L", "FD"}};
  Constraint c = parse_constraint("R = L / FD", decls, "C6");
  REQUIRE(c.cleared.monomials.size() == 2);
  const auto& m0 = c.cleared.monomials[0];
  const auto& m1 = c.cleared.monomials[1];
  CHECK(m0.coeff == 1.0);
  REQUIRE(m0.powers.size() == 2);
  CHECK(m0.powers[0].name == "R");
  CHECK(m0.powers[1].name == "FD");
  CHECK(m1.coeff == -1.0);
  CHECK(m1.powers.size() == 1);
  CHECK(m1.powers[0].name == "L");
  CHECK(c.note.find("FD") != std::string::npos);
  // Zero set unchanged on FD != 0: both forms vanish together.
  Point p{{"R", 3.0}, {"L", 6.0}, {"FD", 2.0}};
  CHECK(eval_nf(c.cleared, p) == doctest::Approx(0.0));
}

TEST_CASE("normalize identity monomial") {
  VariableDecls decls{{"x1"}, {"y"}};
  NormalForm nf = normalize_nf(parse_expression("x1", decls));
  REQUIRE(nf.monomials.size() == 1);
  CHECK(nf.monomials[0].coeff == 1.0);
  CHECK(nf.monomials[0].powers.size() == 1);
}

TEST_CASE("log of a sum is retained as an opaque factor") {
  VariableDecls decls{{"x"}, {"y"}};
  NormalForm nf = normalize_nf(parse_expression("y*log(x + 1)", decls));
  REQUIRE(nf.monomials.size() == 1);
  CHECK(nf.monomials[0].has_opaque());
  CHECK(nf.monomials[0].powers.size() == 1);
}

TEST_CASE("normalize preserves evaluation on random interior points") {
  VariableDecls decls{{"x1", "x2"}, {"y1", "y2"}};
  std::vector<std::string> exprs = {
      "y1 - y2^3 - 12*x1^2 + 6*x1 - 6",
      "(y1 + y2)^2 - x1*x2*y1",
      "y1*y2/x1 + x2^(1/2) - exp(x1)*y2",
      "(x1 + x2)*(y1 - y2) + log(x1)*y1",
      "y2^(-2)*x1 - 3*(y1 - 2)^3",
  };
  CounterRng rng(17);
  for (const auto& s : exprs) {
    ExprPtr e = parse_expression(s, decls);
    ExprPtr n = normalize(e);
    for (int i = 0; i < 100; ++i) {
      Point p = random_point(decls, rng);
      CHECK(close_rel(eval_expr(e, p), eval_expr(n, p), 1e-12));
    }
  }
}

TEST_CASE("render-parse round trip is evaluation equivalent") {
  VariableDecls decls{{"x1", "x2"}, {"y1", "y2"}};
  std::vector<std::string> exprs = {
      "y1 - y2^3 - 12*x1^2 + 6*x1 - 6",
      "-y1*(x1 + 2*x2)^2 + 0.697616946*x1",
      "exp(x1 + y1) - log(x2)*y2 + x1^(3/2)",
      "y1/x1/x2 - 5",
  };
  CounterRng rng(23);
  for (const auto& s : exprs) {
    ExprPtr e = parse_expression(s, decls);
    ExprPtr back = parse_expression(render(e), decls);
    ExprPtr back2 = parse_expression(render(back), decls);
    for (int i = 0; i < 100; ++i) {
      Point p = random_point(decls, rng);
      double v = eval_expr(e, p);
      CHECK(close_rel(v, eval_expr(back, p), 1e-12));
      CHECK(close_rel(v, eval_expr(back2, p), 1e-12));
    }
  }
}

TEST_CASE("grammar-generated strings always parse; corrupted ones fail cleanly") {
  VariableDecls decls{{"x1", "x2"}, {"y1", "y2"}};
  CounterRng rng(41);
  auto gen_expr = [&](auto&& self, int depth) -> std::string {
    int pick = static_cast<int>(rng.next_u64() % (depth > 3 ? 2 : 6));
    switch (pick) {
      case 0: {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3f", rng.uniform(0.1, 9.9));
        return buf;
      }
      case 1: {
        const char* names[] = {"x1", "x2", "y1", "y2"};
        return names[rng.next_u64() % 4];
      }
      case 2:
        return "(" + self(self, depth + 1) + " + " + self(self, depth + 1) + ")";
      case 3:
        return "(" + self(self, depth + 1) + " - " + self(self, depth + 1) + ")";
      case 4:
        return self(self, depth + 1) + "*" + self(self, depth + 1);
      default: {
        long long p = 1 + static_cast<long long>(rng.next_u64() % 3);
        return "(" + self(self, depth + 1) + ")^" + std::to_string(p);
      }
    }
  };
  for (int i = 0; i < 200; ++i) {
    std::string s = gen_expr(gen_expr, 0);
    CHECK_NOTHROW(parse_expression(s, decls));
    // Corrupt one character; expect either a clean parse or a ParseError.
    std::string bad = s;
    const char junk[] = {'(', ')', '^', '*', '@', '=', '&'};
    bad[rng.next_u64() % bad.size()] = junk[rng.next_u64() % sizeof(junk)];
    try {
      parse_expression(bad, decls);
    } catch (const ParseError&) {
    }
  }
}

TEST_CASE("constraint file parsing") {
  const std::string text =
      "# example file\n"
      "inputs: x\n"
      "outputs: y1 y2\n"
      "h1 : y1 - y2^3 - 12*x^2 + 6*x - 6 = 0\n"
      "g1 : y2 - x <= 0\n";
  ConstraintSet cs = parse_constraint_file(text);
  CHECK(cs.inputs == std::vector<std::string>{"x"});
  CHECK(cs.outputs == std::vector<std::string>{"y1", "y2"});
  REQUIRE(cs.equalities.size() == 1);
  REQUIRE(cs.inequalities.size() == 1);
  CHECK(cs.equalities[0].label == "h1");
  CHECK(cs.inequalities[0].label == "g1");

  auto h = equality_residuals(cs, make_point(cs, {1.0}, {13.0, 1.0}));
  CHECK(h[0] == doctest::Approx(0.0));
  auto g = inequality_values(cs, make_point(cs, {1.0}, {13.0, 1.5}));
  CHECK(g[0] == doctest::Approx(0.5));
}

TEST_CASE("constraint set validation") {
  ConstraintSet cs;
  cs.inputs = {"x"};
  cs.outputs = {"y"};
  cs.equalities.push_back(parse_constraint("y - x = 0", cs.decls(), "a"));
  cs.equalities.push_back(parse_constraint("y - 2*x = 0", cs.decls(), "b"));
  CHECK_THROWS(cs.validate());  // more equalities than outputs

  CHECK_THROWS(parse_constraint_file("inputs: x x\noutputs: y\n"));
}

TEST_CASE("monomial derivative") {
  VariableDecls decls{{"x"}, {"y1", "y2"}};
  NormalForm nf = normalize_nf(parse_expression("y1 - y2^3 - 12*x^2 + 6*x - 6", decls));
  NormalForm d1 = differentiate_nf(nf, "y1");
  REQUIRE(d1.monomials.size() == 1);
  CHECK(d1.monomials[0].coeff == 1.0);
  CHECK(d1.monomials[0].is_constant());
  NormalForm d2 = differentiate_nf(nf, "y2");
  REQUIRE(d2.monomials.size() == 1);
  CHECK(d2.monomials[0].coeff == -3.0);
  CHECK(d2.monomials[0].powers[0].exp == Rational(2));
  // Finite-difference cross check.
  CounterRng rng(7);
  for (int i = 0; i < 20; ++i) {
    Point p = random_point(decls, rng);
    double h = 1e-6;
    Point hi = p, lo = p;
    hi["y2"] += h;
    lo["y2"] -= h;
    double fd = (eval_nf(nf, hi) - eval_nf(nf, lo)) / (2 * h);
    CHECK(close_rel(fd, eval_nf(d2, p), 1e-6));
  }
}
