#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kkth/compiler.hpp"
#include "kkth/expr.hpp"
#include "kkth/rng.hpp"

using namespace kkth;
using namespace kkth::compiler;

namespace {

expr::ConstraintSet load_bench(const std::string& name) {
  return expr::load_constraint_file(std::string(KKTH_SOURCE_DIR) + "/constraints/" + name);
}

// Row residual at a fully specified point (test-side mirror of the solver).
double eval_row(const StructuredSystem& sys, const Row& row, const Eigen::VectorXd& x_aug,
                const Eigen::VectorXd& y, const Eigen::VectorXd& z, const Eigen::VectorXd& lam,
                const Eigen::VectorXd& y0hat) {
  double v = row.a.dot(x_aug) + row.by.dot(y) + row.cz.dot(z) + row.cl.dot(lam) - row.rhs;
  if (row.stat_output >= 0) v -= y0hat(row.stat_output);
  for (int i = 0; i < row.ax.size(); ++i)
    if (row.ax(i) != 0.0) v += row.ax(i) * std::exp(x_aug(i));
  if (row.exp_index >= 0) {
    const HRow& h = sys.hrows[row.exp_index];
    v -= row.exp_coeff * std::exp(h.hy.dot(y) + h.hz.dot(z));
  }
  return v;
}

}  // namespace

TEST_CASE("golden matrices for the cubic single-constraint transform") {
  auto cs = load_bench("example1.kkt");
  StructuredSystem sys = logexp_transform(cs);

  REQUIRE(sys.catalog.m_aug() == 4);
  REQUIRE(sys.catalog.p() == 2);
  REQUIRE(sys.catalog.q() == 5);
  REQUIRE(sys.catalog.n_lambda() == 0);
  REQUIRE(sys.n_rows() == 9);

  auto bl = sys.blocks();
  REQUIRE(bl.r1.size() == 4);
  REQUIRE(bl.r2.size() == 3);
  REQUIRE(bl.r3.size() == 2);

  Eigen::MatrixXd A(4, 4);
  A << 6, -12, 0, 0,
       0, 0, 1, -2,
       0, 1, 0, 0,
       1, 0, 0, 0;
  Eigen::MatrixXd B(4, 2);
  B << 1, 0,
       0, 0,
       0, 0,
       0, 0;
  Eigen::MatrixXd Ax(4, 4);
  Ax << 0, 0, 0, 0,
        0, 0, 0, 0,
        0, 0, -1, 0,
        0, 0, 0, -1;
  Eigen::MatrixXd Cz(4, 5);
  Cz << 0, 0, -1, 0, 0,
        0, 0, 0, 0, 0,
        0, 0, 0, 0, 0,
        0, 0, 0, 0, 0;
  Eigen::VectorXd b(4);
  b << 6, 0, 0, 0;

  CHECK(bl.A == A);
  CHECK(bl.B == B);
  CHECK(bl.Ax == Ax);
  CHECK(bl.Cz == Cz);
  CHECK(bl.b == b);

  Eigen::MatrixXd Dy(3, 2);
  Dy << 0, 0,
        0, 1,
        0, 0;
  Eigen::MatrixXd Dz(3, 5);
  Dz << 0, 0, 0, 1, -3,
        -1, 0, 0, 0, 0,
        0, -1, 1, 0, 0;
  CHECK(bl.Dy == Dy);
  CHECK(bl.Dz == Dz);
  CHECK(bl.d == Eigen::VectorXd::Zero(3));

  Eigen::MatrixXd Ez(2, 5);
  Ez << 1, 0, 0, 0, 0,
        0, 1, 0, 0, 0;
  Eigen::MatrixXd Hz(2, 5);
  Hz << 0, 0, 0, 0, 1,
        0, 0, 0, 1, 0;
  CHECK(bl.Ez == Ez);
  CHECK(bl.Hz == Hz);
  CHECK(bl.G == Eigen::MatrixXd::Identity(2, 2));
  CHECK(bl.Ey == Eigen::MatrixXd::Zero(2, 2));

  CHECK(audit(sys).ok);
}

TEST_CASE("affine-in-output transform matches the printed system up to ordering") {
  auto cs = load_bench("example2.kkt");
  StructuredSystem sys = logexp_transform(cs);
  REQUIRE(sys.catalog.m_aug() == 8);
  REQUIRE(sys.catalog.q() == 0);  // no output-side auxiliaries
  REQUIRE(sys.n_rows() == 7);
  auto bl = sys.blocks();
  REQUIRE(bl.r1.size() == 7);
  CHECK(bl.Cz.size() == 0);
  CHECK(bl.Cl.size() == 0);
  CHECK(bl.G.size() == 0);

  // Printed columns: x1, x2, x3=x1^2, x4=log x1, x5=log x3, x6=x2^3,
  // x7=log x2, x8=log x6. Canonical order declares each monomial's log before
  // the base log; relation rows may differ by an overall sign.
  Eigen::MatrixXd Ap(7, 8);
  Ap << 0, 0, -3, 0, 0, -2, 0, 0,
        0, 0, 0, 2, -1, 0, 0, 0,
        0, 0, 0, 0, 0, 0, 3, -1,
        1, 0, 0, 0, 0, 0, 0, 0,
        0, 0, 1, 0, 0, 0, 0, 0,
        0, 1, 0, 0, 0, 0, 0, 0,
        0, 0, 0, 0, 0, 1, 0, 0;
  Eigen::MatrixXd Bp(7, 2);
  Bp.setZero();
  Bp(0, 0) = 1;
  Bp(0, 1) = 0.5;
  Eigen::MatrixXd Axp(7, 8);
  Axp.setZero();
  Axp(3, 3) = -1;
  Axp(4, 4) = -1;
  Axp(5, 6) = -1;
  Axp(6, 7) = -1;

  std::vector<int> to_mine = {0, 1, 2, 4, 3, 5, 7, 6};
  Eigen::MatrixXd joint_mine(7, 8 + 2 + 8 + 1);
  Eigen::MatrixXd joint_paper(7, 8 + 2 + 8 + 1);
  for (int c = 0; c < 8; ++c) {
    joint_mine.col(c) = bl.A.col(to_mine[c]);
    joint_mine.col(10 + c) = bl.Ax.col(to_mine[c]);
    joint_paper.col(c) = Ap.col(c);
    joint_paper.col(10 + c) = Axp.col(c);
  }
  joint_mine.block(0, 8, 7, 2) = bl.B;
  joint_paper.block(0, 8, 7, 2) = Bp;
  joint_mine.col(18) = bl.b;
  joint_paper.col(18).setZero();
  CHECK(matches_up_to_row_permutation(joint_mine, joint_paper));
  CHECK(audit(sys).ok);
}

TEST_CASE("KKT assembly of the cubic benchmark: twelve equations") {
  auto cs = load_bench("example1.kkt");
  KktSystem kkt = compile_kkt(cs);

  CHECK(kkt.n_rows() == 12);
  CHECK(kkt.catalog.p() == 2);
  CHECK(kkt.catalog.q() == 6);
  CHECK(kkt.catalog.n_lambda() == 1);
  CHECK(kkt.catalog.mults[0].kind == MultVar::Kind::EqPos);
  CHECK(kkt.catalog.m_aug() == 4);

  auto bl = kkt.blocks();
  CHECK(bl.r1.size() == 6);  // 2 stationarity + constraint + 3 input rows
  CHECK(bl.r2.size() == 2);  // two log relations
  CHECK(bl.r3.size() == 4);  // multiplier, y2, and two value exponentials

  // stat y1: y1 - y0hat1 + mu = 0
  const Row& s1 = kkt.rows[0];
  CHECK(s1.stat_output == 0);
  CHECK(s1.cl(0) == 1.0);
  CHECK(s1.cz.cwiseAbs().sum() == 0.0);
  // stat y2: y2 - y0hat2 - 3 (mu*y2^2) = 0, product value in the first z slot
  const Row& s2 = kkt.rows[1];
  CHECK(s2.stat_output == 1);
  CHECK(s2.cz(0) == -3.0);
  // constraint row keeps the feasibility transform's input structure
  const Row& eq = kkt.rows[2];
  CHECK(eq.rhs == 6.0);
  CHECK(eq.a(0) == 6.0);
  CHECK(eq.a(1) == -12.0);
  CHECK(eq.by(0) == 1.0);
  CHECK(eq.cz(1) == -1.0);  // y2^3 value variable

  // multiplier exponential: mu - e^{z3} with z3 = log mu in slot 2
  bool found_mu_exp = false;
  for (const auto& row : kkt.rows) {
    if (row.block != RowBlock::Exponential || row.cl.size() == 0 || row.cl(0) != 1.0) continue;
    found_mu_exp = true;
    CHECK(kkt.hrows[row.exp_index].hz(2) == 1.0);
  }
  CHECK(found_mu_exp);
  CHECK(audit(kkt).ok);

  // Signed-split mode doubles the multiplier and its product chains.
  CompileOptions split;
  split.multiplier_mode = MultiplierMode::SignedSplit;
  KktSystem kkt2 = compile_kkt(cs, split);
  CHECK(kkt2.catalog.n_lambda() == 2);
  CHECK(kkt2.catalog.mults[0].kind == MultVar::Kind::EqSplitPlus);
  CHECK(kkt2.catalog.mults[1].kind == MultVar::Kind::EqSplitMinus);
  CHECK(audit(kkt2).ok);

  CompileOptions strict;
  strict.multiplier_mode = MultiplierMode::Strict;
  CHECK_THROWS_AS(compile_kkt(cs, strict), CompileError);
}

TEST_CASE("KKT assembly of the inequality benchmark: fourteen residuals") {
  auto cs = load_bench("example3.kkt");
  KktSystem kkt = compile_kkt(cs);

  CHECK(kkt.n_rows() == 14);
  CHECK(kkt.catalog.p() == 1);
  CHECK(kkt.catalog.q() == 10);
  CHECK(kkt.catalog.n_lambda() == 3);
  CHECK(kkt.catalog.mults[0].kind == MultVar::Kind::IneqAlias);
  CHECK(kkt.catalog.mults[1].kind == MultVar::Kind::IneqMult);
  CHECK(kkt.catalog.mults[2].kind == MultVar::Kind::IneqSlack);

  REQUIRE(kkt.fb_chains.size() == 1);
  const FbChain& chain = kkt.fb_chains[0];
  for (int i = 0; i < 10; ++i) CHECK(chain.z[static_cast<std::size_t>(i)] == i);

  // stationarity: y - y0hat + nu
  const Row& stat = kkt.rows[0];
  CHECK(stat.cl(chain.alias_col) == 1.0);
  // coupling: nu - muI
  const Row& couple = kkt.rows[1];
  CHECK(couple.kind == RowKind::AliasCoupling);
  CHECK(couple.cl(chain.alias_col) == 1.0);
  CHECK(couple.cl(chain.mu_col) == -1.0);
  // feasibility: y - x + s
  const Row& feas = kkt.rows[chain.feas_row];
  CHECK(feas.a(0) == -1.0);
  CHECK(feas.by(0) == 1.0);
  CHECK(feas.cl(chain.s_col) == 1.0);
  // complementarity: z8 - mu - s
  const Row& fb = kkt.rows[chain.sum_row];
  CHECK(fb.cz(chain.z[7]) == 1.0);
  CHECK(fb.cl(chain.mu_col) == -1.0);
  CHECK(fb.cl(chain.s_col) == -1.0);

  CHECK(audit(kkt).ok);
}

TEST_CASE("empty inequality set means no Fischer-Burmeister machinery") {
  auto cs = load_bench("example2.kkt");
  KktSystem kkt = compile_kkt(cs);
  CHECK(kkt.fb_chains.empty());
  CHECK(kkt.catalog.n_lambda() == 1);
  CHECK(kkt.catalog.mults[0].kind == MultVar::Kind::EqFree);
  CHECK(kkt.catalog.q() == 0);
  CHECK(audit(kkt).ok);
}

TEST_CASE("Fischer-Burmeister chain encodes mu + s - sqrt(mu^2 + s^2)") {
  auto cs = load_bench("example3.kkt");
  KktSystem kkt = compile_kkt(cs);
  const FbChain& chain = kkt.fb_chains[0];
  const Row& fb = kkt.rows[chain.sum_row];

  CounterRng rng(91);
  Eigen::VectorXd x_aug = kkt.lift_inputs(Eigen::VectorXd::Constant(1, 1.5));
  Eigen::VectorXd y = Eigen::VectorXd::Constant(1, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    double mu = std::exp(rng.uniform(-6.0, 3.0));
    double s = std::exp(rng.uniform(-6.0, 3.0));
    Eigen::VectorXd lam(3);
    lam << mu, mu, s;
    Eigen::VectorXd z = kkt.complete_aux(x_aug, y, lam);
    double row_value = fb.cz.dot(z) + fb.cl.dot(lam);
    double phi = mu + s - std::sqrt(mu * mu + s * s);
    double scale = std::max(1.0, mu + s);
    CHECK(std::fabs(row_value + phi) <= 1e-12 * scale);
    // chain definition rows hold exactly at the completion
    for (const auto& row : kkt.rows) {
      if (row.defines_aux < 0) continue;
      double r = eval_row(kkt, row, x_aug, y, z, lam, y);
      CHECK(std::fabs(r) <= 1e-9 * std::max(1.0, std::fabs(z(row.defines_aux))));
    }
  }
}

TEST_CASE("auxiliary completion reaches feasibility-row residuals below 1e-10") {
  CounterRng rng(7);
  struct Case {
    std::string file;
    std::function<void(CounterRng&, Eigen::VectorXd&, Eigen::VectorXd&)> sample;
  };
  std::vector<Case> cases;
  cases.push_back({"example1.kkt", [](CounterRng& r, Eigen::VectorXd& x, Eigen::VectorXd& y) {
                     x.resize(1);
                     y.resize(2);
                     x(0) = r.uniform(1.0, 2.0);
                     y(0) = 8 * std::pow(x(0), 3) + 5;
                     y(1) = 2 * x(0) - 1;
                   }});
  cases.push_back({"example2.kkt", [](CounterRng& r, Eigen::VectorXd& x, Eigen::VectorXd& y) {
                     x.resize(2);
                     y.resize(2);
                     x(0) = r.uniform(1.0, 2.0);
                     x(1) = r.uniform(1.0, 2.0);
                     y(0) = x(0) * x(0) + x(1) * x(1);
                     y(1) = 4 * x(0) * x(0) + 4 * std::pow(x(1), 3) - 2 * x(1) * x(1);
                   }});
  cases.push_back({"example3.kkt", [](CounterRng& r, Eigen::VectorXd& x, Eigen::VectorXd& y) {
                     x.resize(1);
                     y.resize(1);
                     x(0) = r.uniform(1.0, 2.0);
                     y(0) = x(0) * r.next_double();  // strictly feasible
                   }});
  for (const auto& c : cases) {
    auto cs = load_bench(c.file);
    KktSystem kkt = compile_kkt(cs);
    for (int trial = 0; trial < 200; ++trial) {
      Eigen::VectorXd x_raw, y;
      c.sample(rng, x_raw, y);
      Eigen::VectorXd x_aug = kkt.lift_inputs(x_raw);
      Eigen::VectorXd lam = Eigen::VectorXd::Zero(kkt.catalog.n_lambda());
      for (const auto& ch : kkt.fb_chains) {
        Eigen::VectorXd znone;
        double g = kkt.eval_inequality(ch.ineq_index, x_aug, y, znone);
        lam(ch.s_col) = std::max(-g, 0.0);
      }
      Eigen::VectorXd z = kkt.complete_aux(x_aug, y, lam);
      double worst = 0.0;
      for (const auto& row : kkt.rows) {
        if (row.kind == RowKind::Stationarity) continue;
        worst = std::max(worst, std::fabs(eval_row(kkt, row, x_aug, y, z, lam, y)));
      }
      CHECK(worst <= 1e-10);
    }
  }
}

TEST_CASE("distillation systems compile with the expected shapes") {
  auto full = load_bench("distill_full.kkt");
  CHECK(full.equalities[5].note.find("FD") != std::string::npos);  // cleared quotient

  CompileOptions split;
  split.multiplier_mode = MultiplierMode::SignedSplit;
  KktSystem kkt = compile_kkt(full, split);
  CHECK(kkt.catalog.p() == 9);
  // C1/C4/C5 affine (free multipliers), C2/C3/C6 chained and split.
  int frees = 0, plus = 0, minus = 0;
  for (const auto& m : kkt.catalog.mults) {
    frees += m.kind == MultVar::Kind::EqFree;
    plus += m.kind == MultVar::Kind::EqSplitPlus;
    minus += m.kind == MultVar::Kind::EqSplitMinus;
  }
  CHECK(frees == 3);
  CHECK(plus == 3);
  CHECK(minus == 3);
  CHECK(audit(kkt).ok);

  KktSystem paper_mode = compile_kkt(full);
  CHECK(paper_mode.catalog.n_lambda() == 6);
  CHECK(audit(paper_mode).ok);
}

TEST_CASE("emit/load round trip is byte identical") {
  for (const char* name : {"example1.kkt", "example2.kkt", "example3.kkt", "distill_full.kkt"}) {
    auto cs = load_bench(name);
    KktSystem kkt = compile_kkt(cs);
    std::string text = emit_system(kkt);
    StructuredSystem back = load_system(text);
    CHECK(emit_system(back) == text);
    CHECK(back.is_kkt);
    CHECK(back.n_rows() == kkt.n_rows());
  }
  // feasibility-only transform round trip, including the printed b vector
  auto cs1 = load_bench("example1.kkt");
  std::string dump = emit_system(logexp_transform(cs1));
  CHECK(dump.find("b: 6 0 0 0") != std::string::npos);
  CHECK(emit_system(load_system(dump)) == dump);
  // degenerate empty system: header-only dump
  StructuredSystem empty;
  std::string edump = emit_system(empty);
  CHECK(emit_system(load_system(edump)) == edump);
}

TEST_CASE("compile errors carry context") {
  expr::ConstraintSet cs;
  cs.inputs = {"x"};
  cs.outputs = {"y"};
  cs.equalities.push_back(expr::parse_constraint("y - log(x + 1) = 0", cs.decls(), "h"));
  CHECK_THROWS_AS(compile_kkt(cs), CompileError);

  auto ex1 = load_bench("example1.kkt");
  CompileOptions nonpos;
  nonpos.positive_inputs = false;
  CHECK_THROWS_AS(compile_kkt(ex1, nonpos), CompileError);
}
