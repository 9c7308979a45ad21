#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "kkth/bench.hpp"
#include "kkth/constraint_eval.hpp"
#include "kkth/compiler.hpp"
#include "kkth/net.hpp"
#include "kkth/rng.hpp"

using namespace kkth;
using namespace kkth::net;

namespace {

expr::ConstraintSet load_bench(const std::string& name) {
  return expr::load_constraint_file(std::string(KKTH_SOURCE_DIR) + "/constraints/" + name);
}

// Loss of one mode at the current parameters (forward only), for finite
// differences over theta.
double mode_loss(const Mlp& net, const data::Dataset& ds, const expr::ConstraintSet& cs,
                 Mode mode, double omega, const ProjectionOp* projection) {
  const int n = ds.n_train;
  Eigen::MatrixXd pred(n, net.output_dim());
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd y0 = net.forward(ds.inputs.row(i));
    if (mode == Mode::Hardnet) {
      pred.row(i) = projection->forward(ds.inputs.row(i), y0).y;
    } else {
      pred.row(i) = y0;
    }
  }
  Eigen::MatrixXd targets = ds.train_targets();
  Eigen::MatrixXd inputs = ds.train_inputs();
  switch (mode) {
    case Mode::Mlp: return loss_mlp(pred, targets);
    case Mode::Pinn: return loss_pinn(pred, targets, inputs, cs, omega);
    case Mode::Hardnet: return loss_hardnet(pred, targets);
  }
  return 0.0;
}

// Analytic gradient assembled from the module primitives.
Mlp::Grad mode_gradient(const Mlp& net, const data::Dataset& ds,
                        const expr::ConstraintSet& cs, Mode mode, double omega,
                        const ProjectionOp* projection) {
  const int n = ds.n_train;
  expr::CompiledSet cset(cs);
  Mlp::Grad grad;
  grad.init_like(net);
  for (int i = 0; i < n; ++i) {
    Mlp::Cache cache;
    Eigen::VectorXd y0 = net.forward(ds.inputs.row(i), cache);
    Eigen::VectorXd pred = y0;
    ProjectionOp::Sample sample;
    if (mode == Mode::Hardnet) {
      sample = projection->forward(ds.inputs.row(i), y0);
      pred = sample.y;
    }
    Eigen::VectorXd dpred = (pred - ds.targets.row(i).transpose()) / n;
    if (mode == Mode::Pinn && omega > 0.0 && cset.n_total() > 0) {
      Eigen::VectorXd x = ds.inputs.row(i);
      const double w = 2.0 * omega / (n * cset.n_total());
      for (int k = 0; k < cset.n_eq(); ++k)
        dpred += w * cset.eq_value(k, x, pred) * cset.eq_gradient(k, x, pred).transpose();
      for (int k = 0; k < cset.n_ineq(); ++k) {
        double r = cset.ineq_value(k, x, pred);
        if (r > 0.0) dpred += w * r * cset.ineq_gradient(k, x, pred).transpose();
      }
    }
    Eigen::VectorXd dy0 = dpred;
    if (mode == Mode::Hardnet)
      dy0 = projection->backward(ds.inputs.row(i), sample, dpred);
    net.backward(cache, dy0, grad);
  }
  return grad;
}

}  // namespace

TEST_CASE("forward basics") {
  Mlp zero = Mlp::create({2, 3, 2}, 1);
  for (auto& w : zero.weights) w.setZero();
  zero.biases.back() << 0.25, -0.5;
  Eigen::VectorXd out = zero.forward(Eigen::VectorXd::Constant(2, 3.0));
  CHECK(out(0) == 0.25);
  CHECK(out(1) == -0.5);

  Mlp id = Mlp::create({3, 3}, 1);
  id.weights[0].setIdentity();
  id.biases[0].setZero();
  Eigen::VectorXd x(3);
  x << 1.0, -2.0, 0.5;
  CHECK((id.forward(x) - x).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("forward gradient matches finite differences") {
  Mlp net = Mlp::create({2, 8, 3}, 42);
  CounterRng rng(5);
  Eigen::VectorXd x(2);
  x << 0.7, -1.2;
  Eigen::VectorXd v(3);
  v << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);

  Mlp::Cache cache;
  net.forward(x, cache);
  Mlp::Grad grad;
  grad.init_like(net);
  net.backward(cache, v, grad);

  double h = 1e-6;
  for (int l = 0; l < net.layer_count(); ++l) {
    for (int r = 0; r < net.weights[l].rows(); ++r) {
      for (int c = 0; c < net.weights[l].cols(); ++c) {
        Mlp pert = net;
        pert.weights[l](r, c) += h;
        double up = v.dot(pert.forward(x));
        pert.weights[l](r, c) -= 2 * h;
        double dn = v.dot(pert.forward(x));
        double fd = (up - dn) / (2 * h);
        CHECK(std::fabs(fd - grad.weights[l](r, c)) <= 1e-6 * std::max(1.0, std::fabs(fd)));
      }
    }
  }
}

TEST_CASE("loss conventions") {
  Eigen::MatrixXd y(1, 2), t(1, 2);
  y << 2.0, 3.0;
  t << 1.0, 2.0;  // diff = (1, 1)
  CHECK(loss_mlp(y, t) == doctest::Approx(1.0));
  CHECK(loss_mlp(t, t) == 0.0);
  CHECK(loss_hardnet(y, t) == loss_mlp(y, t));

  auto cs = load_bench("example2.kkt");
  Eigen::MatrixXd x(1, 2);
  x << 1.0, 1.0;
  Eigen::MatrixXd feasible(1, 2);
  feasible << 3.0, 4.0;  // y1 + y2/2 = 5 = 3 + 2
  Eigen::MatrixXd target(1, 2);
  target << 2.0, 6.0;
  CHECK(loss_pinn(feasible, target, x, cs, 100.0) ==
        doctest::Approx(loss_mlp(feasible, target)));
  CHECK(loss_pinn(feasible, target, x, cs, 0.0) == loss_mlp(feasible, target));
}

TEST_CASE("evaluate: perfect and constant predictors") {
  auto cs = load_bench("example2.kkt");
  data::Dataset ds;
  ds.inputs.resize(1, 2);
  ds.inputs << 1.0, 1.0;
  ds.targets.resize(1, 2);
  ds.targets << 2.0, 6.0;
  ds.n_train = 1;
  ds.n_val = 0;

  Mlp constant_net = Mlp::create({2, 2}, 3);
  constant_net.weights[0].setZero();
  constant_net.biases[0].setZero();
  Metrics m = evaluate(constant_net, nullptr, ds.train_inputs(), ds.train_targets(), cs);
  CHECK(m.mean_abs_h == doctest::Approx(5.0));  // |0 + 0 - 3 - 2|
  CHECK(m.mse == doctest::Approx(40.0));        // (2^2 + 6^2)/1

  constant_net.biases[0] << 2.0, 6.0;
  Metrics perfect = evaluate(constant_net, nullptr, ds.train_inputs(), ds.train_targets(), cs);
  CHECK(perfect.mse == 0.0);
  CHECK(perfect.mape == 0.0);
  CHECK(perfect.mean_abs_h <= 1e-10);
  CHECK(perfect.mean_pos_g == 0.0);
}

TEST_CASE("backprop matches finite differences in all three modes") {
  auto cs1 = load_bench("example1.kkt");
  auto cs3 = load_bench("example3.kkt");

  data::Dataset ds1;
  ds1.inputs.resize(4, 1);
  ds1.inputs << 1.2, 1.4, 1.6, 1.8;
  ds1.targets.resize(4, 2);
  for (int i = 0; i < 4; ++i) {
    double x = ds1.inputs(i, 0);
    ds1.targets(i, 0) = 8 * x * x * x + 5;
    ds1.targets(i, 1) = 2 * x - 1;
  }
  ds1.n_train = 4;

  data::Dataset ds3;
  ds3.inputs = ds1.inputs;
  ds3.targets.resize(4, 1);
  for (int i = 0; i < 4; ++i) ds3.targets(i, 0) = std::pow(ds3.inputs(i, 0), 2);
  ds3.n_train = 4;

  compiler::CompileOptions split;
  split.multiplier_mode = compiler::MultiplierMode::SignedSplit;
  compiler::KktSystem kkt1 = compiler::compile_kkt(cs1, split);
  compiler::KktSystem kkt3 = compiler::compile_kkt(cs3);
  solver::SolverConfig scfg;
  NewtonProjectionOp op1(kkt1, scfg, VjpMode::Implicit);
  NewtonProjectionOp op3(kkt3, scfg, VjpMode::Implicit);
  NewtonProjectionOp op3u(kkt3, scfg, VjpMode::Unrolled);

  struct Case {
    const expr::ConstraintSet* cs;
    const data::Dataset* ds;
    Mode mode;
    double omega;
    const ProjectionOp* op;
    std::vector<int> arch;
  };
  std::vector<Case> cases = {
      {&cs1, &ds1, Mode::Mlp, 0.0, nullptr, {1, 6, 2}},
      {&cs1, &ds1, Mode::Pinn, 100.0, nullptr, {1, 6, 2}},
      {&cs3, &ds3, Mode::Hardnet, 0.0, &op3, {1, 5, 1}},
      {&cs3, &ds3, Mode::Hardnet, 0.0, &op3u, {1, 5, 1}},
      {&cs1, &ds1, Mode::Hardnet, 0.0, &op1, {1, 5, 2}},
  };
  for (const auto& c : cases) {
    Mlp net = Mlp::create(c.arch, 11);
    // keep outputs near the data (and in the positive region the log chains
    // assume) so every toy projection converges
    net.weights.back() *= 0.05;
    net.biases.back() = c.ds->targets.colwise().mean();
    Mlp::Grad grad = mode_gradient(net, *c.ds, *c.cs, c.mode, c.omega, c.op);
    double h = 1e-4;
    double scale = 0.0;
    for (int l = 0; l < net.layer_count(); ++l)
      scale = std::max(scale, grad.weights[l].cwiseAbs().maxCoeff());
    for (int l = 0; l < net.layer_count(); ++l) {
      for (int r = 0; r < net.weights[l].rows(); ++r) {
        for (int col = 0; col < net.weights[l].cols(); ++col) {
          Mlp pert = net;
          pert.weights[l](r, col) += h;
          double up = mode_loss(pert, *c.ds, *c.cs, c.mode, c.omega, c.op);
          pert.weights[l](r, col) -= 2 * h;
          double dn = mode_loss(pert, *c.ds, *c.cs, c.mode, c.omega, c.op);
          double fd = (up - dn) / (2 * h);
          CHECK(std::fabs(fd - grad.weights[l](r, col)) <= 1e-5 * std::max(1.0, scale));
        }
      }
      for (int r = 0; r < net.biases[l].size(); ++r) {
        Mlp pert = net;
        pert.biases[l](r) += h;
        double up = mode_loss(pert, *c.ds, *c.cs, c.mode, c.omega, c.op);
        pert.biases[l](r) -= 2 * h;
        double dn = mode_loss(pert, *c.ds, *c.cs, c.mode, c.omega, c.op);
        double fd = (up - dn) / (2 * h);
        CHECK(std::fabs(fd - grad.biases[l](r)) <= 1e-5 * std::max(1.0, scale));
      }
    }
  }
}

TEST_CASE("training is deterministic and modes coincide at omega zero") {
  auto cs = load_bench("example1.kkt");
  data::Dataset ds = bench::gen_example1(99);
  // shrink for test speed
  data::Dataset small;
  small.inputs = ds.inputs.topRows(64);
  small.targets = ds.targets.topRows(64);
  small.n_train = 48;
  small.n_val = 16;

  TrainConfig cfg;
  cfg.hidden = {8};
  cfg.epochs = 25;
  cfg.lr = 1e-3;
  cfg.seed = 7;

  Mlp a = Mlp::create({1, 8, 2}, cfg.seed);
  Mlp b = Mlp::create({1, 8, 2}, cfg.seed);
  TrainReport ra = train(a, small, cs, cfg);
  TrainReport rb = train(b, small, cs, cfg);
  CHECK(ra.loss == rb.loss);
  CHECK(ra.val_nrmse == rb.val_nrmse);
  for (int l = 0; l < a.layer_count(); ++l) CHECK(a.weights[l] == b.weights[l]);

  // PINN with omega = 0 walks the exact MLP trajectory
  Mlp c = Mlp::create({1, 8, 2}, cfg.seed);
  TrainConfig pcfg = cfg;
  pcfg.mode = Mode::Pinn;
  pcfg.omega = 0.0;
  TrainReport rc = train(c, small, cs, pcfg);
  CHECK(rc.loss == ra.loss);
  for (int l = 0; l < a.layer_count(); ++l) CHECK(a.weights[l] == c.weights[l]);

  // mini-batch mode shuffles deterministically too
  TrainConfig mb = cfg;
  mb.batch = 16;
  Mlp d1 = Mlp::create({1, 8, 2}, cfg.seed);
  Mlp d2 = Mlp::create({1, 8, 2}, cfg.seed);
  TrainReport rd1 = train(d1, small, cs, mb);
  TrainReport rd2 = train(d2, small, cs, mb);
  CHECK(rd1.loss == rd2.loss);
}

TEST_CASE("empty dataset is an error") {
  auto cs = load_bench("example1.kkt");
  data::Dataset empty;
  empty.inputs.resize(0, 1);
  empty.targets.resize(0, 2);
  Mlp net = Mlp::create({1, 4, 2}, 0);
  CHECK_THROWS_AS(train(net, empty, cs, TrainConfig{}), std::invalid_argument);
}

TEST_CASE("hardnet smoke training keeps outputs feasible") {
  auto cs = load_bench("example3.kkt");
  data::Dataset ds = bench::gen_example3(4);
  data::Dataset small;
  small.inputs = ds.inputs.topRows(90);
  small.targets = ds.targets.topRows(90);
  small.n_train = 60;
  small.n_val = 30;

  compiler::KktSystem kkt = compiler::compile_kkt(cs);
  solver::SolverConfig scfg;
  NewtonProjectionOp op(kkt, scfg);

  TrainConfig cfg;
  cfg.mode = Mode::Hardnet;
  cfg.epochs = 30;
  cfg.lr = 1e-3;
  cfg.hidden = {8};
  cfg.seed = 3;
  cfg.threads = 2;

  Mlp net = Mlp::create({1, 8, 1}, cfg.seed);
  TrainReport rep = train(net, small, cs, cfg, &op);
  CHECK(rep.epochs_run == 30);
  CHECK_FALSE(rep.diverged);
  CHECK(rep.final_val.mean_pos_g <= 1e-8);
  // curve CSV has one row per epoch
  std::string csv = rep.curve_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 31);
}

TEST_CASE("training reports divergence instead of crashing") {
  auto cs = load_bench("example1.kkt");
  data::Dataset ds = bench::gen_example1(5);
  data::Dataset small;
  small.inputs = ds.inputs.topRows(32);
  small.targets = ds.targets.topRows(32);
  small.inputs(3, 0) = 1e160;  // poisoned sample: squared error overflows
  small.n_train = 24;
  small.n_val = 8;
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.hidden = {8};
  Mlp net = Mlp::create({1, 8, 2}, 1);
  TrainReport rep = train(net, small, cs, cfg);
  CHECK(rep.diverged);
  CHECK(rep.epochs_run < 50);
}
