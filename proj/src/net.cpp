#include "kkth/net.hpp"

#include <cmath>
#include <thread>

#include "kkth/constraint_eval.hpp"
#include "kkth/rng.hpp"

namespace kkth::net {

// ---------------------------------------------------------------------------
// Mlp

Mlp Mlp::create(const std::vector<int>& sizes, std::uint64_t seed) {
  if (sizes.size() < 2) throw std::invalid_argument("network needs input and output sizes");
  Mlp net;
  CounterRng rng(seed);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    int fan_in = sizes[l], fan_out = sizes[l + 1];
    if (fan_in < 1 || fan_out < 1) throw std::invalid_argument("layer sizes must be positive");
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Eigen::MatrixXd w(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) w(r, c) = rng.uniform(-limit, limit);
    net.weights.push_back(std::move(w));
    net.biases.push_back(Eigen::VectorXd::Zero(fan_out));
  }
  return net;
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
  Eigen::VectorXd a = x;
  for (int l = 0; l < layer_count(); ++l) {
    a = weights[l] * a + biases[l];
    if (l + 1 < layer_count()) a = a.cwiseMax(0.0);
  }
  return a;
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x, Cache& cache) const {
  cache.pre.resize(weights.size());
  cache.act.resize(weights.size() + 1);
  cache.act[0] = x;
  for (int l = 0; l < layer_count(); ++l) {
    cache.pre[l] = weights[l] * cache.act[l] + biases[l];
    cache.act[l + 1] =
        l + 1 < layer_count() ? cache.pre[l].cwiseMax(0.0).eval() : cache.pre[l];
  }
  return cache.act.back();
}

void Mlp::Grad::init_like(const Mlp& net) {
  weights.clear();
  biases.clear();
  for (int l = 0; l < net.layer_count(); ++l) {
    weights.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
    biases.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
  }
}

void Mlp::Grad::set_zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
}

Mlp::Grad& Mlp::Grad::operator+=(const Grad& o) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += o.weights[l];
    biases[l] += o.biases[l];
  }
  return *this;
}

void Mlp::backward(const Cache& cache, const Eigen::VectorXd& dy, Grad& grad) const {
  Eigen::VectorXd dz = dy;
  for (int l = layer_count() - 1; l >= 0; --l) {
    if (l + 1 < layer_count()) {
      // dz arrives as d/d act[l+1]; fold the rectifier mask
      dz = (cache.pre[l].array() > 0.0).select(dz, 0.0);
    }
    grad.weights[l].noalias() += dz * cache.act[l].transpose();
    grad.biases[l] += dz;
    if (l > 0) dz = (weights[l].transpose() * dz).eval();
  }
}

// ---------------------------------------------------------------------------
// Adam

void AdamState::init_like(const Mlp& net) {
  mw.clear();
  vw.clear();
  mb.clear();
  vb.clear();
  for (int l = 0; l < net.layer_count(); ++l) {
    mw.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
    vw.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
    mb.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
    vb.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
  }
  t = 0;
}

void AdamState::step(Mlp& net, const Mlp::Grad& grad, double lr, double beta1, double beta2,
                     double eps) {
  ++t;
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    mw[l] = beta1 * mw[l] + (1.0 - beta1) * grad.weights[l];
    vw[l] = beta2 * vw[l] + (1.0 - beta2) * grad.weights[l].cwiseProduct(grad.weights[l]);
    net.weights[l].array() -=
        lr * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + eps);
    mb[l] = beta1 * mb[l] + (1.0 - beta1) * grad.biases[l];
    vb[l] = beta2 * vb[l] + (1.0 - beta2) * grad.biases[l].cwiseProduct(grad.biases[l]);
    net.biases[l].array() -= lr * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Projection ops

ProjectionOp::Sample NewtonProjectionOp::forward(const Eigen::VectorXd& x,
                                                 const Eigen::VectorXd& y0) const {
  Sample out;
  if (mode_ == VjpMode::Unrolled) {
    out.res = proj_.project_with_sensitivity(x, y0, cfg_, out.dy);
  } else {
    out.res = proj_.project(x, y0, cfg_);
  }
  out.converged = out.res.converged;
  out.y = out.res.y_proj;
  return out;
}

Eigen::VectorXd NewtonProjectionOp::backward(const Eigen::VectorXd& x, const Sample& sample,
                                             const Eigen::VectorXd& upstream) const {
  if (mode_ == VjpMode::Unrolled) return sample.dy.transpose() * upstream;
  // Flagged samples pass the gradient straight through: the implicit formula
  // is meaningless away from a root, and the raw prediction needs to be
  // pulled back toward the manifold (the targets live on it) for the
  // projection to start converging again.
  if (!sample.converged) return upstream;
  return proj_.vjp(x, sample.res, upstream, cfg_);
}

ProjectionOp::Sample AffineProjectionOp::forward(const Eigen::VectorXd& x,
                                                 const Eigen::VectorXd& y0) const {
  Sample out;
  auto [B, rhs] = solver::instantiate_affine(tpl_, x);
  solver::AffineProjector pr = solver::build_affine_projector(
      B, Eigen::MatrixXd::Zero(B.rows(), 0), Eigen::MatrixXd::Zero(B.rows(), 0), rhs,
      /*pseudo_inverse=*/true);
  out.y = y0 - pr.update * (B * y0 - rhs);
  out.dy = pr.Bstar;
  out.converged = true;
  return out;
}

Eigen::VectorXd AffineProjectionOp::backward(const Eigen::VectorXd& x, const Sample& sample,
                                             const Eigen::VectorXd& upstream) const {
  (void)x;
  return sample.dy.transpose() * upstream;
}

// ---------------------------------------------------------------------------
// Losses

double loss_mlp(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  if (pred.rows() == 0) throw std::invalid_argument("empty batch");
  return 0.5 * (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

double loss_hardnet(const Eigen::MatrixXd& projected, const Eigen::MatrixXd& target) {
  return loss_mlp(projected, target);
}

double loss_pinn(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                 const Eigen::MatrixXd& inputs, const expr::ConstraintSet& cs, double omega) {
  double base = loss_mlp(pred, target);
  if (omega == 0.0) return base;
  expr::CompiledSet cset(cs);
  if (cset.n_total() == 0) return base;
  double penalty = 0.0;
  for (int i = 0; i < pred.rows(); ++i) {
    Eigen::VectorXd x = inputs.row(i);
    Eigen::VectorXd y = pred.row(i);
    for (int k = 0; k < cset.n_eq(); ++k) {
      double r = cset.eq_value(k, x, y);
      penalty += r * r;
    }
    for (int k = 0; k < cset.n_ineq(); ++k) {
      double r = std::max(cset.ineq_value(k, x, y), 0.0);
      penalty += r * r;
    }
  }
  penalty /= static_cast<double>(pred.rows() * cset.n_total());
  return base + omega * penalty;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch < 0) throw std::invalid_argument("train: batch must be >= 0");
  if (mode == Mode::Pinn && omega < 0.0)
    throw std::invalid_argument("train: omega must be >= 0");
  if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
  solver.validate();
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace kkth::net
