#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "kkth/constraint_eval.hpp"
#include "kkth/net.hpp"
#include "kkth/rng.hpp"

// Full-batch (or mini-batch) Adam over the three modes. In hardnet mode the
// projection runs inside the forward pass and gradients flow back through the
// projection layer's vector-Jacobian product.

namespace kkth::net {

namespace {

double nrmse(Eigen::Ref<const Eigen::MatrixXd> pred, Eigen::Ref<const Eigen::MatrixXd> target,
             const Eigen::RowVectorXd& range) {
  if (pred.rows() == 0) return 0.0;
  Eigen::MatrixXd scaled =
      (pred - target).array().rowwise() / range.array();
  return std::sqrt(scaled.squaredNorm() /
                   static_cast<double>(scaled.rows() * scaled.cols()));
}

std::string format_row(const std::vector<double>& vals) {
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < vals.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.12g", vals[i]);
    if (i) out += ",";
    out += buf;
  }
  return out;
}

}  // namespace

std::string TrainReport::curve_csv() const {
  std::string out =
      "epoch,loss,train_nrmse,val_nrmse,train_abs_h,val_abs_h,train_pos_g,val_pos_g\n";
  for (std::size_t e = 0; e < loss.size(); ++e) {
    out += std::to_string(e + 1) + "," +
           format_row({loss[e], train_nrmse[e], val_nrmse[e], train_abs_h[e], val_abs_h[e],
                       train_pos_g[e], val_pos_g[e]}) +
           "\n";
  }
  return out;
}

std::string TrainReport::metrics_csv(const std::string& model_name) const {
  auto row = [&](const char* split, const Metrics& m) {
    return model_name + "," + split + "," +
           format_row({m.mse, m.mse_half, m.mape, m.mean_abs_h, m.mean_pos_g}) + "\n";
  };
  return "model,split,mse,mse_half,mape,mean_abs_h,mean_pos_g\n" +
         row("train", final_train) + row("val", final_val);
}

Metrics evaluate(const Mlp& net, const ProjectionOp* projection,
                 Eigen::Ref<const Eigen::MatrixXd> inputs,
                 Eigen::Ref<const Eigen::MatrixXd> targets, const expr::ConstraintSet& cs,
                 int threads, long* failures) {
  const int n = static_cast<int>(inputs.rows());
  const int p = static_cast<int>(targets.cols());
  Eigen::MatrixXd pred(n, p);
  std::vector<long> failed(static_cast<std::size_t>(std::max(n, 1)), 0);
  parallel_for(n, threads, [&](int i) {
    Eigen::VectorXd y0 = net.forward(inputs.row(i));
    if (projection != nullptr) {
      auto sample = projection->forward(inputs.row(i), y0);
      pred.row(i) = sample.y;
      failed[static_cast<std::size_t>(i)] = sample.converged ? 0 : 1;
    } else {
      pred.row(i) = y0;
    }
  });
  if (failures != nullptr)
    *failures += std::accumulate(failed.begin(), failed.end(), 0L);

  Metrics m;
  Eigen::MatrixXd diff = pred - targets;
  m.mse = n > 0 ? diff.squaredNorm() / static_cast<double>(n) : 0.0;
  m.mse_half = 0.5 * m.mse;
  double mape = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j)
      mape += std::fabs(diff(i, j)) / std::max(std::fabs(targets(i, j)), 1e-8);
  m.mape = n > 0 ? mape / static_cast<double>(n * p) : 0.0;
  expr::CompiledSet cset(cs);
  auto [mh, mg] = cset.mean_violations(inputs, pred);
  m.mean_abs_h = mh;
  m.mean_pos_g = mg;
  return m;
}

TrainReport train(Mlp& net, const data::Dataset& ds, const expr::ConstraintSet& cs,
                  const TrainConfig& cfg, const ProjectionOp* projection) {
  cfg.validate();
  if (ds.total() == 0 || ds.n_train == 0)
    throw std::invalid_argument("train: dataset is empty");
  if (ds.n_train + ds.n_val > ds.total())
    throw std::invalid_argument("train: split sizes exceed the dataset");
  if (cfg.mode == Mode::Hardnet && projection == nullptr)
    throw std::invalid_argument("train: hardnet mode needs a projection layer");
  if (net.input_dim() != ds.inputs.cols() || net.output_dim() != ds.targets.cols())
    throw std::invalid_argument("train: network/dataset dimension mismatch");

  const auto t_start = std::chrono::steady_clock::now();
  const int n_train = ds.n_train;
  const int p = static_cast<int>(ds.targets.cols());
  const bool penalized = cfg.mode == Mode::Pinn && cfg.omega > 0.0;
  const bool hard = cfg.mode == Mode::Hardnet;

  expr::CompiledSet cset(cs);
  Eigen::RowVectorXd range =
      (ds.train_targets().colwise().maxCoeff() - ds.train_targets().colwise().minCoeff())
          .cwiseMax(1e-12);

  AdamState adam;
  adam.init_like(net);
  Mlp::Grad grad;
  grad.init_like(net);

  TrainReport rep;
  const int batch = cfg.batch == 0 ? n_train : std::min(cfg.batch, n_train);
  std::vector<int> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  CounterRng shuffle_rng(cfg.seed, /*stream=*/7);

  std::vector<Mlp::Cache> caches(static_cast<std::size_t>(batch));
  std::vector<ProjectionOp::Sample> samples(static_cast<std::size_t>(batch));
  std::vector<Eigen::VectorXd> dy0(static_cast<std::size_t>(batch));
  Eigen::MatrixXd train_pred(n_train, p);
  std::vector<long> batch_failures(static_cast<std::size_t>(batch), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool project_now = hard && epoch >= cfg.warmup_epochs;
    if (batch < n_train) {
      for (int i = n_train - 1; i > 0; --i) {
        int j = static_cast<int>(shuffle_rng.next_u64() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      }
    }

    double epoch_loss = 0.0;
    for (int start = 0; start < n_train; start += batch) {
      const int nb = std::min(batch, n_train - start);
      const double inv_nb = 1.0 / static_cast<double>(nb);

      for (int i = 0; i < nb; ++i) {
        int row = order[static_cast<std::size_t>(start + i)];
        Eigen::VectorXd y0 =
            net.forward(ds.inputs.row(row), caches[static_cast<std::size_t>(i)]);
        samples[static_cast<std::size_t>(i)].y = y0;
        samples[static_cast<std::size_t>(i)].converged = true;
      }
      if (project_now) {
        parallel_for(nb, cfg.threads, [&](int i) {
          int row = order[static_cast<std::size_t>(start + i)];
          Eigen::VectorXd y0 = samples[static_cast<std::size_t>(i)].y;
          samples[static_cast<std::size_t>(i)] =
              projection->forward(ds.inputs.row(row), y0);
          batch_failures[static_cast<std::size_t>(i)] =
              samples[static_cast<std::size_t>(i)].converged ? 0 : 1;
        });
        for (int i = 0; i < nb; ++i)
          rep.projection_failures += batch_failures[static_cast<std::size_t>(i)];
      }

      // loss and its gradient with respect to the (projected) prediction
      double batch_loss = 0.0;
      for (int i = 0; i < nb; ++i) {
        int row = order[static_cast<std::size_t>(start + i)];
        const Eigen::VectorXd& pred = samples[static_cast<std::size_t>(i)].y;
        Eigen::VectorXd diff = pred - ds.targets.row(row).transpose();
        batch_loss += 0.5 * inv_nb * diff.squaredNorm();
        Eigen::VectorXd dpred = inv_nb * diff;
        if (penalized && cset.n_total() > 0) {
          Eigen::VectorXd x = ds.inputs.row(row);
          const double w = 2.0 * cfg.omega * inv_nb / cset.n_total();
          for (int k = 0; k < cset.n_eq(); ++k) {
            double r = cset.eq_value(k, x, pred);
            batch_loss += cfg.omega * inv_nb / cset.n_total() * r * r;
            dpred += w * r * cset.eq_gradient(k, x, pred).transpose();
          }
          for (int k = 0; k < cset.n_ineq(); ++k) {
            double r = cset.ineq_value(k, x, pred);
            if (r > 0.0) {
              batch_loss += cfg.omega * inv_nb / cset.n_total() * r * r;
              dpred += w * r * cset.ineq_gradient(k, x, pred).transpose();
            }
          }
        }
        dy0[static_cast<std::size_t>(i)] = dpred;
        train_pred.row(row) = pred;
      }
      if (project_now) {
        parallel_for(nb, cfg.threads, [&](int i) {
          int row = order[static_cast<std::size_t>(start + i)];
          dy0[static_cast<std::size_t>(i)] = projection->backward(
              ds.inputs.row(row), samples[static_cast<std::size_t>(i)],
              dy0[static_cast<std::size_t>(i)]);
        });
      }

      grad.set_zero();
      for (int i = 0; i < nb; ++i)
        net.backward(caches[static_cast<std::size_t>(i)], dy0[static_cast<std::size_t>(i)],
                     grad);
      adam.step(net, grad, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

      epoch_loss += batch_loss * static_cast<double>(nb) / static_cast<double>(n_train);
    }

    rep.loss.push_back(epoch_loss);
    rep.train_nrmse.push_back(nrmse(train_pred, ds.train_targets(), range));
    auto [th, tg] = cset.mean_violations(ds.train_inputs(), train_pred);
    rep.train_abs_h.push_back(th);
    rep.train_pos_g.push_back(tg);

    // validation pass with the updated parameters
    {
      const int nv = ds.n_val;
      Eigen::MatrixXd val_pred(nv, p);
      std::vector<long> val_failed(static_cast<std::size_t>(std::max(nv, 1)), 0);
      parallel_for(nv, cfg.threads, [&](int i) {
        Eigen::VectorXd y0 = net.forward(ds.val_inputs().row(i));
        if (project_now) {
          auto s = projection->forward(ds.val_inputs().row(i), y0);
          val_pred.row(i) = s.y;
          val_failed[static_cast<std::size_t>(i)] = s.converged ? 0 : 1;
        } else {
          val_pred.row(i) = y0;
        }
      });
      if (project_now)
        rep.projection_failures +=
            std::accumulate(val_failed.begin(), val_failed.end(), 0L);
      rep.val_nrmse.push_back(nrmse(val_pred, ds.val_targets(), range));
      auto [vh, vg] = cset.mean_violations(ds.val_inputs(), val_pred);
      rep.val_abs_h.push_back(vh);
      rep.val_pos_g.push_back(vg);
    }

    rep.epochs_run = epoch + 1;
    if (!std::isfinite(epoch_loss)) {
      rep.diverged = true;
      break;
    }
  }

  const ProjectionOp* eval_proj = hard ? projection : nullptr;
  rep.final_train = evaluate(net, eval_proj, ds.train_inputs(), ds.train_targets(), cs,
                             cfg.threads, &rep.projection_failures);
  rep.final_val = evaluate(net, eval_proj, ds.val_inputs(), ds.val_targets(), cs,
                           cfg.threads, &rep.projection_failures);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rep;
}

}  // namespace kkth::net
