#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "kkth/data.hpp"
#include "kkth/expr.hpp"
#include "kkth/solver.hpp"

// Minimal feed-forward network with reverse-mode gradients and Adam, plus the
// three training modes: plain regression, soft constraint penalties, and the
// hard projection layer.

namespace kkth::net {

// ---------------------------------------------------------------------------
// Network

struct Mlp {
  std::vector<Eigen::MatrixXd> weights;  // layer l: out x in
  std::vector<Eigen::VectorXd> biases;

  // He-style uniform fan-in initialization, counter-seeded.
  static Mlp create(const std::vector<int>& sizes, std::uint64_t seed);

  int input_dim() const { return static_cast<int>(weights.front().cols()); }
  int output_dim() const { return static_cast<int>(weights.back().rows()); }
  int layer_count() const { return static_cast<int>(weights.size()); }

  struct Cache {
    std::vector<Eigen::VectorXd> pre;  // pre-activations per layer
    std::vector<Eigen::VectorXd> act;  // act[0] = input, act[l] = activation
  };

  struct Grad {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
    void init_like(const Mlp& net);
    void set_zero();
    Grad& operator+=(const Grad& o);
  };

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::VectorXd forward(const Eigen::VectorXd& x, Cache& cache) const;
  // Accumulates d loss / d theta given d loss / d output.
  void backward(const Cache& cache, const Eigen::VectorXd& dy, Grad& grad) const;
};

struct AdamState {
  std::vector<Eigen::MatrixXd> mw, vw;
  std::vector<Eigen::VectorXd> mb, vb;
  long t = 0;
  void init_like(const Mlp& net);
  void step(Mlp& net, const Mlp::Grad& grad, double lr, double beta1, double beta2,
            double eps);
};

// ---------------------------------------------------------------------------
// Projection layer plugged into the forward pass.

class ProjectionOp {
 public:
  virtual ~ProjectionOp() = default;
  struct Sample {
    Eigen::VectorXd y;
    bool converged = true;
    solver::ProjectionResult res;  // Newton path
    Eigen::MatrixXd dy;            // dense d y / d y0 when available
  };
  virtual Sample forward(const Eigen::VectorXd& x, const Eigen::VectorXd& y0) const = 0;
  virtual Eigen::VectorXd backward(const Eigen::VectorXd& x, const Sample& sample,
                                   const Eigen::VectorXd& upstream) const = 0;
};

enum class VjpMode { Implicit, Unrolled };

class NewtonProjectionOp : public ProjectionOp {
 public:
  // Owns the compiled system: the projector keeps a reference into it.
  NewtonProjectionOp(compiler::KktSystem sys, solver::SolverConfig cfg,
                     VjpMode mode = VjpMode::Implicit)
      : sys_(std::move(sys)), proj_(sys_), cfg_(cfg), mode_(mode) {}
  Sample forward(const Eigen::VectorXd& x, const Eigen::VectorXd& y0) const override;
  Eigen::VectorXd backward(const Eigen::VectorXd& x, const Sample& sample,
                           const Eigen::VectorXd& upstream) const override;
  const solver::Projector& projector() const { return proj_; }
  const compiler::KktSystem& system() const { return sys_; }

 private:
  compiler::KktSystem sys_;
  solver::Projector proj_;
  solver::SolverConfig cfg_;
  VjpMode mode_;
};

class AffineProjectionOp : public ProjectionOp {
 public:
  explicit AffineProjectionOp(solver::AffineTemplate tpl) : tpl_(std::move(tpl)) {}
  Sample forward(const Eigen::VectorXd& x, const Eigen::VectorXd& y0) const override;
  Eigen::VectorXd backward(const Eigen::VectorXd& x, const Sample& sample,
                           const Eigen::VectorXd& upstream) const override;

 private:
  solver::AffineTemplate tpl_;
};

// ---------------------------------------------------------------------------
// Losses (mean over the batch; the 1/2 follows the training objective).

double loss_mlp(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target);
double loss_pinn(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                 const Eigen::MatrixXd& inputs, const expr::ConstraintSet& cs, double omega);
double loss_hardnet(const Eigen::MatrixXd& projected, const Eigen::MatrixXd& target);

// ---------------------------------------------------------------------------
// Training

enum class Mode { Mlp, Pinn, Hardnet };

struct TrainConfig {
  std::vector<int> hidden{64, 64};
  double lr = 1e-4;
  int epochs = 1200;
  int batch = 0;  // 0 = full batch
  Mode mode = Mode::Mlp;
  double omega = 100.0;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  solver::SolverConfig solver;
  VjpMode vjp = VjpMode::Implicit;
  int threads = 1;
  // Unconstrained pre-training epochs before the projection layer activates
  // (counted inside `epochs`). Keeps early raw predictions inside the
  // projector's convergence region.
  int warmup_epochs = 0;

  void validate() const;
};

struct Metrics {
  double mse = 0.0;       // plain mean of ||error||^2 over samples
  double mse_half = 0.0;  // the 1/(2N) training quantity
  double mape = 0.0;
  double mean_abs_h = 0.0;
  double mean_pos_g = 0.0;
};

struct TrainReport {
  std::vector<double> loss;
  std::vector<double> train_nrmse, val_nrmse;
  std::vector<double> train_abs_h, val_abs_h;
  std::vector<double> train_pos_g, val_pos_g;
  Metrics final_train, final_val;
  long projection_failures = 0;
  bool diverged = false;
  int epochs_run = 0;
  double wall_seconds = 0.0;

  std::string curve_csv() const;    // one row per epoch
  std::string metrics_csv(const std::string& model_name) const;
};

// Trains in place. Hardnet mode requires a projection layer.
TrainReport train(Mlp& net, const data::Dataset& ds, const expr::ConstraintSet& cs,
                  const TrainConfig& cfg, const ProjectionOp* projection = nullptr);

// Metrics of (optionally projected) predictions on one split.
Metrics evaluate(const Mlp& net, const ProjectionOp* projection,
                 Eigen::Ref<const Eigen::MatrixXd> inputs,
                 Eigen::Ref<const Eigen::MatrixXd> targets, const expr::ConstraintSet& cs,
                 int threads = 1, long* failures = nullptr);

// Deterministic chunked parallel loop used for per-sample projections.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace kkth::net
