#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kkth/compiler.hpp"
#include "kkth/data.hpp"
#include "kkth/expr.hpp"
#include "kkth/net.hpp"
#include "kkth/rng.hpp"
#include "kkth/solver.hpp"

// Benchmark definitions: data generators, constraint sets, experiment
// defaults, paper reference values, and the recipes used by the property and
// acceptance suites.

namespace kkth::bench {

// ---------------------------------------------------------------------------
// Generators

data::Dataset gen_example1(std::uint64_t seed);
data::Dataset gen_example2(std::uint64_t seed);
data::Dataset gen_example3(std::uint64_t seed);
// Synthetic distillation data: inputs in the published ranges, outputs built
// to satisfy balances C1-C6 exactly; out-of-bound draws are rejected.
data::Dataset gen_distillation_synthetic(std::uint64_t seed, int n);

// ---------------------------------------------------------------------------
// Registry

enum class ProjectorKind { Newton, Affine, Both };

struct ReferenceMetric {
  std::string model;   // MLP / PINN / KKT-Hardnet
  std::string split;   // train / val
  double mse;
  double mape;
  double violation;    // |h| or |g|
  std::string citation;
};

struct BenchmarkSpec {
  std::string name;
  std::string constraint_file;  // under constraints/
  expr::ConstraintSet cs;
  ProjectorKind projector = ProjectorKind::Newton;
  compiler::MultiplierMode multiplier_mode = compiler::MultiplierMode::PaperExact;
  int n_train = 1200;
  int n_val = 300;
  net::TrainConfig train_defaults;
  std::vector<ReferenceMetric> references;
  std::string reference_note;  // qualifies the reference values, when needed

  // Random projection instances for the property suites.
  std::function<void(CounterRng&, Eigen::VectorXd&, Eigen::VectorXd&)> random_instance;
  // Oracle settings (completion hook for the distillation manifold).
  std::function<solver::OracleOptions()> oracle_options;

  data::Dataset generate(std::uint64_t seed) const;
  data::Dataset generate(std::uint64_t seed, int n_train_override, int n_val_override) const;
};

const std::vector<std::string>& benchmark_names();
const BenchmarkSpec& find_benchmark(const std::string& name);

// ---------------------------------------------------------------------------
// Three-mode comparison

struct RunResult {
  std::string model;  // MLP, PINN, KKT-Hardnet
  net::TrainReport report;
};

struct Comparison {
  std::string benchmark;
  std::vector<RunResult> runs;
  std::string table_csv(const BenchmarkSpec& spec) const;  // ours next to paper values
};

// Trains the requested modes with identical seeds and backbones. The spec's
// projector kind decides the hardnet layer (Newton or analytic). Curve CSVs
// are left to the caller via RunResult::report.
Comparison run_benchmark(const BenchmarkSpec& spec, const std::vector<net::Mode>& modes,
                         const net::TrainConfig& overrides, std::uint64_t data_seed,
                         int n_train_override = -1, int n_val_override = -1);

// The projection layer a benchmark's hardnet mode uses.
std::unique_ptr<net::ProjectionOp> make_projection(const BenchmarkSpec& spec,
                                                   const solver::SolverConfig& solver_cfg,
                                                   net::VjpMode vjp = net::VjpMode::Implicit);

}  // namespace kkth::bench
