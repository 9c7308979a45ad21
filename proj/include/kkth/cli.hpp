#pragma once

#include <map>
#include <string>
#include <vector>

#include "kkth/net.hpp"
#include "kkth/solver.hpp"

// Command-line front end: compile constraint files, project points through a
// compiled system, train the benchmark models, and reproduce the comparison
// tables. Every run writes a manifest next to its outputs.

namespace kkth::cli {

// Flat `key = value` configuration with dotted per-module sections
// (solver.*, net.*, bench.*). Every key has a default, so an empty or missing
// file is valid.
class Config {
 public:
  static Config load_file(const std::string& path);
  static Config from_text(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;

  // Resolved snapshot (sorted) for manifests.
  std::string render() const;

  solver::SolverConfig solver_config() const;
  net::TrainConfig train_config() const;  // mode/omega filled by the command

 private:
  std::map<std::string, std::string> values_;
};

struct Manifest {
  std::string command;
  std::string config_snapshot;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string git_describe;
  std::vector<std::string> outputs;
  std::vector<std::pair<std::string, double>> stage_seconds;
  double wall_seconds = 0.0;

  std::string render() const;
  void write(const std::string& path) const;
};

std::string git_describe();

// Subcommand entry points (exit-status semantics).
struct CompileArgs {
  std::string constraints_path;
  std::string emit_path;
  bool feasibility_only = false;
  bool signed_mult = false;
};
int cmd_compile(const CompileArgs& args);

struct ProjectArgs {
  std::string system_path;
  std::string x_csv;
  std::string y0_csv;
  std::string out_csv;
  Config config;
  int threads = 1;
};
int cmd_project(const ProjectArgs& args);

struct TrainArgs {
  std::string benchmark;
  std::string mode;  // mlp | pinn | hardnet
  Config config;
  std::string out_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string command_line;
};
int cmd_train(const TrainArgs& args);

struct ReproduceArgs {
  std::string table;  // t1..t5
  Config config;
  std::string out_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string command_line;
};
int cmd_reproduce(const ReproduceArgs& args);

int cmd_bench_list();

// Full argument parser; used by the binary and by tests.
int run_cli(int argc, const char* const* argv);

}  // namespace kkth::cli
