#include "kkth/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kkth/bench.hpp"
#include "kkth/compiler.hpp"
#include "kkth/log.hpp"

namespace kkth::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

Config Config::load_file(const std::string& path) {
  if (path.empty()) return Config{};
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

Config Config::from_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t\r");
      auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) +
                                              ": empty key");
    cfg.values_[key] = value;
  }
  return cfg;
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }
bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stod(it->second);
}

long Config::get_int(const std::string& key, long fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stol(it->second);
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Config::render() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

solver::SolverConfig Config::solver_config() const {
  solver::SolverConfig cfg;
  cfg.max_iters = static_cast<int>(get_int("solver.max_iters", cfg.max_iters));
  cfg.tol = get_double("solver.tol", cfg.tol);
  cfg.tikhonov = get_double("solver.tikhonov", cfg.tikhonov);
  cfg.alpha = get_double("solver.alpha", cfg.alpha);
  cfg.armijo_c = get_double("solver.armijo_c", cfg.armijo_c);
  cfg.shrink = get_double("solver.shrink", cfg.shrink);
  cfg.eps_init = get_double("solver.eps_init", cfg.eps_init);
  cfg.eps_log = get_double("solver.eps_log", cfg.eps_log);
  cfg.adjoint_tikhonov = get_double("solver.adjoint_tikhonov", cfg.adjoint_tikhonov);
  std::string step = get_string("solver.step", "backtracking");
  cfg.step = step == "fixed" ? solver::StepPolicy::Fixed : solver::StepPolicy::Backtracking;
  cfg.validate();
  return cfg;
}

net::TrainConfig Config::train_config() const {
  net::TrainConfig cfg;
  cfg.lr = get_double("net.lr", cfg.lr);
  cfg.epochs = static_cast<int>(get_int("net.epochs", cfg.epochs));
  cfg.batch = static_cast<int>(get_int("net.batch", cfg.batch));
  cfg.omega = get_double("net.omega", cfg.omega);
  cfg.adam_beta1 = get_double("net.adam_beta1", cfg.adam_beta1);
  cfg.adam_beta2 = get_double("net.adam_beta2", cfg.adam_beta2);
  cfg.adam_eps = get_double("net.adam_eps", cfg.adam_eps);
  std::string hidden = get_string("net.hidden", "64 64");
  cfg.hidden.clear();
  std::istringstream hs(hidden);
  int h;
  while (hs >> h) cfg.hidden.push_back(h);
  cfg.warmup_epochs = static_cast<int>(get_int("net.warmup_epochs", cfg.warmup_epochs));
  cfg.vjp = get_string("net.vjp", "implicit") == "unrolled" ? net::VjpMode::Unrolled
                                                            : net::VjpMode::Implicit;
  cfg.solver = solver_config();
  return cfg;
}

// ---------------------------------------------------------------------------
// Manifest

std::string git_describe() {
  std::FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
  if (pipe == nullptr) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (std::fgets(buf, sizeof(buf), pipe) != nullptr) out += buf;
  ::pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string Manifest::render() const {
  std::ostringstream out;
  out << "# kkt-hardnet run manifest\n";
  out << "command: " << command << "\n";
  out << "seed: " << seed << "\n";
  out << "threads: " << threads << "\n";
  out << "git: " << git_describe << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", wall_seconds);
  out << "wall_seconds: " << buf << "\n";
  for (const auto& [stage, secs] : stage_seconds) {
    std::snprintf(buf, sizeof(buf), "%.3f", secs);
    out << "stage: " << stage << " " << buf << "\n";
  }
  for (const auto& o : outputs) out << "output: " << o << "\n";
  out << "config:\n";
  std::istringstream cfg(config_snapshot);
  std::string line;
  while (std::getline(cfg, line)) out << "  " << line << "\n";
  return out.str();
}

void Manifest::write(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << render();
}

namespace {

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write output file: " + path);
  out << text;
}

Eigen::MatrixXd read_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open csv: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    for (auto& c : line)
      if (c == ',' || c == ';' || c == '\t') c = ' ';
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    bool numeric = true;
    std::string tok;
    std::istringstream probe(line);
    if (probe >> tok) {
      char* end = nullptr;
      std::strtod(tok.c_str(), &end);
      numeric = end != tok.c_str();
    }
    if (!numeric) continue;  // header row
    while (ls >> v) row.push_back(v);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("csv has no numeric rows: " + path);
  Eigen::MatrixXd m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      throw std::runtime_error("csv rows have inconsistent widths: " + path);
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  }
  return m;
}

net::Mode parse_mode(const std::string& mode) {
  if (mode == "mlp") return net::Mode::Mlp;
  if (mode == "pinn") return net::Mode::Pinn;
  if (mode == "hardnet") return net::Mode::Hardnet;
  throw std::runtime_error("unknown mode '" + mode + "' (expected mlp, pinn, or hardnet)");
}

std::string mode_name(net::Mode mode) {
  switch (mode) {
    case net::Mode::Mlp: return "mlp";
    case net::Mode::Pinn: return "pinn";
    case net::Mode::Hardnet: return "hardnet";
  }
  return "?";
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

// ---------------------------------------------------------------------------
// compile

int cmd_compile(const CompileArgs& args) {
  try {
    expr::ConstraintSet cs = expr::load_constraint_file(args.constraints_path);
    if (cs.equalities.empty() && cs.inequalities.empty())
      throw std::runtime_error("no constraints in " + args.constraints_path);
    compiler::CompileOptions opts;
    if (args.signed_mult) opts.multiplier_mode = compiler::MultiplierMode::SignedSplit;
    compiler::StructuredSystem sys;
    if (args.feasibility_only) {
      sys = compiler::logexp_transform(cs, opts);
    } else {
      sys = compiler::compile_kkt(cs, opts);
    }
    auto aud = compiler::audit(sys);
    if (!aud.ok) {
      for (const auto& p : aud.problems) log::error("audit: " + p);
      throw std::runtime_error("compiled system failed its structural audit");
    }
    write_file(args.emit_path, compiler::emit_system(sys));
    std::printf("%s: %d rows, unknowns (%d y, %d z, %d lambda), %d augmented inputs\n",
                args.feasibility_only ? "structured system" : "kkt system", sys.n_rows(),
                sys.catalog.p(), sys.catalog.q(), sys.catalog.n_lambda(),
                sys.catalog.m_aug());
    std::printf("wrote %s\n", args.emit_path.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "compile error: %s\n", e.what());
    return 1;
  }
}

// ---------------------------------------------------------------------------
// project

int cmd_project(const ProjectArgs& args) {
  try {
    std::ifstream in(args.system_path);
    if (!in) throw std::runtime_error("cannot open system file: " + args.system_path);
    std::stringstream buf;
    buf << in.rdbuf();
    compiler::StructuredSystem loaded = compiler::load_system(buf.str());
    if (!loaded.is_kkt)
      throw std::runtime_error("system is a feasibility transform; projection needs a "
                               "kkt system (recompile without --feasibility-only)");
    compiler::KktSystem kkt;
    static_cast<compiler::StructuredSystem&>(kkt) = std::move(loaded);
    solver::Projector proj(kkt);
    solver::SolverConfig cfg = args.config.solver_config();

    Eigen::MatrixXd X = read_csv_matrix(args.x_csv);
    Eigen::MatrixXd Y0 = read_csv_matrix(args.y0_csv);
    if (X.rows() != Y0.rows())
      throw std::runtime_error("x and y0 row counts differ");
    if (X.cols() != kkt.catalog.m() || Y0.cols() != kkt.catalog.p())
      throw std::runtime_error("x/y0 column counts do not match the system catalog");

    const int n = static_cast<int>(X.rows());
    std::vector<solver::ProjectionResult> results(static_cast<std::size_t>(n));
    net::parallel_for(n, args.threads, [&](int i) {
      results[static_cast<std::size_t>(i)] = proj.project(X.row(i), Y0.row(i), cfg);
    });

    std::ostringstream out;
    for (const auto& name : kkt.catalog.outputs) out << name << ",";
    out << "residual_inf,iters,converged\n";
    char buf2[64];
    for (const auto& res : results) {
      for (int j = 0; j < res.y_proj.size(); ++j) {
        std::snprintf(buf2, sizeof(buf2), "%.12g", res.y_proj(j));
        out << buf2 << ",";
      }
      std::snprintf(buf2, sizeof(buf2), "%.3g", res.residual_inf);
      out << buf2 << "," << res.iters << "," << (res.converged ? 1 : 0) << "\n";
    }
    write_file(args.out_csv, out.str());
    int failures = 0;
    for (const auto& r : results) failures += r.converged ? 0 : 1;
    std::printf("projected %d points (%d unconverged), wrote %s\n", n, failures,
                args.out_csv.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "project error: %s\n", e.what());
    return 1;
  }
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const TrainArgs& args) {
  double t0 = now_seconds();
  try {
    const bench::BenchmarkSpec& spec = bench::find_benchmark(args.benchmark);
    net::Mode mode = parse_mode(args.mode);
    net::TrainConfig cfg = spec.train_defaults;
    {
      // registry defaults, then config-file overrides
      net::TrainConfig file_cfg = args.config.train_config();
      if (args.config.has("net.lr")) cfg.lr = file_cfg.lr;
      if (args.config.has("net.epochs")) cfg.epochs = file_cfg.epochs;
      if (args.config.has("net.batch")) cfg.batch = file_cfg.batch;
      if (args.config.has("net.omega")) cfg.omega = file_cfg.omega;
      if (args.config.has("net.hidden")) cfg.hidden = file_cfg.hidden;
      if (args.config.has("net.vjp")) cfg.vjp = file_cfg.vjp;
      if (args.config.has("net.warmup_epochs")) cfg.warmup_epochs = file_cfg.warmup_epochs;
      cfg.adam_beta1 = file_cfg.adam_beta1;
      cfg.adam_beta2 = file_cfg.adam_beta2;
      cfg.adam_eps = file_cfg.adam_eps;
      cfg.solver = file_cfg.solver;
    }
    cfg.mode = mode;
    cfg.seed = args.seed;
    cfg.threads = args.threads;
    int n_train = static_cast<int>(args.config.get_int("bench.n_train", spec.n_train));
    int n_val = static_cast<int>(args.config.get_int("bench.n_val", spec.n_val));

    fs::create_directories(args.out_dir);
    double t_data = now_seconds();
    data::Dataset ds = spec.generate(args.seed, n_train, n_val);

    std::vector<int> arch;
    arch.push_back(static_cast<int>(ds.inputs.cols()));
    for (int h : cfg.hidden) arch.push_back(h);
    arch.push_back(static_cast<int>(ds.targets.cols()));
    net::Mlp model = net::Mlp::create(arch, cfg.seed);
    std::unique_ptr<net::ProjectionOp> proj;
    if (mode == net::Mode::Hardnet) proj = bench::make_projection(spec, cfg.solver, cfg.vjp);

    double t_train = now_seconds();
    net::TrainReport report = net::train(model, ds, spec.cs, cfg, proj.get());

    std::string curve_path = args.out_dir + "/curve_" + mode_name(mode) + ".csv";
    std::string metrics_path = args.out_dir + "/metrics_" + mode_name(mode) + ".csv";
    write_file(curve_path, report.curve_csv());
    write_file(metrics_path, report.metrics_csv(mode_name(mode)));

    Manifest man;
    man.command = args.command_line.empty() ? ("train " + args.benchmark + " " + args.mode)
                                            : args.command_line;
    man.config_snapshot = args.config.render();
    man.seed = args.seed;
    man.threads = args.threads;
    man.git_describe = git_describe();
    man.outputs = {curve_path, metrics_path};
    man.stage_seconds = {{"setup", t_data - t0},
                         {"data", t_train - t_data},
                         {"train", now_seconds() - t_train}};
    man.wall_seconds = now_seconds() - t0;
    man.write(args.out_dir + "/manifest_" + mode_name(mode) + ".txt");

    std::printf("%s %s: %d epochs, final val mse %.6g, |h| %.3g, max(g,0) %.3g%s\n",
                args.benchmark.c_str(), args.mode.c_str(), report.epochs_run,
                report.final_val.mse, report.final_val.mean_abs_h, report.final_val.mean_pos_g,
                report.diverged ? " [diverged]" : "");
    if (mode == net::Mode::Hardnet)
      std::printf("projection failures: %ld\n", report.projection_failures);
    return report.diverged ? 1 : 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "train error: %s\n", e.what());
    return 1;
  }
}

// ---------------------------------------------------------------------------
// reproduce

int cmd_reproduce(const ReproduceArgs& args) {
  double t0 = now_seconds();
  try {
    static const std::map<std::string, std::string> tables = {
        {"t1", "example1"},
        {"t2", "example2"},
        {"t3", "example3"},
        {"t4", "distill-full"},
        {"t5", "distill-affine"}};
    auto it = tables.find(args.table);
    if (it == tables.end())
      throw std::runtime_error("unknown table '" + args.table + "' (expected t1..t5)");
    const bench::BenchmarkSpec& spec = bench::find_benchmark(it->second);

    net::TrainConfig cfg = spec.train_defaults;
    net::TrainConfig file_cfg = args.config.train_config();
    if (args.config.has("net.lr")) cfg.lr = file_cfg.lr;
    if (args.config.has("net.epochs")) cfg.epochs = file_cfg.epochs;
    if (args.config.has("net.batch")) cfg.batch = file_cfg.batch;
    if (args.config.has("net.omega")) cfg.omega = file_cfg.omega;
    if (args.config.has("net.hidden")) cfg.hidden = file_cfg.hidden;
    cfg.solver = file_cfg.solver;
    cfg.seed = args.seed;
    cfg.threads = args.threads;

    fs::create_directories(args.out_dir);
    int n_train = static_cast<int>(args.config.get_int("bench.n_train", spec.n_train));
    int n_val = static_cast<int>(args.config.get_int("bench.n_val", spec.n_val));
    bench::Comparison cmp = bench::run_benchmark(
        spec, {net::Mode::Mlp, net::Mode::Pinn, net::Mode::Hardnet}, cfg, args.seed, n_train,
        n_val);

    std::vector<std::string> outputs;
    std::string table_path = args.out_dir + "/" + args.table + "_comparison.csv";
    write_file(table_path, cmp.table_csv(spec));
    outputs.push_back(table_path);
    for (const auto& run : cmp.runs) {
      std::string name = run.model == "MLP" ? "mlp" : (run.model == "PINN" ? "pinn" : "hardnet");
      std::string curve = args.out_dir + "/" + args.table + "_curve_" + name + ".csv";
      write_file(curve, run.report.curve_csv());
      outputs.push_back(curve);
    }

    Manifest man;
    man.command = args.command_line.empty() ? ("reproduce " + args.table) : args.command_line;
    man.config_snapshot = args.config.render();
    man.seed = args.seed;
    man.threads = args.threads;
    man.git_describe = git_describe();
    man.outputs = outputs;
    man.wall_seconds = now_seconds() - t0;
    man.write(args.out_dir + "/" + args.table + "_manifest.txt");

    for (const auto& run : cmp.runs)
      std::printf("%s %-11s val mse %.6g, |h| %.3g, max(g,0) %.3g\n", args.table.c_str(),
                  run.model.c_str(), run.report.final_val.mse, run.report.final_val.mean_abs_h,
                  run.report.final_val.mean_pos_g);
    std::printf("wrote %s\n", table_path.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "reproduce error: %s\n", e.what());
    return 1;
  }
}

int cmd_bench_list() {
  for (const auto& name : bench::benchmark_names()) {
    const auto& spec = bench::find_benchmark(name);
    const char* kind = spec.projector == bench::ProjectorKind::Newton
                           ? "newton"
                           : (spec.projector == bench::ProjectorKind::Affine ? "affine" : "both");
    std::printf("%-15s %-28s projector=%-7s n=%d+%d\n", name.c_str(),
                spec.constraint_file.c_str(), kind, spec.n_train, spec.n_val);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// argument parsing

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"KKT-Hardnet: constraint compilation, projection, and training"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;
  app.add_option("--config", config_path, "flat key = value configuration file");
  app.add_option("--seed", seed, "seed for data generation and initialization");
  app.add_option("--threads", threads, "projection parallelism (1 = deterministic)");
  app.add_option("--out", out, "output directory (train/reproduce) ");

  auto* compile = app.add_subcommand("compile", "compile a constraint file");
  CompileArgs cargs;
  compile->add_option("constraints", cargs.constraints_path, "constraint file")->required();
  compile->add_option("--emit-system", cargs.emit_path, "output system path")->required();
  compile->add_flag("--feasibility-only", cargs.feasibility_only,
                    "emit the structured transform without KKT rows");
  compile->add_flag("--signed-mult", cargs.signed_mult,
                    "split chained equality multipliers into positive pairs");

  auto* project = app.add_subcommand("project", "project raw outputs through a system");
  ProjectArgs pargs;
  project->add_option("--system", pargs.system_path, "compiled system file")->required();
  project->add_option("--x", pargs.x_csv, "inputs csv")->required();
  project->add_option("--y0", pargs.y0_csv, "raw outputs csv")->required();
  project->add_option("--out", pargs.out_csv, "destination csv")->required();

  auto* train = app.add_subcommand("train", "train one benchmark in one mode");
  TrainArgs targs;
  train->add_option("benchmark", targs.benchmark, "registered benchmark name")->required();
  train->add_option("mode", targs.mode, "mlp | pinn | hardnet")->required();
  double omega_flag = -1.0;
  int epochs_flag = -1;
  train->add_option("--omega", omega_flag, "soft-penalty weight (pinn)");
  train->add_option("--epochs", epochs_flag, "epoch count override");

  auto* reproduce = app.add_subcommand("reproduce", "run a three-mode table comparison");
  ReproduceArgs rargs;
  reproduce->add_option("table", rargs.table, "t1 | t2 | t3 | t4 | t5")->required();
  int repro_epochs = -1;
  reproduce->add_option("--epochs", repro_epochs, "epoch count override");

  app.add_subcommand("bench-list", "list registered benchmarks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string command_line;
  for (int i = 0; i < argc; ++i) {
    if (i) command_line += " ";
    command_line += argv[i];
  }

  try {
    Config config = Config::load_file(config_path);
    if (compile->parsed()) return cmd_compile(cargs);
    if (project->parsed()) {
      pargs.config = config;
      pargs.threads = threads;
      return cmd_project(pargs);
    }
    if (train->parsed()) {
      if (omega_flag >= 0.0) config.set("net.omega", std::to_string(omega_flag));
      if (epochs_flag > 0) config.set("net.epochs", std::to_string(epochs_flag));
      targs.config = config;
      targs.out_dir = out.empty() ? "out" : out;
      targs.seed = seed;
      targs.threads = threads;
      targs.command_line = command_line;
      return cmd_train(targs);
    }
    if (reproduce->parsed()) {
      if (repro_epochs > 0) config.set("net.epochs", std::to_string(repro_epochs));
      rargs.config = config;
      rargs.out_dir = out.empty() ? "out" : out;
      rargs.seed = seed;
      rargs.threads = threads;
      rargs.command_line = command_line;
      return cmd_reproduce(rargs);
    }
    return cmd_bench_list();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace kkth::cli
