#include "commands.hpp"

#include "output.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace plsim::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNormalQuantile = 1.959964;

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) rows.push_back(to_std(m.row(i).transpose()));
  return rows;
}

std::string join_one_based(const std::vector<Index>& idx, const std::string& prefix) {
  std::string s;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (k > 0) s += ';';
    s += prefix + std::to_string(idx[k] + 1);
  }
  return s;
}

std::vector<std::string> coefficient_names(Index p, Index q) {
  std::vector<std::string> names;
  for (Index j = 0; j < p; ++j) names.push_back("beta" + std::to_string(j + 1));
  for (Index j = 0; j < q; ++j) names.push_back("theta" + std::to_string(j + 1));
  return names;
}

// ---- fit artifacts ----

std::string coefficients_csv(const FitResult& fit) {
  const Index p = fit.beta.p();
  const Index q = fit.theta.size();
  Vector est(p + q);
  est << fit.beta.beta(), fit.theta;
  const auto names = coefficient_names(p, q);
  CsvTable t({"parameter", "estimate", "std_error", "ci_lower", "ci_upper"});
  for (Index j = 0; j < p + q; ++j) {
    const double var = fit.full_cov.rows() == p + q ? fit.full_cov(j, j) : std::numeric_limits<double>::quiet_NaN();
    const double se = std::sqrt(std::max(var, 0.0));
    t.add_row({names[static_cast<std::size_t>(j)], fmt6(est(j)), fmt6(se), fmt6(est(j) - kNormalQuantile * se),
               fmt6(est(j) + kNormalQuantile * se)});
  }
  return t.str();
}

std::vector<GPoint> sorted_curve(const FitResult& fit) {
  std::vector<GPoint> pts = fit.g_grid;
  std::stable_sort(pts.begin(), pts.end(), [](const GPoint& a, const GPoint& b) { return a.t < b.t; });
  return pts;
}

std::string gcurve_csv(const FitResult& fit) {
  CsvTable t({"t", "g", "g_prime"});
  for (const GPoint& g : sorted_curve(fit)) t.add_row({fmt6(g.t), fmt6(g.g), fmt6(g.g_prime)});
  return t.str();
}

std::string trace_log(const FitResult& fit, const std::string& header) {
  std::ostringstream os;
  os << header << '\n';
  os << "iteration step_norm score_norm bandwidth rho objective\n";
  os << std::setprecision(10);
  for (const TraceEntry& e : fit.trace) {
    os << e.iteration << ' ' << e.step_norm << ' ' << e.score_norm << ' ' << e.bandwidth << ' ' << e.rho << ' '
       << e.objective << '\n';
  }
  os << "converged " << (fit.converged ? "yes" : "no") << " after " << fit.iterations << " iterations\n";
  return os.str();
}

json fit_json(const FitResult& fit) {
  json j;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["bandwidth"] = fit.bandwidth;
  j["rho"] = fit.rho;
  j["score_norm"] = fit.score_norm;
  j["anchor"] = "beta" + std::to_string(fit.beta.anchor() + 1);
  j["beta"] = to_std(fit.beta.beta());
  j["theta"] = to_std(fit.theta);
  j["covariance"] = matrix_json(fit.full_cov);
  json curve = json::array();
  for (const GPoint& g : sorted_curve(fit)) curve.push_back({g.t, g.g, g.g_prime});
  j["gcurve"] = curve;
  return j;
}

void write_fit_artifacts(const fs::path& dir, const FitResult& fit, const std::string& header) {
  write_atomically(dir / "coefficients.csv", coefficients_csv(fit));
  write_atomically(dir / "gcurve.csv", gcurve_csv(fit));
  write_atomically(dir / "trace.log", trace_log(fit, header));
}

void print_coefficients(std::ostream& log, const FitResult& fit) {
  const Index p = fit.beta.p();
  const auto names = coefficient_names(p, fit.theta.size());
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto j = static_cast<Index>(k);
    const double est = j < p ? fit.beta.beta()(j) : fit.theta(j - p);
    const double se = fit.full_cov.rows() > j ? std::sqrt(std::max(fit.full_cov(j, j), 0.0))
                                              : std::numeric_limits<double>::quiet_NaN();
    log << "  " << names[k] << " = " << fmt6(est) << " (se " << fmt6(se) << ")\n";
  }
}

int convergence_status(const FitResult& fit, const fs::path& dir, std::ostream& log) {
  if (fit.converged) return kExitOk;
  log << "did not converge after " << fit.iterations << " iterations; see " << (dir / "trace.log").string() << '\n';
  return kExitNotConverged;
}

// ---- simulation artifacts ----

SimDesign make_design(const RunConfig& cfg) {
  SimDesign d;
  if (cfg.design == "example1") {
    d = example1(cfg.n, cfg.error_kind, cfg.seed);
  } else if (cfg.design == "example2") {
    d = example2(cfg.n, cfg.error_kind, cfg.seed);
  } else if (cfg.design == "example3") {
    d = example3(cfg.n, cfg.error_kind, cfg.seed);
  } else {
    throw DomainError("unknown design '" + cfg.design + "' (valid: example1, example2, example3)");
  }
  d.rho = cfg.rho;
  d.validate();
  return d;
}

std::string bias_se(double bias, double se) { return fmt6(bias) + "(" + fmt6(se) + ")"; }

std::string metrics_csv(const MetricsReport& r, const SimDesign& design) {
  const auto names = coefficient_names(design.p(), design.q());
  std::vector<std::string> header{"method"};
  header.insert(header.end(), names.begin(), names.end());
  for (const char* h : {"MSE_beta", "MSE_theta", "MSE_g", "R2_beta", "R2_theta", "TN_beta", "TP_beta", "TN_theta",
                        "TP_theta", "replications", "failures", "nonconverged"}) {
    header.emplace_back(h);
  }
  CsvTable t(header);
  std::vector<std::string> row{r.method};
  for (Index j = 0; j < design.p(); ++j) row.push_back(bias_se(r.bias_beta(j), r.se_beta(j)));
  for (Index j = 0; j < design.q(); ++j) row.push_back(bias_se(r.bias_theta(j), r.se_theta(j)));
  for (double v : {r.mse_beta, r.mse_theta, r.mse_g, r.r2_beta, r.r2_theta, r.tn_beta, r.tp_beta, r.tn_theta,
                   r.tp_theta}) {
    row.push_back(fmt6(v));
  }
  row.push_back(std::to_string(r.replications));
  row.push_back(std::to_string(r.failures));
  row.push_back(std::to_string(r.nonconverged));
  t.add_row(std::move(row));
  return t.str();
}

json metrics_json(const MetricsReport& r) {
  json j;
  j["method"] = r.method;
  j["replications"] = r.replications;
  j["failures"] = r.failures;
  j["nonconverged"] = r.nonconverged;
  j["bias_beta"] = to_std(r.bias_beta);
  j["se_beta"] = to_std(r.se_beta);
  j["bias_theta"] = to_std(r.bias_theta);
  j["se_theta"] = to_std(r.se_theta);
  j["mse_beta"] = r.mse_beta;
  j["mse_theta"] = r.mse_theta;
  j["mse_g"] = r.mse_g;
  j["r2_beta"] = r.r2_beta;
  j["r2_theta"] = r.r2_theta;
  j["tn_beta"] = r.tn_beta;
  j["tp_beta"] = r.tp_beta;
  j["tn_theta"] = r.tn_theta;
  j["tp_theta"] = r.tp_theta;
  j["failure_messages"] = r.failure_messages;
  return j;
}

std::vector<double> parse_grid(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, ',')) {
    token.erase(0, token.find_first_not_of(" \t"));
    token.erase(token.find_last_not_of(" \t") + 1);
    if (token.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) throw DomainError(what + ": '" + token + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw DomainError(what + " is empty");
  return out;
}

}  // namespace

// ---- configuration ----

void RunConfig::validate() const {
  if (command != Command::Simulate) {
    if (data_path.empty()) throw DomainError("--data is required");
    if (method != "gee" && method != "qif" && method != "independence") {
      throw DomainError("unknown method '" + method + "' (valid: gee, qif, independence)");
    }
  } else {
    if (n < 1) throw DomainError("--n must be >= 1");
    if (replications < 1) throw DomainError("--replications must be >= 1");
    if (threads < 0) throw DomainError("--threads must be >= 0");
    if (methods.empty()) throw DomainError("--methods is empty");
    for (const auto& m : methods) parse_method_kind(m);
  }
  solver.validate();
  penalty.validate();
}

QifConfig effective_solver(const RunConfig& cfg) {
  QifConfig s = cfg.solver;
  if (cfg.method == "independence") static_cast<GeeConfig&>(s) = working_independence(s);
  return s;
}

// ---- subcommands ----

int run_fit(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const LongitudinalDataset data = read_dataset_csv(cfg.data_path);
  if (data.p() < 2) {
    throw DomainError("p = 1: the index part needs at least two X columns (a single column leaves a partially "
                      "linear model, which this tool does not fit)");
  }
  const QifConfig solver = effective_solver(cfg);
  const FitResult fit = cfg.method == "qif" ? solve_qif(data, solver) : solve_gee(data, solver);

  std::ostringstream header;
  header << "fit method=" << cfg.method << " correlation=" << to_string(solver.correlation) << " n=" << data.n()
         << " N=" << data.total_size() << " p=" << data.p() << " q=" << data.q();
  write_fit_artifacts(cfg.output_dir, fit, header.str());
  json j = fit_json(fit);
  j["method"] = cfg.method;
  write_atomically(cfg.output_dir / "fit.json", j.dump(2) + "\n");

  log << header.str() << "\n";
  print_coefficients(log, fit);
  return convergence_status(fit, cfg.output_dir, log);
}

int run_select(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const LongitudinalDataset data = read_dataset_csv(cfg.data_path);
  if (data.p() < 2) throw DomainError("p = 1: the index part needs at least two X columns");
  SelectionConfig sc;
  sc.method = cfg.method == "qif" ? SelectionMethod::Qif : SelectionMethod::Gee;
  sc.solver = effective_solver(cfg);
  sc.penalty = cfg.penalty;
  const SelectionResult res = tune_lambdas(data, sc);

  std::ostringstream header;
  header << "select method=" << cfg.method << " correlation=" << to_string(sc.solver.correlation)
         << " n=" << data.n() << " p=" << data.p() << " q=" << data.q();
  write_fit_artifacts(cfg.output_dir, res.fit, header.str());

  const double bic = bic_score(data, res.fit);
  CsvTable sel({"key", "value"});
  sel.add_row({"method", cfg.method});
  sel.add_row({"lambda1", fmt6(res.lambda1)});
  sel.add_row({"lambda2", fmt6(res.lambda2)});
  sel.add_row({"bic", fmt6(bic)});
  sel.add_row({"df", std::to_string(degrees_of_freedom(res.fit))});
  sel.add_row({"support_beta", join_one_based(res.support_beta, "beta")});
  sel.add_row({"support_theta", join_one_based(res.support_theta, "theta")});
  write_atomically(cfg.output_dir / "selection.csv", sel.str());

  CsvTable path({"lambda1", "lambda2", "bic", "df", "iterations", "converged", "error"});
  json jpath = json::array();
  for (const BicPoint& b : res.bic_path) {
    path.add_row({fmt6(b.lambda1), fmt6(b.lambda2), fmt6(b.bic), std::to_string(b.df), std::to_string(b.iterations),
                  b.converged ? "1" : "0", b.error});
    jpath.push_back({{"lambda1", b.lambda1}, {"lambda2", b.lambda2}, {"bic", b.bic}, {"df", b.df},
                     {"iterations", b.iterations}, {"converged", b.converged}, {"error", b.error}});
  }
  write_atomically(cfg.output_dir / "bic_path.csv", path.str());

  json j = fit_json(res.fit);
  j["method"] = cfg.method;
  j["lambda1"] = res.lambda1;
  j["lambda2"] = res.lambda2;
  j["bic"] = bic;
  j["support_beta"] = res.support_beta;
  j["support_theta"] = res.support_theta;
  j["bic_path"] = jpath;
  write_atomically(cfg.output_dir / "select.json", j.dump(2) + "\n");

  log << header.str() << "\n  lambda1 = " << fmt6(res.lambda1) << ", lambda2 = " << fmt6(res.lambda2)
      << ", BIC = " << fmt6(bic) << "\n  support: " << join_one_based(res.support_beta, "beta") << " | "
      << join_one_based(res.support_theta, "theta") << "\n";
  print_coefficients(log, res.fit);
  return convergence_status(res.fit, cfg.output_dir, log);
}

int run_simulate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const SimDesign design = make_design(cfg);
  std::vector<MethodSpec> specs;
  for (const auto& m : cfg.methods) specs.push_back({m, parse_method_kind(m), cfg.solver, cfg.penalty});
  const std::vector<MetricsReport> reports = run_replications(design, specs, cfg.replications, cfg.threads);

  json all = json::array();
  for (const MetricsReport& r : reports) {
    write_atomically(cfg.output_dir / ("metrics_" + r.method + ".csv"), metrics_csv(r, design));
    all.push_back(metrics_json(r));
  }
  json j;
  j["design"] = design.name;
  j["n"] = design.n;
  j["replications"] = cfg.replications;
  j["seed"] = cfg.seed;
  j["error_correlation"] = to_string(design.error_kind);
  j["working_correlation"] = to_string(cfg.solver.correlation);
  j["methods"] = all;
  write_atomically(cfg.output_dir / "metrics.json", j.dump(2) + "\n");

  log << "simulate design=" << design.name << " n=" << design.n << " L=" << cfg.replications << "\n";
  for (const MetricsReport& r : reports) {
    log << "  " << r.method << ": MSE_beta " << fmt6(r.mse_beta) << ", MSE_theta " << fmt6(r.mse_theta)
        << ", MSE_g " << fmt6(r.mse_g) << ", R2_beta " << fmt6(r.r2_beta) << ", failures " << r.failures << "\n";
  }
  return kExitOk;
}

// ---- command line ----

namespace {

struct Raw {
  std::string correlation = "exchangeable";
  std::string pooling;
  std::string bandwidth_policy = "cv_once";
  double bandwidth = 0.0;
  std::string bandwidth_grid;
  std::string lambda1_grid;
  std::string lambda2_grid;
  std::string error_correlation = "exchangeable";
};

const std::vector<std::string> kKinds{"independence", "exchangeable", "ar1"};

void add_solver_options(CLI::App* app, RunConfig& cfg, Raw& raw) {
  app->add_option("--correlation", raw.correlation, "Working correlation")
      ->check(CLI::IsMember(kKinds))
      ->capture_default_str();
  app->add_option("--pooling", raw.pooling, "Marginal variance model (default: pooled)")
      ->check(CLI::IsMember({"pooled", "per_subject"}));
  app->add_option("--bandwidth", raw.bandwidth, "Fixed bandwidth; implies --bandwidth-policy fixed");
  app->add_option("--bandwidth-policy", raw.bandwidth_policy, "Bandwidth selection")
      ->check(CLI::IsMember({"cv_once", "cv_each", "fixed"}))
      ->capture_default_str();
  app->add_option("--bandwidth-grid", raw.bandwidth_grid, "Comma-separated cross-validation grid");
  app->add_option("--kernel-ridge", cfg.solver.kernel_ridge, "Ridge on the local linear denominator")
      ->capture_default_str();
  app->add_option("--max-iter", cfg.solver.max_iterations, "Iteration cap")->capture_default_str();
  app->add_option("--tolerance", cfg.solver.tolerance, "Convergence tolerance")->capture_default_str();
  app->add_option("--out", cfg.output_dir, "Output directory")->capture_default_str();
}

void add_penalty_options(CLI::App* app, RunConfig& cfg, Raw& raw) {
  app->add_option("--lambda1-grid", raw.lambda1_grid, "Comma-separated lambda grid for beta (default: from pilot)");
  app->add_option("--lambda2-grid", raw.lambda2_grid, "Comma-separated lambda grid for theta (default: from pilot)");
  app->add_option("--scad-c", cfg.penalty.c, "SCAD shape parameter")->capture_default_str();
  app->add_option("--zero-threshold", cfg.penalty.zero_threshold, "Hard-zero threshold")->capture_default_str();
  app->add_option("--max-inner-iter", cfg.penalty.max_inner_iterations, "Iteration cap per grid point")
      ->capture_default_str();
}

void finish_config(RunConfig& cfg, const Raw& raw, CLI::App* sub) {
  cfg.solver.correlation = parse_correlation_kind(raw.correlation);
  if (!raw.pooling.empty()) cfg.solver.pooling = parse_variance_pooling(raw.pooling);
  if (raw.bandwidth_policy == "cv_each") cfg.solver.bandwidth_policy = BandwidthPolicy::CrossValidateEachIteration;
  if (raw.bandwidth_policy == "fixed") cfg.solver.bandwidth_policy = BandwidthPolicy::Fixed;
  if (sub->count("--bandwidth") > 0) {
    cfg.solver.bandwidth_policy = BandwidthPolicy::Fixed;
    cfg.solver.bandwidth = raw.bandwidth;
  }
  if (sub->count("--bandwidth-grid") > 0) cfg.solver.bandwidth_grid = parse_grid(raw.bandwidth_grid, "bandwidth grid");
  if (cfg.command != Command::Fit) {
    if (sub->count("--lambda1-grid") > 0) cfg.penalty.lambda1_grid = parse_grid(raw.lambda1_grid, "lambda1 grid");
    if (sub->count("--lambda2-grid") > 0) cfg.penalty.lambda2_grid = parse_grid(raw.lambda2_grid, "lambda2 grid");
  }
  if (cfg.command == Command::Simulate) cfg.error_kind = parse_correlation_kind(raw.error_correlation);
}

}  // namespace

int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Partially linear single-index models for longitudinal data", "plsim"};
  app.set_config("--config", "", "Key-value config file (TOML or INI); command-line flags take precedence");
  app.require_subcommand(1);

  RunConfig cfg;
  Raw raw;
  const std::vector<std::string> fit_methods{"gee", "qif", "independence"};

  CLI::App* fit = app.add_subcommand("fit", "Estimate beta, theta and g for a dataset");
  fit->add_option("--data", cfg.data_path, "Input CSV (subject,y,x1..xp,z1..zq)")->required();
  fit->add_option("--method", cfg.method, "Estimator")->check(CLI::IsMember(fit_methods))->capture_default_str();
  add_solver_options(fit, cfg, raw);

  CLI::App* select = app.add_subcommand("select", "SCAD variable selection with BIC-tuned lambdas");
  select->add_option("--data", cfg.data_path, "Input CSV (subject,y,x1..xp,z1..zq)")->required();
  select->add_option("--method", cfg.method, "Estimator")->check(CLI::IsMember(fit_methods))->capture_default_str();
  add_solver_options(select, cfg, raw);
  add_penalty_options(select, cfg, raw);

  std::vector<std::string> method_names;
  for (auto k : {MethodKind::Independence, MethodKind::Gee, MethodKind::Qif, MethodKind::PenalizedGee,
                 MethodKind::PenalizedQif, MethodKind::OracleGee, MethodKind::OracleQif}) {
    method_names.push_back(to_string(k));
  }
  CLI::App* sim = app.add_subcommand("simulate", "Replicated simulation study");
  sim->add_option("--design", cfg.design, "Simulation design")
      ->check(CLI::IsMember({"example1", "example2", "example3"}))
      ->capture_default_str();
  sim->add_option("--n", cfg.n, "Number of subjects")->capture_default_str();
  sim->add_option("-L,--replications", cfg.replications, "Number of simulated datasets")->capture_default_str();
  sim->add_option("--methods", cfg.methods, "Methods to compare")
      ->delimiter(',')
      ->check(CLI::IsMember(method_names))
      ->capture_default_str();
  sim->add_option("--error-correlation", raw.error_correlation, "Correlation of the generated errors")
      ->check(CLI::IsMember(kKinds))
      ->capture_default_str();
  sim->add_option("--rho", cfg.rho, "Correlation parameter of the generated errors")->capture_default_str();
  sim->add_option("--seed", cfg.seed, "Master seed")->capture_default_str();
  sim->add_option("--threads", cfg.threads, "Worker threads (0 = hardware concurrency)")->capture_default_str();
  add_solver_options(sim, cfg, raw);
  add_penalty_options(sim, cfg, raw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (sub == fit) cfg.command = Command::Fit;
    if (sub == select) cfg.command = Command::Select;
    if (sub == sim) cfg.command = Command::Simulate;
    finish_config(cfg, raw, sub);
    switch (cfg.command) {
      case Command::Fit: return run_fit(cfg, out);
      case Command::Select: return run_select(cfg, out);
      case Command::Simulate: return run_simulate(cfg, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
  }
  return kExitError;
}

}  // namespace plsim::cli
