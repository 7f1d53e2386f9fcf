#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "hivest/errors.hpp"
#include "hivest/simlab.hpp"
#include "io.hpp"

#ifdef HIVEST_HAVE_OPENMP
#include <omp.h>
#endif

namespace hivest::cli {

namespace {

namespace fs = std::filesystem;

// Writes through a uniquely named temporary and renames it into place, so two
// invocations never see each other's half-written files.
template <class Fn>
void write_file(const std::string& path, Fn&& fill) {
  std::random_device rd;
  const std::string tmp = path + ".tmp" + std::to_string(rd());
  {
    std::ofstream os(tmp);
    if (!os) throw ConfigError("cannot write '" + path + "'");
    fill(os);
    if (!os) throw ConfigError("write to '" + path + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw ConfigError("cannot move output into place at '" + path + "'");
  }
}

void write_json(const std::string& path, const json& j) {
  write_file(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

std::vector<std::pair<std::string, double>> parse_fixed(const std::vector<std::string>& items) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& item : items) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--fix expects name=value, got '" + item + "'");
    }
    const std::string value = item.substr(eq + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || value.empty()) {
      throw ConfigError("--fix " + item + ": value is not a number");
    }
    out.emplace_back(item.substr(0, eq), v);
  }
  return out;
}

// Settings shared by fit and select.
struct ModelArgs {
  std::string data;
  std::string out;
  std::string spacing = "log";
  std::string t_scale = "raw";
  std::string v_scale = "log10";
  std::vector<std::string> fix;
  std::vector<double> known_initial;
  std::uint64_t seed = 42;
  int lm_starts = 64;
  double step = kDefaultStep;
  double bandwidth = 0.0;
  std::string kernel = "epanechnikov";
  double range_factor = 5.0;
  double t_weight = 1.0;
  double v_weight = 1.0;
  int eta_points = 200;
  std::optional<double> t0;
};

void add_model_options(CLI::App* cmd, ModelArgs& a) {
  cmd->add_option("--data", a.data, "Input CSV (t,cd4,viral_load; blank = unobserved)")
      ->required();
  cmd->add_option("--out", a.out, "Output prefix")->required();
  cmd->add_option("--spacing", a.spacing, "Control-point spacing: log or linear")
      ->capture_default_str();
  cmd->add_option("--t-scale", a.t_scale, "Fitting scale of CD4: raw or log10")
      ->capture_default_str();
  cmd->add_option("--v-scale", a.v_scale, "Fitting scale of viral load: raw or log10")
      ->capture_default_str();
  cmd->add_option("--fix", a.fix, "Hold a parameter, name=value (repeatable)");
  cmd->add_option("--known-initial", a.known_initial,
                  "T_U(0),T_I(0),V(0); estimated with the rest when absent")
      ->delimiter(',')
      ->expected(3);
  cmd->add_option("--seed", a.seed, "Optimizer master seed")->capture_default_str();
  cmd->add_option("--lm-starts", a.lm_starts, "Extra seeded Levenberg-Marquardt starts")
      ->capture_default_str();
  cmd->add_option("--step", a.step, "RK4 step (days)")->capture_default_str();
  cmd->add_option("--bandwidth", a.bandwidth, "Smoothing bandwidth in days, 0 = cross-validated")
      ->capture_default_str();
  cmd->add_option("--kernel", a.kernel, "epanechnikov, biweight or uniform")
      ->capture_default_str();
  cmd->add_option("--range-factor", a.range_factor, "Warm-start range [est/f, est*f]")
      ->capture_default_str();
  cmd->add_option("--t-weight", a.t_weight, "Residual weight of the CD4 series")
      ->capture_default_str();
  cmd->add_option("--v-weight", a.v_weight, "Residual weight of the viral-load series")
      ->capture_default_str();
  cmd->add_option("--t0", a.t0,
                  "Start of the model time axis, where the initial state applies "
                  "(default: first observation)");
  cmd->add_option("--eta-points", a.eta_points, "Points on the exported eta grid")
      ->capture_default_str();
}

struct Prepared {
  ObservationSet obs;
  MssbOptions mssb;
  SnlsOptions snls;
  WarmPolicy warm;
  std::vector<std::pair<std::string, double>> fixed;
  bool estimate_initial = true;
  KnotSpacing spacing = KnotSpacing::Log;
  Interval domain;
};

Prepared prepare(const ModelArgs& a, ExecPolicy policy) {
  Prepared p;
  p.spacing = knot_spacing_from_string(a.spacing);
  p.fixed = parse_fixed(a.fix);
  p.obs = read_observations_csv(a.data, scale_from_string(a.t_scale), scale_from_string(a.v_scale));
  p.obs.t_weight = a.t_weight;
  p.obs.v_weight = a.v_weight;
  p.obs.validate();
  p.domain = p.obs.span();
  if (a.t0) {
    if (*a.t0 > p.domain.lo) {
      throw ConfigError("--t0 must not be after the first observation (" +
                        format_double(p.domain.lo) + ")");
    }
    p.domain.lo = *a.t0;
  }

  p.mssb.kernel = {kernel_kind_from_string(a.kernel), a.bandwidth};
  p.mssb.range_factor = a.range_factor;
  p.mssb.policy = policy;
  for (const auto& [name, value] : p.fixed) {
    if (name == "c") p.mssb.fixed_c = value;
    if (name == "delta") p.mssb.fixed_delta = value;
  }
  p.warm.range_factor = a.range_factor;

  p.snls.solver.step = a.step;
  p.snls.optimizer.seed = a.seed;
  p.snls.optimizer.policy = policy;
  p.snls.lm_starts = a.lm_starts;
  p.snls.eta_grid_points = a.eta_points;
  if (!a.known_initial.empty()) {
    p.snls.known_initial = State{a.known_initial[0], a.known_initial[1], a.known_initial[2]};
    p.estimate_initial = false;
  }
  return p;
}

json mssb_json(const MssbEstimate& m) {
  const auto& c = m.constants;
  json ranges = json::array();
  for (const auto& r : m.search_ranges) ranges.push_back({r.lo, r.hi});
  return {{"parameters",
           {{"lambda", c.lambda}, {"rho", c.rho}, {"N", c.n_virions}, {"delta", c.delta},
            {"c", c.c}}},
          {"eta_coeffs", m.eta_coeffs},
          {"flagged", m.flagged},
          {"search_ranges", ranges},
          {"bandwidths_cd4", {m.bandwidths_t[0], m.bandwidths_t[1], m.bandwidths_t[2]}},
          {"bandwidths_viral_load", {m.bandwidths_v[0], m.bandwidths_v[1], m.bandwidths_v[2]}}};
}

// MSSB point estimates dressed as a fit: fixed entries keep their values and
// the box is the warm-start box.
FitResult mssb_as_fit(const Prepared& p, const SplineSpec& spec, const PipelineStart& ps) {
  if (!ps.mssb) std::rethrow_exception(ps.mssb_exception);
  ThetaVector theta = ps.warm.theta;
  const auto& m = *ps.mssb;
  const double constants[5] = {m.constants.lambda, m.constants.rho, m.constants.n_virions,
                               m.constants.delta, m.constants.c};
  std::vector<double> values(constants, constants + 5);
  values.insert(values.end(), m.eta_coeffs.begin(), m.eta_coeffs.end());
  if (theta.layout.with_initial_state) {
    values.insert(values.end(), {m.initial_state.t_u, m.initial_state.t_i, m.initial_state.v});
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!theta.fixed[i]) theta.values[i] = values[i];
  }
  SnlsOptions so = p.snls;
  if (!so.known_initial) so.known_initial = m.initial_state;
  FitResult fit = evaluate_fit(p.obs, spec, theta, so, "mssb");
  if (!m.flagged.empty()) {
    std::string names;
    for (const auto& f : m.flagged) names += (names.empty() ? "" : ", ") + f;
    fit.notes.push_back("flagged estimates (outside global bounds or unusable): " + names);
  }
  return fit;
}

void write_fit_outputs(const std::string& prefix, const FitResult& fit, const Prepared& p,
                       const std::string& data_path, const std::optional<MssbEstimate>& mssb,
                       const std::string& config) {
  json j = fit_to_json(fit, p.obs);
  j["data"] = data_path;
  if (mssb) j["mssb"] = mssb_json(*mssb);
  j["config"] = config;
  write_json(prefix + ".fit.json", j);
  write_file(prefix + ".traj.csv", [&](std::ostream& os) {
    write_comment_block(os, config);
    write_trajectory_csv(os, fit);
  });
  write_file(prefix + ".eta.csv", [&](std::ostream& os) {
    write_comment_block(os, config);
    write_eta_csv(os, fit);
  });
}

void print_fit(std::ostream& out, const FitResult& fit) {
  const auto names = fit.theta.layout.names();
  out << fit.method << " fit, order " << fit.spec.order << ", " << fit.spec.n_control
      << " control points\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    out << "  " << names[i] << " = " << format_double(fit.theta.values[i])
        << (fit.theta.fixed[i] ? " (fixed)" : "") << '\n';
  }
  out << "  rss = " << format_double(fit.rss) << ", AIC " << format_double(fit.criteria.aic)
      << ", BIC " << format_double(fit.criteria.bic) << ", AICc "
      << format_double(fit.criteria.aicc) << '\n';
}

std::string replace_extension(const std::string& path, const std::string& ext) {
  fs::path p(path);
  p.replace_extension(ext);
  return p.string();
}

std::vector<double> parse_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": '" + item + "' is not a number");
    }
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parameter estimation for an HIV dynamic model with a time-varying infection rate"};
  app.set_config("--config", "", "Config file (TOML/INI key = value, [subcommand] sections)");
  app.require_subcommand(1);
  int threads = 0;
  bool serial = false;
  app.add_option("--threads", threads, "OpenMP worker count, 0 = runtime default")
      ->capture_default_str();
  app.add_flag("--serial", serial, "Use the serial reference kernels");

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Generate a noisy dataset and its truth record");
  std::string sim_out, sim_scenario, sim_eta_spline;
  int sim_n = 200, sim_eta_order = 2;
  double sim_s1 = 20.0, sim_s2 = 100.0;
  std::uint64_t sim_seed = 20100601, sim_run = 0;
  std::string sim_spacing = "log";
  sim_cmd->add_option("--out", sim_out, "Output CSV path (truth goes to <stem>.truth.json)")
      ->required();
  sim_cmd->add_option("--scenario", sim_scenario, "Named scenario, e.g. n200-s20-100");
  sim_cmd->add_option("--n", sim_n, "Points per series")->capture_default_str();
  sim_cmd->add_option("--sigma1-sq", sim_s1, "CD4 noise variance")->capture_default_str();
  sim_cmd->add_option("--sigma2-sq", sim_s2, "Viral-load noise variance")->capture_default_str();
  sim_cmd->add_option("--seed", sim_seed, "Master seed")->capture_default_str();
  sim_cmd->add_option("--run", sim_run, "Run index (noise stream)")->capture_default_str();
  sim_cmd->add_option("--eta-spline", sim_eta_spline,
                      "Comma-separated spline coefficients; replaces the reference eta");
  sim_cmd->add_option("--eta-order", sim_eta_order, "Order of the --eta-spline curve")
      ->capture_default_str();
  sim_cmd->add_option("--eta-spacing", sim_spacing, "Spacing of the --eta-spline curve")
      ->capture_default_str();

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Estimate parameters from a dataset");
  ModelArgs fit_args;
  std::string method = "combined";
  int fit_order = 2, fit_control = 3;
  add_model_options(fit_cmd, fit_args);
  fit_cmd->add_option("--method", method, "mssb, snls or combined")->capture_default_str();
  fit_cmd->add_option("--order", fit_order, "Spline order (2-4)")->capture_default_str();
  fit_cmd->add_option("--control", fit_control, "Spline control points")->capture_default_str();

  // select
  auto* sel_cmd = app.add_subcommand("select", "Rank spline models by information criteria");
  ModelArgs sel_args;
  std::vector<int> sel_orders{2, 3, 4};
  std::vector<int> sel_controls{3, 4, 5, 6, 7, 8, 9, 10};
  add_model_options(sel_cmd, sel_args);
  sel_cmd->add_option("--orders", sel_orders, "Spline orders of the grid")
      ->delimiter(',')
      ->capture_default_str();
  sel_cmd->add_option("--controls", sel_controls, "Control-point counts of the grid")
      ->delimiter(',')
      ->capture_default_str();

  // bootstrap
  auto* boot_cmd = app.add_subcommand("bootstrap", "Residual-bootstrap confidence intervals");
  std::string boot_fit, boot_data, boot_out;
  int boot_b = 100;
  std::uint64_t boot_seed = 7;
  boot_cmd->add_option("--fit", boot_fit, "A .fit.json written by fit or select")->required();
  boot_cmd->add_option("--data", boot_data, "Dataset; defaults to the one named in the fit file");
  boot_cmd->add_option("--out", boot_out, "Output prefix")->required();
  boot_cmd->add_option("--replicates", boot_b, "Bootstrap replicates")->capture_default_str();
  boot_cmd->add_option("--seed", boot_seed, "Resampling seed")->capture_default_str();

  // study
  auto* study_cmd = app.add_subcommand("study", "Monte Carlo comparison of MSSB and SNLS");
  std::vector<std::string> study_scenarios{"n200-s20-100"};
  std::vector<std::string> study_methods{"mssb", "snls"};
  std::string study_out, study_spacing = "log";
  int study_runs = 50, study_order = 2, study_control = 3;
  std::uint64_t study_seed = 20100601;
  study_cmd->add_option("--scenario", study_scenarios, "Scenario keys")
      ->delimiter(',')
      ->capture_default_str();
  study_cmd->add_option("--methods", study_methods, "mssb, snls")
      ->delimiter(',')
      ->capture_default_str();
  study_cmd->add_option("--runs", study_runs, "Monte Carlo runs per scenario")
      ->capture_default_str();
  study_cmd->add_option("--seed", study_seed, "Master seed")->capture_default_str();
  study_cmd->add_option("--order", study_order, "Spline order")->capture_default_str();
  study_cmd->add_option("--control", study_control, "Spline control points")
      ->capture_default_str();
  study_cmd->add_option("--spacing", study_spacing, "log or linear")->capture_default_str();
  study_cmd->add_option("--out", study_out, "Output prefix")->required();
  // a config file naming subcommand keys selects that subcommand
  for (auto* cmd : {sim_cmd, fit_cmd, sel_cmd, boot_cmd, study_cmd}) cmd->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  // root options plus the subcommand that ran; feeding this back via --config
  // reproduces the run
  std::string config;
  {
    const std::string used = app.get_subcommands().front()->get_name();
    std::istringstream all(app.config_to_str(true, false));
    std::string line, section;
    while (std::getline(all, line)) {
      if (line.size() > 2 && line.front() == '[' && line.back() == ']') {
        section = line.substr(1, line.size() - 2);
        if (section == used) config += line + '\n';
        continue;
      }
      const auto key_end = line.find('=');
      const std::string key = line.substr(0, key_end);
      // unset options dump as "" which does not parse back; absent means the same
      if (key_end != std::string::npos && line.substr(key_end + 1) == "\"\"") continue;
      const bool dotted = key.find('.') != std::string::npos;
      if (section.empty() ? (!dotted || key.rfind(used + ".", 0) == 0) : section == used) {
        config += line + '\n';
      }
    }
  }
  const ExecPolicy policy = serial ? ExecPolicy::Serial : ExecPolicy::Parallel;
#ifdef HIVEST_HAVE_OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif

  try {
    if (*sim_cmd) {
      sim::ScenarioSpec sc;
      if (!sim_scenario.empty()) sc = sim::scenario_from_key(sim_scenario);
      if (sim_scenario.empty() || sim_cmd->count("--n")) sc.n = sim_n;
      if (sim_scenario.empty() || sim_cmd->count("--sigma1-sq")) sc.sigma1_sq = sim_s1;
      if (sim_scenario.empty() || sim_cmd->count("--sigma2-sq")) sc.sigma2_sq = sim_s2;
      sc.seed = sim_seed;
      if (!sim_eta_spline.empty()) {
        const auto coeffs = parse_list(sim_eta_spline, "--eta-spline");
        const SplineSpec spec = make_spec(sim_eta_order, static_cast<int>(coeffs.size()), sc.span,
                                          knot_spacing_from_string(sim_spacing));
        sc.eta = EtaFunction::spline(spec, coeffs);
      }
      sc.validate();
      const ObservationSet obs = sim::generate_dataset(sc, sim_run);
      write_file(sim_out, [&](std::ostream& os) {
        write_comment_block(os, config);
        write_observations_csv(os, obs);
      });
      json truth = scenario_truth_json(sc, sim_run);
      truth["config"] = config;
      const std::string truth_path = replace_extension(sim_out, ".truth.json");
      write_json(truth_path, truth);
      out << "wrote " << sim_out << " (" << sc.n << " rows) and " << truth_path << '\n';
      return kOk;
    }

    if (*fit_cmd) {
      Prepared p = prepare(fit_args, policy);
      const SplineSpec spec = make_spec(fit_order, fit_control, p.domain, p.spacing);
      FitResult fit;
      std::optional<MssbEstimate> mssb;
      if (method == "mssb") {
        const PipelineStart ps =
            mssb_warm_start(p.obs, spec, p.mssb, p.estimate_initial, p.fixed, p.warm);
        mssb = ps.mssb;
        fit = mssb_as_fit(p, spec, ps);
      } else if (method == "combined") {
        const PipelineStart ps =
            mssb_warm_start(p.obs, spec, p.mssb, p.estimate_initial, p.fixed, p.warm);
        mssb = ps.mssb;
        fit = fit_snls(p.obs, spec, ps.warm, p.snls);
        fit.method = "combined";
        if (!ps.mssb) fit.notes.push_back("mssb failed: " + ps.mssb_error);
      } else if (method == "snls") {
        WarmStart warm = warm_start_from_bounds(spec.n_control, p.estimate_initial, p.warm.bounds);
        apply_fixed(warm.theta, p.fixed);
        fit = fit_snls(p.obs, spec, warm, p.snls);
      } else {
        throw ConfigError("--method must be mssb, snls or combined, got '" + method + "'");
      }
      write_fit_outputs(fit_args.out, fit, p, fit_args.data, mssb, config);
      print_fit(out, fit);
      return kOk;
    }

    if (*sel_cmd) {
      Prepared p = prepare(sel_args, policy);
      std::vector<ModelCandidate> grid;
      for (int k : sel_orders) {
        for (int s : sel_controls) grid.push_back({k, s});
      }
      if (grid.empty()) throw ConfigError("model grid is empty (--orders / --controls)");
      const WarmProvider provider = [&](const SplineSpec& spec) {
        return mssb_warm_start(p.obs, spec, p.mssb, p.estimate_initial, p.fixed, p.warm).warm;
      };
      const SelectionResult sel =
          select_model(p.obs, grid, p.spacing, p.domain, provider, p.snls);
      write_file(sel_args.out + ".select.csv", [&](std::ostream& os) {
        write_comment_block(os, config);
        write_select_csv(os, sel);
      });
      write_fit_outputs(sel_args.out, sel.best_fit, p, sel_args.data, std::nullopt, config);
      out << "best by AICc: order " << sel.best_fit.spec.order << ", "
          << sel.best_fit.spec.n_control << " control points\n";
      print_fit(out, sel.best_fit);
      return kOk;
    }

    if (*boot_cmd) {
      std::ifstream in(boot_fit);
      if (!in) throw ConfigError("cannot open fit file '" + boot_fit + "' (--fit)");
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("fit file '" + boot_fit + "' is not JSON: " + e.what());
      }
      const StoredFit stored = stored_fit_from_json(j);
      const std::string data = boot_data.empty() ? stored.data_path : boot_data;
      if (data.empty()) throw ConfigError("no dataset: pass --data");
      const ObservationSet obs = read_observations_csv(data, stored.t_scale, stored.v_scale);
      SnlsOptions so;
      if (j.contains("solver_step")) so.solver.step = j.at("solver_step").get<double>();
      if (!stored.initial_estimated) so.known_initial = stored.initial_state;
      so.eta_grid_points = 200;
      const FitResult best = evaluate_fit(obs, stored.spec, stored.theta, so, "snls");
      if (!std::isfinite(best.rss)) {
        throw EstimationError("the stored fit does not reproduce a finite trajectory on this data");
      }
      BootstrapOptions bo;
      bo.replicates = boot_b;
      bo.seed = boot_seed;
      bo.policy = policy;
      const BootstrapResult boot = bootstrap_ci(obs, best, so, bo);
      json bj = bootstrap_to_json(boot);
      bj["fit"] = boot_fit;
      bj["data"] = data;
      bj["config"] = config;
      write_json(boot_out + ".boot.json", bj);
      write_file(boot_out + ".eta.csv", [&](std::ostream& os) {
        write_comment_block(os, config);
        write_eta_csv(os, best, &boot);
      });
      out << boot.succeeded << " of " << boot.requested << " replicates refitted"
          << (boot.unreliable ? " (unreliable: too many failed)" : "") << '\n';
      for (std::size_t i = 0; i < boot.names.size(); ++i) {
        out << "  " << boot.names[i] << " " << format_double(boot.estimate[i]) << " ["
            << format_double(boot.lower[i]) << ", " << format_double(boot.upper[i]) << "]\n";
      }
      return kOk;
    }

    if (*study_cmd) {
      std::vector<sim::Method> methods;
      for (const auto& m : study_methods) methods.push_back(sim::method_from_string(m));
      sim::StudySettings settings;
      settings.order = study_order;
      settings.n_control = study_control;
      settings.spacing = knot_spacing_from_string(study_spacing);
      settings.policy = policy;
      std::vector<sim::AREReport> reports;
      for (const auto& key : study_scenarios) {
        sim::ScenarioSpec sc = sim::scenario_from_key(key);
        sc.runs = study_runs;
        sc.seed = study_seed;
        reports.push_back(sim::run_study(sc, methods, settings));
      }
      write_file(study_out + ".are.csv", [&](std::ostream& os) {
        write_comment_block(os, config);
        sim::write_are_csv(os, reports);
      });
      write_file(study_out + ".runs.json", [&](std::ostream& os) {
        json j = json::array();
        for (const auto& r : reports) j.push_back(are_report_to_json(r));
        os << j.dump(2) << '\n';
      });
      sim::write_are_csv(out, reports);
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const Error& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  }
  return kUsage;
}

}  // namespace hivest::cli
