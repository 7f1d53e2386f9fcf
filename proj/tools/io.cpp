#include "io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "hivest/errors.hpp"

namespace hivest::cli {

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, const std::string& where) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw DataError(where + ": '" + text + "' is not a finite number");
  }
  return v;
}

json to_json(const State& s) { return {{"T_U0", s.t_u}, {"T_I0", s.t_i}, {"V0", s.v}}; }

}  // namespace

std::string format_double(double x) {
  if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

ObservationSet parse_observations_csv(std::istream& in, Scale t_scale, Scale v_scale,
                                      const std::string& source) {
  ObservationSet obs;
  obs.t_scale = t_scale;
  obs.v_scale = v_scale;
  std::string line;
  int line_no = 0;
  bool header = false;
  double last_t = -std::numeric_limits<double>::infinity();
  while (std::getline(in, line)) {
    ++line_no;
    const std::string content = trim(line);
    if (content.empty() || content.front() == '#') continue;
    const auto cells = split_commas(content);
    const std::string where = source + " line " + std::to_string(line_no);
    if (!header) {
      if (cells != std::vector<std::string>{"t", "cd4", "viral_load"}) {
        throw DataError(where + ": expected header 't,cd4,viral_load', got '" + content + "'");
      }
      header = true;
      continue;
    }
    if (cells.size() != 3) {
      throw DataError(where + ": expected 3 columns, got " + std::to_string(cells.size()));
    }
    if (cells[0].empty()) throw DataError(where + ": missing time");
    const double t = parse_number(cells[0], where);
    if (!(t > last_t)) {
      throw DataError(where + ": time " + cells[0] + " is not after the previous row");
    }
    last_t = t;
    if (!cells[1].empty()) {
      const double y = parse_number(cells[1], where);
      if (t_scale == Scale::Log10 && y <= 0.0) {
        throw DataError(where + ": cd4 " + cells[1] + " is not positive (log10 scale)");
      }
      obs.t_times.push_back(t);
      obs.t_values.push_back(y);
    }
    if (!cells[2].empty()) {
      const double y = parse_number(cells[2], where);
      if (v_scale == Scale::Log10 && y <= 0.0) {
        throw DataError(where + ": viral_load " + cells[2] + " is not positive (log10 scale)");
      }
      obs.v_times.push_back(t);
      obs.v_values.push_back(y);
    }
  }
  if (!header) throw DataError(source + ": empty file (no 't,cd4,viral_load' header)");
  obs.validate();
  return obs;
}

ObservationSet read_observations_csv(const std::string& path, Scale t_scale, Scale v_scale) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open data file '" + path + "'");
  return parse_observations_csv(in, t_scale, v_scale, path);
}

void write_observations_csv(std::ostream& os, const ObservationSet& obs) {
  std::map<double, std::pair<std::string, std::string>> rows;
  for (std::size_t i = 0; i < obs.t_times.size(); ++i) {
    rows[obs.t_times[i]].first = format_double(obs.t_values[i]);
  }
  for (std::size_t i = 0; i < obs.v_times.size(); ++i) {
    rows[obs.v_times[i]].second = format_double(obs.v_values[i]);
  }
  os << "t,cd4,viral_load\n";
  for (const auto& [t, cells] : rows) {
    os << format_double(t) << ',' << cells.first << ',' << cells.second << '\n';
  }
}

void write_comment_block(std::ostream& os, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) os << "# " << line << '\n';
}

json spline_to_json(const SplineSpec& spec) {
  return {{"order", spec.order},
          {"n_control", spec.n_control},
          {"spacing", to_string(spec.spacing)},
          {"domain", {spec.domain.lo, spec.domain.hi}},
          {"control_positions", spec.control_positions},
          {"knots", spec.knots}};
}

SplineSpec spline_from_json(const json& j) {
  const Interval domain{j.at("domain").at(0).get<double>(), j.at("domain").at(1).get<double>()};
  SplineSpec spec = make_spec(j.at("order").get<int>(), j.at("n_control").get<int>(), domain,
                              knot_spacing_from_string(j.at("spacing").get<std::string>()));
  return spec;
}

json fit_to_json(const FitResult& fit, const ObservationSet& obs) {
  const auto names = fit.theta.layout.names();
  json params = json::object(), box = json::object(), fixed = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    params[names[i]] = fit.theta.values[i];
    box[names[i]] = {fit.theta.box.lower[i], fit.theta.box.upper[i]};
    if (fit.theta.fixed[i]) fixed.push_back(names[i]);
  }
  json j;
  j["method"] = fit.method;
  j["spline"] = spline_to_json(fit.spec);
  j["parameters"] = params;
  j["fixed"] = fixed;
  j["box"] = box;
  j["initial_state"] = to_json(fit.initial_state);
  j["initial_state_estimated"] = fit.theta.layout.with_initial_state;
  j["rss"] = std::isfinite(fit.rss) ? json(fit.rss) : json(nullptr);
  j["n_obs"] = fit.n_obs;
  j["n_cd4"] = obs.t_times.size();
  j["n_viral_load"] = obs.v_times.size();
  j["n_free"] = fit.n_free;
  auto finite_or_null = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  j["criteria"] = {{"aic", finite_or_null(fit.criteria.aic)},
                   {"bic", finite_or_null(fit.criteria.bic)},
                   {"aicc", fit.criteria.aicc_defined ? finite_or_null(fit.criteria.aicc)
                                                      : json(nullptr)}};
  j["scales"] = {{"cd4", to_string(obs.t_scale)}, {"viral_load", to_string(obs.v_scale)}};
  j["evaluations"] = fit.evaluations;
  j["penalty_fraction"] = fit.penalty_fraction;
  j["termination_reason"] = fit.termination_reason;
  j["seed"] = fit.seed;
  j["solver_step"] = fit.solver_step;
  j["notes"] = fit.notes;
  return j;
}

StoredFit stored_fit_from_json(const json& j) {
  try {
    StoredFit s;
    s.spec = spline_from_json(j.at("spline"));
    s.initial_estimated = j.at("initial_state_estimated").get<bool>();
    s.theta.layout = ThetaLayout{s.spec.n_control, s.initial_estimated};
    const auto names = s.theta.layout.names();
    const auto& fixed = j.at("fixed");
    for (const auto& name : names) {
      s.theta.values.push_back(j.at("parameters").at(name).get<double>());
      s.theta.box.lower.push_back(j.at("box").at(name).at(0).get<double>());
      s.theta.box.upper.push_back(j.at("box").at(name).at(1).get<double>());
      s.theta.fixed.push_back(std::find(fixed.begin(), fixed.end(), name) != fixed.end());
    }
    const auto& init = j.at("initial_state");
    s.initial_state = {init.at("T_U0").get<double>(), init.at("T_I0").get<double>(),
                       init.at("V0").get<double>()};
    s.t_scale = scale_from_string(j.at("scales").at("cd4").get<std::string>());
    s.v_scale = scale_from_string(j.at("scales").at("viral_load").get<std::string>());
    if (j.contains("data")) s.data_path = j.at("data").get<std::string>();
    s.theta.validate();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed fit file: ") + e.what());
  }
}

json bootstrap_to_json(const BootstrapResult& boot) {
  json intervals = json::object();
  for (std::size_t i = 0; i < boot.names.size(); ++i) {
    intervals[boot.names[i]] = {{"estimate", boot.estimate[i]},
                                {"lo95", boot.lower[i]},
                                {"hi95", boot.upper[i]}};
  }
  return {{"replicates_requested", boot.requested},
          {"replicates_succeeded", boot.succeeded},
          {"unreliable", boot.unreliable},
          {"sanity_ok", boot.sanity_ok},
          {"seed", boot.seed},
          {"intervals", intervals}};
}

json scenario_truth_json(const sim::ScenarioSpec& scenario, std::uint64_t run) {
  const auto& p = scenario.truth;
  json j = {{"scenario", scenario.key},
            {"n", scenario.n},
            {"sigma1_sq", scenario.sigma1_sq},
            {"sigma2_sq", scenario.sigma2_sq},
            {"span", {scenario.span.lo, scenario.span.hi}},
            {"seed", scenario.seed},
            {"run", run},
            {"parameters",
             {{"lambda", p.lambda}, {"rho", p.rho}, {"N", p.n_virions}, {"delta", p.delta},
              {"c", p.c}}},
            {"initial_state", to_json(scenario.initial)}};
  if (scenario.eta.is_spline()) {
    j["eta"] = {{"form", "spline"},
                {"spline", spline_to_json(scenario.eta.spline_spec())},
                {"coefficients", scenario.eta.spline_coeffs()}};
  } else {
    j["eta"] = {{"form", "closed"}, {"expression", "9e-5 * (1 - 0.9 * cos(pi * t / 1000))"}};
  }
  return j;
}

json are_report_to_json(const sim::AREReport& report, int eta_points) {
  const auto& sc = report.scenario;
  std::vector<double> grid;
  for (int i = 0; i < eta_points; ++i) {
    grid.push_back(sc.span.lo + sc.span.length() * i / std::max(1, eta_points - 1));
  }
  json methods = json::array();
  for (const auto& m : report.methods) {
    json runs = json::array();
    // pointwise mean relative error of eta over the successful runs, percent
    std::vector<double> curve(grid.size(), 0.0);
    int ok = 0;
    for (std::size_t r = 0; r < m.runs.size(); ++r) {
      const auto& run = m.runs[r];
      json jr = {{"run", r}};
      if (run.constants) {
        const auto& k = *run.constants;
        jr["lambda"] = k[0];
        jr["rho"] = k[1];
        jr["N"] = k[2];
        jr["delta"] = k[3];
        jr["c"] = k[4];
        jr["eta_coefficients"] = run.eta_coeffs;
        jr["eta_are"] = run.eta_are;
        for (std::size_t i = 0; i < grid.size(); ++i) {
          const double truth = sc.eta(grid[i]);
          curve[i] += std::abs(truth - curve_eval(report.spline, run.eta_coeffs, grid[i])) /
                      std::abs(truth);
        }
        ++ok;
      } else {
        jr["failure"] = run.failure;
      }
      runs.push_back(std::move(jr));
    }
    for (auto& c : curve) c = ok ? 100.0 * c / ok : std::nan("");
    auto finite_or_null = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
    json are = json::object();
    const char* names[5] = {"lambda", "rho", "N", "delta", "c"};
    for (int k = 0; k < 5; ++k) are[names[k]] = finite_or_null(m.are[k]);
    are["eta"] = finite_or_null(m.eta_are);
    json jc = json::array();
    for (double c : curve) jc.push_back(finite_or_null(c));
    methods.push_back({{"method", sim::to_string(m.method)},
                       {"failures", m.failures},
                       {"are_percent", are},
                       {"eta_are_curve", {{"t", grid}, {"are_percent", jc}}},
                       {"runs", runs}});
  }
  return {{"scenario", scenario_truth_json(sc, 0)},
          {"runs", sc.runs},
          {"spline", spline_to_json(report.spline)},
          {"methods", methods}};
}

void write_trajectory_csv(std::ostream& os, const FitResult& fit) {
  os << "t,T_fit,V_fit\n";
  for (std::size_t i = 0; i < fit.traj_times.size(); ++i) {
    os << format_double(fit.traj_times[i]) << ',' << format_double(fit.traj_total[i]) << ','
       << format_double(fit.traj_viral[i]) << '\n';
  }
}

void write_eta_csv(std::ostream& os, const FitResult& fit, const BootstrapResult* band) {
  const bool with_band = band && band->eta_lower.size() == fit.eta_times.size();
  os << (with_band ? "t,eta,lo95,hi95\n" : "t,eta\n");
  for (std::size_t i = 0; i < fit.eta_times.size(); ++i) {
    os << format_double(fit.eta_times[i]) << ',' << format_double(fit.eta_values[i]);
    if (with_band) {
      os << ',' << format_double(band->eta_lower[i]) << ',' << format_double(band->eta_upper[i]);
    }
    os << '\n';
  }
}

void write_select_csv(std::ostream& os, const SelectionResult& sel) {
  os << "model,order,control_points,aic,bic,aicc,rss,rank,note\n";
  for (std::size_t i = 0; i < sel.models.size(); ++i) {
    const auto& m = sel.models[i];
    os << i + 1 << ',' << m.candidate.order << ',' << m.candidate.n_control << ',';
    if (m.available) {
      os << format_double(m.criteria.aic) << ',' << format_double(m.criteria.bic) << ','
         << (m.criteria.aicc_defined ? format_double(m.criteria.aicc) : "-") << ','
         << format_double(m.rss) << ',' << m.rank << ',';
    } else {
      std::string note = m.reason;
      std::replace(note.begin(), note.end(), ',', ';');
      std::replace(note.begin(), note.end(), '\n', ' ');
      os << "-,-,-,-,-," << note;
    }
    os << '\n';
  }
}

}  // namespace hivest::cli
