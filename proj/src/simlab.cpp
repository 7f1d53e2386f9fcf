#include "hivest/simlab.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "hivest/errors.hpp"

namespace hivest::sim {

namespace {

struct NoiseLevel {
  int n;
  double s1, s2;
};

// two small samples with large variances, two larger ones with small variances
constexpr NoiseLevel kLevels[] = {
    {30, 400, 2500},  {30, 900, 5625},  {30, 1600, 10000}, {50, 400, 2500},
    {50, 900, 5625},  {50, 1600, 10000}, {100, 20, 100},   {100, 30, 150},
    {100, 40, 200},   {200, 20, 100},   {200, 30, 150},    {200, 40, 200},
};

std::string key_of(const NoiseLevel& l) {
  std::ostringstream os;
  os << 'n' << l.n << "-s" << l.s1 << '-' << l.s2;
  return os.str();
}

}  // namespace

std::vector<double> ScenarioSpec::times() const {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) {
    out[j - 1] = span.lo + span.length() * (static_cast<double>(j) / n);
  }
  return out;
}

void ScenarioSpec::validate() const {
  if (n < 1) throw ConfigError("scenario needs n >= 1");
  if (!(sigma1_sq >= 0.0) || !(sigma2_sq >= 0.0)) {
    throw ConfigError("scenario variances must be nonnegative");
  }
  if (runs < 1) throw ConfigError("scenario needs runs >= 1");
  if (!(span.hi > span.lo)) throw ConfigError("scenario time span is empty");
}

std::vector<std::string> scenario_keys() {
  std::vector<std::string> out;
  for (const auto& l : kLevels) out.push_back(key_of(l));
  return out;
}

ScenarioSpec scenario_from_key(const std::string& key) {
  for (const auto& l : kLevels) {
    if (key_of(l) == key) {
      ScenarioSpec s;
      s.key = key;
      s.n = l.n;
      s.sigma1_sq = l.s1;
      s.sigma2_sq = l.s2;
      return s;
    }
  }
  std::string known;
  for (const auto& k : scenario_keys()) known += (known.empty() ? "" : ", ") + k;
  throw ConfigError("unknown scenario '" + key + "' (known: " + known + ")");
}

ObservationSet truth_dataset(const ScenarioSpec& scenario) {
  scenario.validate();
  const auto times = scenario.times();
  std::vector<double> out_times{scenario.span.lo};
  out_times.insert(out_times.end(), times.begin(), times.end());
  const Trajectory traj = integrate(scenario.initial, scenario.truth, scenario.eta, out_times);
  ObservationSet obs;
  obs.t_times = times;
  obs.v_times = times;
  for (std::size_t i = 1; i < traj.states.size(); ++i) {
    obs.t_values.push_back(traj.states[i].total_cd4());
    obs.v_values.push_back(traj.states[i].v);
  }
  return obs;
}

ObservationSet generate_dataset(const ScenarioSpec& scenario, std::uint64_t run) {
  ObservationSet obs = truth_dataset(scenario);
  std::mt19937_64 rng(derive_seed(scenario.seed, run));
  // standard normals scaled afterwards: a zero variance is legal here
  std::normal_distribution<double> z(0.0, 1.0);
  const double s1 = std::sqrt(scenario.sigma1_sq);
  const double s2 = std::sqrt(scenario.sigma2_sq);
  // draws interleave T then V per time point so both series share one stream
  for (std::size_t i = 0; i < obs.t_values.size(); ++i) {
    const double a = z(rng);
    const double b = z(rng);
    if (s1 > 0.0) obs.t_values[i] += s1 * a;
    if (s2 > 0.0) obs.v_values[i] += s2 * b;
  }
  return obs;
}

double compute_are(double truth, std::span<const double> estimates) {
  if (truth == 0.0) throw DomainError("ARE undefined for a true value of zero");
  if (estimates.empty()) throw DomainError("ARE needs at least one estimate");
  double sum = 0.0;
  for (double e : estimates) sum += std::abs(truth - e) / std::abs(truth);
  return 100.0 * sum / static_cast<double>(estimates.size());
}

std::string to_string(Method m) { return m == Method::Mssb ? "mssb" : "snls"; }

Method method_from_string(const std::string& s) {
  if (s == "mssb") return Method::Mssb;
  if (s == "snls") return Method::Snls;
  throw ConfigError("unknown method '" + s + "' (expected mssb or snls)");
}

AREReport run_study(const ScenarioSpec& scenario, std::span<const Method> methods,
                    const StudySettings& settings) {
  scenario.validate();
  if (methods.empty()) throw ConfigError("study needs at least one method");
  AREReport report;
  report.scenario = scenario;
  report.spline = make_spec(settings.order, settings.n_control, scenario.span, settings.spacing);

  const auto runs = static_cast<std::size_t>(scenario.runs);
  const auto grid_n = settings.eta_grid_points;
  std::vector<double> eta_grid(static_cast<std::size_t>(grid_n));
  for (int i = 0; i < grid_n; ++i) {
    eta_grid[i] = scenario.span.lo + scenario.span.length() * i / std::max(1, grid_n - 1);
  }

  bool want_snls = false;
  for (auto m : methods) want_snls = want_snls || m == Method::Snls;
  std::vector<RunOutcome> mssb_runs(runs), snls_runs(runs);

  auto eta_are_of = [&](const std::vector<double>& coeffs) {
    double sum = 0.0;
    int count = 0;
    for (double t : eta_grid) {
      const double truth = scenario.eta(t);
      if (std::abs(truth) < 1e-7) continue;
      sum += std::abs(truth - curve_eval(report.spline, coeffs, t)) / std::abs(truth);
      ++count;
    }
    return count ? 100.0 * sum / count : 0.0;
  };
  auto record = [&](RunOutcome& out, const ConstantParams& p, std::vector<double> coeffs) {
    out.constants = std::array<double, 5>{p.lambda, p.rho, p.n_virions, p.delta, p.c};
    out.eta_are = eta_are_of(coeffs);
    out.eta_coeffs = std::move(coeffs);
  };

  const ExecPolicy inner =
      settings.policy == ExecPolicy::Parallel ? ExecPolicy::Serial : ExecPolicy::Parallel;
  for_each_index(runs, settings.policy, [&](std::size_t r) {
    const ObservationSet obs = generate_dataset(scenario, r);
    MssbOptions mo = settings.mssb;
    mo.policy = inner;
    std::optional<MssbEstimate> mssb;
    try {
      mssb = run_mssb(obs, report.spline, mo);
      record(mssb_runs[r], mssb->constants, mssb->eta_coeffs);
    } catch (const Error& e) {
      mssb_runs[r].failure = e.what();
    }
    if (!want_snls) return;
    try {
      const WarmStart warm = mssb ? warm_start_from_mssb(*mssb, false)
                                  : warm_start_from_bounds(report.spline.n_control, false,
                                                           settings.mssb.bounds);
      SnlsOptions so = settings.snls;
      so.known_initial = scenario.initial;
      so.optimizer.seed = derive_seed(derive_seed(scenario.seed, r), 1);
      so.optimizer.policy = inner;
      const FitResult fit = fit_snls(obs, report.spline, warm, so);
      const auto coeffs = fit.theta.layout.eta_coeffs(fit.theta.values);
      record(snls_runs[r], fit.constants(), {coeffs.begin(), coeffs.end()});
    } catch (const Error& e) {
      snls_runs[r].failure = e.what();
    }
  });

  const double truth[5] = {scenario.truth.lambda, scenario.truth.rho, scenario.truth.n_virions,
                           scenario.truth.delta, scenario.truth.c};
  for (auto m : methods) {
    MethodReport mr;
    mr.method = m;
    mr.runs = m == Method::Mssb ? mssb_runs : snls_runs;
    std::array<std::vector<double>, 5> est;
    std::vector<double> eta;
    for (const auto& run : mr.runs) {
      if (!run.constants) {
        ++mr.failures;
        continue;
      }
      for (int k = 0; k < 5; ++k) est[k].push_back((*run.constants)[k]);
      eta.push_back(run.eta_are);
    }
    for (int k = 0; k < 5; ++k) {
      mr.are[k] = est[k].empty() ? std::nan("") : compute_are(truth[k], est[k]);
    }
    double s = 0.0;
    for (double e : eta) s += e;
    mr.eta_are = eta.empty() ? std::nan("") : s / eta.size();
    report.methods.push_back(std::move(mr));
  }
  return report;
}

void write_are_csv(std::ostream& os, std::span<const AREReport> reports) {
  os << "scenario,n,sigma1_sq,sigma2_sq,method,runs,failures,lambda,rho,N,delta,c,eta\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.4f", x);
    return std::string(buf);
  };
  for (const auto& rep : reports) {
    for (const auto& m : rep.methods) {
      os << rep.scenario.key << ',' << rep.scenario.n << ',' << rep.scenario.sigma1_sq << ','
         << rep.scenario.sigma2_sq << ',' << to_string(m.method) << ',' << rep.scenario.runs
         << ',' << m.failures;
      for (double a : m.are) os << ',' << num(a);
      os << ',' << num(m.eta_are) << '\n';
    }
  }
}

}  // namespace hivest::sim
