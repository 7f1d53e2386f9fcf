#include "hivest/snls.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "hivest/errors.hpp"

namespace hivest {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double to_scale(double value, Scale scale) {
  return scale == Scale::Log10 ? std::log10(value) : value;
}

double from_scale(double value, Scale scale) {
  return scale == Scale::Log10 ? std::pow(10.0, value) : value;
}

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out[i] = n == 1 ? lo : lo + (hi - lo) * (static_cast<double>(i) / (n - 1));
  }
  if (n > 1) out.back() = hi;
  return out;
}

// Optimizer coordinates over the free entries: log for entries whose lower
// bound is positive, linear otherwise.
struct FreeCoords {
  std::vector<std::size_t> index;
  std::vector<bool> logged;
  std::vector<double> lo, hi;
  std::vector<double> base;
  opt::SearchBox box;

  explicit FreeCoords(const ThetaVector& theta) : index(theta.free_indices()), base(theta.values) {
    for (auto i : index) {
      const double l = theta.box.lower[i];
      const double h = theta.box.upper[i];
      const bool lg = l > 0.0;
      logged.push_back(lg);
      lo.push_back(l);
      hi.push_back(h);
      box.lower.push_back(lg ? std::log(l) : l);
      box.upper.push_back(lg ? std::log(h) : h);
    }
  }

  std::vector<double> to_theta(std::span<const double> x) const {
    std::vector<double> theta = base;
    for (std::size_t j = 0; j < index.size(); ++j) {
      theta[index[j]] = std::clamp(logged[j] ? std::exp(x[j]) : x[j], lo[j], hi[j]);
    }
    return theta;
  }

  std::vector<double> to_x(std::span<const double> theta) const {
    std::vector<double> x;
    for (std::size_t j = 0; j < index.size(); ++j) {
      const double v = std::clamp(theta[index[j]], lo[j], hi[j]);
      x.push_back(std::clamp(logged[j] ? std::log(v) : v, box.lower[j], box.upper[j]));
    }
    return x;
  }
};

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::string> ThetaLayout::names() const {
  std::vector<std::string> out{"lambda", "rho", "N", "delta", "c"};
  for (int j = 0; j < n_control; ++j) out.push_back("a" + std::to_string(j + 1));
  if (with_initial_state) {
    out.insert(out.end(), {"T_U0", "T_I0", "V0"});
  }
  return out;
}

ConstantParams ThetaLayout::constants(std::span<const double> theta) {
  return {theta[0], theta[1], theta[2], theta[3], theta[4]};
}

std::span<const double> ThetaLayout::eta_coeffs(std::span<const double> theta) const {
  return theta.subspan(eta_offset(), static_cast<std::size_t>(n_control));
}

State ThetaLayout::initial_state(std::span<const double> theta, const State& known) const {
  if (!with_initial_state) return known;
  const auto o = initial_offset();
  return {theta[o], theta[o + 1], theta[o + 2]};
}

std::vector<std::size_t> ThetaVector::free_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!fixed[i]) out.push_back(i);
  }
  return out;
}

void ThetaVector::validate() const {
  const std::size_t n = layout.size();
  if (values.size() != n || fixed.size() != n || box.dim() != n) {
    throw ConfigError("parameter vector, mask and box must all have length " + std::to_string(n));
  }
  box.validate();
  const auto names = layout.names();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(values[i])) throw ConfigError("parameter " + names[i] + " is not finite");
    if (!fixed[i] && !(values[i] >= box.lower[i] && values[i] <= box.upper[i])) {
      std::ostringstream os;
      os << "parameter " << names[i] << " = " << values[i] << " outside its search range ["
         << box.lower[i] << ", " << box.upper[i] << "]";
      throw ConfigError(os.str());
    }
  }
  for (std::size_t i = 0; i < ThetaLayout::kConstants; ++i) {
    if (!(box.lower[i] > 0.0)) throw ConfigError("kinetic constants need positive lower bounds");
  }
  if (layout.with_initial_state) {
    for (std::size_t i = layout.initial_offset(); i < n; ++i) {
      if (!(box.lower[i] > 0.0)) throw ConfigError("initial conditions need positive lower bounds");
    }
  }
}

// ---------------------------------------------------------------------------

RssObjective::RssObjective(const ObservationSet& obs, const SplineSpec& spec, ThetaLayout layout,
                           State known_initial, SolverSettings settings)
    : obs_(obs),
      spec_(spec),
      layout_(layout),
      known_initial_(known_initial),
      settings_(settings),
      evaluations_(std::make_shared<std::atomic<long>>(0)),
      penalised_(std::make_shared<std::atomic<long>>(0)) {
  obs_.validate();
  if (layout_.n_control != spec_.n_control) {
    throw ConfigError("parameter layout has " + std::to_string(layout_.n_control) +
                      " spline coefficients but the spline has " +
                      std::to_string(spec_.n_control) + " control points");
  }
  if (obs_.t_times.empty() || obs_.v_times.empty()) {
    throw DataError("both CD4 and viral-load series need at least one observation");
  }
  const Interval span = obs_.span();
  if (span.lo < spec_.domain.lo || span.hi > spec_.domain.hi) {
    std::ostringstream os;
    os << "observations span [" << span.lo << ", " << span.hi << "] but the spline covers ["
       << spec_.domain.lo << ", " << spec_.domain.hi << "]";
    throw DataError(os.str());
  }

  std::set<double> merged{spec_.domain.lo};
  merged.insert(obs_.t_times.begin(), obs_.t_times.end());
  merged.insert(obs_.v_times.begin(), obs_.v_times.end());
  std::vector<double> grid(merged.begin(), merged.end());
  auto index_of = [&](double t) {
    return static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), t) - grid.begin());
  };
  for (double t : obs_.t_times) t_index_.push_back(index_of(t));
  for (double t : obs_.v_times) v_index_.push_back(index_of(t));
  for (double y : obs_.t_values) t_obs_scaled_.push_back(to_scale(y, obs_.t_scale));
  for (double y : obs_.v_values) v_obs_scaled_.push_back(to_scale(y, obs_.v_scale));
  plan_ = StepPlan(std::move(grid), settings_.step);

  const int k = spec_.order;
  const std::size_t n_steps = plan_.steps.size();
  stage_first_.resize(3 * n_steps);
  stage_basis_.resize(3 * n_steps * static_cast<std::size_t>(k));
  std::array<double, 8> local{};
  for (std::size_t n = 0; n < n_steps; ++n) {
    const auto& s = plan_.steps[n];
    const double times[3] = {s.t, s.t + 0.5 * s.h, std::min(s.t + s.h, spec_.domain.hi)};
    for (int stage = 0; stage < 3; ++stage) {
      const std::size_t slot = 3 * n + stage;
      stage_first_[slot] = basis_nonzero(spec_, times[stage], local);
      std::copy_n(local.begin(), k, stage_basis_.begin() + static_cast<std::ptrdiff_t>(slot * k));
    }
  }
}

bool RssObjective::solve(std::span<const double> theta, std::vector<State>& states) const {
  const ConstantParams p = ThetaLayout::constants(theta);
  const auto coeffs = layout_.eta_coeffs(theta);
  const State init = layout_.initial_state(theta, known_initial_);
  const int k = spec_.order;
  states.resize(plan_.output_times.size());
  auto eta_at = [&](std::size_t n, int stage) {
    const std::size_t slot = 3 * n + static_cast<std::size_t>(stage);
    const double* b = stage_basis_.data() + slot * static_cast<std::size_t>(k);
    const double* a = coeffs.data() + stage_first_[slot];
    double sum = 0.0;
    for (int r = 0; r < k; ++r) sum += a[r] * b[r];
    return sum;
  };
  return run_plan(plan_, init, p, eta_at, settings_.blowup_cap, states, nullptr);
}

double RssObjective::penalty(std::span<const double> theta) const {
  penalised_->fetch_add(1, std::memory_order_relaxed);
  double dist = 0.0;
  if (penalty_box_) {
    const auto& box = *penalty_box_;
    for (std::size_t i = 0; i < box.dim() && i < theta.size(); ++i) {
      const double u = (theta[i] - box.lower[i]) / (box.upper[i] - box.lower[i]) - 0.5;
      dist += u * u;
    }
    dist = std::sqrt(dist);
  }
  return settings_.penalty * (1.0 + dist);
}

bool RssObjective::residuals(std::span<const double> theta, std::vector<double>& out) const {
  std::vector<State> states;
  if (!solve(theta, states)) return false;
  out.clear();
  out.reserve(t_index_.size() + v_index_.size());
  const double wt = std::sqrt(obs_.t_weight);
  const double wv = std::sqrt(obs_.v_weight);
  for (std::size_t i = 0; i < t_index_.size(); ++i) {
    const double model = states[t_index_[i]].total_cd4();
    if (obs_.t_scale == Scale::Log10 && !(model > 0.0)) return false;
    out.push_back(wt * (t_obs_scaled_[i] - to_scale(model, obs_.t_scale)));
  }
  for (std::size_t j = 0; j < v_index_.size(); ++j) {
    const double model = states[v_index_[j]].v;
    if (obs_.v_scale == Scale::Log10 && !(model > 0.0)) return false;
    out.push_back(wv * (v_obs_scaled_[j] - to_scale(model, obs_.v_scale)));
  }
  return true;
}

double RssObjective::operator()(std::span<const double> theta) const {
  evaluations_->fetch_add(1, std::memory_order_relaxed);
  if (theta.size() != layout_.size()) {
    throw ConfigError("objective called with " + std::to_string(theta.size()) +
                      " parameters, expected " + std::to_string(layout_.size()));
  }
  std::vector<double> r;
  if (!residuals(theta, r)) return penalty(theta);
  double rss = 0.0;
  for (double x : r) rss += x * x;
  if (!std::isfinite(rss) || rss >= settings_.penalty) return penalty(theta);
  return rss;
}

RssObjective::Fitted RssObjective::fitted(std::span<const double> theta) const {
  Fitted out;
  std::vector<State> states;
  out.ok = solve(theta, states);
  if (!out.ok) return out;
  out.grid = plan_.output_times;
  for (const auto& s : states) {
    out.total.push_back(s.total_cd4());
    out.viral.push_back(s.v);
  }
  for (auto i : t_index_) out.t_fit.push_back(out.total[i]);
  for (auto j : v_index_) out.v_fit.push_back(out.viral[j]);
  return out;
}

// ---------------------------------------------------------------------------

WarmStart warm_start_from_mssb(const MssbEstimate& mssb, bool with_initial_state,
                               const std::vector<std::pair<std::string, double>>& fixed,
                               const WarmPolicy& policy) {
  ThetaLayout layout{mssb.spline_spec.n_control, with_initial_state};
  const std::size_t n = layout.size();
  if (mssb.search_ranges.size() < layout.size() + (with_initial_state ? 0 : 3)) {
    throw ConfigError("MSSB estimate lacks search ranges");
  }

  std::vector<double> point{mssb.constants.lambda, mssb.constants.rho, mssb.constants.n_virions,
                            mssb.constants.delta, mssb.constants.c};
  point.insert(point.end(), mssb.eta_coeffs.begin(), mssb.eta_coeffs.end());
  if (with_initial_state) {
    point.insert(point.end(),
                 {mssb.initial_state.t_u, mssb.initial_state.t_i, mssb.initial_state.v});
  }
  // ranges are stored for the full layout with initial state, which sits last
  std::vector<ParamRange> ranges(mssb.search_ranges.begin(),
                                 mssb.search_ranges.begin() + static_cast<std::ptrdiff_t>(n));
  if (policy.widen_stage3) {
    const GlobalBounds& g = policy.bounds;
    ranges[2] = g.n_virions;
    ranges[3] = g.delta;
    for (std::size_t j = 0; j < static_cast<std::size_t>(layout.n_control); ++j) {
      ranges[layout.eta_offset() + j] = g.eta_coeff;
    }
    if (with_initial_state) {
      // T_I(0) leans on N and delta; T_U(0) is kept near the smoothed total
      const double total = mssb.initial_state.t_u + mssb.initial_state.t_i;
      const std::size_t o = layout.initial_offset();
      ranges[o] = warm_range(total, policy.range_factor, g.t_u0, nullptr);
      ranges[o + 1] = g.t_i0;
      if (!ranges[o].contains(point[o])) point[o] = total;
    }
  }

  WarmStart warm;
  warm.source = policy.widen_stage3 ? "mssb (stage II ranges; global N, delta, eta)" : "mssb";
  warm.theta.layout = layout;
  warm.theta.fixed.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const ParamRange& r = ranges[i];
    warm.theta.box.lower.push_back(r.lo);
    warm.theta.box.upper.push_back(r.hi);
    double x = point[i];
    if (!(std::isfinite(x) && r.contains(x))) {
      x = r.lo > 0.0 ? std::sqrt(r.lo * r.hi) : 0.5 * (r.lo + r.hi);
    }
    warm.theta.values.push_back(x);
  }
  apply_fixed(warm.theta, fixed);
  return warm;
}

opt::SearchBox widened_box(const ThetaVector& theta, const GlobalBounds& bounds) {
  const ThetaLayout& layout = theta.layout;
  std::vector<ParamRange> ranges{bounds.lambda, bounds.rho, bounds.n_virions, bounds.delta,
                                 bounds.c};
  for (int j = 0; j < layout.n_control; ++j) ranges.push_back(bounds.eta_coeff);
  if (layout.with_initial_state) ranges.insert(ranges.end(), {bounds.t_u0, bounds.t_i0, bounds.v0});
  opt::SearchBox box = theta.box;
  for (std::size_t i = 0; i < ranges.size() && i < box.dim(); ++i) {
    if (theta.fixed[i]) continue;
    box.lower[i] = std::min(box.lower[i], ranges[i].lo);
    box.upper[i] = std::max(box.upper[i], ranges[i].hi);
  }
  return box;
}

void apply_fixed(ThetaVector& theta, const std::vector<std::pair<std::string, double>>& fixed) {
  const auto names = theta.layout.names();
  for (const auto& [name, value] : fixed) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("unknown parameter '" + name + "' to fix");
    const auto i = static_cast<std::size_t>(it - names.begin());
    theta.values[i] = value;
    theta.fixed[i] = true;
    // keep the box valid around the fixed value
    theta.box.lower[i] = std::min(theta.box.lower[i], value * 0.5);
    theta.box.upper[i] = std::max(theta.box.upper[i], value * 2.0);
  }
}

WarmStart warm_start_from_bounds(int n_control, bool with_initial_state,
                                 const GlobalBounds& bounds) {
  std::vector<ParamRange> ranges{bounds.lambda, bounds.rho, bounds.n_virions, bounds.delta,
                                 bounds.c};
  for (int j = 0; j < n_control; ++j) ranges.push_back(bounds.eta_coeff);
  if (with_initial_state) ranges.insert(ranges.end(), {bounds.t_u0, bounds.t_i0, bounds.v0});

  WarmStart warm;
  warm.source = "global-bounds";
  warm.theta.layout = ThetaLayout{n_control, with_initial_state};
  warm.theta.fixed.assign(ranges.size(), false);
  for (const auto& r : ranges) {
    warm.theta.box.lower.push_back(r.lo);
    warm.theta.box.upper.push_back(r.hi);
    warm.theta.values.push_back(r.lo > 0.0 ? std::sqrt(r.lo * r.hi) : 0.5 * (r.lo + r.hi));
  }
  return warm;
}

PipelineStart mssb_warm_start(const ObservationSet& obs, const SplineSpec& spec,
                              const MssbOptions& mssb_options, bool with_initial_state,
                              const std::vector<std::pair<std::string, double>>& fixed,
                              const WarmPolicy& policy) {
  PipelineStart out;
  try {
    out.mssb = run_mssb(obs, spec, mssb_options);
  } catch (const Error& e) {
    out.mssb_error = e.what();
    out.mssb_exception = std::current_exception();
  }
  if (out.mssb) {
    out.warm = warm_start_from_mssb(*out.mssb, with_initial_state, fixed, policy);
  } else {
    out.warm = warm_start_from_bounds(spec.n_control, with_initial_state, policy.bounds);
    apply_fixed(out.warm.theta, fixed);
    out.warm.source = "global-bounds (mssb failed: " + out.mssb_error + ")";
  }
  return out;
}

FitResult evaluate_fit(const ObservationSet& obs, const SplineSpec& spec,
                       const ThetaVector& theta, const SnlsOptions& options, std::string method) {
  const State known = options.known_initial.value_or(State{});
  RssObjective objective(obs, spec, theta.layout, known, options.solver);
  objective.set_penalty_box(theta.box);

  FitResult fit;
  fit.method = std::move(method);
  fit.spec = spec;
  fit.theta = theta;
  fit.initial_state = theta.layout.initial_state(theta.values, known);
  fit.n_obs = static_cast<int>(obs.size());
  fit.n_free = static_cast<int>(theta.free_indices().size());
  fit.solver_step = options.solver.step;
  fit.seed = options.optimizer.seed;

  const double rss = objective(theta.values);
  const auto fitted = objective.fitted(theta.values);
  if (rss < objective.penalty_floor() && fitted.ok) {
    fit.rss = rss;
    fit.criteria = information_criteria(rss, fit.n_obs, fit.n_free);
    fit.fitted_t = fitted.t_fit;
    fit.fitted_v = fitted.v_fit;
    fit.traj_times = fitted.grid;
    fit.traj_total = fitted.total;
    fit.traj_viral = fitted.viral;
  } else {
    fit.rss = kNaN;
    fit.criteria = {kNaN, kNaN, kNaN, false};
    fit.notes.push_back("trajectory diverged or left the valid region at these parameters");
  }

  fit.eta_times = linspace(spec.domain.lo, spec.domain.hi, options.eta_grid_points);
  const auto coeffs = theta.layout.eta_coeffs(theta.values);
  for (double t : fit.eta_times) fit.eta_values.push_back(curve_eval(spec, coeffs, t));
  fit.notes.push_back("integrator: classical RK4, fixed step " + std::to_string(options.solver.step) +
                      " day, steps shortened to land on observation times");
  fit.notes.push_back("spline: order " + std::to_string(spec.order) + ", " +
                      std::to_string(spec.n_control) + " control points (" +
                      to_string(spec.spacing) + " spacing), knots at control-point averages");
  return fit;
}

FitResult fit_snls(const ObservationSet& obs, const SplineSpec& spec, const WarmStart& warm,
                   const SnlsOptions& options) {
  const ThetaVector& start = warm.theta;
  start.validate();
  if (start.layout.n_control != spec.n_control) {
    throw ConfigError("warm start has " + std::to_string(start.layout.n_control) +
                      " spline coefficients, spline has " + std::to_string(spec.n_control));
  }
  if (!start.layout.with_initial_state && !options.known_initial) {
    throw ConfigError("initial state must be known or estimated as part of theta");
  }
  const auto free = start.free_indices();
  if (free.empty()) {
    FitResult fit = evaluate_fit(obs, spec, start, options, "snls");
    fit.termination_reason = "no-free-parameters";
    fit.notes.push_back("warm start: " + warm.source);
    return fit;
  }

  const State known = options.known_initial.value_or(State{});
  RssObjective objective(obs, spec, start.layout, known, options.solver);
  objective.set_penalty_box(start.box);

  const FreeCoords coords(start);
  Objective reduced = [&](std::span<const double> x) { return objective(coords.to_theta(x)); };
  const std::vector<double> x0 = coords.to_x(start.values);
  const std::vector<std::vector<double>> seeds{x0};
  const auto result = opt::hybrid_minimize(reduced, coords.box, options.optimizer, seeds);
  const double penalty_fraction =
      static_cast<double>(objective.penalised()) / std::max<long>(1, objective.evaluations());
  if (!(result.best_value < objective.penalty_floor())) {
    std::ostringstream os;
    os << "fit failed: every evaluation hit the divergence penalty ("
       << 100.0 * penalty_fraction << "% of " << objective.evaluations() << " evaluations)";
    throw EstimationError(os.str());
  }

  std::vector<double> best_x = result.best_point;
  double best_f = result.best_value;
  long evaluations = result.evaluations;
  std::vector<double> trace = result.trace;
  std::string reason = result.termination_reason;
  ThetaVector polish_theta = start;
  if (options.polish && options.polish_bounds) {
    polish_theta.box = widened_box(start, *options.polish_bounds);
  }
  const FreeCoords pc(polish_theta);
  bool log_stage_used = false;
  if (options.polish) {
    const opt::Residuals res = [&](std::span<const double> x, std::vector<double>& out) {
      return objective.residuals(pc.to_theta(x), out);
    };
    std::vector<std::vector<double>> starts{pc.to_x(coords.to_theta(result.best_point)),
                                            pc.to_x(start.values)};
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto random_starts = [&](std::vector<std::vector<double>>& into, int count,
                             std::uint64_t stream) {
      std::mt19937_64 rng(derive_seed(options.optimizer.seed, stream));
      for (int k = 0; k < count; ++k) {
        std::vector<double> u(pc.box.dim());
        for (auto& v : u) v = unit(rng);
        into.push_back(pc.box.from_unit(u));
      }
    };
    opt::LmConfig lm = options.lm;
    const bool outer = options.optimizer.policy == ExecPolicy::Parallel;
    lm.policy = ExecPolicy::Serial;

    // log-scale stage: a smoother surface whose optimum sits near the raw one
    auto positive = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double y) { return y > 0.0; });
    };
    const bool any_raw = obs.t_scale == Scale::Raw || obs.v_scale == Scale::Raw;
    if (options.log_stage_starts > 0 && any_raw && positive(obs.t_values) &&
        positive(obs.v_values)) {
      ObservationSet lobs = obs;
      lobs.t_scale = Scale::Log10;
      lobs.v_scale = Scale::Log10;
      const RssObjective log_objective(lobs, spec, start.layout, known, options.solver);
      const opt::Residuals log_res = [&](std::span<const double> x, std::vector<double>& out) {
        return log_objective.residuals(pc.to_theta(x), out);
      };
      std::vector<std::vector<double>> log_starts = starts;
      random_starts(log_starts, options.log_stage_starts, 11);
      std::vector<opt::OptimResult> ends(log_starts.size());
      for_each_index(log_starts.size(), outer ? ExecPolicy::Parallel : ExecPolicy::Serial,
                     [&](std::size_t k) {
                       ends[k] = opt::levenberg_marquardt(log_res, log_starts[k], pc.box, lm);
                     });
      const opt::OptimResult* best_log = nullptr;
      for (const auto& e : ends) {
        evaluations += e.evaluations;
        if (std::isfinite(e.best_value) && (!best_log || e.best_value < best_log->best_value)) {
          best_log = &e;
        }
      }
      if (best_log) {
        starts.push_back(best_log->best_point);
        log_stage_used = true;
      }
    }
    random_starts(starts, options.lm_starts, 7);
    std::vector<opt::OptimResult> polished(starts.size());
    for_each_index(starts.size(), outer ? ExecPolicy::Parallel : ExecPolicy::Serial,
                   [&](std::size_t k) {
                     polished[k] = opt::levenberg_marquardt(res, starts[k], pc.box, lm);
                   });
    for (const auto& r : polished) evaluations += r.evaluations;
    // the leaders often stop on the iteration cap mid-valley; let them finish
    std::vector<std::size_t> order(polished.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return polished[a].best_value < polished[b].best_value;
    });
    order.resize(std::min<std::size_t>(order.size(), std::max(0, options.lm_continue)));
    opt::LmConfig longer = lm;
    longer.max_iterations = lm.max_iterations * 5;
    std::vector<opt::OptimResult> resumed(order.size());
    for_each_index(order.size(), outer ? ExecPolicy::Parallel : ExecPolicy::Serial,
                   [&](std::size_t i) {
                     const auto& from = polished[order[i]];
                     if (std::isfinite(from.best_value) && from.termination_reason != "converged") {
                       resumed[i] = opt::levenberg_marquardt(res, from.best_point, pc.box, longer);
                     } else {
                       resumed[i] = from;
                       resumed[i].evaluations = 0;
                     }
                   });
    for (std::size_t i = 0; i < order.size(); ++i) {
      evaluations += resumed[i].evaluations;
      if (resumed[i].best_value < polished[order[i]].best_value) {
        polished[order[i]] = resumed[i];
      }
    }
    std::optional<std::size_t> winner;
    for (std::size_t k = 0; k < polished.size(); ++k) {
      if (polished[k].best_value < best_f) {
        best_f = polished[k].best_value;
        winner = k;
      }
    }
    if (winner) {
      best_x = pc.to_x(pc.to_theta(polished[*winner].best_point));
      reason = result.termination_reason + "; polish " + polished[*winner].termination_reason +
               " from start " + std::to_string(*winner);
    } else {
      best_x = pc.to_x(coords.to_theta(best_x));
    }
    trace.push_back(best_f);
  } else {
    best_x = pc.to_x(coords.to_theta(best_x));
  }

  ThetaVector theta = polish_theta;
  theta.values = pc.to_theta(best_x);
  FitResult fit = evaluate_fit(obs, spec, theta, options, "snls");
  fit.evaluations = evaluations;
  fit.penalty_fraction = penalty_fraction;
  fit.trace = std::move(trace);
  fit.termination_reason = reason;
  fit.notes.push_back("warm start: " + warm.source);
  fit.notes.push_back(
      "optimizer: differential evolution + scatter search epochs with projected BFGS "
      "refinement (finite-difference gradients) standing in for SQP");
  if (options.polish) {
    fit.notes.push_back("polish: Levenberg-Marquardt on the residual vector");
    if (log_stage_used) {
      fit.notes.push_back("polish start 2: best end point of a log10-residual stage");
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------

SelectionResult select_model(const ObservationSet& obs, std::span<const ModelCandidate> grid,
                             KnotSpacing spacing, Interval domain, const WarmProvider& warm,
                             const SnlsOptions& options, ExecPolicy policy) {
  if (grid.empty()) throw ConfigError("model grid is empty");
  SelectionResult out;
  out.models.resize(grid.size());
  std::vector<std::optional<FitResult>> fits(grid.size());
  const int n_obs = static_cast<int>(obs.size());

  for_each_index(grid.size(), policy, [&](std::size_t i) {
    RankedModel& m = out.models[i];
    m.candidate = grid[i];
    if (grid[i].n_control < grid[i].order) {
      m.reason = "fewer control points than the spline order";
      return;
    }
    try {
      const SplineSpec spec = make_spec(grid[i].order, grid[i].n_control, domain, spacing);
      const WarmStart w = warm(spec);
      m.n_free = static_cast<int>(w.theta.free_indices().size());
      if (n_obs - m.n_free - 1 <= 0) {
        m.reason = "too many parameters for the number of observations";
        return;
      }
      FitResult fit = fit_snls(obs, spec, w, options);
      if (!std::isfinite(fit.rss)) {
        m.reason = "fit diverged";
        return;
      }
      m.available = true;
      m.rss = fit.rss;
      m.criteria = fit.criteria;
      fits[i] = std::move(fit);
    } catch (const Error& e) {
      m.reason = e.what();
    }
  });

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < out.models.size(); ++i) {
    if (out.models[i].available) order.push_back(i);
  }
  if (order.empty()) throw EstimationError("model selection failed: no candidate could be fitted");
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.models[a].criteria.aicc < out.models[b].criteria.aicc;
  });
  for (std::size_t r = 0; r < order.size(); ++r) out.models[order[r]].rank = static_cast<int>(r + 1);
  out.best = order.front();
  out.best_fit = std::move(*fits[out.best]);
  return out;
}

// ---------------------------------------------------------------------------

double percentile(std::vector<double> sample, double p) {
  if (sample.empty()) return kNaN;
  std::sort(sample.begin(), sample.end());
  const double h = (static_cast<double>(sample.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sample.size()) return sample.back();
  return sample[lo] + (h - static_cast<double>(lo)) * (sample[lo + 1] - sample[lo]);
}

BootstrapResult bootstrap_ci(const ObservationSet& obs, const FitResult& best,
                             const SnlsOptions& options, const BootstrapOptions& boot) {
  if (boot.replicates < 2) throw ConfigError("bootstrap needs at least 2 replicates");
  if (best.fitted_t.size() != obs.t_times.size() || best.fitted_v.size() != obs.v_times.size()) {
    throw ConfigError("fit result does not carry fitted values for these observations");
  }
  const auto free = best.theta.free_indices();
  const auto names = best.theta.layout.names();

  BootstrapResult out;
  out.requested = boot.replicates;
  out.seed = boot.seed;
  for (auto i : free) {
    out.names.push_back(names[i]);
    out.estimate.push_back(best.theta.values[i]);
  }
  out.eta_times = best.eta_times;

  // centred residuals on the fitting scale
  auto residuals = [](const std::vector<double>& y, const std::vector<double>& fit, Scale scale) {
    std::vector<double> fs(fit.size()), r(y.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      fs[i] = to_scale(fit[i], scale);
      r[i] = to_scale(y[i], scale) - fs[i];
      mean += r[i];
    }
    mean /= static_cast<double>(std::max<std::size_t>(1, y.size()));
    for (auto& x : r) x -= mean;
    return std::make_pair(fs, r);
  };
  const auto [fit_t, res_t] = residuals(obs.t_values, best.fitted_t, obs.t_scale);
  const auto [fit_v, res_v] = residuals(obs.v_values, best.fitted_v, obs.v_scale);

  const FreeCoords coords(best.theta);
  const std::vector<double> x0 = coords.to_x(best.theta.values);
  const State known = options.known_initial.value_or(best.initial_state);

  const auto b_count = static_cast<std::size_t>(boot.replicates);
  std::vector<std::optional<std::vector<double>>> reps(b_count);
  std::vector<std::vector<double>> rep_eta(b_count);
  for_each_index(b_count, boot.policy, [&](std::size_t b) {
    std::mt19937_64 rng(derive_seed(boot.seed, b));
    ObservationSet data = obs;
    std::uniform_int_distribution<std::size_t> pick_t(0, res_t.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_v(0, res_v.size() - 1);
    for (std::size_t i = 0; i < data.t_values.size(); ++i) {
      data.t_values[i] = from_scale(fit_t[i] + res_t[pick_t(rng)], obs.t_scale);
    }
    for (std::size_t j = 0; j < data.v_values.size(); ++j) {
      data.v_values[j] = from_scale(fit_v[j] + res_v[pick_v(rng)], obs.v_scale);
    }
    try {
      RssObjective objective(data, best.spec, best.theta.layout, known, options.solver);
      objective.set_penalty_box(best.theta.box);
      const opt::Residuals res = [&](std::span<const double> x, std::vector<double>& out) {
        return objective.residuals(coords.to_theta(x), out);
      };
      opt::LmConfig lm = options.lm;
      lm.policy = boot.policy == ExecPolicy::Parallel ? ExecPolicy::Serial : ExecPolicy::Parallel;
      const auto r = opt::levenberg_marquardt(res, x0, coords.box, lm);
      if (!std::isfinite(r.best_value)) return;
      const std::vector<double> theta = coords.to_theta(r.best_point);
      const auto coeffs = best.theta.layout.eta_coeffs(theta);
      for (double t : best.eta_times) rep_eta[b].push_back(curve_eval(best.spec, coeffs, t));
      std::vector<double> kept;
      for (auto i : free) kept.push_back(theta[i]);
      reps[b] = std::move(kept);
    } catch (const Error&) {
      // dropped replicate
    }
  });

  std::vector<std::vector<double>> eta_samples(out.eta_times.size());
  for (std::size_t b = 0; b < b_count; ++b) {
    if (!reps[b]) continue;
    out.replicates.push_back(*reps[b]);
    for (std::size_t e = 0; e < eta_samples.size(); ++e) eta_samples[e].push_back(rep_eta[b][e]);
  }
  out.succeeded = static_cast<int>(out.replicates.size());
  out.unreliable = out.succeeded < 0.8 * boot.replicates;
  if (out.succeeded == 0) throw EstimationError("bootstrap failed: every replicate fit failed");

  int inside = 0;
  for (std::size_t j = 0; j < free.size(); ++j) {
    std::vector<double> column;
    for (const auto& rep : out.replicates) column.push_back(rep[j]);
    out.lower.push_back(percentile(column, 0.025));
    out.upper.push_back(percentile(column, 0.975));
    // slack for the log-coordinate round trip, which is not exact
    const double slack = 1e-12 * std::abs(out.estimate[j]);
    if (out.lower.back() - slack <= out.estimate[j] && out.estimate[j] <= out.upper.back() + slack) {
      ++inside;
    }
  }
  out.sanity_ok = inside >= 0.9 * static_cast<double>(free.size());
  for (auto& s : eta_samples) {
    out.eta_lower.push_back(percentile(s, 0.025));
    out.eta_upper.push_back(percentile(s, 0.975));
  }
  return out;
}

}  // namespace hivest
