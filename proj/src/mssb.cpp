#include "hivest/mssb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "hivest/errors.hpp"
#include "linalg.hpp"

namespace hivest {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_shared_grid(const SmoothEstimate& a, const SmoothEstimate& b, std::size_t min_len) {
  if (a.eval_times != b.eval_times) {
    throw ConfigError("smoothed CD4 and viral-load estimates must share an evaluation grid");
  }
  if (a.eval_times.size() < min_len) {
    throw DataError("regression grid has " + std::to_string(a.eval_times.size()) +
                    " points; at least " + std::to_string(min_len) + " needed");
  }
}

template <class Fn>
auto with_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const DataError& e) {
    throw DataError(std::string(stage) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(stage) + ": " + e.what());
  } catch (const NumericalError& e) {
    throw EstimationError(std::string(stage) + ": " + e.what());
  }
}

double median(std::vector<double> v) {
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double upper = v[mid];
  const double lower = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lower + upper);
}

}  // namespace

PslsResult stage2_psls(const SmoothEstimate& smooth_t, const SmoothEstimate& smooth_v,
                       std::optional<double> fixed_c) {
  check_shared_grid(smooth_t, smooth_v, 5);
  const auto n = static_cast<Eigen::Index>(smooth_t.eval_times.size());
  const Eigen::Index cols = fixed_c ? 3 : 4;
  Eigen::MatrixXd design(n, cols);
  Eigen::VectorXd response(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = smooth_t.value[i];
    design(i, 2) = smooth_t.deriv1[i];
    if (fixed_c) {
      response(i) = smooth_v.deriv1[i] + *fixed_c * smooth_v.value[i];
    } else {
      design(i, 3) = -smooth_v.value[i];
      response(i) = smooth_v.deriv1[i];
    }
  }
  const auto fit = detail::ols(design, response, "pseudo-least-squares regression");

  PslsResult out;
  out.alpha0 = fit.coef(0);
  out.alpha1 = fit.coef(1);
  out.alpha2 = fit.coef(2);
  out.c_fixed = fixed_c.has_value();
  out.c_hat = fixed_c ? *fixed_c : fit.coef(3);
  out.residuals.assign(fit.residuals.data(), fit.residuals.data() + fit.residuals.size());
  const double scale = std::max({std::abs(out.alpha0), std::abs(out.alpha1), std::abs(out.alpha2)});
  if (std::abs(out.alpha2) > 1e-10 * scale) {
    out.lambda_hat = -out.alpha0 / out.alpha2;
    out.rho_hat = out.alpha1 / out.alpha2;
  }
  return out;
}

StageThreeDesign build_stage3_design(const SmoothEstimate& smooth_t,
                                     const SmoothEstimate& smooth_v, double c_hat,
                                     const SplineSpec& spec) {
  check_shared_grid(smooth_t, smooth_v, 1);
  if (!std::isfinite(c_hat)) throw DomainError("clearance estimate is not finite");
  const std::size_t n = smooth_t.eval_times.size();
  StageThreeDesign d;
  d.z.resize(n);
  d.u_delta.resize(n);
  d.u_eta.resize(n);
  d.u_prod.resize(n);
  d.basis.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = smooth_v.value[i];
    const double dv = smooth_v.deriv1[i];
    d.z[i] = smooth_v.deriv2[i] + c_hat * dv;
    d.u_delta[i] = -(dv + c_hat * v);
    d.u_eta[i] = -(dv * v + c_hat * v * v);
    d.u_prod[i] = smooth_t.value[i] * v;
    d.basis[i] = basis_eval(spec, smooth_t.eval_times[i]);
  }
  return d;
}

StageThreeResult stage3_semiparametric(const SmoothEstimate& smooth_t,
                                       const SmoothEstimate& smooth_v, double c_hat,
                                       const SplineSpec& spec, std::optional<double> fixed_delta) {
  const StageThreeDesign d = build_stage3_design(smooth_t, smooth_v, c_hat, spec);
  const int s = spec.n_control;
  const auto n = static_cast<Eigen::Index>(d.z.size());
  const Eigen::Index offset = fixed_delta ? 0 : 1;
  Eigen::MatrixXd design(n, offset + 2 * s);
  Eigen::VectorXd response(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    response(i) = d.z[i];
    if (fixed_delta) {
      response(i) -= *fixed_delta * d.u_delta[i];
    } else {
      design(i, 0) = d.u_delta[i];
    }
    for (int j = 0; j < s; ++j) {
      design(i, offset + j) = d.basis[i][j] * d.u_eta[i];
      design(i, offset + s + j) = d.basis[i][j] * d.u_prod[i];
    }
  }
  const auto fit = detail::ols(design, response, "semiparametric infection-rate regression");

  StageThreeResult out;
  out.delta_fixed = fixed_delta.has_value();
  out.delta_hat = fixed_delta ? *fixed_delta : fit.coef(0);
  out.eta_coeffs.resize(s);
  out.production_coeffs.resize(s);
  for (int j = 0; j < s; ++j) {
    out.eta_coeffs[j] = fit.coef(offset + j);
    out.production_coeffs[j] = fit.coef(offset + s + j);
  }

  double max_abs = 0.0;
  for (double a : out.eta_coeffs) max_abs = std::max(max_abs, std::abs(a));
  std::vector<double> ratios;
  for (int j = 0; j < s; ++j) {
    if (max_abs > 0.0 && std::abs(out.eta_coeffs[j]) >= 1e-12 * max_abs) {
      ratios.push_back(out.production_coeffs[j] / out.eta_coeffs[j]);
    }
  }
  out.ratios_used = static_cast<int>(ratios.size());
  out.n_virions_hat = ratios.empty() || out.delta_hat == 0.0 ? kNaN : median(ratios) / out.delta_hat;
  return out;
}

ParamRange warm_range(double estimate, double factor, const ParamRange& global, bool* flagged) {
  bool bad = !(std::isfinite(estimate) && estimate > 0.0);
  ParamRange r = global;
  if (!bad) {
    r.lo = std::max(estimate / factor, global.lo);
    r.hi = std::min(estimate * factor, global.hi);
    if (!(r.hi > r.lo) || !r.contains(estimate)) {
      bad = true;
      r = global;
    }
  }
  if (flagged) *flagged = bad;
  return r;
}

namespace {

SmoothEstimate interior_only(const SmoothEstimate& s) {
  SmoothEstimate out;
  std::copy(std::begin(s.bandwidths), std::end(s.bandwidths), out.bandwidths);
  out.bandwidth_rule = s.bandwidth_rule;
  for (std::size_t i = 0; i < s.eval_times.size(); ++i) {
    if (s.boundary[i]) continue;
    out.eval_times.push_back(s.eval_times[i]);
    out.value.push_back(s.value[i]);
    out.deriv1.push_back(s.deriv1[i]);
    out.deriv2.push_back(s.deriv2[i]);
    out.boundary.push_back(false);
  }
  return out;
}

}  // namespace

MssbEstimate run_mssb(const ObservationSet& obs, const SplineSpec& spec,
                      const MssbOptions& options) {
  obs.validate();
  if (obs.t_times.size() < 10 || obs.v_times.size() < 10) {
    throw DataError("multistage estimation needs at least 10 observations per series (got " +
                    std::to_string(obs.t_times.size()) + " CD4, " +
                    std::to_string(obs.v_times.size()) + " viral load)");
  }

  // common grid: union of both schedules where both series are observed
  const double lo = std::max(obs.t_times.front(), obs.v_times.front());
  const double hi = std::min(obs.t_times.back(), obs.v_times.back());
  std::set<double> merged;
  for (double t : obs.t_times) if (t >= lo && t <= hi) merged.insert(t);
  for (double t : obs.v_times) if (t >= lo && t <= hi) merged.insert(t);
  const std::vector<double> grid(merged.begin(), merged.end());

  // retries a singular fit with a wider curve bandwidth (sparse schedules)
  auto smooth = [&](const std::vector<double>& times, const std::vector<double>& values) {
    KernelSpec kernel = options.kernel;
    if (!(kernel.bandwidth > 0.0)) {
      kernel.bandwidth = select_bandwidth(times, values, 1, 0, kernel.kind, {},
                                          options.bandwidth_rule);
    }
    for (int attempt = 0;; ++attempt) {
      try {
        auto est = smooth_state(times, values, kernel, options.bandwidth_rule, grid,
                                options.policy);
        if (options.kernel.bandwidth <= 0.0) est.bandwidth_rule = "loo-cv";
        return est;
      } catch (const SingularDesign&) {
        if (attempt == 5) throw;
        kernel.bandwidth *= 1.5;
      }
    }
  };

  MssbEstimate est;
  est.spline_spec = spec;
  const SmoothEstimate st = with_stage("stage I (CD4 smoothing)",
                                       [&] { return smooth(obs.t_times, obs.t_values); });
  const SmoothEstimate sv = with_stage("stage I (viral-load smoothing)",
                                       [&] { return smooth(obs.v_times, obs.v_values); });
  std::copy(std::begin(st.bandwidths), std::end(st.bandwidths), est.bandwidths_t);
  std::copy(std::begin(sv.bandwidths), std::end(sv.bandwidths), est.bandwidths_v);

  SmoothEstimate rt = st, rv = sv;
  if (options.exclude_boundary) {
    rt = interior_only(st);
    rv = interior_only(sv);
    if (rt.eval_times.size() < 5) {
      rt = st;
      rv = sv;
    }
  }
  est.stage2 = with_stage("stage II", [&] { return stage2_psls(rt, rv, options.fixed_c); });
  est.stage3 = with_stage("stage III", [&] {
    return stage3_semiparametric(rt, rv, est.stage2.c_hat, spec, options.fixed_delta);
  });

  auto& k = est.constants;
  k.lambda = est.stage2.lambda_hat.value_or(kNaN);
  k.rho = est.stage2.rho_hat.value_or(kNaN);
  k.c = est.stage2.c_hat;
  k.delta = est.stage3.delta_hat;
  k.n_virions = est.stage3.n_virions_hat;
  est.eta_coeffs = est.stage3.eta_coeffs;

  // initial state from the smoothed curves at the first common time
  const double v0 = sv.value.front();
  const double dv0 = sv.deriv1.front();
  const double t0 = st.value.front();
  const double ti0 = (dv0 + k.c * v0) / (k.n_virions * k.delta);
  est.initial_state = {t0 - ti0, ti0, v0};

  const GlobalBounds& g = options.bounds;
  const double f = options.range_factor;
  auto add = [&](const char* name, double value, const ParamRange& global) {
    bool flagged = false;
    est.search_ranges.push_back(warm_range(value, f, global, &flagged));
    if (flagged) est.flagged.emplace_back(name);
  };
  add("lambda", k.lambda, g.lambda);
  add("rho", k.rho, g.rho);
  add("N", k.n_virions, g.n_virions);
  add("delta", k.delta, g.delta);
  add("c", k.c, g.c);
  // a flagged spline coefficient borrows the hull of the usable ones' ranges
  const std::size_t eta_first = est.search_ranges.size();
  std::vector<bool> eta_bad;
  for (int j = 0; j < spec.n_control; ++j) {
    bool flagged = false;
    est.search_ranges.push_back(warm_range(est.eta_coeffs[j], f, g.eta_coeff, &flagged));
    eta_bad.push_back(flagged);
    if (flagged) est.flagged.push_back("a" + std::to_string(j + 1));
  }
  ParamRange hull{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (int j = 0; j < spec.n_control; ++j) {
    if (eta_bad[j]) continue;
    hull.lo = std::min(hull.lo, est.search_ranges[eta_first + j].lo);
    hull.hi = std::max(hull.hi, est.search_ranges[eta_first + j].hi);
  }
  if (hull.lo < hull.hi) {
    for (int j = 0; j < spec.n_control; ++j) {
      if (eta_bad[j]) est.search_ranges[eta_first + j] = hull;
    }
  }
  add("T_U(0)", est.initial_state.t_u, g.t_u0);
  add("T_I(0)", est.initial_state.t_i, g.t_i0);
  add("V(0)", est.initial_state.v, g.v0);
  return est;
}

}  // namespace hivest
