#include "hivest/hiv_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "hivest/errors.hpp"

namespace hivest {

bool State::finite() const {
  return std::isfinite(t_u) && std::isfinite(t_i) && std::isfinite(v);
}

EtaFunction EtaFunction::closed_form(Callable fn, Interval domain) {
  if (!fn) throw ConfigError("closed-form infection rate needs a callable");
  return EtaFunction(std::move(fn), domain);
}

EtaFunction EtaFunction::spline(SplineSpec spec, std::vector<double> coeffs) {
  if (static_cast<int>(coeffs.size()) != spec.n_control) {
    throw ConfigError("infection-rate spline needs " + std::to_string(spec.n_control) +
                      " coefficients, got " + std::to_string(coeffs.size()));
  }
  const Interval domain = spec.domain;
  return EtaFunction(SplineForm{std::move(spec), std::move(coeffs)}, domain);
}

EtaFunction EtaFunction::constant(double value, Interval domain) {
  return closed_form([value](double) { return value; }, domain);
}

double EtaFunction::operator()(double t) const {
  if (const auto* s = std::get_if<SplineForm>(&form_)) {
    return curve_eval(s->spec, s->coeffs, t);
  }
  if (!domain_.contains(t)) {
    std::ostringstream os;
    os << "infection rate evaluated at t = " << t << " outside [" << domain_.lo << ", "
       << domain_.hi << "]";
    throw DomainError(os.str());
  }
  return std::get<Callable>(form_)(t);
}

const SplineSpec& EtaFunction::spline_spec() const {
  return std::get<SplineForm>(form_).spec;
}

const std::vector<double>& EtaFunction::spline_coeffs() const {
  return std::get<SplineForm>(form_).coeffs;
}

double eta_eval(const EtaFunction& eta, double t) {
  const double value = eta(t);
  if (!std::isfinite(value)) {
    throw DomainError("infection rate is not finite at t = " + std::to_string(t));
  }
  return value;
}

State rhs(const State& x, double t, const ConstantParams& p, const EtaFunction& eta) {
  if (!x.finite() || !std::isfinite(t)) {
    throw DomainError("model right-hand side called with non-finite state or time");
  }
  return rhs_at(x, p, eta_eval(eta, t));
}

State rk4_step(const State& x, double t, double h, const ConstantParams& p,
               const EtaFunction& eta) {
  const double e[3] = {eta(t), eta(t + 0.5 * h), eta(t + h)};
  StepPlan plan;
  plan.steps.push_back({t, h, 0});
  State out[2];
  run_plan(plan, x, p, [&](std::size_t, int stage) { return e[stage]; },
           std::numeric_limits<double>::infinity(), std::span<State>(out, 2), nullptr);
  return out[0];
}

StepPlan::StepPlan(std::vector<double> times, double step)
    : output_times(std::move(times)), base_step(step) {
  if (!(step > 0.0) || !std::isfinite(step)) throw ConfigError("integration step must be > 0");
  if (output_times.empty()) throw ConfigError("output grid is empty");
  for (std::size_t i = 1; i < output_times.size(); ++i) {
    if (!(output_times[i] > output_times[i - 1])) {
      throw DataError("output times must be strictly increasing");
    }
  }
  double t = output_times.front();
  for (std::size_t i = 1; i < output_times.size(); ++i) {
    const double target = output_times[i];
    // a remainder within 1e-9 of a step is absorbed into the last step
    const double slack = 1e-9 * step;
    while (true) {
      const double remaining = target - t;
      if (remaining <= step + slack) {
        steps.push_back({t, remaining, static_cast<int>(i)});
        t = target;
        break;
      }
      steps.push_back({t, step, -1});
      t += step;
    }
  }
}

Trajectory integrate(const State& init, const ConstantParams& p, const EtaFunction& eta,
                     std::span<const double> output_times, double step, double cap) {
  if (!init.finite()) throw DomainError("initial state is not finite");
  StepPlan plan(std::vector<double>(output_times.begin(), output_times.end()), step);
  const Interval& dom = eta.domain();
  if (!dom.contains(plan.output_times.front()) || !dom.contains(plan.output_times.back())) {
    throw DomainError("output times fall outside the infection-rate domain");
  }

  Trajectory traj;
  traj.times = plan.output_times;
  traj.solver_step = step;
  traj.states.resize(traj.times.size());
  double fail_time = 0.0;
  const bool ok = run_plan(
      plan, init, p,
      [&](std::size_t n, int stage) {
        const auto& s = plan.steps[n];
        // the last stage of a step is the next step's first; evaluate at the
        // clamped end so the domain check never trips on rounding
        const double t = stage == 0 ? s.t : stage == 1 ? s.t + 0.5 * s.h : std::min(s.t + s.h, dom.hi);
        return eta(t);
      },
      cap, traj.states, &fail_time);
  if (!ok) {
    std::ostringstream os;
    os << "integration blew up at t = " << fail_time << " (state magnitude above " << cap << ")";
    throw IntegrationBlowup(fail_time, os.str());
  }
  return traj;
}

double ReferenceModel::eta(double t) {
  return 9e-5 * (1.0 - 0.9 * std::cos(std::numbers::pi * t / 1000.0));
}

EtaFunction ReferenceModel::eta_function(Interval domain) {
  return EtaFunction::closed_form(&ReferenceModel::eta, domain);
}

}  // namespace hivest
