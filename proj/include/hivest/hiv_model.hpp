#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <variant>
#include <vector>

#include "hivest/bspline.hpp"

namespace hivest {

// Uninfected target cells, infected cells (cells/uL) and viral load (copies/mL).
struct State {
  double t_u = 0.0;
  double t_i = 0.0;
  double v = 0.0;

  double total_cd4() const { return t_u + t_i; }
  bool finite() const;
};

struct ConstantParams {
  double lambda = 0.0;     // proliferation of uninfected cells, cells/day
  double rho = 0.0;        // death rate of uninfected cells, 1/day
  double n_virions = 0.0;  // virions per infected cell
  double delta = 0.0;      // death rate of infected cells, 1/day
  double c = 0.0;          // viral clearance, 1/day
};

// Time-varying infection rate: either a closed-form callable or a B-spline.
class EtaFunction {
 public:
  using Callable = std::function<double(double)>;

  static EtaFunction closed_form(Callable fn, Interval domain);
  static EtaFunction spline(SplineSpec spec, std::vector<double> coeffs);
  static EtaFunction constant(double value, Interval domain);

  // Throws DomainError outside the domain.
  double operator()(double t) const;

  const Interval& domain() const { return domain_; }
  bool is_spline() const { return std::holds_alternative<SplineForm>(form_); }
  const SplineSpec& spline_spec() const;
  const std::vector<double>& spline_coeffs() const;

 private:
  struct SplineForm {
    SplineSpec spec;
    std::vector<double> coeffs;
  };
  EtaFunction(std::variant<Callable, SplineForm> form, Interval domain)
      : form_(std::move(form)), domain_(domain) {}

  std::variant<Callable, SplineForm> form_;
  Interval domain_;
};

double eta_eval(const EtaFunction& eta, double t);

// Right-hand side of the three-compartment model with infection rate eta_t.
inline State rhs_at(const State& x, const ConstantParams& p, double eta_t) {
  const double infection = eta_t * x.t_u * x.v;
  return {p.lambda - p.rho * x.t_u - infection,
          infection - p.delta * x.t_i,
          p.n_virions * p.delta * x.t_i - p.c * x.v};
}

// Checked version: rejects non-finite inputs with DomainError.
State rhs(const State& x, double t, const ConstantParams& p, const EtaFunction& eta);

// One classical RK4 step of size h from (x, t).
State rk4_step(const State& x, double t, double h, const ConstantParams& p,
               const EtaFunction& eta);

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
  double solver_step = 0.0;
};

inline constexpr double kDefaultStep = 0.01;
inline constexpr double kDefaultBlowupCap = 1e12;

// Sequence of RK4 steps that starts at output_times[0], advances with the base
// step and shortens the last step before each output time so it lands exactly.
// Built once per (grid, step); reused for every parameter vector.
struct StepPlan {
  struct Step {
    double t;
    double h;
    int output_index;  // output reached at the end of this step, or -1
  };
  std::vector<double> output_times;
  std::vector<Step> steps;
  double base_step = 0.0;

  StepPlan() = default;
  StepPlan(std::vector<double> output_times, double step);
};

// Integrates the model along a plan. `eta_at(step_index, stage)` supplies the
// infection rate at stage 0 (t), 1 (t + h/2) and 2 (t + h) of each step.
// Returns false when a component exceeds `cap` in magnitude (or is not finite)
// and writes the failure time; `out` then holds the states reached so far.
template <class EtaAt>
bool run_plan(const StepPlan& plan, const State& init, const ConstantParams& p,
              EtaAt&& eta_at, double cap, std::span<State> out, double* fail_time) {
  State x = init;
  out[0] = init;
  const auto& steps = plan.steps;
  for (std::size_t n = 0; n < steps.size(); ++n) {
    const double h = steps[n].h;
    const double e0 = eta_at(n, 0);
    const double e1 = eta_at(n, 1);
    const double e2 = eta_at(n, 2);
    const State k1 = rhs_at(x, p, e0);
    const State k2 = rhs_at({x.t_u + 0.5 * h * k1.t_u, x.t_i + 0.5 * h * k1.t_i,
                             x.v + 0.5 * h * k1.v},
                            p, e1);
    const State k3 = rhs_at({x.t_u + 0.5 * h * k2.t_u, x.t_i + 0.5 * h * k2.t_i,
                             x.v + 0.5 * h * k2.v},
                            p, e1);
    const State k4 = rhs_at({x.t_u + h * k3.t_u, x.t_i + h * k3.t_i, x.v + h * k3.v}, p, e2);
    x.t_u += h / 6.0 * (k1.t_u + 2.0 * k2.t_u + 2.0 * k3.t_u + k4.t_u);
    x.t_i += h / 6.0 * (k1.t_i + 2.0 * k2.t_i + 2.0 * k3.t_i + k4.t_i);
    x.v += h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v);
    // negated comparisons also catch NaN
    if (!(std::abs(x.t_u) <= cap) || !(std::abs(x.t_i) <= cap) || !(std::abs(x.v) <= cap)) {
      if (fail_time) *fail_time = steps[n].t + h;
      return false;
    }
    if (steps[n].output_index >= 0) out[static_cast<std::size_t>(steps[n].output_index)] = x;
  }
  return true;
}

// Fixed-step RK4 solution reported exactly at output_times (strictly
// increasing; the initial condition belongs to output_times[0]). Throws
// IntegrationBlowup when a component exceeds `cap`.
Trajectory integrate(const State& init, const ConstantParams& p, const EtaFunction& eta,
                     std::span<const double> output_times, double step = kDefaultStep,
                     double cap = kDefaultBlowupCap);

// Parameter values and closed-form infection rate of the reference simulation.
struct ReferenceModel {
  static constexpr State initial{600.0, 30.0, 1e5};
  static constexpr ConstantParams params{36.0, 0.108, 1000.0, 0.5, 3.0};
  static double eta(double t);
  static EtaFunction eta_function(Interval domain = {0.0, 20.0});
};

}  // namespace hivest
