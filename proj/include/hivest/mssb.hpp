#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hivest/bspline.hpp"
#include "hivest/hiv_model.hpp"
#include "hivest/observations.hpp"
#include "hivest/smoothing.hpp"

namespace hivest {

// Regression of V' on (1, T, T', -V):  V' = a0 + a1 T + a2 T' - c V with
// a0 = -N delta lambda / (rho - delta), a1 = N delta rho / (rho - delta),
// a2 = N delta / (rho - delta).
struct PslsResult {
  double alpha0 = 0.0;
  double alpha1 = 0.0;
  double alpha2 = 0.0;
  double c_hat = 0.0;
  bool c_fixed = false;
  // absent when |alpha2| is negligible
  std::optional<double> lambda_hat;
  std::optional<double> rho_hat;
  std::vector<double> residuals;

  bool degenerate() const { return !lambda_hat.has_value(); }
};

// Both estimates must share an evaluation grid with at least 5 points.
// With fixed_c the clearance is held and c V is moved to the response.
PslsResult stage2_psls(const SmoothEstimate& smooth_t, const SmoothEstimate& smooth_v,
                       std::optional<double> fixed_c = std::nullopt);

// Linearised infected-cell equation
//   Z = delta * U_delta + sum_j a_j b_j U_eta + sum_j (N delta a_j) b_j U_prod
// with Z = V'' + c V', U_delta = -(V' + c V), U_eta = -(V' V + c V^2), U_prod = T V.
struct StageThreeDesign {
  std::vector<double> z;
  std::vector<double> u_delta;
  std::vector<double> u_eta;
  std::vector<double> u_prod;
  std::vector<std::vector<double>> basis;  // basis[i][j] = b_j(t_i)
};

StageThreeDesign build_stage3_design(const SmoothEstimate& smooth_t,
                                     const SmoothEstimate& smooth_v, double c_hat,
                                     const SplineSpec& spec);

struct StageThreeResult {
  double delta_hat = 0.0;
  bool delta_fixed = false;
  std::vector<double> eta_coeffs;         // a_j
  std::vector<double> production_coeffs;  // (N delta a_j)
  double n_virions_hat = 0.0;
  int ratios_used = 0;  // coefficients passing the division guard
};

// N is recovered as median_j(g_j / a_j) / delta over |a_j| >= 1e-12 max|a|.
StageThreeResult stage3_semiparametric(const SmoothEstimate& smooth_t,
                                       const SmoothEstimate& smooth_v, double c_hat,
                                       const SplineSpec& spec,
                                       std::optional<double> fixed_delta = std::nullopt);

struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const { return x >= lo && x <= hi; }
};

// Plausible limits for the search box; warm-start ranges are clipped to them.
struct GlobalBounds {
  ParamRange lambda{0.1, 1e4};
  ParamRange rho{1e-4, 5.0};
  ParamRange n_virions{1.0, 1e5};
  ParamRange delta{1e-3, 20.0};
  ParamRange c{1e-2, 100.0};
  ParamRange eta_coeff{1e-9, 1e-2};
  ParamRange t_u0{1.0, 1e4};
  ParamRange t_i0{1e-2, 1e4};
  ParamRange v0{1.0, 1e9};
};

struct MssbOptions {
  KernelSpec kernel;  // bandwidth 0 = cross-validated
  BandwidthRule bandwidth_rule;
  std::optional<double> fixed_c;
  std::optional<double> fixed_delta;
  double range_factor = 5.0;  // warm-start range [est / f, est * f]
  // drop points flagged as boundary by stage I from the stage II/III regressions
  bool exclude_boundary = false;
  GlobalBounds bounds;
  ExecPolicy policy = ExecPolicy::Parallel;
};

struct MssbEstimate {
  ConstantParams constants;
  std::vector<double> eta_coeffs;
  SplineSpec spline_spec;
  State initial_state;  // at the start of the observation span
  // Search ranges, constants in order (lambda, rho, N, delta, c), then one per
  // eta coefficient, then (T_U(0), T_I(0), V(0)).
  std::vector<ParamRange> search_ranges;
  // Names of estimates that were negative, missing or outside the global
  // bounds; their ranges fall back to the global bounds.
  std::vector<std::string> flagged;
  PslsResult stage2;
  StageThreeResult stage3;
  double bandwidths_t[3] = {0.0, 0.0, 0.0};
  double bandwidths_v[3] = {0.0, 0.0, 0.0};
};

// Stage I smoothing of both series on their common grid, then Stages II and III.
// Needs at least 10 observations per series. Stage errors are rethrown with the
// stage named.
MssbEstimate run_mssb(const ObservationSet& obs, const SplineSpec& spec,
                      const MssbOptions& options = {});

// Range rule: [est / f, est * f] clipped to the global bounds, or the global
// bounds themselves when est is not a usable positive value.
ParamRange warm_range(double estimate, double factor, const ParamRange& global, bool* flagged);

}  // namespace hivest
