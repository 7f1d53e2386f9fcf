#pragma once

#include <span>
#include <string>
#include <vector>

#include "hivest/parallel.hpp"

namespace hivest {

enum class KernelKind { Epanechnikov, Biweight, Uniform };

std::string to_string(KernelKind kind);
KernelKind kernel_kind_from_string(const std::string& name);

// Symmetric kernel on [-1, 1], integrating to one.
double kernel_value(KernelKind kind, double z);

struct KernelSpec {
  KernelKind kind = KernelKind::Epanechnikov;
  double bandwidth = 0.0;  // days; 0 asks smooth_state to select it
};

// Local polynomial estimate of the deriv-th derivative from a degree-`degree`
// weighted least-squares fit centred at each evaluation time. Throws
// SingularDesign listing every evaluation time whose local design is singular.
std::vector<double> local_poly_fit(std::span<const double> obs_times,
                                   std::span<const double> obs_values, const KernelSpec& kernel,
                                   int degree, int deriv, std::span<const double> eval_times,
                                   ExecPolicy policy = ExecPolicy::Parallel);

struct BandwidthRule {
  double deriv1_inflation = 1.5;
  double deriv2_inflation = 2.0;
  int n_candidates = 25;
  // fraction of the span at each end left out of the CV score
  double cv_trim = 0.0;
};

// Log-spaced grid from the smallest width that leaves degree + 2 points in every
// leave-one-out window up to the full observation span.
std::vector<double> default_bandwidth_candidates(std::span<const double> obs_times, int degree,
                                                 int n_candidates = 25);

// Leave-one-out cross-validation over the candidates for the curve (deriv 0);
// derivative bandwidths inflate the curve winner by the rule's factors.
// Throws NumericalError when every candidate is singular.
double select_bandwidth(std::span<const double> obs_times, std::span<const double> obs_values,
                        int degree, int deriv, KernelKind kind = KernelKind::Epanechnikov,
                        std::span<const double> candidates = {}, const BandwidthRule& rule = {});

struct SmoothEstimate {
  std::vector<double> eval_times;
  std::vector<double> value;
  std::vector<double> deriv1;
  std::vector<double> deriv2;
  double bandwidths[3] = {0.0, 0.0, 0.0};
  // true for points within the outer 10% of the observation span
  std::vector<bool> boundary;
  std::string bandwidth_rule;
};

// Curve, first and second derivative by local linear, quadratic and cubic fits.
// Evaluates on the observation grid unless eval_times is given.
SmoothEstimate smooth_state(std::span<const double> obs_times, std::span<const double> obs_values,
                            const KernelSpec& kernel, const BandwidthRule& rule = {},
                            std::span<const double> eval_times = {},
                            ExecPolicy policy = ExecPolicy::Parallel);

}  // namespace hivest
