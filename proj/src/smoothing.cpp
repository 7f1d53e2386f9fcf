#include "hivest/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "hivest/errors.hpp"

namespace hivest {

namespace {

void check_series(std::span<const double> times, std::span<const double> values) {
  if (times.size() != values.size()) {
    throw DataError("time and value arrays differ in length");
  }
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || !std::isfinite(values[i])) {
      throw DataError("non-finite observation at index " + std::to_string(i));
    }
    if (i > 0 && !(times[i] > times[i - 1])) {
      throw DataError("observation times must be strictly increasing");
    }
  }
}

// Weighted polynomial fit around t0 in the scaled variable u = (t - t0) / h.
// Returns false when fewer than degree + 1 points carry weight or the local
// design is numerically rank deficient. `skip` drops one observation (LOO).
bool fit_point(std::span<const double> times, std::span<const double> values, KernelKind kind,
               double h, int degree, double t0, std::ptrdiff_t skip, Eigen::VectorXd& coef) {
  const auto lo = std::upper_bound(times.begin(), times.end(), t0 - h) - times.begin();
  const auto hi = std::lower_bound(times.begin(), times.end(), t0 + h) - times.begin();
  const int cols = degree + 1;
  Eigen::MatrixXd design(std::max<std::ptrdiff_t>(hi - lo, 0), cols);
  Eigen::VectorXd rhs(design.rows());
  Eigen::Index m = 0;
  for (auto i = lo; i < hi; ++i) {
    if (i == skip) continue;
    const double u = (times[i] - t0) / h;
    const double w = kernel_value(kind, u);
    if (!(w > 0.0)) continue;
    const double sw = std::sqrt(w);
    double power = sw;
    for (int j = 0; j < cols; ++j) {
      design(m, j) = power;
      power *= u;
    }
    rhs(m) = sw * values[i];
    ++m;
  }
  if (m < cols) return false;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design.topRows(m));
  qr.setThreshold(1e-10);
  if (qr.rank() < cols) return false;
  coef = qr.solve(rhs.head(m));
  return true;
}

double factorial(int q) {
  double f = 1.0;
  for (int i = 2; i <= q; ++i) f *= i;
  return f;
}

void check_degree(int degree, int deriv) {
  if (degree < 0 || degree > 3) throw ConfigError("local polynomial degree must be 0..3");
  if (deriv < 0 || deriv > degree) {
    throw ConfigError("derivative order must lie between 0 and the polynomial degree");
  }
}

}  // namespace

std::string to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::Epanechnikov: return "epanechnikov";
    case KernelKind::Biweight: return "biweight";
    case KernelKind::Uniform: return "uniform";
  }
  return "unknown";
}

KernelKind kernel_kind_from_string(const std::string& name) {
  if (name == "epanechnikov") return KernelKind::Epanechnikov;
  if (name == "biweight") return KernelKind::Biweight;
  if (name == "uniform") return KernelKind::Uniform;
  throw ConfigError("unknown kernel '" + name + "'");
}

double kernel_value(KernelKind kind, double z) {
  if (!(std::abs(z) < 1.0)) return 0.0;
  const double a = 1.0 - z * z;
  switch (kind) {
    case KernelKind::Epanechnikov: return 0.75 * a;
    case KernelKind::Biweight: return 0.9375 * a * a;
    case KernelKind::Uniform: return 0.5;
  }
  return 0.0;
}

std::vector<double> local_poly_fit(std::span<const double> obs_times,
                                   std::span<const double> obs_values, const KernelSpec& kernel,
                                   int degree, int deriv, std::span<const double> eval_times,
                                   ExecPolicy policy) {
  check_series(obs_times, obs_values);
  check_degree(degree, deriv);
  const double h = kernel.bandwidth;
  if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("bandwidth must be positive");

  const double scale = factorial(deriv) / std::pow(h, deriv);
  std::vector<double> out(eval_times.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<char> singular(eval_times.size(), 0);
  for_each_index(eval_times.size(), policy, [&](std::size_t e) {
    Eigen::VectorXd coef;
    if (fit_point(obs_times, obs_values, kernel.kind, h, degree, eval_times[e], -1, coef)) {
      out[e] = coef(deriv) * scale;
    } else {
      singular[e] = 1;
    }
  });

  std::vector<double> bad;
  for (std::size_t e = 0; e < eval_times.size(); ++e) {
    if (singular[e]) bad.push_back(eval_times[e]);
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "singular local design (degree " << degree << ", bandwidth " << h << ") at t =";
    for (std::size_t i = 0; i < bad.size() && i < 8; ++i) os << ' ' << bad[i];
    if (bad.size() > 8) os << " ... (" << bad.size() << " points)";
    throw SingularDesign(std::move(bad), os.str());
  }
  return out;
}

std::vector<double> default_bandwidth_candidates(std::span<const double> obs_times, int degree,
                                                 int n_candidates) {
  const auto n = obs_times.size();
  const std::size_t need = static_cast<std::size_t>(degree) + 2;
  if (n < need + 1 || n_candidates < 1) return {};
  // smallest h such that every point has `need` neighbours strictly within h
  double h_min = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d;
    d.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d.push_back(std::abs(obs_times[j] - obs_times[i]));
    }
    std::nth_element(d.begin(), d.begin() + (need - 1), d.end());
    h_min = std::max(h_min, d[need - 1]);
  }
  h_min *= 1.0001;
  const double h_max = std::max(obs_times.back() - obs_times.front(), h_min);
  std::vector<double> grid(static_cast<std::size_t>(n_candidates));
  for (int i = 0; i < n_candidates; ++i) {
    const double frac = n_candidates == 1 ? 0.0 : static_cast<double>(i) / (n_candidates - 1);
    grid[i] = h_min * std::pow(h_max / h_min, frac);
  }
  return grid;
}

double select_bandwidth(std::span<const double> obs_times, std::span<const double> obs_values,
                        int degree, int deriv, KernelKind kind,
                        std::span<const double> candidates, const BandwidthRule& rule) {
  check_series(obs_times, obs_values);
  if (deriv < 0 || deriv > 2) throw ConfigError("bandwidth selection supports derivatives 0..2");
  // the curve bandwidth is always chosen for the local linear fit; derivative
  // bandwidths scale it
  const int cv_degree = deriv == 0 ? degree : 1;
  check_degree(cv_degree, 0);
  if (obs_times.size() < static_cast<std::size_t>(cv_degree) + 2) {
    throw DataError("bandwidth selection needs at least " + std::to_string(cv_degree + 2) +
                    " observations");
  }
  std::vector<double> owned;
  if (candidates.empty()) {
    owned = default_bandwidth_candidates(obs_times, cv_degree, rule.n_candidates);
    candidates = owned;
  }

  double best_h = 0.0;
  double best_score = std::numeric_limits<double>::infinity();
  const auto n = static_cast<std::ptrdiff_t>(obs_times.size());
  const double margin = rule.cv_trim * (obs_times.back() - obs_times.front());
  const double keep_lo = obs_times.front() + margin;
  const double keep_hi = obs_times.back() - margin;
  for (const double h : candidates) {
    double score = 0.0;
    bool ok = true;
    for (std::ptrdiff_t i = 0; i < n && ok; ++i) {
      if (obs_times[i] < keep_lo || obs_times[i] > keep_hi) continue;
      Eigen::VectorXd coef;
      ok = fit_point(obs_times, obs_values, kind, h, cv_degree, obs_times[i], i, coef);
      if (ok) {
        const double r = obs_values[i] - coef(0);
        score += r * r;
      }
    }
    if (ok && score < best_score) {
      best_score = score;
      best_h = h;
    }
  }
  if (!(best_h > 0.0)) {
    throw NumericalError("bandwidth selection failed: every candidate bandwidth leaves a "
                         "singular local design");
  }
  if (deriv == 1) return best_h * rule.deriv1_inflation;
  if (deriv == 2) return best_h * rule.deriv2_inflation;
  return best_h;
}

SmoothEstimate smooth_state(std::span<const double> obs_times, std::span<const double> obs_values,
                            const KernelSpec& kernel, const BandwidthRule& rule,
                            std::span<const double> eval_times, ExecPolicy policy) {
  check_series(obs_times, obs_values);
  if (obs_times.size() < 4) {
    throw DataError("smoothing needs at least 4 observations for the local cubic stage (got " +
                    std::to_string(obs_times.size()) + ")");
  }
  SmoothEstimate est;
  if (eval_times.empty()) eval_times = obs_times;
  est.eval_times.assign(eval_times.begin(), eval_times.end());

  double h0 = kernel.bandwidth;
  if (h0 > 0.0) {
    est.bandwidth_rule = "fixed";
  } else {
    h0 = select_bandwidth(obs_times, obs_values, 1, 0, kernel.kind, {}, rule);
    est.bandwidth_rule = "loo-cv local linear; derivative inflation x" +
                         std::to_string(rule.deriv1_inflation) + ", x" +
                         std::to_string(rule.deriv2_inflation);
  }
  est.bandwidths[0] = h0;
  est.bandwidths[1] = h0 * rule.deriv1_inflation;
  est.bandwidths[2] = h0 * rule.deriv2_inflation;

  est.value = local_poly_fit(obs_times, obs_values, {kernel.kind, est.bandwidths[0]}, 1, 0,
                             eval_times, policy);
  est.deriv1 = local_poly_fit(obs_times, obs_values, {kernel.kind, est.bandwidths[1]}, 2, 1,
                              eval_times, policy);
  est.deriv2 = local_poly_fit(obs_times, obs_values, {kernel.kind, est.bandwidths[2]}, 3, 2,
                              eval_times, policy);

  const double lo = obs_times.front();
  const double hi = obs_times.back();
  const double margin = 0.1 * (hi - lo);
  est.boundary.resize(eval_times.size());
  for (std::size_t i = 0; i < eval_times.size(); ++i) {
    est.boundary[i] = eval_times[i] < lo + margin || eval_times[i] > hi - margin;
  }
  return est;
}

}  // namespace hivest
