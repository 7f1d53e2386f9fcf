#include "hivest/bspline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "hivest/errors.hpp"

namespace hivest {

namespace {

constexpr int kMaxOrder = 8;

void check_order_and_count(int order, int n_control) {
  if (order < 1 || order > kMaxOrder) {
    throw ConfigError("spline order " + std::to_string(order) + " not supported");
  }
  if (n_control < order) {
    std::ostringstream os;
    os << "spline needs at least as many control points as its order (order " << order
       << ", control points " << n_control << ")";
    throw ConfigError(os.str());
  }
}

}  // namespace

std::string to_string(KnotSpacing spacing) {
  return spacing == KnotSpacing::Log ? "log" : "linear";
}

KnotSpacing knot_spacing_from_string(const std::string& name) {
  if (name == "log") return KnotSpacing::Log;
  if (name == "linear") return KnotSpacing::Linear;
  throw ConfigError("unknown knot spacing '" + name + "' (expected log or linear)");
}

SplineSpec make_spec(int order, int n_control, Interval domain, KnotSpacing spacing) {
  if (order < 2 || order > 4) {
    throw ConfigError("spline order must be 2, 3 or 4 (got " + std::to_string(order) + ")");
  }
  check_order_and_count(order, n_control);
  if (!(domain.hi > domain.lo) || !std::isfinite(domain.lo) || !std::isfinite(domain.hi)) {
    throw ConfigError("spline domain must have positive length");
  }

  std::vector<double> positions(static_cast<std::size_t>(n_control));
  const double denom = static_cast<double>(n_control - 1);
  if (spacing == KnotSpacing::Linear) {
    for (int j = 0; j < n_control; ++j) {
      positions[j] = domain.lo + domain.length() * (j / denom);
    }
  } else {
    // log(t - lo + 1): one day of shift keeps the left endpoint in range
    const double top = std::log(domain.length() + 1.0);
    for (int j = 0; j < n_control; ++j) {
      positions[j] = domain.lo + std::expm1(top * (j / denom));
    }
  }
  positions.front() = domain.lo;
  positions.back() = domain.hi;
  return spec_from_control_positions(order, std::move(positions), spacing);
}

SplineSpec spec_from_control_positions(int order, std::vector<double> positions,
                                       KnotSpacing spacing) {
  const int s = static_cast<int>(positions.size());
  check_order_and_count(order, s);
  for (int j = 1; j < s; ++j) {
    if (!(positions[j] > positions[j - 1])) {
      throw ConfigError("control positions must be strictly increasing");
    }
  }

  SplineSpec spec;
  spec.order = order;
  spec.n_control = s;
  spec.spacing = spacing;
  spec.domain = {positions.front(), positions.back()};
  spec.knots.reserve(static_cast<std::size_t>(s + order));
  for (int i = 0; i < order; ++i) spec.knots.push_back(spec.domain.lo);
  for (int i = 0; i < s - order; ++i) {
    double sum = 0.0;
    for (int j = i + 1; j <= i + order - 1; ++j) sum += positions[j];
    spec.knots.push_back(sum / (order - 1));
  }
  for (int i = 0; i < order; ++i) spec.knots.push_back(spec.domain.hi);
  spec.control_positions = std::move(positions);
  return spec;
}

int basis_nonzero(const SplineSpec& spec, double t, std::span<double> values) {
  const int k = spec.order;
  const int s = spec.n_control;
  if (!(t >= spec.domain.lo && t <= spec.domain.hi)) {
    std::ostringstream os;
    os << "t = " << t << " outside spline domain [" << spec.domain.lo << ", "
       << spec.domain.hi << "]";
    throw DomainError(os.str());
  }
  const auto& knots = spec.knots;

  // knot span mu with knots[mu] <= t < knots[mu + 1], mu in [k-1, s-1]
  int mu;
  if (t >= spec.domain.hi) {
    mu = s - 1;
  } else {
    auto it = std::upper_bound(knots.begin() + k, knots.begin() + s, t);
    mu = static_cast<int>(it - knots.begin()) - 1;
  }

  std::array<double, kMaxOrder> left{};
  std::array<double, kMaxOrder> right{};
  values[0] = 1.0;
  for (int j = 1; j < k; ++j) {
    left[j] = t - knots[mu + 1 - j];
    right[j] = knots[mu + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double temp = values[r] / (right[r + 1] + left[j - r]);
      values[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    values[j] = saved;
  }
  return mu - k + 1;
}

std::vector<double> basis_eval(const SplineSpec& spec, double t) {
  std::array<double, kMaxOrder> local{};
  const int first = basis_nonzero(spec, t, local);
  std::vector<double> out(static_cast<std::size_t>(spec.n_control), 0.0);
  for (int r = 0; r < spec.order; ++r) out[first + r] = local[r];
  return out;
}

double curve_eval(const SplineSpec& spec, std::span<const double> coeffs, double t) {
  if (static_cast<int>(coeffs.size()) != spec.n_control) {
    throw ConfigError("coefficient count " + std::to_string(coeffs.size()) +
                      " does not match control-point count " +
                      std::to_string(spec.n_control));
  }
  std::array<double, kMaxOrder> local{};
  const int first = basis_nonzero(spec, t, local);
  double sum = 0.0;
  for (int r = 0; r < spec.order; ++r) sum += coeffs[first + r] * local[r];
  return sum;
}

}  // namespace hivest
