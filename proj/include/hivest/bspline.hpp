#pragma once

#include <span>
#include <string>
#include <vector>

namespace hivest {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double length() const { return hi - lo; }
  bool contains(double t) const { return t >= lo && t <= hi; }
};

enum class KnotSpacing { Linear, Log };

std::string to_string(KnotSpacing spacing);
KnotSpacing knot_spacing_from_string(const std::string& name);

// B-spline of order k (degree k-1) with s control points on a clamped knot
// vector. Interior knots are averages of k-1 consecutive control positions;
// for k = 2 the knots are the control positions themselves. Construct through make_spec or
// spec_from_control_positions, which enforce the invariants.
struct SplineSpec {
  int order = 0;
  int n_control = 0;
  KnotSpacing spacing = KnotSpacing::Log;
  Interval domain;
  std::vector<double> control_positions;  // size n_control
  std::vector<double> knots;              // size n_control + order
};

// Control points equally spaced in t (Linear) or in log(t - domain.lo + 1)
// (Log). Orders outside {2, 3, 4} or n_control < order raise ConfigError.
SplineSpec make_spec(int order, int n_control, Interval domain, KnotSpacing spacing);

// Knot vector from explicit control positions: endpoints repeated `order`
// times, interior knot i at the mean of positions i+1 .. i+order-1.
SplineSpec spec_from_control_positions(int order, std::vector<double> positions,
                                       KnotSpacing spacing = KnotSpacing::Linear);

// Cox-de Boor evaluation of the `order` basis functions that can be nonzero at
// t. Writes them into `values` (size >= order) and returns the index of the
// first one. Throws DomainError outside the domain.
int basis_nonzero(const SplineSpec& spec, double t, std::span<double> values);

// All s basis values at t.
std::vector<double> basis_eval(const SplineSpec& spec, double t);

double curve_eval(const SplineSpec& spec, std::span<const double> coeffs, double t);

}  // namespace hivest
