#include <cmath>
#include <vector>

#include "doctest.h"
#include "hivest/errors.hpp"
#include "hivest/hiv_model.hpp"
#include "hivest/mssb.hpp"
#include "hivest/simlab.hpp"

using namespace hivest;

namespace {

const ConstantParams kRef = ReferenceModel::params;

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

// Exact curves and derivatives straight from the model, bypassing smoothing.
struct ExactCurves {
  SmoothEstimate t, v;
};

ExactCurves exact_curves(const EtaFunction& eta, int n) {
  std::vector<double> grid;
  for (int i = 0; i <= n; ++i) grid.push_back(20.0 * i / n);
  const auto sol = integrate(ReferenceModel::initial, kRef, eta, grid, 0.001);
  ExactCurves out;
  for (auto* s : {&out.t, &out.v}) {
    s->eval_times = grid;
    s->boundary.assign(grid.size(), false);
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const State& x = sol.states[i];
    const State d = rhs(x, grid[i], kRef, eta);
    out.t.value.push_back(x.total_cd4());
    out.t.deriv1.push_back(d.t_u + d.t_i);
    out.t.deriv2.push_back(0.0);  // unused by the regressions
    out.v.value.push_back(x.v);
    out.v.deriv1.push_back(d.v);
    out.v.deriv2.push_back(kRef.n_virions * kRef.delta * d.t_i - kRef.c * d.v);
  }
  return out;
}

SplineSpec order2_spec() { return make_spec(2, 3, {0.0, 20.0}, KnotSpacing::Log); }
const std::vector<double> kEtaCoeffs{9e-6, 1.6e-5, 7e-6};

}  // namespace

TEST_CASE("stage II on exact curves recovers the alpha algebra") {
  const auto c = exact_curves(ReferenceModel::eta_function(), 400);
  const auto r = stage2_psls(c.t, c.v);
  const double a2 = kRef.n_virions * kRef.delta / (kRef.rho - kRef.delta);
  CHECK(a2 == doctest::Approx(-1275.51).epsilon(1e-6));
  CHECK(r.alpha2 == doctest::Approx(-1275.51).epsilon(1e-6));
  CHECK(r.alpha0 == doctest::Approx(45918.37).epsilon(1e-6));
  CHECK(r.alpha1 == doctest::Approx(-137.755).epsilon(1e-6));
  REQUIRE_FALSE(r.degenerate());
  CHECK(rel(*r.lambda_hat, 36.0) < 1e-6);
  CHECK(rel(*r.rho_hat, 0.108) < 1e-6);
  CHECK(rel(r.c_hat, 3.0) < 1e-6);
  // recovery identities hold exactly
  CHECK(*r.lambda_hat * r.alpha2 == doctest::Approx(-r.alpha0).epsilon(1e-14));
  CHECK(*r.rho_hat * r.alpha2 == doctest::Approx(r.alpha1).epsilon(1e-14));
  CHECK(r.residuals.size() == c.t.eval_times.size());
}

TEST_CASE("stage II with clearance held fixed") {
  const auto c = exact_curves(ReferenceModel::eta_function(), 200);
  const auto r = stage2_psls(c.t, c.v, 3.0);
  CHECK(r.c_fixed);
  CHECK(r.c_hat == 3.0);
  CHECK(rel(*r.lambda_hat, 36.0) < 1e-6);
  CHECK(rel(*r.rho_hat, 0.108) < 1e-6);
}

TEST_CASE("stage II: duplicating every row leaves the coefficients alone") {
  const auto c = exact_curves(ReferenceModel::eta_function(), 60);
  auto twice = [](const SmoothEstimate& s) {
    SmoothEstimate d = s;
    d.eval_times.insert(d.eval_times.end(), s.eval_times.begin(), s.eval_times.end());
    d.value.insert(d.value.end(), s.value.begin(), s.value.end());
    d.deriv1.insert(d.deriv1.end(), s.deriv1.begin(), s.deriv1.end());
    d.deriv2.insert(d.deriv2.end(), s.deriv2.begin(), s.deriv2.end());
    d.boundary.insert(d.boundary.end(), s.boundary.begin(), s.boundary.end());
    return d;
  };
  // add noise so the fit is not exact
  SmoothEstimate vt = c.v;
  for (std::size_t i = 0; i < vt.deriv1.size(); ++i) vt.deriv1[i] += (i % 3 == 0 ? 50.0 : -25.0);
  const auto a = stage2_psls(c.t, vt);
  const auto b = stage2_psls(twice(c.t), twice(vt));
  CHECK(b.alpha0 == doctest::Approx(a.alpha0).epsilon(1e-9));
  CHECK(b.alpha1 == doctest::Approx(a.alpha1).epsilon(1e-9));
  CHECK(b.alpha2 == doctest::Approx(a.alpha2).epsilon(1e-9));
  CHECK(b.c_hat == doctest::Approx(a.c_hat).epsilon(1e-9));
}

TEST_CASE("stage II degenerate inputs") {
  const auto c = exact_curves(ReferenceModel::eta_function(), 40);
  SmoothEstimate v = c.v;
  std::fill(v.value.begin(), v.value.end(), 5.0);
  std::fill(v.deriv1.begin(), v.deriv1.end(), 0.0);
  // constant V is collinear with the intercept
  CHECK_THROWS_AS(stage2_psls(c.t, v), EstimationError);

  SmoothEstimate short_t = c.t, short_v = c.v;
  for (auto* s : {&short_t, &short_v}) {
    s->eval_times.resize(4);
    s->value.resize(4);
    s->deriv1.resize(4);
    s->deriv2.resize(4);
    s->boundary.resize(4);
  }
  CHECK_THROWS_AS(stage2_psls(short_t, short_v), DataError);
}

TEST_CASE("stage III is exact when eta lies in the spline span") {
  const auto spec = order2_spec();
  const auto eta = EtaFunction::spline(spec, kEtaCoeffs);
  const auto c = exact_curves(eta, 400);
  const auto r = stage3_semiparametric(c.t, c.v, kRef.c, spec);
  CHECK(rel(r.delta_hat, kRef.delta) < 1e-6);
  REQUIRE(r.eta_coeffs.size() == 3);
  for (int j = 0; j < 3; ++j) {
    CHECK(rel(r.eta_coeffs[j], kEtaCoeffs[j]) < 1e-6);
    CHECK(rel(r.production_coeffs[j], kRef.n_virions * kRef.delta * kEtaCoeffs[j]) < 1e-6);
  }
  CHECK(r.ratios_used == 3);
  CHECK(rel(r.n_virions_hat, kRef.n_virions) < 1e-6);

  // all three ratios agree, so median and mean give the same N
  double mean = 0.0;
  for (int j = 0; j < 3; ++j) mean += r.production_coeffs[j] / r.eta_coeffs[j] / 3.0;
  CHECK(mean / r.delta_hat == doctest::Approx(r.n_virions_hat).epsilon(1e-9));
}

TEST_CASE("stage III with delta held fixed") {
  const auto spec = order2_spec();
  const auto c = exact_curves(EtaFunction::spline(spec, kEtaCoeffs), 300);
  const auto r = stage3_semiparametric(c.t, c.v, kRef.c, spec, 0.5);
  CHECK(r.delta_fixed);
  CHECK(rel(r.n_virions_hat, kRef.n_virions) < 1e-6);
}

TEST_CASE("plug-in exactness through both stages") {
  const auto spec = order2_spec();
  const auto c = exact_curves(EtaFunction::spline(spec, kEtaCoeffs), 400);
  const auto s2 = stage2_psls(c.t, c.v);
  const auto s3 = stage3_semiparametric(c.t, c.v, s2.c_hat, spec);
  CHECK(rel(*s2.lambda_hat, kRef.lambda) < 1e-6);
  CHECK(rel(*s2.rho_hat, kRef.rho) < 1e-6);
  CHECK(rel(s2.c_hat, kRef.c) < 1e-6);
  CHECK(rel(s3.delta_hat, kRef.delta) < 1e-6);
  CHECK(rel(s3.n_virions_hat, kRef.n_virions) < 1e-6);
  // eta-hat is a spline in the same span
  const auto eta_hat = EtaFunction::spline(spec, s3.eta_coeffs);
  for (double t = 0.0; t <= 20.0; t += 0.5) {
    CHECK(eta_eval(eta_hat, t) == doctest::Approx(curve_eval(spec, s3.eta_coeffs, t)));
  }
}

TEST_CASE("stage III design rows") {
  const auto spec = order2_spec();
  const auto c = exact_curves(ReferenceModel::eta_function(), 20);
  const auto d = build_stage3_design(c.t, c.v, 3.0, spec);
  REQUIRE(d.z.size() == 21);
  for (std::size_t i = 0; i < d.z.size(); ++i) {
    CHECK(d.z[i] == doctest::Approx(c.v.deriv2[i] + 3.0 * c.v.deriv1[i]));
    CHECK(d.u_prod[i] == doctest::Approx(c.t.value[i] * c.v.value[i]));
    CHECK(d.basis[i].size() == 3);
  }
  CHECK_THROWS_AS(build_stage3_design(c.t, c.v, NAN, spec), DomainError);
}

TEST_CASE("stage III with no virus is rank deficient") {
  const auto spec = order2_spec();
  auto c = exact_curves(ReferenceModel::eta_function(), 40);
  for (auto* vec : {&c.v.value, &c.v.deriv1, &c.v.deriv2}) std::fill(vec->begin(), vec->end(), 0.0);
  CHECK_THROWS_AS(stage3_semiparametric(c.t, c.v, 3.0, spec), EstimationError);
}

TEST_CASE("warm_range rule") {
  const ParamRange global{1.0, 100.0};
  bool flagged = true;
  auto r = warm_range(10.0, 5.0, global, &flagged);
  CHECK_FALSE(flagged);
  CHECK(r.lo == doctest::Approx(2.0));
  CHECK(r.hi == doctest::Approx(50.0));
  r = warm_range(50.0, 5.0, global, &flagged);
  CHECK(r.hi == 100.0);
  CHECK(r.contains(50.0));
  for (double bad : {-3.0, 0.0, std::nan(""), 1e6}) {
    r = warm_range(bad, 5.0, global, &flagged);
    CHECK(flagged);
    CHECK(r.lo == global.lo);
    CHECK(r.hi == global.hi);
  }
}

TEST_CASE("run_mssb preconditions") {
  const auto spec = order2_spec();
  sim::ScenarioSpec sc;
  sc.n = 5;
  const auto obs = sim::truth_dataset(sc);
  CHECK_THROWS_AS(run_mssb(obs, spec), DataError);

  sc.n = 60;
  auto zero = sim::truth_dataset(sc);
  std::fill(zero.v_values.begin(), zero.v_values.end(), 0.0);
  CHECK_THROWS_AS(run_mssb(zero, spec), EstimationError);
}

TEST_CASE("run_mssb on dense noiseless data") {
  sim::ScenarioSpec sc;
  sc.n = 2000;
  const auto obs = sim::truth_dataset(sc);
  const auto spec = make_spec(2, 3, obs.span(), KnotSpacing::Log);
  const auto est = run_mssb(obs, spec);
  const auto& k = est.constants;
  CHECK(rel(k.lambda, kRef.lambda) < 0.05);
  CHECK(rel(k.rho, kRef.rho) < 0.05);
  CHECK(rel(k.n_virions, kRef.n_virions) < 0.05);
  CHECK(rel(k.delta, kRef.delta) < 0.05);
  CHECK(rel(k.c, kRef.c) < 0.05);
  CHECK(est.eta_coeffs.size() == 3);

  // every range brackets its estimate
  const double point[5] = {k.lambda, k.rho, k.n_virions, k.delta, k.c};
  REQUIRE(est.search_ranges.size() == 5 + 3 + 3);
  for (int i = 0; i < 5; ++i) CHECK(est.search_ranges[i].contains(point[i]));
  for (int j = 0; j < 3; ++j) {
    if (est.eta_coeffs[j] > 0.0) CHECK(est.search_ranges[5 + j].contains(est.eta_coeffs[j]));
  }
}
