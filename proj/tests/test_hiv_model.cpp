#include <cmath>
#include <vector>

#include "doctest.h"
#include "hivest/errors.hpp"
#include "hivest/hiv_model.hpp"

using namespace hivest;

namespace {

const ConstantParams kRef = ReferenceModel::params;

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

std::vector<double> grid(double lo, double hi, int n) {
  std::vector<double> t(n + 1);
  for (int i = 0; i <= n; ++i) t[i] = lo + (hi - lo) * i / n;
  return t;
}

}  // namespace

TEST_CASE("rhs at the reference initial state") {
  const auto eta = ReferenceModel::eta_function();
  const State d = rhs(ReferenceModel::initial, 0.0, kRef, eta);
  CHECK(d.t_u == doctest::Approx(-568.8).epsilon(1e-12));
  // infection term 9e-6 * 600 * 1e5 = 540
  CHECK(d.t_i == doctest::Approx(540.0 - 0.5 * 30.0).epsilon(1e-12));
  CHECK(d.v == doctest::Approx(1000.0 * 0.5 * 30.0 - 3.0 * 1e5).epsilon(1e-12));
}

TEST_CASE("rhs decoupled and zero-state cases") {
  const auto zero = EtaFunction::constant(0.0, {0.0, 20.0});
  ConstantParams p = kRef;
  p.lambda = 0.0;
  const State d = rhs({0.0, 30.0, 0.0}, 1.0, p, zero);
  CHECK(d.t_u == 0.0);
  CHECK(d.t_i == doctest::Approx(-15.0));
  CHECK(d.v == doctest::Approx(15000.0));

  const State z = rhs({0.0, 0.0, 0.0}, 0.0, kRef, ReferenceModel::eta_function());
  CHECK(z.t_u == 36.0);
  CHECK(z.t_i == 0.0);
  CHECK(z.v == 0.0);
}

TEST_CASE("rhs rejects non-finite input") {
  const auto eta = ReferenceModel::eta_function();
  CHECK_THROWS_AS(rhs({NAN, 1.0, 1.0}, 0.0, kRef, eta), DomainError);
  CHECK_THROWS_AS(rhs({1.0, INFINITY, 1.0}, 0.0, kRef, eta), DomainError);
}

TEST_CASE("reference eta values and domain") {
  CHECK(ReferenceModel::eta(0.0) == doctest::Approx(9.0e-6).epsilon(1e-12));
  CHECK(ReferenceModel::eta(1000.0) == doctest::Approx(1.71e-4).epsilon(1e-12));
  const auto eta = ReferenceModel::eta_function();
  CHECK_THROWS_AS(eta_eval(eta, 25.0), DomainError);
  CHECK_THROWS_AS(eta_eval(eta, -0.1), DomainError);
}

TEST_CASE("zero spline eta evaluates to zero") {
  const auto spec = make_spec(3, 5, {0.0, 20.0}, KnotSpacing::Log);
  const auto eta = EtaFunction::spline(spec, std::vector<double>(5, 0.0));
  for (double t : grid(0.0, 20.0, 40)) CHECK(eta_eval(eta, t) == 0.0);
}

TEST_CASE("integrate returns the initial state for a single output time") {
  const std::vector<double> t{0.0};
  const auto sol = integrate(ReferenceModel::initial, kRef, ReferenceModel::eta_function(), t);
  REQUIRE(sol.states.size() == 1);
  CHECK(sol.states[0].t_u == 600.0);
  CHECK(sol.states[0].t_i == 30.0);
  CHECK(sol.states[0].v == 1e5);
}

TEST_CASE("linear system with eta = 0 matches the closed form") {
  const auto zero = EtaFunction::constant(0.0, {0.0, 20.0});
  const ConstantParams p = kRef;
  const State x0 = ReferenceModel::initial;
  const auto t = grid(0.0, 20.0, 200);
  const auto sol = integrate(x0, p, zero, t, 0.01);
  double worst = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double s = t[i];
    const double tu = p.lambda / p.rho + (x0.t_u - p.lambda / p.rho) * std::exp(-p.rho * s);
    const double ti = x0.t_i * std::exp(-p.delta * s);
    const double v = x0.v * std::exp(-p.c * s) + p.n_virions * p.delta * x0.t_i *
                                                     (std::exp(-p.delta * s) - std::exp(-p.c * s)) /
                                                     (p.c - p.delta);
    worst = std::max({worst, rel(sol.states[i].t_u, tu), rel(sol.states[i].t_i, ti),
                      rel(sol.states[i].v, v)});
  }
  CHECK(worst < 1e-5);

  // T_I(2) with rho = lambda = 0
  ConstantParams q = p;
  q.lambda = 0.0;
  q.rho = 0.0;
  const std::vector<double> t2{0.0, 2.0};
  const auto s2 = integrate(x0, q, zero, t2, 0.01);
  CHECK(rel(s2.states[1].t_i, 30.0 * std::exp(-1.0)) < 1e-6);
  CHECK(s2.states[1].t_i == doctest::Approx(11.0364).epsilon(1e-5));
}

TEST_CASE("step halving on the reference problem") {
  const auto eta = ReferenceModel::eta_function();
  const auto t = grid(0.0, 20.0, 200);
  const auto a = integrate(ReferenceModel::initial, kRef, eta, t, 0.01);
  const auto b = integrate(ReferenceModel::initial, kRef, eta, t, 0.005);
  const auto c = integrate(ReferenceModel::initial, kRef, eta, t, 0.0025);
  double d_ab = 0.0, d_bc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const State& x = a.states[i];
    const State& y = b.states[i];
    const State& z = c.states[i];
    d_ab = std::max({d_ab, rel(x.t_u, y.t_u), rel(x.t_i, y.t_i), rel(x.v, y.v)});
    d_bc = std::max({d_bc, rel(y.t_u, z.t_u), rel(y.t_i, z.t_i), rel(y.v, z.v)});
  }
  CHECK(d_ab < 1e-6);
  CHECK(d_ab > 0.0);
  // fourth order: ratio near 16, at least 4
  CHECK(d_ab < 16.0 * 4.0 * d_bc);
  CHECK(d_ab > 16.0 / 4.0 * d_bc);
}

TEST_CASE("reference trajectory stays nonnegative") {
  const auto eta = ReferenceModel::eta_function();
  const auto t = grid(0.0, 20.0, 2000);
  const auto sol = integrate(ReferenceModel::initial, kRef, eta, t, 0.01);
  double max_u = 0.0, max_i = 0.0, max_v = 0.0;
  for (const auto& x : sol.states) {
    max_u = std::max(max_u, x.t_u);
    max_i = std::max(max_i, x.t_i);
    max_v = std::max(max_v, x.v);
    CHECK(x.t_u >= -1e-8 * max_u);
    CHECK(x.t_i >= -1e-8 * max_i);
    CHECK(x.v >= -1e-8 * max_v);
  }
}

TEST_CASE("output on the step grid equals repeated rk4_step") {
  const auto eta = ReferenceModel::eta_function();
  const double h = 0.01;
  std::vector<double> t(51);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = h * static_cast<double>(i);
  const auto sol = integrate(ReferenceModel::initial, kRef, eta, t, h);
  State x = ReferenceModel::initial;
  for (std::size_t i = 1; i < t.size(); ++i) {
    x = rk4_step(x, t[i - 1], t[i] - t[i - 1], kRef, eta);
    CHECK(sol.states[i].t_u == x.t_u);
    CHECK(sol.states[i].t_i == x.t_i);
    CHECK(sol.states[i].v == x.v);
  }
}

TEST_CASE("off-grid output times are hit exactly") {
  const std::vector<double> t{0.0, 0.013, 0.5, 0.5001, 3.14159};
  const StepPlan plan(t, 0.01);
  double clock = 0.0;
  int hits = 0;
  for (const auto& s : plan.steps) {
    CHECK(s.t == doctest::Approx(clock).epsilon(1e-14));
    CHECK(s.h > 0.0);
    CHECK(s.h <= 0.01 + 1e-15);
    clock = s.t + s.h;
    if (s.output_index >= 0) {
      CHECK(clock == doctest::Approx(t[static_cast<std::size_t>(s.output_index)]).epsilon(1e-14));
      ++hits;
    }
  }
  CHECK(hits == 4);
}

TEST_CASE("blowup names the failure time") {
  ConstantParams p = kRef;
  p.n_virions = 1e9;
  p.c = 0.0;
  const auto eta = EtaFunction::constant(1e-3, {0.0, 20.0});
  const std::vector<double> t{0.0, 20.0};
  try {
    integrate(ReferenceModel::initial, p, eta, t, 0.01, 1e12);
    FAIL("expected IntegrationBlowup");
  } catch (const IntegrationBlowup& e) {
    CHECK(e.time() > 0.0);
    CHECK(e.time() <= 20.0);
  }
}

TEST_CASE("integrate preconditions") {
  const auto eta = ReferenceModel::eta_function();
  const std::vector<double> bad{0.0, 2.0, 1.0};
  CHECK_THROWS_AS(integrate(ReferenceModel::initial, kRef, eta, bad), DataError);
  const std::vector<double> ok{0.0, 1.0};
  CHECK_THROWS_AS(integrate(ReferenceModel::initial, kRef, eta, ok, 0.0), ConfigError);
  const std::vector<double> outside{0.0, 30.0};
  CHECK_THROWS_AS(integrate(ReferenceModel::initial, kRef, eta, outside), DomainError);
}
