#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "hivest/errors.hpp"
#include "hivest/simlab.hpp"

using namespace hivest;
using namespace hivest::sim;

TEST_CASE("zero variances give the noise-free trajectory") {
  ScenarioSpec sc;
  sc.n = 40;
  sc.sigma1_sq = 0.0;
  sc.sigma2_sq = 0.0;
  const auto truth = truth_dataset(sc);
  const auto noisy = generate_dataset(sc, 7);
  CHECK(noisy.t_values == truth.t_values);
  CHECK(noisy.v_values == truth.v_values);
}

TEST_CASE("grid has n points at 20 j / n") {
  ScenarioSpec sc;
  sc.n = 30;
  const auto obs = truth_dataset(sc);
  REQUIRE(obs.t_times.size() == 30);
  REQUIRE(obs.v_times.size() == 30);
  for (int j = 1; j <= 30; ++j) CHECK(obs.t_times[j - 1] == doctest::Approx(20.0 * j / 30));
  CHECK(obs.t_times.back() == 20.0);
  // t = 0 is not observed
  CHECK(obs.t_times.front() > 0.0);
}

TEST_CASE("truth dataset matches the model at the first time point") {
  ScenarioSpec sc;
  sc.n = 200;
  const auto obs = truth_dataset(sc);
  const std::vector<double> grid{0.0, obs.t_times[0]};
  const auto sol = integrate(sc.initial, sc.truth, sc.eta, grid);
  CHECK(obs.t_values[0] == doctest::Approx(sol.states[1].total_cd4()).epsilon(1e-6));
  CHECK(obs.v_values[0] == doctest::Approx(sol.states[1].v).epsilon(1e-6));
}

TEST_CASE("datasets are reproducible per (seed, run)") {
  const auto sc = scenario_from_key("n50-s900-5625");
  const auto a = generate_dataset(sc, 3);
  const auto b = generate_dataset(sc, 3);
  const auto c = generate_dataset(sc, 4);
  CHECK(a.t_values == b.t_values);
  CHECK(a.v_values == b.v_values);
  CHECK(a.t_values != c.t_values);
  auto other = sc;
  other.seed += 1;
  CHECK(generate_dataset(other, 3).v_values != a.v_values);
}

TEST_CASE("noise has the requested variance") {
  ScenarioSpec sc;
  sc.n = 4000;
  sc.sigma1_sq = 400.0;
  sc.sigma2_sq = 2500.0;
  const auto truth = truth_dataset(sc);
  const auto obs = generate_dataset(sc, 0);
  double m1 = 0, m2 = 0, s1 = 0, s2 = 0;
  const double n = static_cast<double>(sc.n);
  for (int i = 0; i < sc.n; ++i) {
    const double e1 = obs.t_values[i] - truth.t_values[i];
    const double e2 = obs.v_values[i] - truth.v_values[i];
    m1 += e1 / n;
    m2 += e2 / n;
    s1 += e1 * e1 / n;
    s2 += e2 * e2 / n;
  }
  // a few standard errors
  CHECK(std::abs(m1) < 4.0 * std::sqrt(400.0 / n));
  CHECK(std::abs(m2) < 4.0 * std::sqrt(2500.0 / n));
  CHECK(s1 == doctest::Approx(400.0).epsilon(0.1));
  CHECK(s2 == doctest::Approx(2500.0).epsilon(0.1));
}

TEST_CASE("compute_are arithmetic") {
  const std::vector<double> same{2.0, 2.0, 2.0};
  CHECK(compute_are(2.0, same) == 0.0);
  const std::vector<double> pair{1.0, 3.0};
  CHECK(compute_are(2.0, pair) == doctest::Approx(50.0));
  const std::vector<double> neg{-1.0};
  CHECK(compute_are(-2.0, neg) == doctest::Approx(50.0));
  CHECK_THROWS_AS(compute_are(0.0, pair), DomainError);
  CHECK_THROWS_AS(compute_are(1.0, std::vector<double>{}), DomainError);
}

TEST_CASE("scenario keys") {
  const auto keys = scenario_keys();
  CHECK(keys.size() == 12);
  for (const auto& k : keys) CHECK(scenario_from_key(k).key == k);
  const auto s = scenario_from_key("n200-s20-100");
  CHECK(s.n == 200);
  CHECK(s.sigma1_sq == 20.0);
  CHECK(s.sigma2_sq == 100.0);
  const auto l = scenario_from_key("n30-s1600-10000");
  CHECK(l.n == 30);
  CHECK(l.sigma2_sq == 10000.0);
  CHECK_THROWS_AS(scenario_from_key("n200-s1-1"), ConfigError);
}

TEST_CASE("scenario validation") {
  ScenarioSpec sc;
  sc.sigma1_sq = -1.0;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = {};
  sc.n = 0;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = {};
  sc.runs = 0;
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  sc = {};
  sc.span = {5.0, 5.0};
  CHECK_THROWS_AS(sc.validate(), ConfigError);
  CHECK(method_from_string("mssb") == Method::Mssb);
  CHECK(to_string(Method::Snls) == "snls");
  CHECK_THROWS_AS(method_from_string("ols"), ConfigError);
}

TEST_CASE("MSSB-only study is the same serial and parallel") {
  auto sc = scenario_from_key("n100-s20-100");
  sc.runs = 3;
  const Method m[] = {Method::Mssb};
  StudySettings serial, par;
  serial.policy = ExecPolicy::Serial;
  par.policy = ExecPolicy::Parallel;
  const auto a = run_study(sc, m, serial);
  const auto b = run_study(sc, m, par);
  REQUIRE(a.methods.size() == 1);
  CHECK(a.methods[0].runs.size() == 3);
  for (int k = 0; k < 5; ++k) {
    if (std::isnan(a.methods[0].are[k])) {
      CHECK(std::isnan(b.methods[0].are[k]));
    } else {
      CHECK(a.methods[0].are[k] == b.methods[0].are[k]);
    }
  }
  CHECK(a.methods[0].failures == b.methods[0].failures);
  CHECK_THROWS_AS(run_study(sc, std::span<const Method>{}, serial), ConfigError);
}

TEST_CASE("noise-free study recovers the constants") {
  ScenarioSpec sc;
  sc.key = "clean";
  sc.n = 200;
  sc.sigma1_sq = 0.0;
  sc.sigma2_sq = 0.0;
  sc.runs = 1;
  const Method m[] = {Method::Mssb, Method::Snls};
  StudySettings st;
  const auto rep = run_study(sc, m, st);
  REQUIRE(rep.methods.size() == 2);
  const auto& snls = rep.methods[1];
  CHECK(snls.method == Method::Snls);
  REQUIRE(snls.failures == 0);
  // eta is a cosine, so an order-2 spline is only close; rho is the loosest
  CHECK(snls.are[0] < 1.0);
  CHECK(snls.are[1] < 1.5);
  CHECK(snls.are[2] < 1.0);
  CHECK(snls.are[3] < 1.0);
  CHECK(snls.are[4] < 1.0);
  CHECK(snls.eta_are < 10.0);

  std::ostringstream os;
  write_are_csv(os, std::span<const AREReport>(&rep, 1));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "scenario,n,sigma1_sq,sigma2_sq,method,runs,failures,lambda,rho,N,delta,c,eta");
  std::getline(is, line);
  CHECK(line.rfind("clean,200,0,0,mssb,1,", 0) == 0);
  std::getline(is, line);
  CHECK(line.rfind("clean,200,0,0,snls,1,0,", 0) == 0);
}
