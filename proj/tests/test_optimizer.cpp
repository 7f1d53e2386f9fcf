#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "hivest/errors.hpp"
#include "hivest/optimizer.hpp"

using namespace hivest;
using namespace hivest::opt;

namespace {

SearchBox cube(std::size_t dim, double lo, double hi) {
  return {std::vector<double>(dim, lo), std::vector<double>(dim, hi)};
}

double sphere(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

double rastrigin(std::span<const double> x) {
  double s = 10.0 * static_cast<double>(x.size());
  for (double v : x) s += v * v - 10.0 * std::cos(2.0 * std::numbers::pi * v);
  return s;
}

double rosenbrock(std::span<const double> x) {
  return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
}

}  // namespace

TEST_CASE("search box checks") {
  CHECK_THROWS_AS((SearchBox{{0.0, 1.0}, {1.0, 1.0}}.validate()), ConfigError);
  CHECK_THROWS_AS((SearchBox{{0.0}, {INFINITY}}.validate()), ConfigError);
  CHECK_THROWS_AS((SearchBox{{0.0, 0.0}, {1.0}}.validate()), ConfigError);
  const SearchBox b{{-1.0, 10.0}, {1.0, 20.0}};
  const std::vector<double> x{0.5, 12.0};
  const auto u = b.to_unit(x);
  CHECK(u[0] == doctest::Approx(0.75));
  CHECK(u[1] == doctest::Approx(0.2));
  const auto back = b.from_unit(u);
  CHECK(back[0] == doctest::Approx(0.5));
  CHECK(back[1] == doctest::Approx(12.0));
  CHECK(b.contains(x));
  CHECK_FALSE(b.contains(std::vector<double>{2.0, 12.0}));
}

TEST_CASE("mutation arithmetic") {
  const std::vector<double> x1{1, 2}, x2{3, 4}, x3{1, 0};
  const auto v = de_mutant(x1, x2, x3, 0.5);
  CHECK(v == std::vector<double>{2.0, 4.0});
}

TEST_CASE("mutation indices are distinct and skip self") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5000; ++trial) {
    const int np = 4 + trial % 7;
    const int self = trial % np;
    const auto r = pick_mutation_indices(self, np, rng);
    const std::set<int> all{r[0], r[1], r[2], self};
    CHECK(all.size() == 4);
    for (int k : r) {
      CHECK(k >= 0);
      CHECK(k < np);
    }
  }
}

TEST_CASE("reflection stays inside the box") {
  CHECK(reflect_into(1.2, 0.0, 1.0) == doctest::Approx(0.8));
  CHECK(reflect_into(-0.3, 0.0, 1.0) == doctest::Approx(0.3));
  CHECK(reflect_into(0.4, 0.0, 1.0) == 0.4);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 10000; ++i) {
    const double r = reflect_into(u(rng), -1.0, 2.0);
    CHECK(r >= -1.0);
    CHECK(r <= 2.0);
  }
}

TEST_CASE("DE on the 5-D sphere") {
  DEConfig cfg;
  cfg.population_size = 30;
  cfg.max_generations = 200;
  cfg.seed = 11;
  const auto box = cube(5, -5.0, 5.0);
  const auto res = de_minimize(sphere, box, cfg);
  CHECK(res.best_value < 1e-6);
  CHECK(box.contains(res.best_point));
  CHECK(res.best_value == sphere(res.best_point));
  for (std::size_t g = 1; g < res.trace.size(); ++g) CHECK(res.trace[g] <= res.trace[g - 1]);
}

TEST_CASE("DE members never get worse") {
  for (auto [f, cr] : {std::pair{0.0, 1.0}, std::pair{0.8, 0.9}}) {
    DEConfig cfg;
    cfg.population_size = 12;
    cfg.max_generations = 60;
    cfg.amplification = f;
    cfg.crossover = cr;
    cfg.convergence_tol = 0.0;
    cfg.seed = 5;
    cfg.policy = ExecPolicy::Serial;
    std::vector<double> previous;
    int bad = 0;
    cfg.on_generation = [&](int, std::span<const double> values) {
      if (!previous.empty()) {
        for (std::size_t i = 0; i < values.size(); ++i) bad += values[i] > previous[i];
      }
      previous.assign(values.begin(), values.end());
    };
    const auto res = de_minimize(rastrigin, cube(3, -5.12, 5.12), cfg);
    CHECK(bad == 0);
    CHECK(previous.size() == 12);
    CHECK(res.best_value == *std::min_element(previous.begin(), previous.end()));
  }
}

TEST_CASE("DE rejects a population too small to mutate") {
  DEConfig cfg;
  cfg.population_size = 3;
  CHECK_THROWS_AS(DifferentialEvolution(cube(2, 0.0, 1.0), cfg), ConfigError);
}

TEST_CASE("segment probabilities") {
  const std::vector<double> flat{1, 1, 1, 1};
  for (double p : segment_probabilities(flat)) CHECK(p == doctest::Approx(0.25));
  const std::vector<double> skew{1, 2};
  const auto p = segment_probabilities(skew);
  CHECK(p[0] == doctest::Approx(2.0 / 3.0));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("visit history after seeding and while sampling") {
  const int m = 4;
  VisitHistory h(3, m);
  // vector j places every component in segment j
  for (int j = 0; j < m; ++j) h.record(std::vector<double>(3, (j + 0.5) / m));
  for (std::size_t i = 0; i < 3; ++i) {
    for (int j = 0; j < m; ++j) CHECK(h.count(i, j) == 1.0);
  }
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> pt(3);
    for (auto& x : pt) x = u(rng);
    h.record(pt);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto p = h.probabilities(i);
      double sum = 0.0;
      for (double q : p) sum += q;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
  // inverse CDF picks the first segment whose cumulative mass reaches z
  VisitHistory g(1, 2);
  g.record(std::vector<double>{0.1});
  g.record(std::vector<double>{0.7});
  g.record(std::vector<double>{0.8});  // counts (1, 2): p = (2/3, 1/3)
  CHECK(g.sample_segment(0, 0.5) == 0);
  CHECK(g.sample_segment(0, 0.7) == 1);
}

TEST_CASE("combination types") {
  const std::vector<double> x1{0, 0}, x2{2, 2}, r{0.5, 0.5};
  CHECK(combine(x1, x2, r, CombinationType::MinusD) == std::vector<double>{-1.0, -1.0});
  CHECK(combine(x1, x2, r, CombinationType::PlusD) == std::vector<double>{1.0, 1.0});
  CHECK(combine(x1, x2, r, CombinationType::FromWorse) == std::vector<double>{3.0, 3.0});
}

TEST_CASE("scatter search on the sphere") {
  ScatterConfig cfg;
  cfg.max_iterations = 60;
  cfg.seed = 4;
  const auto box = cube(4, -5.0, 5.0);
  const auto res = scatter_minimize(sphere, box, cfg);
  CHECK(res.best_value < 1e-2);
  CHECK(box.contains(res.best_point));
  CHECK(res.best_value == sphere(res.best_point));
}

TEST_CASE("local refinement") {
  const auto box1 = cube(1, -10.0, 10.0);
  auto quad = [](std::span<const double> x) { return (x[0] - 3.0) * (x[0] - 3.0); };
  const std::vector<double> zero{0.0};
  const auto q = local_refine(quad, zero, box1, 500);
  CHECK(std::abs(q.best_point[0] - 3.0) < 1e-8);

  // strict local minimum of a multimodal function
  const auto box5 = cube(2, -5.12, 5.12);
  // start sits at the local minimum near (1, 0) up to rounding
  const std::vector<double> local{0.99495906, 0.0};
  const double start_value = rastrigin(local);
  const auto r = local_refine(rastrigin, local, box5, 500);
  CHECK(r.best_value <= start_value);
  CHECK(std::abs(r.best_point[0] - local[0]) < 1e-6);
  CHECK(std::abs(r.best_point[1]) < 1e-6);

  // exact stationary point: nothing to gain
  const auto flat = local_refine(sphere, std::vector<double>{0.0, 0.0}, box5, 500);
  CHECK(flat.termination_reason == "no-improvement");
  CHECK(flat.best_point == std::vector<double>{0.0, 0.0});

  const auto rb = local_refine(rosenbrock, std::vector<double>{-1.2, 1.0}, cube(2, -5.0, 5.0), 500);
  CHECK(rb.best_value < 1e-6);
  CHECK(rb.evaluations <= 500);
}

TEST_CASE("local refinement respects the box") {
  auto pull = [](std::span<const double> x) { return (x[0] - 20.0) * (x[0] - 20.0) + x[1] * x[1]; };
  const auto box = cube(2, -1.0, 1.0);
  const auto r = local_refine(pull, std::vector<double>{0.0, 0.5}, box, 400);
  CHECK(box.contains(r.best_point));
  CHECK(r.best_point[0] == doctest::Approx(1.0));
}

TEST_CASE("Levenberg-Marquardt") {
  // exponential decay y = a exp(-b t)
  std::vector<double> t, y;
  for (int i = 0; i < 30; ++i) {
    t.push_back(0.2 * i);
    y.push_back(5.0 * std::exp(-0.7 * t.back()));
  }
  Residuals res = [&](std::span<const double> p, std::vector<double>& out) {
    out.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = y[i] - p[0] * std::exp(-p[1] * t[i]);
    return true;
  };
  const SearchBox box{{0.1, 0.01}, {20.0, 5.0}};
  const auto fit = levenberg_marquardt(res, std::vector<double>{1.0, 2.0}, box);
  CHECK(fit.best_point[0] == doctest::Approx(5.0).epsilon(1e-7));
  CHECK(fit.best_point[1] == doctest::Approx(0.7).epsilon(1e-7));
  CHECK(fit.best_value < 1e-14);
  for (std::size_t k = 1; k < fit.trace.size(); ++k) CHECK(fit.trace[k] <= fit.trace[k - 1]);

  Residuals rb = [](std::span<const double> p, std::vector<double>& out) {
    out = {10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]};
    return true;
  };
  const auto r2 = levenberg_marquardt(rb, std::vector<double>{-1.2, 1.0}, cube(2, -5.0, 5.0));
  CHECK(r2.best_value < 1e-12);

  // unevaluable region is treated as uphill
  Residuals guarded = [](std::span<const double> p, std::vector<double>& out) {
    if (p[0] > 2.0) return false;
    out = {p[0] - 1.5};
    return true;
  };
  const auto r3 = levenberg_marquardt(guarded, std::vector<double>{0.0}, cube(1, -5.0, 5.0));
  CHECK(r3.best_point[0] == doctest::Approx(1.5).epsilon(1e-8));
}

TEST_CASE("hybrid on 5-D Rastrigin") {
  HybridConfig cfg;
  const auto box = cube(5, -5.12, 5.12);
  const auto res = hybrid_minimize(rastrigin, box, cfg);
  CHECK(res.best_value < 1e-3);
  CHECK(box.contains(res.best_point));
}

TEST_CASE("hybrid on a constant objective") {
  HybridConfig cfg;
  cfg.de.max_generations = 40;
  cfg.scatter.max_iterations = 8;
  const auto box = cube(3, -1.0, 1.0);
  const auto res = hybrid_minimize([](std::span<const double>) { return 7.0; }, box, cfg);
  CHECK(res.best_value == 7.0);
  CHECK(box.contains(res.best_point));
  CHECK(res.termination_reason == "no-improvement");
}

TEST_CASE("same seed gives the same run, serial or parallel") {
  const auto box = cube(4, -5.12, 5.12);
  HybridConfig a;
  a.de.max_generations = 80;
  a.scatter.max_iterations = 12;
  a.seed = 99;
  a.policy = ExecPolicy::Serial;
  HybridConfig b = a;
  b.policy = ExecPolicy::Parallel;
  const auto ra = hybrid_minimize(rastrigin, box, a);
  const auto rb = hybrid_minimize(rastrigin, box, b);
  const auto rc = hybrid_minimize(rastrigin, box, a);
  CHECK(ra.trace == rb.trace);
  CHECK(ra.best_point == rb.best_point);
  CHECK(ra.evaluations == rb.evaluations);
  CHECK(ra.trace == rc.trace);

  HybridConfig d = a;
  d.seed = 100;
  CHECK(hybrid_minimize(rastrigin, box, d).trace != ra.trace);
}
