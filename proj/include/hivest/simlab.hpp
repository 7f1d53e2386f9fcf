#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hivest/hiv_model.hpp"
#include "hivest/mssb.hpp"
#include "hivest/observations.hpp"
#include "hivest/parallel.hpp"
#include "hivest/snls.hpp"

namespace hivest::sim {

struct ScenarioSpec {
  std::string key = "custom";
  int n = 200;  // points per series
  double sigma1_sq = 20.0;
  double sigma2_sq = 100.0;
  Interval span{0.0, 20.0};
  State initial = ReferenceModel::initial;
  ConstantParams truth = ReferenceModel::params;
  EtaFunction eta = ReferenceModel::eta_function();
  int runs = 50;
  std::uint64_t seed = 20100601;

  // t_j = lo + (hi - lo) * j / n, j = 1..n
  std::vector<double> times() const;
  void validate() const;
};

// n30-s400-2500, n200-s20-100, ...
std::vector<std::string> scenario_keys();
ScenarioSpec scenario_from_key(const std::string& key);

// Noise-free trajectory of the scenario on its grid.
ObservationSet truth_dataset(const ScenarioSpec& scenario);
// Raw-scale Gaussian noise on both series; seeded by (scenario.seed, run).
ObservationSet generate_dataset(const ScenarioSpec& scenario, std::uint64_t run);

// mean |truth - est| / |truth| * 100
double compute_are(double truth, std::span<const double> estimates);

enum class Method { Mssb, Snls };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct StudySettings {
  int order = 2;
  int n_control = 3;
  KnotSpacing spacing = KnotSpacing::Log;
  MssbOptions mssb;
  SnlsOptions snls;
  int eta_grid_points = 200;
  ExecPolicy policy = ExecPolicy::Parallel;  // over runs
};

struct RunOutcome {
  std::optional<std::array<double, 5>> constants;
  std::vector<double> eta_coeffs;
  double eta_are = 0.0;
  std::string failure;
};

struct MethodReport {
  Method method = Method::Snls;
  std::array<double, 5> are{};  // lambda, rho, N, delta, c
  double eta_are = 0.0;
  std::vector<RunOutcome> runs;  // by run index
  int failures = 0;
};

struct AREReport {
  ScenarioSpec scenario;
  SplineSpec spline;
  std::vector<MethodReport> methods;
};

// Per run: generate, MSSB, then SNLS warm-started from MSSB (global bounds when
// MSSB fails). Failed runs are counted and left out of the averages.
AREReport run_study(const ScenarioSpec& scenario, std::span<const Method> methods,
                    const StudySettings& settings);

void write_are_csv(std::ostream& os, std::span<const AREReport> reports);

}  // namespace hivest::sim
