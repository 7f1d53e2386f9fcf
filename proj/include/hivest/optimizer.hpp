#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hivest/parallel.hpp"

namespace hivest::opt {

// Axis-aligned box l_i <= x_i <= u_i. The optimizers work internally in unit
// coordinates u = (x - l) / (u - l).
struct SearchBox {
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t dim() const { return lower.size(); }
  // Throws ConfigError unless lower < upper componentwise and all finite.
  void validate() const;
  bool contains(std::span<const double> x) const;
  std::vector<double> to_unit(std::span<const double> x) const;
  std::vector<double> from_unit(std::span<const double> u) const;
  std::vector<double> center() const;
};

struct OptimResult {
  std::vector<double> best_point;
  double best_value = 0.0;
  long evaluations = 0;
  std::vector<double> trace;  // best value after each generation / pass / epoch
  std::string termination_reason;
};

// ---------------------------------------------------------------------------
// Differential evolution (rand/1/bin)

struct DEConfig {
  int population_size = 0;  // 0 selects max(40, 10 q)
  double amplification = 0.8;
  double crossover = 0.9;
  int max_generations = 400;
  // stop once max - min population value <= tol * (1 + |best|)
  double convergence_tol = 1e-13;
  std::uint64_t seed = 1;
  ExecPolicy policy = ExecPolicy::Parallel;
  // called after every selection step with the population's values
  std::function<void(int generation, std::span<const double> values)> on_generation;
};

// Three distinct indices in [0, population), all different from `self`.
std::array<int, 3> pick_mutation_indices(int self, int population, std::mt19937_64& rng);

// v = x1 + F (x2 - x3)
std::vector<double> de_mutant(std::span<const double> x1, std::span<const double> x2,
                              std::span<const double> x3, double amplification);

// Folds v back into [lo, hi] by mirror reflection at the faces.
double reflect_into(double v, double lo, double hi);

class DifferentialEvolution {
 public:
  DifferentialEvolution(const SearchBox& box, DEConfig config);

  // Uniform random population; `seeds` (natural coordinates) overwrite the
  // first members.
  void initialize(const Objective& objective, std::span<const std::vector<double>> seeds = {});
  // Returns the number of generations actually run.
  int run(const Objective& objective, int generations);
  // Replaces the worst member when the point is better than it.
  void inject(std::span<const double> point, double value);

  const std::vector<double>& values() const { return values_; }
  std::vector<double> member(int i) const;
  int population_size() const { return np_; }
  int best_index() const;
  long evaluations() const { return evaluations_; }
  bool converged() const;
  const std::vector<double>& trace() const { return trace_; }

 private:
  SearchBox box_;
  DEConfig cfg_;
  int np_;
  std::size_t dim_;
  std::mt19937_64 rng_;
  std::vector<double> pop_;  // unit coordinates, row-major np x dim
  std::vector<double> values_;
  long evaluations_ = 0;
  int generation_ = 0;
  std::vector<double> trace_;
};

OptimResult de_minimize(const Objective& objective, const SearchBox& box, const DEConfig& config);

// ---------------------------------------------------------------------------
// Scatter search

struct ScatterConfig {
  int segments = 4;
  int first_population = 0;  // 0 selects 10 q
  int elite_count = 20;
  int max_iterations = 40;  // recombination passes
  std::uint64_t seed = 2;
  ExecPolicy policy = ExecPolicy::Parallel;
};

// p_j = (1 / f_j) / sum_k (1 / f_k)
std::vector<double> segment_probabilities(std::span<const double> visit_counts);

// Visit counts f_ij of segment j of dimension i (unit coordinates split into m
// equal segments).
class VisitHistory {
 public:
  VisitHistory(std::size_t dim, int segments);

  void record(std::span<const double> unit_point);
  std::vector<double> probabilities(std::size_t dimension) const;
  // Smallest segment k with z <= sum_{j <= k} p_j.
  int sample_segment(std::size_t dimension, double z) const;
  double count(std::size_t dimension, int segment) const;
  int segments() const { return m_; }

 private:
  std::size_t dim_;
  int m_;
  std::vector<double> counts_;
};

enum class CombinationType { MinusD = 1, PlusD = 2, FromWorse = 3 };

// With d = r o (x2 - x1): type 1 = x1 - d, type 2 = x1 + d, type 3 = x2 + d.
std::vector<double> combine(std::span<const double> better, std::span<const double> worse,
                            std::span<const double> r, CombinationType type);

class ScatterSearch {
 public:
  ScatterSearch(const SearchBox& box, ScatterConfig config);

  // Builds and evaluates the first population and the reference set.
  void initialize(const Objective& objective);
  // Recombination passes; a pass without elite replacement triggers
  // regeneration of the diverse half. Returns passes run.
  int run(const Objective& objective, int passes);
  void inject(std::span<const double> point, double value);

  std::vector<double> best_point() const;
  double best_value() const;
  long evaluations() const { return evaluations_; }
  const VisitHistory& history() const { return history_; }
  const std::vector<double>& trace() const { return trace_; }
  bool initialized() const { return !elites_.empty(); }

 private:
  struct Elite {
    std::vector<double> unit;
    double value;
  };
  std::vector<std::vector<double>> generate(int count, bool seed_segments);
  std::vector<double> evaluate(const Objective& objective,
                               const std::vector<std::vector<double>>& unit_points);
  void choose_elites(std::vector<Elite> kept, std::vector<Elite> candidates);
  bool recombination_pass(const Objective& objective);
  void regenerate_diverse(const Objective& objective);

  SearchBox box_;
  ScatterConfig cfg_;
  std::size_t dim_;
  int first_population_;
  int elite_count_;
  std::mt19937_64 rng_;
  VisitHistory history_;
  std::vector<Elite> elites_;  // sorted by value, best first
  long evaluations_ = 0;
  std::vector<double> trace_;
};

OptimResult scatter_minimize(const Objective& objective, const SearchBox& box,
                             const ScatterConfig& config);

// ---------------------------------------------------------------------------
// Local refinement: projected BFGS with central finite-difference gradients

struct RefineConfig {
  long budget = 500;         // objective evaluations
  double fd_step = 5e-6;     // in unit coordinates
  double gradient_tol = 1e-12;
  double step_tol = 1e-13;
  ExecPolicy policy = ExecPolicy::Serial;
};

OptimResult local_refine(const Objective& objective, std::span<const double> start,
                         const SearchBox& box, const RefineConfig& config);
OptimResult local_refine(const Objective& objective, std::span<const double> start,
                         const SearchBox& box, long budget);

// ---------------------------------------------------------------------------
// Box-constrained Levenberg-Marquardt for sum-of-squares objectives, with a
// forward-difference Jacobian. The residual callback returns false where the
// model cannot be evaluated; such trial points are rejected like uphill ones.

using Residuals = std::function<bool(std::span<const double>, std::vector<double>&)>;

struct LmConfig {
  int max_iterations = 200;
  double fd_step = 1e-6;  // in unit coordinates
  double rel_tol = 1e-10;  // stop when an accepted step gains less than this
  ExecPolicy policy = ExecPolicy::Serial;
};

// best_value is the sum of squared residuals; trace holds it per iteration.
OptimResult levenberg_marquardt(const Residuals& residuals, std::span<const double> start,
                                const SearchBox& box, const LmConfig& config = {});

// ---------------------------------------------------------------------------
// Hybrid: interleaved DE and scatter-search epochs sharing the incumbent, each
// followed by local refinement of the incumbent.

struct HybridConfig {
  DEConfig de;
  ScatterConfig scatter;
  long refine_budget = 2000;  // split evenly over the epochs
  int epochs = 4;
  std::uint64_t seed = 42;
  ExecPolicy policy = ExecPolicy::Parallel;
};

OptimResult hybrid_minimize(const Objective& objective, const SearchBox& box,
                            const HybridConfig& config,
                            std::span<const std::vector<double>> start_points = {});

}  // namespace hivest::opt
