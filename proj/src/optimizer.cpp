#include "hivest/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "hivest/errors.hpp"

namespace hivest::opt {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double uniform01(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Objective in unit coordinates; non-finite values count as +inf.
struct UnitObjective {
  const Objective& objective;
  const SearchBox& box;

  double operator()(std::span<const double> u) const {
    const auto x = box.from_unit(u);
    const double f = objective(x);
    return std::isfinite(f) ? f : kInf;
  }
};

std::vector<double> evaluate_rows(const Objective& objective, const SearchBox& box,
                                  std::span<const double> unit_rows, ExecPolicy policy) {
  const UnitObjective unit{objective, box};
  auto values = evaluate_batch(
      [&](std::span<const double> u) { return unit(u); }, unit_rows, box.dim(), policy);
  return values;
}

double sq_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------

void SearchBox::validate() const {
  if (lower.size() != upper.size()) throw ConfigError("search box bounds differ in length");
  if (lower.empty()) throw ConfigError("search box has no dimensions");
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || !(lower[i] < upper[i])) {
      std::ostringstream os;
      os << "search box dimension " << i << " invalid: [" << lower[i] << ", " << upper[i] << "]";
      throw ConfigError(os.str());
    }
  }
}

bool SearchBox::contains(std::span<const double> x) const {
  if (x.size() != dim()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] >= lower[i] && x[i] <= upper[i])) return false;
  }
  return true;
}

std::vector<double> SearchBox::to_unit(std::span<const double> x) const {
  std::vector<double> u(dim());
  for (std::size_t i = 0; i < dim(); ++i) {
    u[i] = std::clamp((x[i] - lower[i]) / (upper[i] - lower[i]), 0.0, 1.0);
  }
  return u;
}

std::vector<double> SearchBox::from_unit(std::span<const double> u) const {
  std::vector<double> x(dim());
  for (std::size_t i = 0; i < dim(); ++i) {
    x[i] = std::clamp(lower[i] + u[i] * (upper[i] - lower[i]), lower[i], upper[i]);
  }
  return x;
}

std::vector<double> SearchBox::center() const {
  std::vector<double> c(dim());
  for (std::size_t i = 0; i < dim(); ++i) c[i] = 0.5 * (lower[i] + upper[i]);
  return c;
}

// ---------------------------------------------------------------------------
// Differential evolution

std::array<int, 3> pick_mutation_indices(int self, int population, std::mt19937_64& rng) {
  if (population < 4) throw ConfigError("differential evolution needs a population of >= 4");
  std::uniform_int_distribution<int> pick(0, population - 1);
  std::array<int, 3> r{};
  for (int k = 0; k < 3; ++k) {
    int candidate;
    do {
      candidate = pick(rng);
    } while (candidate == self || std::find(r.begin(), r.begin() + k, candidate) != r.begin() + k);
    r[k] = candidate;
  }
  return r;
}

std::vector<double> de_mutant(std::span<const double> x1, std::span<const double> x2,
                              std::span<const double> x3, double amplification) {
  std::vector<double> v(x1.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x1[i] + amplification * (x2[i] - x3[i]);
  return v;
}

double reflect_into(double v, double lo, double hi) {
  if (v >= lo && v <= hi) return v;
  const double width = hi - lo;
  double u = std::fmod(std::abs(v - lo), 2.0 * width);
  if (u > width) u = 2.0 * width - u;
  return lo + u;
}

DifferentialEvolution::DifferentialEvolution(const SearchBox& box, DEConfig config)
    : box_(box), cfg_(std::move(config)), dim_(box.dim()), rng_(cfg_.seed) {
  box_.validate();
  np_ = cfg_.population_size > 0 ? cfg_.population_size
                                 : std::max(40, 10 * static_cast<int>(dim_));
  if (np_ < 4) throw ConfigError("differential evolution needs a population of >= 4");
  // F = 0 is allowed: mutants are then copies of x_r1
  if (!(cfg_.amplification >= 0.0) || !std::isfinite(cfg_.amplification)) {
    throw ConfigError("DE amplification factor must be finite and >= 0");
  }
  if (!(cfg_.crossover >= 0.0 && cfg_.crossover <= 1.0)) {
    throw ConfigError("DE crossover ratio must lie in [0, 1]");
  }
}

void DifferentialEvolution::initialize(const Objective& objective,
                                       std::span<const std::vector<double>> seeds) {
  pop_.assign(static_cast<std::size_t>(np_) * dim_, 0.0);
  for (auto& u : pop_) u = uniform01(rng_);
  const std::size_t n_seeds = std::min<std::size_t>(seeds.size(), static_cast<std::size_t>(np_));
  for (std::size_t s = 0; s < n_seeds; ++s) {
    const auto u = box_.to_unit(seeds[s]);
    std::copy(u.begin(), u.end(), pop_.begin() + static_cast<std::ptrdiff_t>(s * dim_));
  }
  values_ = evaluate_rows(objective, box_, pop_, cfg_.policy);
  evaluations_ += np_;
  generation_ = 0;
  trace_.push_back(values_[best_index()]);
}

int DifferentialEvolution::run(const Objective& objective, int generations) {
  std::vector<double> trials(pop_.size());
  std::uniform_int_distribution<int> pick_dim(0, static_cast<int>(dim_) - 1);
  int done = 0;
  for (; done < generations; ++done) {
    if (converged()) break;
    // all random draws happen here, in member order, before any evaluation
    for (int i = 0; i < np_; ++i) {
      const auto r = pick_mutation_indices(i, np_, rng_);
      const auto row = [&](int k) {
        return std::span<const double>(pop_).subspan(static_cast<std::size_t>(k) * dim_, dim_);
      };
      const auto v = de_mutant(row(r[0]), row(r[1]), row(r[2]), cfg_.amplification);
      const int forced = pick_dim(rng_);
      double* trial = trials.data() + static_cast<std::size_t>(i) * dim_;
      const auto parent = row(i);
      for (std::size_t d = 0; d < dim_; ++d) {
        const bool take = uniform01(rng_) <= cfg_.crossover || static_cast<int>(d) == forced;
        trial[d] = take ? reflect_into(v[d], 0.0, 1.0) : parent[d];
      }
    }
    const auto trial_values = evaluate_rows(objective, box_, trials, cfg_.policy);
    evaluations_ += np_;
    for (int i = 0; i < np_; ++i) {
      if (trial_values[i] <= values_[i]) {
        std::copy_n(trials.begin() + static_cast<std::ptrdiff_t>(i) * dim_, dim_,
                    pop_.begin() + static_cast<std::ptrdiff_t>(i) * dim_);
        values_[i] = trial_values[i];
      }
    }
    ++generation_;
    trace_.push_back(values_[best_index()]);
    if (cfg_.on_generation) cfg_.on_generation(generation_, values_);
  }
  return done;
}

void DifferentialEvolution::inject(std::span<const double> point, double value) {
  const auto worst = std::max_element(values_.begin(), values_.end()) - values_.begin();
  if (!(value < values_[worst])) return;
  const auto u = box_.to_unit(point);
  std::copy(u.begin(), u.end(), pop_.begin() + worst * static_cast<std::ptrdiff_t>(dim_));
  values_[worst] = value;
}

std::vector<double> DifferentialEvolution::member(int i) const {
  return box_.from_unit(
      std::span<const double>(pop_).subspan(static_cast<std::size_t>(i) * dim_, dim_));
}

int DifferentialEvolution::best_index() const {
  return static_cast<int>(std::min_element(values_.begin(), values_.end()) - values_.begin());
}

bool DifferentialEvolution::converged() const {
  const auto [lo, hi] = std::minmax_element(values_.begin(), values_.end());
  if (!std::isfinite(*hi)) return false;
  return *hi - *lo <= cfg_.convergence_tol * (1.0 + std::abs(*lo));
}

OptimResult de_minimize(const Objective& objective, const SearchBox& box, const DEConfig& config) {
  DifferentialEvolution de(box, config);
  de.initialize(objective);
  const int ran = de.run(objective, config.max_generations);
  OptimResult res;
  const int best = de.best_index();
  res.best_point = de.member(best);
  res.best_value = de.values()[best];
  res.evaluations = de.evaluations();
  res.trace = de.trace();
  res.termination_reason = ran < config.max_generations ? "converged" : "max-generations";
  return res;
}

// ---------------------------------------------------------------------------
// Scatter search

std::vector<double> segment_probabilities(std::span<const double> visit_counts) {
  std::vector<double> p(visit_counts.size());
  double total = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (!(visit_counts[j] > 0.0)) throw DomainError("segment visit counts must be positive");
    p[j] = 1.0 / visit_counts[j];
    total += p[j];
  }
  for (auto& x : p) x /= total;
  return p;
}

VisitHistory::VisitHistory(std::size_t dim, int segments)
    : dim_(dim), m_(segments), counts_(dim * static_cast<std::size_t>(segments), 0.0) {
  if (segments < 1) throw ConfigError("scatter search needs at least one segment");
}

void VisitHistory::record(std::span<const double> unit_point) {
  for (std::size_t i = 0; i < dim_; ++i) {
    const int j = std::clamp(static_cast<int>(unit_point[i] * m_), 0, m_ - 1);
    counts_[i * static_cast<std::size_t>(m_) + j] += 1.0;
  }
}

std::vector<double> VisitHistory::probabilities(std::size_t dimension) const {
  return segment_probabilities(
      std::span<const double>(counts_).subspan(dimension * static_cast<std::size_t>(m_), m_));
}

int VisitHistory::sample_segment(std::size_t dimension, double z) const {
  const auto p = probabilities(dimension);
  double cumulative = 0.0;
  for (int k = 0; k < m_; ++k) {
    cumulative += p[k];
    if (z <= cumulative) return k;
  }
  return m_ - 1;
}

double VisitHistory::count(std::size_t dimension, int segment) const {
  return counts_[dimension * static_cast<std::size_t>(m_) + segment];
}

std::vector<double> combine(std::span<const double> better, std::span<const double> worse,
                            std::span<const double> r, CombinationType type) {
  std::vector<double> out(better.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = r[i] * (worse[i] - better[i]);
    switch (type) {
      case CombinationType::MinusD: out[i] = better[i] - d; break;
      case CombinationType::PlusD: out[i] = better[i] + d; break;
      case CombinationType::FromWorse: out[i] = worse[i] + d; break;
    }
  }
  return out;
}

ScatterSearch::ScatterSearch(const SearchBox& box, ScatterConfig config)
    : box_(box),
      cfg_(config),
      dim_(box.dim()),
      rng_(config.seed),
      history_(box.dim(), config.segments) {
  box_.validate();
  first_population_ = cfg_.first_population > 0 ? cfg_.first_population
                                                 : 10 * static_cast<int>(dim_);
  first_population_ = std::max(first_population_, cfg_.segments);
  if (cfg_.elite_count < 2 || cfg_.elite_count % 2 != 0) {
    throw ConfigError("scatter search elite count must be even and >= 2");
  }
  elite_count_ = std::min(cfg_.elite_count, first_population_ - first_population_ % 2);
  if (elite_count_ < 2) throw ConfigError("scatter search first population too small");
}

std::vector<std::vector<double>> ScatterSearch::generate(int count, bool seed_segments) {
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(count));
  const int m = cfg_.segments;
  const double width = 1.0 / m;
  int start = 0;
  if (seed_segments) {
    // vector j puts every component in segment j: all visit counts become one
    for (int j = 0; j < m && j < count; ++j) {
      std::vector<double> u(dim_);
      for (std::size_t i = 0; i < dim_; ++i) u[i] = (j + uniform01(rng_)) * width;
      history_.record(u);
      out.push_back(std::move(u));
    }
    start = static_cast<int>(out.size());
  }
  for (int n = start; n < count; ++n) {
    std::vector<double> u(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
      const int k = history_.sample_segment(i, uniform01(rng_));
      u[i] = (k + uniform01(rng_)) * width;
    }
    history_.record(u);
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<double> ScatterSearch::evaluate(const Objective& objective,
                                            const std::vector<std::vector<double>>& unit_points) {
  std::vector<double> flat;
  flat.reserve(unit_points.size() * dim_);
  for (const auto& u : unit_points) flat.insert(flat.end(), u.begin(), u.end());
  evaluations_ += static_cast<long>(unit_points.size());
  return evaluate_rows(objective, box_, flat, cfg_.policy);
}

void ScatterSearch::choose_elites(std::vector<Elite> kept, std::vector<Elite> candidates) {
  const std::size_t half = static_cast<std::size_t>(elite_count_ / 2);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Elite& a, const Elite& b) { return a.value < b.value; });
  // fitness half: best of the kept elites and the candidates
  std::vector<Elite> pool = std::move(kept);
  std::vector<Elite> chosen;
  for (auto& c : candidates) pool.push_back(std::move(c));
  std::stable_sort(pool.begin(), pool.end(),
                   [](const Elite& a, const Elite& b) { return a.value < b.value; });
  std::size_t next = 0;
  for (; next < pool.size() && chosen.size() < half; ++next) chosen.push_back(pool[next]);
  std::vector<Elite> rest(pool.begin() + static_cast<std::ptrdiff_t>(next), pool.end());

  // diverse half: repeatedly the candidate farthest (max-min distance) from
  // everything chosen so far
  std::vector<double> min_dist(rest.size(), kInf);
  for (std::size_t r = 0; r < rest.size(); ++r) {
    for (const auto& e : chosen) min_dist[r] = std::min(min_dist[r], sq_distance(rest[r].unit, e.unit));
  }
  while (chosen.size() < static_cast<std::size_t>(elite_count_) && !rest.empty()) {
    const auto far = std::max_element(min_dist.begin(), min_dist.end()) - min_dist.begin();
    chosen.push_back(rest[far]);
    rest.erase(rest.begin() + far);
    min_dist.erase(min_dist.begin() + far);
    for (std::size_t r = 0; r < rest.size(); ++r) {
      min_dist[r] = std::min(min_dist[r], sq_distance(rest[r].unit, chosen.back().unit));
    }
  }
  std::stable_sort(chosen.begin(), chosen.end(),
                   [](const Elite& a, const Elite& b) { return a.value < b.value; });
  elites_ = std::move(chosen);
}

void ScatterSearch::initialize(const Objective& objective) {
  auto points = generate(first_population_, true);
  const auto values = evaluate(objective, points);
  std::vector<Elite> candidates;
  for (std::size_t i = 0; i < points.size(); ++i) {
    candidates.push_back({std::move(points[i]), values[i]});
  }
  choose_elites({}, std::move(candidates));
  trace_.push_back(best_value());
}

bool ScatterSearch::recombination_pass(const Objective& objective) {
  const std::size_t n = elites_.size();
  const std::size_t half = n / 2;
  std::vector<std::vector<double>> children;
  std::vector<double> r(dim_);
  auto child = [&](std::size_t a, std::size_t b, CombinationType type) {
    for (auto& x : r) x = uniform01(rng_);
    auto c = combine(elites_[a].unit, elites_[b].unit, r, type);
    for (auto& x : c) x = std::clamp(x, 0.0, 1.0);
    children.push_back(std::move(c));
  };
  // elites_ is sorted best first, so a < b means a is the better vector and
  // the first `half` entries form the fitness half
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      if (b < half) {
        child(a, b, CombinationType::MinusD);
        child(a, b, CombinationType::FromWorse);
        child(a, b, CombinationType::PlusD);
        child(a, b, CombinationType::PlusD);
      } else if (a < half) {
        child(a, b, CombinationType::MinusD);
        child(a, b, CombinationType::PlusD);
        child(a, b, CombinationType::FromWorse);
      } else {
        child(a, b, CombinationType::PlusD);
        child(a, b, uniform01(rng_) < 0.5 ? CombinationType::MinusD : CombinationType::FromWorse);
      }
    }
  }
  for (const auto& c : children) history_.record(c);
  const auto values = evaluate(objective, children);

  std::vector<std::size_t> order(children.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return values[x] < values[y]; });
  bool replaced = false;
  for (const std::size_t idx : order) {
    const double v = values[idx];
    if (!(v < elites_.back().value)) break;
    bool duplicate = false;
    for (const auto& e : elites_) {
      if (sq_distance(e.unit, children[idx]) < 1e-24) {
        duplicate = true;
        break;
      }
    }
    if (duplicate) continue;
    elites_.back() = {children[idx], v};
    std::stable_sort(elites_.begin(), elites_.end(),
                     [](const Elite& a, const Elite& b) { return a.value < b.value; });
    replaced = true;
  }
  return replaced;
}

void ScatterSearch::regenerate_diverse(const Objective& objective) {
  const std::size_t half = elites_.size() / 2;
  std::vector<Elite> kept(elites_.begin(), elites_.begin() + static_cast<std::ptrdiff_t>(half));
  auto points = generate(first_population_, false);
  const auto values = evaluate(objective, points);
  std::vector<Elite> candidates;
  for (std::size_t i = 0; i < points.size(); ++i) {
    candidates.push_back({std::move(points[i]), values[i]});
  }
  // the kept fitness half stays; new vectors compete only for the diverse half
  const std::size_t want = static_cast<std::size_t>(elite_count_) - kept.size();
  std::vector<Elite> chosen = kept;
  std::vector<double> min_dist(candidates.size(), kInf);
  for (std::size_t r = 0; r < candidates.size(); ++r) {
    for (const auto& e : chosen) {
      min_dist[r] = std::min(min_dist[r], sq_distance(candidates[r].unit, e.unit));
    }
  }
  for (std::size_t added = 0; added < want && !candidates.empty(); ++added) {
    const auto far = std::max_element(min_dist.begin(), min_dist.end()) - min_dist.begin();
    chosen.push_back(candidates[far]);
    candidates.erase(candidates.begin() + far);
    min_dist.erase(min_dist.begin() + far);
    for (std::size_t r = 0; r < candidates.size(); ++r) {
      min_dist[r] = std::min(min_dist[r], sq_distance(candidates[r].unit, chosen.back().unit));
    }
  }
  std::stable_sort(chosen.begin(), chosen.end(),
                   [](const Elite& a, const Elite& b) { return a.value < b.value; });
  elites_ = std::move(chosen);
}

int ScatterSearch::run(const Objective& objective, int passes) {
  if (!initialized()) initialize(objective);
  int done = 0;
  for (; done < passes; ++done) {
    const bool replaced = recombination_pass(objective);
    trace_.push_back(best_value());
    if (!replaced && done + 1 < passes) regenerate_diverse(objective);
  }
  return done;
}

void ScatterSearch::inject(std::span<const double> point, double value) {
  if (elites_.empty() || !(value < elites_.back().value)) return;
  auto u = box_.to_unit(point);
  for (const auto& e : elites_) {
    if (sq_distance(e.unit, u) < 1e-24) return;
  }
  elites_.back() = {std::move(u), value};
  std::stable_sort(elites_.begin(), elites_.end(),
                   [](const Elite& a, const Elite& b) { return a.value < b.value; });
}

std::vector<double> ScatterSearch::best_point() const { return box_.from_unit(elites_.front().unit); }

double ScatterSearch::best_value() const { return elites_.front().value; }

OptimResult scatter_minimize(const Objective& objective, const SearchBox& box,
                             const ScatterConfig& config) {
  ScatterSearch ss(box, config);
  ss.initialize(objective);
  ss.run(objective, config.max_iterations);
  OptimResult res;
  res.best_point = ss.best_point();
  res.best_value = ss.best_value();
  res.evaluations = ss.evaluations();
  res.trace = ss.trace();
  res.termination_reason = "max-iterations";
  return res;
}

// ---------------------------------------------------------------------------
// Local refinement

OptimResult local_refine(const Objective& objective, std::span<const double> start,
                         const SearchBox& box, const RefineConfig& cfg) {
  box.validate();
  if (!box.contains(start)) throw DomainError("local refinement must start inside the box");
  const std::size_t q = box.dim();
  const UnitObjective f_unit{objective, box};
  long evals = 0;
  auto f = [&](const std::vector<double>& u) {
    ++evals;
    return f_unit(u);
  };

  std::vector<double> x = box.to_unit(start);
  // the unit round trip can move the point by an ulp; report the true start
  const double f_start = f(x);
  double fx = f_start;
  OptimResult res;
  res.trace.push_back(fx);

  auto gradient = [&](const std::vector<double>& u, std::vector<double>& g) {
    // central differences, one-sided at the faces; evaluated as one batch
    const double h = cfg.fd_step;
    std::vector<double> pts;
    pts.reserve(2 * q * q);
    std::vector<double> lo_x(q), hi_x(q);
    for (std::size_t i = 0; i < q; ++i) {
      hi_x[i] = std::min(u[i] + h, 1.0);
      lo_x[i] = std::max(u[i] - h, 0.0);
      for (double xi : {hi_x[i], lo_x[i]}) {
        auto p = u;
        p[i] = xi;
        pts.insert(pts.end(), p.begin(), p.end());
      }
    }
    const auto vals = evaluate_batch([&](std::span<const double> p) { return f_unit(p); }, pts, q,
                                     cfg.policy);
    evals += static_cast<long>(vals.size());
    for (std::size_t i = 0; i < q; ++i) g[i] = (vals[2 * i] - vals[2 * i + 1]) / (hi_x[i] - lo_x[i]);
  };

  std::vector<double> g(q), g_new(q), hinv(q * q, 0.0);
  auto reset_h = [&] {
    std::fill(hinv.begin(), hinv.end(), 0.0);
    for (std::size_t i = 0; i < q; ++i) hinv[i * q + i] = 1.0;
  };
  reset_h();
  bool fresh_h = true;
  if (!std::isfinite(fx)) {
    res.best_point.assign(start.begin(), start.end());
    res.best_value = fx;
    res.evaluations = evals;
    res.termination_reason = "no-improvement";
    return res;
  }
  gradient(x, g);

  std::string reason = "budget";
  while (evals + static_cast<long>(2 * q) + 1 <= cfg.budget) {
    // variables pinned at a face with the gradient pushing outwards
    std::vector<bool> active(q);
    double gnorm = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      active[i] = (x[i] <= 0.0 && g[i] > 0.0) || (x[i] >= 1.0 && g[i] < 0.0);
      if (!active[i]) gnorm = std::max(gnorm, std::abs(g[i]));
    }
    if (gnorm <= cfg.gradient_tol * (1.0 + std::abs(fx))) {
      reason = "converged";
      break;
    }
    std::vector<double> d(q, 0.0);
    for (std::size_t i = 0; i < q; ++i) {
      if (active[i]) continue;
      for (std::size_t j = 0; j < q; ++j) {
        if (!active[j]) d[i] -= hinv[i * q + j] * g[j];
      }
    }
    double slope = 0.0;
    for (std::size_t i = 0; i < q; ++i) slope += g[i] * d[i];
    if (!(slope < 0.0)) {
      reset_h();
      fresh_h = true;
      for (std::size_t i = 0; i < q; ++i) d[i] = active[i] ? 0.0 : -g[i];
    }
    if (fresh_h) {
      // first step after a reset: move at most 10% of the box
      double dn = 0.0;
      for (double di : d) dn = std::max(dn, std::abs(di));
      if (dn > 0.1) for (auto& di : d) di *= 0.1 / dn;
    }

    double alpha = 1.0;
    bool accepted = false;
    std::vector<double> x_new(q);
    double f_new = fx;
    while (evals < cfg.budget) {
      double decrease = 0.0;
      double step_len = 0.0;
      for (std::size_t i = 0; i < q; ++i) {
        x_new[i] = std::clamp(x[i] + alpha * d[i], 0.0, 1.0);
        decrease += g[i] * (x_new[i] - x[i]);
        step_len = std::max(step_len, std::abs(x_new[i] - x[i]));
      }
      if (step_len <= cfg.step_tol) break;
      f_new = f(x_new);
      if (f_new <= fx + 1e-4 * decrease && f_new < fx) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      if (!fresh_h) {
        reset_h();
        fresh_h = true;
        continue;
      }
      reason = "stalled";
      break;
    }
    if (evals + static_cast<long>(2 * q) > cfg.budget) {
      x = x_new;
      fx = f_new;
      res.trace.push_back(fx);
      break;
    }
    gradient(x_new, g_new);
    std::vector<double> s(q), y(q);
    double sy = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      s[i] = x_new[i] - x[i];
      y[i] = g_new[i] - g[i];
      sy += s[i] * y[i];
    }
    if (sy > 1e-16) {
      // inverse BFGS update: H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
      const double rho = 1.0 / sy;
      std::vector<double> hy(q, 0.0);
      for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < q; ++j) hy[i] += hinv[i * q + j] * y[j];
      }
      double yhy = 0.0;
      for (std::size_t i = 0; i < q; ++i) yhy += y[i] * hy[i];
      for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < q; ++j) {
          hinv[i * q + j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
      }
      fresh_h = false;
    }
    x = x_new;
    fx = f_new;
    g = g_new;
    res.trace.push_back(fx);
  }

  res.evaluations = evals;
  if (fx < f_start) {
    res.best_point = box.from_unit(x);
    res.best_value = fx;
    res.termination_reason = reason;
  } else {
    res.best_point.assign(start.begin(), start.end());
    res.best_value = objective(res.best_point);
    ++res.evaluations;
    res.termination_reason = "no-improvement";
  }
  return res;
}

OptimResult local_refine(const Objective& objective, std::span<const double> start,
                         const SearchBox& box, long budget) {
  RefineConfig cfg;
  cfg.budget = budget;
  return local_refine(objective, start, box, cfg);
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

OptimResult levenberg_marquardt(const Residuals& residuals, std::span<const double> start,
                                const SearchBox& box, const LmConfig& cfg) {
  box.validate();
  if (!box.contains(start)) throw DomainError("Levenberg-Marquardt must start inside the box");
  const std::size_t q = box.dim();
  long evals = 0;
  OptimResult res;
  res.best_point.assign(start.begin(), start.end());

  std::vector<double> r0;
  ++evals;
  if (!residuals(start, r0) || r0.empty()) {
    res.best_value = std::numeric_limits<double>::infinity();
    res.evaluations = evals;
    res.termination_reason = "no-improvement";
    return res;
  }
  const auto m = static_cast<Eigen::Index>(r0.size());
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(start.data(), static_cast<Eigen::Index>(q));
  Eigen::VectorXd r = Eigen::Map<Eigen::VectorXd>(r0.data(), m);
  double cost = r.squaredNorm();
  const double start_cost = cost;
  res.trace.push_back(cost);
  Eigen::VectorXd lo(q), hi(q), width(q);
  for (std::size_t i = 0; i < q; ++i) {
    lo[i] = box.lower[i];
    hi[i] = box.upper[i];
    width[i] = hi[i] - lo[i];
  }

  auto eval_at = [&](const Eigen::VectorXd& z, Eigen::VectorXd& out) {
    std::vector<double> buf;
    if (!residuals(std::span<const double>(z.data(), q), buf)) return false;
    if (static_cast<Eigen::Index>(buf.size()) != m) return false;
    out = Eigen::Map<Eigen::VectorXd>(buf.data(), m);
    return out.allFinite();
  };

  Eigen::MatrixXd jac(m, static_cast<Eigen::Index>(q));
  double mu = 1e-3;
  std::string reason = "max-iterations";
  for (int it = 0; it < cfg.max_iterations; ++it) {
    // forward differences, stepping inwards at the upper face
    std::vector<Eigen::VectorXd> cols(q);
    std::vector<char> ok(q, 0);
    std::vector<double> steps(q);
    for (std::size_t j = 0; j < q; ++j) {
      const double h = cfg.fd_step * width[j];
      steps[j] = x[j] + h <= hi[j] ? h : -h;
    }
    for_each_index(q, cfg.policy, [&](std::size_t j) {
      Eigen::VectorXd xp = x;
      xp[j] += steps[j];
      ok[j] = eval_at(xp, cols[j]);
    });
    evals += static_cast<long>(q);
    for (std::size_t j = 0; j < q; ++j) {
      if (ok[j]) {
        jac.col(j) = (cols[j] - r) / steps[j];
      } else {
        jac.col(j).setZero();
      }
    }

    const Eigen::MatrixXd a = jac.transpose() * jac;
    const Eigen::VectorXd g = jac.transpose() * r;
    bool accepted = false;
    double gain = 0.0;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::MatrixXd damped = a;
      for (std::size_t j = 0; j < q; ++j) {
        damped(j, j) += mu * std::max(a(j, j), 1e-300);
      }
      const Eigen::VectorXd step = damped.ldlt().solve(-g);
      const Eigen::VectorXd xn = (x + step).cwiseMax(lo).cwiseMin(hi);
      if ((xn - x).cwiseAbs().maxCoeff() == 0.0) {
        mu *= 4.0;
        continue;
      }
      Eigen::VectorXd rn;
      ++evals;
      if (eval_at(xn, rn)) {
        const double cn = rn.squaredNorm();
        if (cn < cost) {
          gain = (cost - cn) / cost;
          x = xn;
          r = rn;
          cost = cn;
          mu = std::max(mu / 3.0, 1e-12);
          accepted = true;
          break;
        }
      }
      mu *= 4.0;
    }
    res.trace.push_back(cost);
    if (!accepted) {
      reason = "converged";
      break;
    }
    if (gain < cfg.rel_tol) {
      reason = "converged";
      break;
    }
  }

  res.evaluations = evals;
  if (!(cost < start_cost)) {
    res.best_value = start_cost;
    res.termination_reason = "no-improvement";
    return res;
  }
  res.best_point.assign(x.data(), x.data() + q);
  res.best_value = cost;
  res.termination_reason = reason;
  return res;
}

// ---------------------------------------------------------------------------
// Hybrid

OptimResult hybrid_minimize(const Objective& objective, const SearchBox& box,
                            const HybridConfig& config,
                            std::span<const std::vector<double>> start_points) {
  box.validate();
  const int epochs = std::max(1, config.epochs);
  DEConfig de_cfg = config.de;
  de_cfg.seed = derive_seed(config.seed, 0);
  de_cfg.policy = config.policy;
  ScatterConfig ss_cfg = config.scatter;
  ss_cfg.seed = derive_seed(config.seed, 1);
  ss_cfg.policy = config.policy;

  DifferentialEvolution de(box, de_cfg);
  ScatterSearch ss(box, ss_cfg);
  de.initialize(objective, start_points);

  std::vector<double> best_x = de.member(de.best_index());
  double best_f = de.values()[de.best_index()];
  const double first_f = best_f;
  long refine_evals = 0;
  OptimResult res;
  auto offer = [&](const std::vector<double>& x, double fx) {
    if (fx < best_f) {
      best_f = fx;
      best_x = x;
    }
  };

  const int gens_per_epoch = std::max(1, de_cfg.max_generations / epochs);
  const int passes_per_epoch = std::max(1, ss_cfg.max_iterations / epochs);
  const long refine_per_epoch = config.refine_budget / epochs;
  bool de_converged = false;
  for (int e = 0; e < epochs; ++e) {
    if (!de_converged) {
      de.run(objective, gens_per_epoch);
      de_converged = de.converged();
      offer(de.member(de.best_index()), de.values()[de.best_index()]);
    }

    if (!ss.initialized()) ss.initialize(objective);
    ss.inject(best_x, best_f);
    ss.run(objective, passes_per_epoch);
    offer(ss.best_point(), ss.best_value());

    if (refine_per_epoch > 2 * static_cast<long>(box.dim()) + 1) {
      RefineConfig rc;
      rc.budget = refine_per_epoch;
      rc.policy = config.policy;
      const auto refined = local_refine(objective, best_x, box, rc);
      refine_evals += refined.evaluations;
      offer(refined.best_point, refined.best_value);
    }
    de.inject(best_x, best_f);
    ss.inject(best_x, best_f);
    res.trace.push_back(best_f);
  }

  res.best_point = best_x;
  res.best_value = best_f;
  res.evaluations = de.evaluations() + ss.evaluations() + refine_evals;
  res.termination_reason = best_f < first_f ? (de_converged ? "converged" : "budget")
                                            : "no-improvement";
  return res;
}

}  // namespace hivest::opt
