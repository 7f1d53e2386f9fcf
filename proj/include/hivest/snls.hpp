#pragma once

#include <atomic>
#include <exception>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hivest/bspline.hpp"
#include "hivest/hiv_model.hpp"
#include "hivest/info_criteria.hpp"
#include "hivest/mssb.hpp"
#include "hivest/observations.hpp"
#include "hivest/optimizer.hpp"

namespace hivest {

// Flat parameter vector (lambda, rho, N, delta, c, a_1..a_s [, T_U(0), T_I(0), V(0)]).
struct ThetaLayout {
  int n_control = 0;
  bool with_initial_state = false;

  static constexpr std::size_t kConstants = 5;
  std::size_t size() const { return kConstants + n_control + (with_initial_state ? 3 : 0); }
  std::size_t eta_offset() const { return kConstants; }
  std::size_t initial_offset() const { return kConstants + n_control; }
  std::vector<std::string> names() const;

  static ConstantParams constants(std::span<const double> theta);
  std::span<const double> eta_coeffs(std::span<const double> theta) const;
  // Initial state from theta when it carries one, otherwise `known`.
  State initial_state(std::span<const double> theta, const State& known) const;
};

// Theta with a box and a mask of entries held at their current values.
struct ThetaVector {
  ThetaLayout layout;
  std::vector<double> values;
  std::vector<bool> fixed;
  opt::SearchBox box;

  std::vector<std::size_t> free_indices() const;
  // Throws ConfigError on size mismatches, an invalid box, or values outside
  // it (fixed entries may sit anywhere).
  void validate() const;
};

struct SolverSettings {
  double step = kDefaultStep;
  double blowup_cap = kDefaultBlowupCap;
  double penalty = 1e12;
};

// Weighted residual sum of squares of the spline-reparameterised model against
// both series. Integrates once over the union grid starting at the spline
// domain's left end, where the initial state applies. Divergent or invalid
// trajectories map to penalty * (1 + distance to the box centre in unit
// coordinates) so the optimizer can keep going.
class RssObjective {
 public:
  RssObjective(const ObservationSet& obs, const SplineSpec& spec, ThetaLayout layout,
               State known_initial, SolverSettings settings = {});

  double operator()(std::span<const double> theta) const;

  // sqrt(weight) * (observed - model) on the fitting scale, CD4 then viral
  // load. False when the trajectory diverges or leaves the log domain.
  bool residuals(std::span<const double> theta, std::vector<double>& out) const;

  // Box used for the penalty's distance term (defaults to none: distance 0).
  void set_penalty_box(const opt::SearchBox& box) { penalty_box_ = box; }

  struct Fitted {
    bool ok = false;
    std::vector<double> grid;   // union of observation times plus the start
    std::vector<double> total;  // T = T_U + T_I on grid
    std::vector<double> viral;  // V on grid
    std::vector<double> t_fit;  // at the CD4 observation times
    std::vector<double> v_fit;  // at the viral-load observation times
  };
  Fitted fitted(std::span<const double> theta) const;

  const ThetaLayout& layout() const { return layout_; }
  const SplineSpec& spec() const { return spec_; }
  long evaluations() const { return evaluations_->load(); }
  long penalised() const { return penalised_->load(); }
  double penalty_floor() const { return settings_.penalty; }

 private:
  bool solve(std::span<const double> theta, std::vector<State>& states) const;
  double penalty(std::span<const double> theta) const;

  ObservationSet obs_;
  SplineSpec spec_;
  ThetaLayout layout_;
  State known_initial_;
  SolverSettings settings_;
  StepPlan plan_;
  std::vector<std::size_t> t_index_;  // position of each CD4 time in the grid
  std::vector<std::size_t> v_index_;
  std::vector<double> t_obs_scaled_;
  std::vector<double> v_obs_scaled_;
  // basis values at the three RK4 stages of every step
  std::vector<int> stage_first_;
  std::vector<double> stage_basis_;
  std::optional<opt::SearchBox> penalty_box_;
  std::shared_ptr<std::atomic<long>> evaluations_;
  std::shared_ptr<std::atomic<long>> penalised_;
};

struct SnlsOptions {
  SolverSettings solver;
  opt::HybridConfig optimizer;
  // Levenberg-Marquardt on the residuals from the hybrid incumbent and from the
  // warm start; the better end point wins. Off: hybrid result as is.
  bool polish = true;
  opt::LmConfig lm;
  // extra Levenberg-Marquardt starts spread over the polish box (seeded)
  int lm_starts = 64;
  // best few first-round end points resumed with a longer iteration cap
  int lm_continue = 4;
  // Seeded Levenberg-Marquardt starts on log10 residuals of both series; the
  // best end point joins the polish starts. The raw-scale RSS of V is too
  // rugged for random starts to find the right basin reliably. Used only
  // when a series is fitted on the raw scale and all values are positive.
  // 0 turns it off.
  int log_stage_starts = 16;
  // polish box: hull of the search box and these bounds (none: search box)
  std::optional<GlobalBounds> polish_bounds = GlobalBounds{};
  // Initial state used when theta does not carry one.
  std::optional<State> known_initial;
  int eta_grid_points = 200;
};

// Search box, starting point (also the value of fixed entries) and fixed mask.
struct WarmStart {
  ThetaVector theta;
  std::string source;  // "mssb", "config", "bootstrap" ...
};

struct WarmPolicy {
  // Stage III of MSSB (N, delta, eta) is too noisy under measurement error to
  // centre a range on; search those over the global bounds instead.
  bool widen_stage3 = true;
  double range_factor = 5.0;
  GlobalBounds bounds;
};

// Builds a warm start from MSSB ranges; point estimates outside their range
// (flagged ones) start at the range's geometric or arithmetic centre.
WarmStart warm_start_from_mssb(const MssbEstimate& mssb, bool with_initial_state,
                               const std::vector<std::pair<std::string, double>>& fixed = {},
                               const WarmPolicy& policy = {});

// Hull of theta's box and the global bounds, entry by entry.
opt::SearchBox widened_box(const ThetaVector& theta, const GlobalBounds& bounds);

// Holds the named entries at the given values (ConfigError on unknown names).
void apply_fixed(ThetaVector& theta, const std::vector<std::pair<std::string, double>>& fixed);

// Whole global box, started at its centre; used when no MSSB estimate exists.
WarmStart warm_start_from_bounds(int n_control, bool with_initial_state,
                                 const GlobalBounds& bounds = {});

// Stage I-III estimate turned into a warm start; falls back to the global box
// when MSSB throws (the message is kept).
struct PipelineStart {
  WarmStart warm;
  std::optional<MssbEstimate> mssb;
  std::string mssb_error;
  std::exception_ptr mssb_exception;
};

PipelineStart mssb_warm_start(const ObservationSet& obs, const SplineSpec& spec,
                              const MssbOptions& mssb_options, bool with_initial_state,
                              const std::vector<std::pair<std::string, double>>& fixed = {},
                              const WarmPolicy& policy = {});

struct FitResult {
  std::string method;
  SplineSpec spec;
  ThetaVector theta;  // estimates, mask and box
  State initial_state;
  double rss = 0.0;
  int n_obs = 0;
  int n_free = 0;
  InfoCriteria criteria;
  std::vector<double> fitted_t;
  std::vector<double> fitted_v;
  std::vector<double> traj_times;
  std::vector<double> traj_total;
  std::vector<double> traj_viral;
  std::vector<double> eta_times;
  std::vector<double> eta_values;
  long evaluations = 0;
  double penalty_fraction = 0.0;
  std::vector<double> trace;
  std::string termination_reason;
  std::uint64_t seed = 0;
  double solver_step = 0.0;
  std::vector<std::string> notes;

  ConstantParams constants() const { return ThetaLayout::constants(theta.values); }
};

// Hybrid minimisation of the RSS over the free entries of warm.theta. Throws
// EstimationError when no evaluation escaped the penalty region.
FitResult fit_snls(const ObservationSet& obs, const SplineSpec& spec, const WarmStart& warm,
                   const SnlsOptions& options);

// Fills the trajectory, eta-curve and criteria fields of a result whose
// theta is already set (used for MSSB-only output and fixed-theta fits).
FitResult evaluate_fit(const ObservationSet& obs, const SplineSpec& spec,
                       const ThetaVector& theta, const SnlsOptions& options, std::string method);

struct ModelCandidate {
  int order = 0;
  int n_control = 0;
};

struct RankedModel {
  ModelCandidate candidate;
  bool available = false;
  std::string reason;  // why unavailable
  InfoCriteria criteria;
  double rss = 0.0;
  int n_free = 0;
  int rank = 0;  // 1 = best AICc; 0 when unavailable
};

struct SelectionResult {
  std::vector<RankedModel> models;  // grid order
  std::size_t best = 0;             // index into models
  FitResult best_fit;
};

using WarmProvider = std::function<WarmStart(const SplineSpec&)>;

// Fits every candidate (order, control count), ranking by AICc. Candidates with
// s < k, N - K - 1 <= 0, or a failed fit are reported unavailable. Throws
// EstimationError when none succeeds.
SelectionResult select_model(const ObservationSet& obs, std::span<const ModelCandidate> grid,
                             KnotSpacing spacing, Interval domain, const WarmProvider& warm,
                             const SnlsOptions& options,
                             ExecPolicy policy = ExecPolicy::Serial);

struct BootstrapOptions {
  int replicates = 100;
  std::uint64_t seed = 7;
  ExecPolicy policy = ExecPolicy::Parallel;
};

struct BootstrapResult {
  std::vector<std::string> names;  // free parameters
  std::vector<double> estimate;
  std::vector<double> lower;  // 2.5% percentile
  std::vector<double> upper;  // 97.5% percentile
  std::vector<std::vector<double>> replicates;  // successful replicates x free params
  std::vector<double> eta_times;
  std::vector<double> eta_lower;
  std::vector<double> eta_upper;
  int requested = 0;
  int succeeded = 0;
  bool unreliable = false;  // more than 20% of replicate fits failed
  bool sanity_ok = true;    // estimate inside its interval for >= 90% of parameters
  std::uint64_t seed = 0;
};

// Residual bootstrap: centred residuals are resampled per series on the fitting
// scale, added to the fitted values and refitted from the best point.
BootstrapResult bootstrap_ci(const ObservationSet& obs, const FitResult& best,
                             const SnlsOptions& options, const BootstrapOptions& boot);

// Linear-interpolation percentile (type 7) of an unsorted sample.
double percentile(std::vector<double> sample, double p);

}  // namespace hivest
