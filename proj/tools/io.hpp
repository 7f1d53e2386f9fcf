#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "hivest/simlab.hpp"
#include "hivest/snls.hpp"
#include "json.hpp"

namespace hivest::cli {

using nlohmann::json;

// Reads `t,cd4,viral_load`. Blank cells are unobserved; lines starting with '#'
// are skipped. DataError names the offending line.
ObservationSet read_observations_csv(const std::string& path, Scale t_scale, Scale v_scale);
ObservationSet parse_observations_csv(std::istream& in, Scale t_scale, Scale v_scale,
                                      const std::string& source = "input");

// Union of both time grids, blank where a series has no observation.
void write_observations_csv(std::ostream& os, const ObservationSet& obs);

// "# " before every line of text.
void write_comment_block(std::ostream& os, const std::string& text);

json spline_to_json(const SplineSpec& spec);
SplineSpec spline_from_json(const json& j);

json fit_to_json(const FitResult& fit, const ObservationSet& obs);

// Theta (values, mask, box), spline and initial state as written by fit_to_json.
struct StoredFit {
  SplineSpec spec;
  ThetaVector theta;
  State initial_state;
  bool initial_estimated = false;
  Scale t_scale = Scale::Raw;
  Scale v_scale = Scale::Raw;
  std::string data_path;
};
StoredFit stored_fit_from_json(const json& j);

json bootstrap_to_json(const BootstrapResult& boot);
json scenario_truth_json(const sim::ScenarioSpec& scenario, std::uint64_t run);
// Per-run estimates, failures and the pointwise eta ARE curve of a study.
json are_report_to_json(const sim::AREReport& report, int eta_points = 200);

void write_trajectory_csv(std::ostream& os, const FitResult& fit);
// t, eta and, when a band is given, lo95 and hi95.
void write_eta_csv(std::ostream& os, const FitResult& fit, const BootstrapResult* band = nullptr);
void write_select_csv(std::ostream& os, const SelectionResult& sel);

// Shortest round-trip decimal form.
std::string format_double(double x);

}  // namespace hivest::cli
