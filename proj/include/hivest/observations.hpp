#pragma once

#include <string>
#include <vector>

#include "hivest/bspline.hpp"

namespace hivest {

enum class Scale { Raw, Log10 };

std::string to_string(Scale scale);
Scale scale_from_string(const std::string& name);

// Total CD4 count and viral load, each on its own strictly increasing grid.
// Values are stored on the raw scale; `*_scale` says how residuals are formed.
struct ObservationSet {
  std::vector<double> t_times;
  std::vector<double> t_values;
  std::vector<double> v_times;
  std::vector<double> v_values;
  Scale t_scale = Scale::Raw;
  Scale v_scale = Scale::Raw;
  double t_weight = 1.0;
  double v_weight = 1.0;

  std::size_t size() const { return t_times.size() + v_times.size(); }
  // Earliest to latest observation over both series.
  Interval span() const;
  // Throws DataError on length mismatch, non-finite values, non-increasing
  // times, or nonpositive values on a log10 series.
  void validate() const;
};

}  // namespace hivest
