#include "hivest/observations.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hivest/errors.hpp"

namespace hivest {

std::string to_string(Scale scale) { return scale == Scale::Log10 ? "log10" : "raw"; }

Scale scale_from_string(const std::string& name) {
  if (name == "raw") return Scale::Raw;
  if (name == "log10") return Scale::Log10;
  throw ConfigError("unknown scale '" + name + "' (expected raw or log10)");
}

Interval ObservationSet::span() const {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  if (!t_times.empty()) {
    lo = std::min(lo, t_times.front());
    hi = std::max(hi, t_times.back());
  }
  if (!v_times.empty()) {
    lo = std::min(lo, v_times.front());
    hi = std::max(hi, v_times.back());
  }
  return {lo, hi};
}

namespace {

void check_one(const char* name, const std::vector<double>& times,
               const std::vector<double>& values, Scale scale) {
  if (times.size() != values.size()) {
    throw DataError(std::string(name) + " series: times and values differ in length");
  }
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || !std::isfinite(values[i])) {
      std::ostringstream os;
      os << name << " series: non-finite entry at index " << i;
      throw DataError(os.str());
    }
    if (i > 0 && !(times[i] > times[i - 1])) {
      std::ostringstream os;
      os << name << " series: times not strictly increasing at index " << i << " (t = "
         << times[i] << ")";
      throw DataError(os.str());
    }
    if (scale == Scale::Log10 && !(values[i] > 0.0)) {
      std::ostringstream os;
      os << name << " series: log10 scale needs positive values; index " << i << " (t = "
         << times[i] << ") has " << values[i];
      throw DataError(os.str());
    }
  }
}

}  // namespace

void ObservationSet::validate() const {
  check_one("cd4", t_times, t_values, t_scale);
  check_one("viral_load", v_times, v_values, v_scale);
  if (!(t_weight > 0.0) || !(v_weight > 0.0)) throw ConfigError("series weights must be > 0");
}

}  // namespace hivest
