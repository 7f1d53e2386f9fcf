#include "hivest/info_criteria.hpp"

#include <cmath>
#include <limits>

#include "hivest/errors.hpp"

namespace hivest {

InfoCriteria information_criteria(double rss, int n_obs, int n_params) {
  if (n_obs < 1 || n_params < 0) throw ConfigError("information criteria need N >= 1, K >= 0");
  if (!(rss >= 0.0)) throw DomainError("residual sum of squares must be >= 0");
  const double n = n_obs;
  const double k = n_params;
  const double fit_term = n * std::log(rss / n);
  InfoCriteria ic;
  ic.aic = fit_term + 2.0 * k;
  ic.bic = fit_term + k * std::log(n);
  const double dof = n - k - 1.0;
  ic.aicc_defined = dof > 0.0;
  ic.aicc = ic.aicc_defined ? fit_term + 2.0 * n * k / dof
                            : std::numeric_limits<double>::quiet_NaN();
  return ic;
}

}  // namespace hivest
