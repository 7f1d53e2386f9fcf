#pragma once

namespace hivest {

// Gaussian-likelihood information criteria written in terms of the residual
// sum of squares: AIC = N ln(RSS/N) + 2K, BIC = N ln(RSS/N) + K ln N,
// AICc = N ln(RSS/N) + 2NK / (N - K - 1).
struct InfoCriteria {
  double aic = 0.0;
  double bic = 0.0;
  double aicc = 0.0;
  // false when N - K - 1 <= 0; aicc is then NaN
  bool aicc_defined = false;
};

InfoCriteria information_criteria(double rss, int n_obs, int n_params);

}  // namespace hivest
