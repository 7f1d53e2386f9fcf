#pragma once

#include <Eigen/Dense>

namespace hivest::detail {

struct OlsFit {
  Eigen::VectorXd coef;
  Eigen::VectorXd residuals;
};

// Ordinary least squares with column equilibration and a pivoted-QR rank
// check. Throws EstimationError naming `what` when the design is rank
// deficient (or has fewer rows than columns).
OlsFit ols(const Eigen::MatrixXd& design, const Eigen::VectorXd& response, const char* what);

}  // namespace hivest::detail
