#include "linalg.hpp"

#include <string>

#include "hivest/errors.hpp"

namespace hivest::detail {

OlsFit ols(const Eigen::MatrixXd& design, const Eigen::VectorXd& response, const char* what) {
  const Eigen::Index rows = design.rows();
  const Eigen::Index cols = design.cols();
  if (rows < cols) {
    throw EstimationError(std::string(what) + ": fewer observations (" + std::to_string(rows) +
                          ") than regressors (" + std::to_string(cols) + ")");
  }
  Eigen::VectorXd scale(cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    const double norm = design.col(j).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw EstimationError(std::string(what) + ": regressor column " + std::to_string(j) +
                            " is zero or not finite");
    }
    scale(j) = 1.0 / norm;
  }
  const Eigen::MatrixXd scaled = design * scale.asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(1e-10);
  if (qr.rank() < cols) {
    throw EstimationError(std::string(what) + ": rank-deficient design (rank " +
                          std::to_string(qr.rank()) + " of " + std::to_string(cols) + ")");
  }
  OlsFit fit;
  fit.coef = scale.asDiagonal() * qr.solve(response);
  fit.residuals = response - design * fit.coef;
  return fit;
}

}  // namespace hivest::detail
