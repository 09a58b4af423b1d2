#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace spatialgee {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Input/validation problems (bad CSV, schema mismatch, invariant violations).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents; carries a line number in the message.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures inside an estimator (singular matrices, divergence).
class EstimationError : public std::runtime_error {
 public:
  explicit EstimationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Solve A x = b for symmetric positive definite A; throws EstimationError on failure.
inline Matrix solve_spd(const Matrix& a, const Matrix& b, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) {
    throw EstimationError(std::string("singular or indefinite matrix in ") + what);
  }
  return llt.solve(b);
}

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace spatialgee
