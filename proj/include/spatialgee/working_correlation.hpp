#pragma once

#include <vector>

#include "spatialgee/data_model.hpp"
#include "spatialgee/pqmle.hpp"

namespace spatialgee {

enum class CorrelationKind {
  independence,
  exchangeable,     // constant pi
  cressie_exp,      // exp(-d / rho)
  inverse_distance, // rho / d
  exp_minus_one     // (exp(rho / d) - 1) / (e - 1)
};

const char* correlation_kind_name(CorrelationKind k);

struct CorrelationModel {
  CorrelationKind kind = CorrelationKind::independence;
  double param = 0.0;  // pi for exchangeable, rho otherwise

  // Working correlation at distance d > 0 (off-diagonal entries of R_g),
  // clamped into (-1, 1) so the assembled matrix stays a correlation matrix.
  double correlation(double d) const;
};

struct SpatialParams {
  double tau2 = 0.0;
  CorrelationModel corr;
  bool boundary = false;    // search ended on the bracket boundary
  bool degenerate = false;  // flat objective, midpoint returned
  int pairs_skipped = 0;    // pairs dropped by the direct rho estimator
};

// tau^2 as the no-intercept OLS slope of (u^2 - m) on m^2, clamped at 0.
// Requires a converged Poisson first step.
double estimate_tau2(const PqmleResult& poisson_first);

enum class PairRange { within_group, all };

struct RhoDirectResult {
  double rho = 0.0;
  int pairs_used = 0;
  int pairs_skipped = 0;  // log argument <= 0
};

// Direct estimator: average over pairs of log(u_i u_j / (m_i m_j) + 1) * d_ij.
RhoDirectResult estimate_rho_direct(const PqmleResult& first, const Dataset& ds,
                                    const GroupIndex& gi,
                                    PairRange range = PairRange::within_group);

struct ProductPair {
  double product;   // target correlation-scale product
  double distance;  // pair distance > 0
};

struct RhoLsqResult {
  double rho = 0.0;
  double objective = 0.0;
  bool boundary = false;
  bool degenerate = false;
};

// Scalar least squares min_rho sum (product - c(d, rho))^2 by golden-section
// search on [rho_min, rho_max] with a parabolic refinement.
RhoLsqResult estimate_rho_lsq(const std::vector<ProductPair>& pairs, CorrelationKind model,
                              double rho_min = 1e-6, double rho_max = 0.0);

// pi-hat = mean of within-group products of standardized residuals, clamped
// into (-1/(L_max - 1) + eps, 1 - eps) with eps = 1e-3.
double estimate_exchangeable(const Vector& std_residuals, const GroupIndex& gi);
double estimate_exchangeable(const PqmleResult& first, const GroupIndex& gi);

// Least-squares fit of the working correlation parameter to the lower-triangle
// residual products (one scalar parameter; exchangeable reduces to
// estimate_exchangeable, distance models reuse estimate_rho_lsq).
SpatialParams prentice_fit(const PqmleResult& first, const Dataset& ds, const GroupIndex& gi,
                           CorrelationKind model, double tau2 = 0.0);

// Collects within-group (product, distance) pairs from standardized residuals.
std::vector<ProductPair> within_group_products(const Vector& std_residuals, const Dataset& ds,
                                               const GroupIndex& gi);

enum class WorkingMode {
  generic_correlation,  // W = V^{1/2} R V^{1/2} with LEF variances
  poisson_structural    // v = m(1 + m tau^2), cov = m_l m_m tau^2 c(d, rho)
};

enum class RhoEstimator { lsq, direct, prentice };

const char* rho_estimator_name(RhoEstimator e);

// Second-step nuisance estimation from first-step residuals. For count
// families the residuals are re-standardized by the overdispersion-consistent
// variance m(1 + m tau2) before products are formed, so the targets live on a
// correlation scale; in structural mode the targets are the error-level
// products u_i u_j / (m_i m_j tau2).
SpatialParams estimate_spatial_params(const Dataset& ds, const GroupIndex& gi,
                                      const PqmleResult& first, double tau2,
                                      CorrelationKind working, WorkingMode mode,
                                      RhoEstimator rho_est = RhoEstimator::lsq,
                                      PairRange pair_range = PairRange::within_group);

// Per-group working covariance matrices with their Cholesky factors.
class WeightMatrixSet {
 public:
  int n_groups() const { return static_cast<int>(w_.size()); }
  const Matrix& w(int g) const { return w_[g]; }
  const Vector& variance_diag(int g) const { return v_[g]; }
  int repaired_groups() const { return repaired_; }
  double max_ridge() const { return max_ridge_; }

  // Solve W_g x = b via the stored Cholesky factor.
  Vector solve(int g, const Vector& b) const;
  Matrix solve(int g, const Matrix& b) const;

  // Copy with every W_g multiplied by c > 0 (the GEE argmin is invariant).
  WeightMatrixSet scaled(double c) const;

  friend WeightMatrixSet build_weight_matrices(const Dataset&, const GroupIndex&,
                                               const FamilySpec&, const Vector&,
                                               const SpatialParams&, WorkingMode);

 private:
  std::vector<Matrix> w_;      // working covariance, diagonal = v_ pre-repair
  std::vector<Matrix> chol_;   // lower Cholesky factor of (possibly ridged) W
  std::vector<Vector> v_;
  int repaired_ = 0;
  double max_ridge_ = 0.0;
};

// Assembles W_g at (beta, sp). Non-PD matrices are repaired by an additive
// ridge doubling from 1e-8; exceeding 1e-2 * max diagonal is an error.
WeightMatrixSet build_weight_matrices(const Dataset& ds, const GroupIndex& gi,
                                      const FamilySpec& f, const Vector& beta,
                                      const SpatialParams& sp, WorkingMode mode);

}  // namespace spatialgee
