#pragma once

#include <optional>
#include <string>

#include "spatialgee/data_model.hpp"
#include "spatialgee/families.hpp"
#include "spatialgee/kernel.hpp"

namespace spatialgee {

struct SolverOptions {
  double tol = 1e-8;     // convergence on max(|step|_inf, |score|_inf / n)
  int max_iter = 100;
  int max_halvings = 50;
  double max_step = 2.0;        // trust-region cap on |delta|_inf per iteration (GEE)
  double max_travel = 3.0;      // non-convergence when |beta - start|_inf exceeds
                                // max_travel * max(1, |start|_inf); 0 disables
  std::optional<Vector> start;  // overrides the default starting point
};

// First-step pooled QMLE output: coefficients, residuals and the fitted LEF
// variances used to standardize them.
struct PqmleResult {
  Vector beta;
  int iterations = 0;
  bool converged = false;
  double score_norm = 0.0;  // inf-norm of the pooled score at beta
  double loglik = 0.0;      // sum of loglik_obs at beta
  Vector residuals;         // u_i = y_i - m_i
  Vector std_residuals;     // r_i = u_i / sqrt(v_i)
  Vector fitted_means;
  Vector fitted_variances;
  FamilySpec family;
  std::string note;         // diagnostics (e.g. separation detected)
};

// Newton/Fisher scoring for the pooled quasi-score with step-halving on the
// pooled log likelihood. Throws EstimationError on rank-deficient X or
// divergence; probit complete separation is flagged as non-convergence.
PqmleResult fit_pqmle(const Dataset& ds, const FamilySpec& f, const SolverOptions& opts = {});

// Kernel-weighted sandwich for the pooled estimator:
// (sum grad' v^-1 grad)^-1 [sum_ij k(d_ij) s_i s_j'] (sum grad' v^-1 grad)^-1.
// Own terms (i = j) enter with weight 1. Result is the finite-sample
// covariance of beta (no extra scaling), so se = sqrt(diag).
Matrix robust_avar_pqmle(const Dataset& ds, const FamilySpec& f, const PqmleResult& res,
                         const KernelSpec& kernel);

struct OlsResult {
  Vector beta;
  Vector se_classical;
  Vector se_robust;   // HC1
  int n_used = 0;
  int n_dropped = 0;  // rows with y <= 0
  double sigma2 = 0.0;
};

// OLS of ln(y) on X, dropping non-positive responses.
OlsResult ols_loglinear(const Dataset& ds);

}  // namespace spatialgee
