#pragma once

#include "spatialgee/kernel.hpp"
#include "spatialgee/pqmle.hpp"
#include "spatialgee/working_correlation.hpp"

namespace spatialgee {

struct GeeResult {
  Vector beta;
  Matrix avar;  // finite-sample covariance of beta; se = sqrt(diag(avar))
  Vector se;
  int iterations = 0;
  bool converged = false;
  double score_norm = 0.0;
  SpatialParams spatial;
  KernelSpec kernel;
  FamilySpec family;
  WorkingMode mode = WorkingMode::generic_correlation;
  int weight_repairs = 0;
};

// Q_G = (1/G) sum_g (y_g - m_g)' W_g^-1 (y_g - m_g).
double gee_objective(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                     const Vector& beta, const WeightMatrixSet& wm);

// S_G = (1/G) sum_g grad m_g' W_g^-1 (y_g - m_g), with W frozen.
Vector quasi_score(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                   const Vector& beta, const WeightMatrixSet& wm);

// Full Hessian of Q_G in beta (diagnostic only; the scoring loop uses just the
// first, expected-value term). Returned as d(-2 S_G)/d beta ... see gee.cpp.
Matrix gee_hessian_diagnostic(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                              const Vector& beta, const WeightMatrixSet& wm);

// Fisher-scoring loop for the quasi-score over a prebuilt (frozen) weight set.
// Fills beta, iterations, converged and score_norm only.
GeeResult gee_solve(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                    const Vector& start, const WeightMatrixSet& wm,
                    const SolverOptions& opts = {});

// Second-step GEE: Fisher scoring of the quasi-score with working matrices
// frozen at the first-step coefficients and plug-in spatial parameters.
// Starts from first.beta; step-halving on Q_G.
GeeResult gee_fit(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                  const PqmleResult& first, const SpatialParams& sp, WorkingMode mode,
                  const KernelSpec& kernel, const SolverOptions& opts = {});

// Misspecification-robust sandwich A^-1 B A^-1 with A = sum_g grad' W^-1 grad
// and B the kernel-weighted cross-group sum of score outer products; own-group
// terms always enter with weight 1. W_g is rebuilt at beta.
Matrix sandwich_avar(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                     const Vector& beta, const SpatialParams& sp, WorkingMode mode,
                     const KernelSpec& kernel);

enum class EffectKind { continuous, discrete };

struct PartialEffect {
  double estimate = 0.0;
  double se = 0.0;
};

// Average partial effect of covariate j with delta-method standard error.
// For discrete effects the covariate is moved from `from` to `to`.
PartialEffect partial_effects(const FamilySpec& f, const GeeResult& result, const Dataset& ds,
                              int covariate, EffectKind kind, double from = 0.0,
                              double to = 1.0);

}  // namespace spatialgee
