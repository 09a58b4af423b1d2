#pragma once

#include "spatialgee/linalg.hpp"

namespace spatialgee {

double normal_cdf(double z);
double normal_pdf(double z);
// Inverse standard normal CDF (Wichura's AS 241, double precision).
double normal_quantile(double p);

enum class FamilyKind { poisson, negbin2, bernoulli_probit };

// Probit means are kept inside [eps, 1-eps] so the Bernoulli variance m(1-m)
// never hits zero for extreme linear indices.
inline constexpr double kProbitMeanEps = 1e-10;

// Linear-exponential-family model component: conditional mean, mean gradient,
// variance function, per-observation log likelihood and quasi-score.
struct FamilySpec {
  FamilyKind kind = FamilyKind::poisson;
  double tau2 = 0.0;     // NegBin II dispersion, fixed during estimation
  int nb2_exponent = 2;  // exponent in the (tau^2)^{-e} size parameter; 2 as printed, 1 conventional

  static FamilySpec poisson() { return {FamilyKind::poisson, 0.0, 2}; }
  static FamilySpec negbin2(double tau2, int exponent = 2) {
    return {FamilyKind::negbin2, tau2, exponent};
  }
  static FamilySpec probit() { return {FamilyKind::bernoulli_probit, 0.0, 2}; }

  const char* name() const;
  bool is_count() const { return kind != FamilyKind::bernoulli_probit; }
};

// Mean as a function of the linear index eta = x * beta.
double mean_from_eta(const FamilySpec& f, double eta);

double mean(const FamilySpec& f, const Eigen::Ref<const Vector>& x, const Vector& beta);
Vector mean_gradient(const FamilySpec& f, const Eigen::Ref<const Vector>& x, const Vector& beta);

// LEF variance at mean value m: Poisson m, NegBin II m(1 + m tau^2),
// Bernoulli m(1-m).
double lef_variance(const FamilySpec& f, double m);

double loglik_obs(const FamilySpec& f, double y, const Eigen::Ref<const Vector>& x,
                  const Vector& beta);
Vector score_obs(const FamilySpec& f, double y, const Eigen::Ref<const Vector>& x,
                 const Vector& beta);

// Objective maximized by the pooled solver. Equals loglik_obs for Poisson and
// Probit; for NegBin II it is the negative binomial likelihood whose gradient
// is exactly the quasi-score with variance m(1 + m tau^2), i.e. the size
// parameter is 1/tau^2 independent of nb2_exponent.
double solver_loglik_obs(const FamilySpec& f, double y, double eta);

}  // namespace spatialgee
