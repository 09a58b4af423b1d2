#include "spatialgee/families.hpp"

#include <cmath>
#include <sstream>

namespace spatialgee {

double normal_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }

double normal_pdf(double z) {
  static const double inv_sqrt_2pi = 0.3989422804014326779;
  return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

// Wichura (1988), algorithm AS 241, PPND16.
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -HUGE_VAL;
    if (p == 1.0) return HUGE_VAL;
    return std::numeric_limits<double>::quiet_NaN();
  }
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
               1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
             1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
               5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
             4.2313330701600911252e1) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    value = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                  2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
                3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
              4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                  1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
              2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    value = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
              5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                  1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
              5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -value : value;
}

const char* FamilySpec::name() const {
  switch (kind) {
    case FamilyKind::poisson: return "poisson";
    case FamilyKind::negbin2: return "negbin2";
    case FamilyKind::bernoulli_probit: return "probit";
  }
  return "unknown";
}

namespace {

// exp(710) overflows double; refuse somewhat earlier so downstream variance
// products stay finite too.
constexpr double kEtaOverflow = 700.0;

[[noreturn]] void throw_overflow(double eta) {
  std::ostringstream os;
  os << "exponential mean overflow at linear index " << eta;
  throw EstimationError(os.str());
}

double nb2_size(const FamilySpec& f) {
  return std::pow(f.tau2, -static_cast<double>(f.nb2_exponent));
}

}  // namespace

double mean_from_eta(const FamilySpec& f, double eta) {
  switch (f.kind) {
    case FamilyKind::poisson:
    case FamilyKind::negbin2:
      if (eta > kEtaOverflow) throw_overflow(eta);
      return std::exp(eta);
    case FamilyKind::bernoulli_probit: {
      double m = normal_cdf(eta);
      if (m < kProbitMeanEps) m = kProbitMeanEps;
      if (m > 1.0 - kProbitMeanEps) m = 1.0 - kProbitMeanEps;
      return m;
    }
  }
  return 0.0;
}

double mean(const FamilySpec& f, const Eigen::Ref<const Vector>& x, const Vector& beta) {
  return mean_from_eta(f, x.dot(beta));
}

Vector mean_gradient(const FamilySpec& f, const Eigen::Ref<const Vector>& x,
                     const Vector& beta) {
  const double eta = x.dot(beta);
  switch (f.kind) {
    case FamilyKind::poisson:
    case FamilyKind::negbin2:
      if (eta > kEtaOverflow) throw_overflow(eta);
      return std::exp(eta) * x;
    case FamilyKind::bernoulli_probit:
      return normal_pdf(eta) * x;
  }
  return Vector::Zero(x.size());
}

double lef_variance(const FamilySpec& f, double m) {
  switch (f.kind) {
    case FamilyKind::poisson:
      if (!(m > 0.0)) throw ValidationError("poisson variance needs mean > 0");
      return m;
    case FamilyKind::negbin2:
      if (!(m > 0.0)) throw ValidationError("negbin2 variance needs mean > 0");
      return m * (1.0 + m * f.tau2);
    case FamilyKind::bernoulli_probit:
      if (!(m > 0.0 && m < 1.0)) throw ValidationError("bernoulli variance needs mean in (0,1)");
      return m * (1.0 - m);
  }
  return 0.0;
}

double loglik_obs(const FamilySpec& f, double y, const Eigen::Ref<const Vector>& x,
                  const Vector& beta) {
  const double eta = x.dot(beta);
  switch (f.kind) {
    case FamilyKind::poisson: {
      if (eta > kEtaOverflow) throw_overflow(eta);
      return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
    }
    case FamilyKind::negbin2: {
      if (eta > kEtaOverflow) throw_overflow(eta);
      if (f.tau2 == 0.0) return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
      const double m = std::exp(eta);
      const double a = nb2_size(f);
      return a * std::log(a / (a + m)) + y * std::log(m / (a + m)) +
             std::lgamma(y + a) - std::lgamma(a);
    }
    case FamilyKind::bernoulli_probit: {
      const double m = mean_from_eta(f, eta);
      return y * std::log(m) + (1.0 - y) * std::log(1.0 - m);
    }
  }
  return 0.0;
}

Vector score_obs(const FamilySpec& f, double y, const Eigen::Ref<const Vector>& x,
                 const Vector& beta) {
  const double m = mean(f, x, beta);
  return mean_gradient(f, x, beta) * ((y - m) / lef_variance(f, m));
}

double solver_loglik_obs(const FamilySpec& f, double y, double eta) {
  switch (f.kind) {
    case FamilyKind::poisson:
      if (eta > kEtaOverflow) throw_overflow(eta);
      return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
    case FamilyKind::negbin2: {
      if (eta > kEtaOverflow) throw_overflow(eta);
      if (f.tau2 == 0.0) return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
      const double m = std::exp(eta);
      const double a = 1.0 / f.tau2;
      return a * std::log(a / (a + m)) + y * std::log(m / (a + m)) +
             std::lgamma(y + a) - std::lgamma(a);
    }
    case FamilyKind::bernoulli_probit: {
      const double m = mean_from_eta(f, eta);
      return y * std::log(m) + (1.0 - y) * std::log(1.0 - m);
    }
  }
  return 0.0;
}

}  // namespace spatialgee
