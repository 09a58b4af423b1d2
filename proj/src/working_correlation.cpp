#include "spatialgee/working_correlation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

namespace spatialgee {

const char* correlation_kind_name(CorrelationKind k) {
  switch (k) {
    case CorrelationKind::independence: return "independence";
    case CorrelationKind::exchangeable: return "exchangeable";
    case CorrelationKind::cressie_exp: return "cressie";
    case CorrelationKind::inverse_distance: return "invdist";
    case CorrelationKind::exp_minus_one: return "expminus1";
  }
  return "unknown";
}

namespace {

constexpr double kCorrClamp = 1.0 - 1e-6;

double model_correlation(CorrelationKind kind, double param, double d) {
  switch (kind) {
    case CorrelationKind::independence:
      return 0.0;
    case CorrelationKind::exchangeable:
      return param;
    case CorrelationKind::cressie_exp:
      if (param <= 0.0) return 0.0;
      return std::exp(-d / param);
    case CorrelationKind::inverse_distance:
      return d > 0.0 ? param / d : 1.0;
    case CorrelationKind::exp_minus_one:
      if (d <= 0.0) return 1.0;
      return std::expm1(param / d) / (M_E - 1.0);
  }
  return 0.0;
}

}  // namespace

double CorrelationModel::correlation(double d) const {
  const double c = model_correlation(kind, param, d);
  return std::clamp(c, -kCorrClamp, kCorrClamp);
}

double estimate_tau2(const PqmleResult& poisson_first) {
  if (!poisson_first.converged) throw EstimationError("estimate_tau2 requires a converged first step");
  if (poisson_first.family.kind != FamilyKind::poisson)
    throw ValidationError("estimate_tau2 expects Poisson first-step residuals");
  double num = 0.0, den = 0.0;
  for (int i = 0; i < poisson_first.residuals.size(); ++i) {
    const double m = poisson_first.fitted_means[i];
    const double a = poisson_first.residuals[i] * poisson_first.residuals[i] - m;
    const double b = m * m;
    num += a * b;
    den += b * b;
  }
  if (den <= 0.0) throw EstimationError("estimate_tau2: all fitted means are zero");
  return std::max(0.0, num / den);
}

RhoDirectResult estimate_rho_direct(const PqmleResult& first, const Dataset& ds,
                                    const GroupIndex& gi, PairRange range) {
  if (!first.converged) throw EstimationError("estimate_rho_direct requires a converged first step");
  RhoDirectResult out;
  double sum = 0.0;
  auto accumulate = [&](int i, int j) {
    const double arg =
        first.residuals[i] * first.residuals[j] /
            (first.fitted_means[i] * first.fitted_means[j]) + 1.0;
    if (arg <= 0.0) {
      ++out.pairs_skipped;
      return;
    }
    sum += std::log(arg) * pairwise_distance(ds, i, j);
    ++out.pairs_used;
  };
  if (range == PairRange::within_group) {
    for (const auto& rows : gi.groups)
      for (std::size_t a = 0; a < rows.size(); ++a)
        for (std::size_t b = a + 1; b < rows.size(); ++b) accumulate(rows[a], rows[b]);
  } else {
    for (int i = 0; i < ds.n(); ++i)
      for (int j = i + 1; j < ds.n(); ++j) accumulate(i, j);
  }
  if (out.pairs_used == 0)
    throw EstimationError("estimate_rho_direct: no informative pairs (all log arguments <= 0)");
  out.rho = sum / out.pairs_used;
  return out;
}

RhoLsqResult estimate_rho_lsq(const std::vector<ProductPair>& pairs, CorrelationKind model,
                              double rho_min, double rho_max) {
  if (pairs.empty()) throw EstimationError("estimate_rho_lsq: no pairs");
  if (rho_max <= rho_min) {
    double dmax = 0.0;
    for (const auto& pr : pairs) dmax = std::max(dmax, pr.distance);
    rho_max = 10.0 * std::max(dmax, 1.0);
  }
  auto objective = [&](double rho) {
    double s = 0.0;
    for (const auto& pr : pairs) {
      const double e = pr.product - model_correlation(model, rho, pr.distance);
      s += e * e;
    }
    return s;
  };

  RhoLsqResult out;
  const double f_lo = objective(rho_min);
  const double f_hi = objective(rho_max);
  const double f_mid = objective(0.5 * (rho_min + rho_max));
  const double scale = std::max({std::fabs(f_lo), std::fabs(f_hi), std::fabs(f_mid), 1e-300});
  if (std::fabs(f_lo - f_hi) <= 1e-14 * scale && std::fabs(f_lo - f_mid) <= 1e-14 * scale) {
    out.rho = 0.5 * (rho_min + rho_max);
    out.objective = f_mid;
    out.degenerate = true;
    return out;
  }

  // Golden-section search.
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = rho_min, b = rho_max;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = objective(c), fd = objective(d);
  for (int it = 0; it < 200 && (b - a) > 1e-12 * std::max(1.0, rho_max); ++it) {
    if (fc < fd) {
      b = d; d = c; fd = fc;
      c = b - gr * (b - a);
      fc = objective(c);
    } else {
      a = c; c = d; fc = fd;
      d = a + gr * (b - a);
      fd = objective(d);
    }
  }
  double best = 0.5 * (a + b);
  double fbest = objective(best);

  // One parabolic refinement through (a, best, b).
  const double fa = objective(a), fb = objective(b);
  const double denom = (a - best) * (fb - fbest) - (b - best) * (fa - fbest);
  if (std::fabs(denom) > 0.0) {
    const double num = (a - best) * (a - best) * (fb - fbest) -
                       (b - best) * (b - best) * (fa - fbest);
    const double cand = best - 0.5 * num / denom;
    if (cand > rho_min && cand < rho_max) {
      const double fcand = objective(cand);
      if (fcand < fbest) {
        best = cand;
        fbest = fcand;
      }
    }
  }

  out.rho = best;
  out.objective = fbest;
  const double span = rho_max - rho_min;
  out.boundary = (best - rho_min) < 1e-6 * span || (rho_max - best) < 1e-6 * span;
  // An endpoint as good as the interior minimizer (including exact plateaus
  // from underflow near rho = 0) wins and flags the boundary.
  const double tol_end = 1e-12 * (1.0 + std::fabs(fbest));
  if (f_lo <= fbest + tol_end && f_lo <= f_hi) {
    out.rho = rho_min;
    out.objective = f_lo;
    out.boundary = true;
  } else if (f_hi <= fbest + tol_end) {
    out.rho = rho_max;
    out.objective = f_hi;
    out.boundary = true;
  }
  return out;
}

std::vector<ProductPair> within_group_products(const Vector& std_residuals, const Dataset& ds,
                                               const GroupIndex& gi) {
  std::vector<ProductPair> pairs;
  for (const auto& rows : gi.groups)
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = a + 1; b < rows.size(); ++b)
        pairs.push_back({std_residuals[rows[a]] * std_residuals[rows[b]],
                         pairwise_distance(ds, rows[a], rows[b])});
  return pairs;
}

double estimate_exchangeable(const Vector& std_residuals, const GroupIndex& gi) {
  double sum = 0.0;
  long npairs = 0;
  for (const auto& rows : gi.groups) {
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = a + 1; b < rows.size(); ++b) {
        sum += std_residuals[rows[a]] * std_residuals[rows[b]];
        ++npairs;
      }
  }
  if (npairs == 0)
    throw EstimationError("estimate_exchangeable: no groups with two or more members");
  const double eps = 1e-3;
  const double lo = -1.0 / (gi.max_size() - 1) + eps;
  return std::clamp(sum / npairs, lo, 1.0 - eps);
}

double estimate_exchangeable(const PqmleResult& first, const GroupIndex& gi) {
  if (!first.converged)
    throw EstimationError("estimate_exchangeable requires a converged first step");
  return estimate_exchangeable(first.std_residuals, gi);
}

SpatialParams prentice_fit(const PqmleResult& first, const Dataset& ds, const GroupIndex& gi,
                           CorrelationKind model, double tau2) {
  SpatialParams sp;
  sp.tau2 = tau2;
  sp.corr.kind = model;
  switch (model) {
    case CorrelationKind::independence:
      sp.corr.param = 0.0;
      return sp;
    case CorrelationKind::exchangeable:
      sp.corr.param = estimate_exchangeable(first, gi);
      return sp;
    default: {
      const auto pairs = within_group_products(first.std_residuals, ds, gi);
      if (pairs.empty())
        throw EstimationError("prentice_fit: no groups with two or more members");
      const auto r = estimate_rho_lsq(pairs, model);
      sp.corr.param = r.rho;
      sp.boundary = r.boundary;
      sp.degenerate = r.degenerate;
      return sp;
    }
  }
}

const char* rho_estimator_name(RhoEstimator e) {
  switch (e) {
    case RhoEstimator::lsq: return "lsq";
    case RhoEstimator::direct: return "direct";
    case RhoEstimator::prentice: return "prentice";
  }
  return "unknown";
}

namespace {

// Residuals standardized on a correlation scale: Bernoulli variances are the
// truth for probit, counts use m(1 + m tau2) regardless of the fitted family.
Vector correlation_scale_residuals(const PqmleResult& first, double tau2) {
  if (first.family.kind == FamilyKind::bernoulli_probit) return first.std_residuals;
  Vector r(first.residuals.size());
  for (int i = 0; i < r.size(); ++i) {
    const double m = first.fitted_means[i];
    r[i] = first.residuals[i] / std::sqrt(m * (1.0 + m * tau2));
  }
  return r;
}

double clamp_exchangeable(double value, const GroupIndex& gi) {
  const double eps = 1e-3;
  return std::clamp(value, -1.0 / (gi.max_size() - 1) + eps, 1.0 - eps);
}

}  // namespace

SpatialParams estimate_spatial_params(const Dataset& ds, const GroupIndex& gi,
                                      const PqmleResult& first, double tau2,
                                      CorrelationKind working, WorkingMode mode,
                                      RhoEstimator rho_est, PairRange pair_range) {
  if (!first.converged)
    throw EstimationError("estimate_spatial_params requires a converged first step");
  SpatialParams sp;
  sp.tau2 = tau2;
  sp.corr.kind = working;
  if (working == CorrelationKind::independence) return sp;
  if (mode == WorkingMode::poisson_structural &&
      first.family.kind == FamilyKind::bernoulli_probit)
    throw ValidationError("poisson_structural working matrices apply to count families only");

  if (mode == WorkingMode::poisson_structural) {
    // Error-level products u_i u_j / (m_i m_j tau2) target the correlation of
    // the multiplicative error; irrelevant when tau2 = 0 (covariances vanish).
    if (tau2 == 0.0) return sp;
    if (rho_est == RhoEstimator::direct) {
      const auto r = estimate_rho_direct(first, ds, gi, pair_range);
      sp.corr.param = r.rho;
      sp.pairs_skipped = r.pairs_skipped;
      return sp;
    }
    std::vector<ProductPair> pairs;
    for (const auto& rows : gi.groups)
      for (std::size_t a = 0; a < rows.size(); ++a)
        for (std::size_t b = a + 1; b < rows.size(); ++b) {
          const int i = rows[a], j = rows[b];
          pairs.push_back({first.residuals[i] * first.residuals[j] /
                               (first.fitted_means[i] * first.fitted_means[j] * tau2),
                           pairwise_distance(ds, i, j)});
        }
    if (pairs.empty())
      throw EstimationError("estimate_spatial_params: no groups with two or more members");
    if (working == CorrelationKind::exchangeable) {
      double sum = 0.0;
      for (const auto& pr : pairs) sum += pr.product;
      sp.corr.param = clamp_exchangeable(sum / pairs.size(), gi);
    } else {
      const auto r = estimate_rho_lsq(pairs, working);
      sp.corr.param = r.rho;
      sp.boundary = r.boundary;
      sp.degenerate = r.degenerate;
    }
    return sp;
  }

  // Generic V^{1/2} R V^{1/2} mode.
  Vector r_std = correlation_scale_residuals(first, tau2);
  if (first.family.is_count()) {
    // tau2 is noisy under heavy overdispersion; rescaling by the average
    // squared standardized residual (the usual moment dispersion estimate)
    // keeps the products on a correlation scale either way.
    const double phi = r_std.squaredNorm() / r_std.size();
    if (phi > 0.0) r_std /= std::sqrt(phi);
  }
  if (working == CorrelationKind::exchangeable) {
    sp.corr.param = estimate_exchangeable(r_std, gi);
    return sp;
  }
  if (rho_est == RhoEstimator::direct) {
    if (first.family.kind == FamilyKind::bernoulli_probit)
      throw ValidationError("the direct rho estimator applies to count families only");
    const auto r = estimate_rho_direct(first, ds, gi, pair_range);
    sp.corr.param = r.rho;
    sp.pairs_skipped = r.pairs_skipped;
    return sp;
  }
  const auto pairs = within_group_products(r_std, ds, gi);
  if (pairs.empty())
    throw EstimationError("estimate_spatial_params: no groups with two or more members");
  const auto r = estimate_rho_lsq(pairs, working);
  sp.corr.param = r.rho;
  sp.boundary = r.boundary;
  sp.degenerate = r.degenerate;
  return sp;
}

Vector WeightMatrixSet::solve(int g, const Vector& b) const {
  Vector x = chol_[g].triangularView<Eigen::Lower>().solve(b);
  return chol_[g].transpose().triangularView<Eigen::Upper>().solve(x);
}

Matrix WeightMatrixSet::solve(int g, const Matrix& b) const {
  Matrix x = chol_[g].triangularView<Eigen::Lower>().solve(b);
  return chol_[g].transpose().triangularView<Eigen::Upper>().solve(x);
}

WeightMatrixSet WeightMatrixSet::scaled(double c) const {
  if (!(c > 0.0)) throw ValidationError("WeightMatrixSet::scaled requires c > 0");
  WeightMatrixSet out = *this;
  const double root = std::sqrt(c);
  for (auto& w : out.w_) w *= c;
  for (auto& l : out.chol_) l *= root;
  for (auto& v : out.v_) v *= c;
  return out;
}

WeightMatrixSet build_weight_matrices(const Dataset& ds, const GroupIndex& gi,
                                      const FamilySpec& f, const Vector& beta,
                                      const SpatialParams& sp, WorkingMode mode) {
  if (!beta.allFinite()) throw ValidationError("build_weight_matrices: non-finite beta");
  WeightMatrixSet wm;
  const int ngroups = gi.n_groups();
  wm.w_.resize(ngroups);
  wm.chol_.resize(ngroups);
  wm.v_.resize(ngroups);

  for (int g = 0; g < ngroups; ++g) {
    const auto& rows = gi.groups[g];
    const int lg = static_cast<int>(rows.size());
    Vector m(lg), v(lg);
    for (int a = 0; a < lg; ++a) {
      m[a] = mean(f, ds.X.row(rows[a]), beta);
      v[a] = mode == WorkingMode::poisson_structural ? m[a] * (1.0 + m[a] * sp.tau2)
                                                     : lef_variance(f, m[a]);
    }
    Matrix w(lg, lg);
    for (int a = 0; a < lg; ++a) {
      w(a, a) = v[a];
      for (int b = a + 1; b < lg; ++b) {
        const double d = pairwise_distance(ds, rows[a], rows[b]);
        const double c = sp.corr.correlation(d);
        const double cov = mode == WorkingMode::poisson_structural
                               ? m[a] * m[b] * sp.tau2 * c
                               : std::sqrt(v[a] * v[b]) * c;
        w(a, b) = cov;
        w(b, a) = cov;
      }
    }
    wm.v_[g] = v;
    wm.w_[g] = w;

    // Cholesky with additive-ridge repair.
    double ridge = 0.0;
    Eigen::LLT<Matrix> llt(w);
    if (llt.info() != Eigen::Success) {
      const double limit = 1e-2 * w.diagonal().maxCoeff();
      ridge = 1e-8;
      while (true) {
        if (ridge > limit) {
          std::ostringstream os;
          os << "working matrix badly conditioned in group " << g
             << " (ridge " << ridge << " exceeds " << limit << ")";
          throw EstimationError(os.str());
        }
        llt.compute(w + ridge * Matrix::Identity(lg, lg));
        if (llt.info() == Eigen::Success) break;
        ridge *= 2.0;
      }
      ++wm.repaired_;
      wm.max_ridge_ = std::max(wm.max_ridge_, ridge);
    }
    wm.chol_[g] = llt.matrixL();
  }
  return wm;
}

}  // namespace spatialgee
