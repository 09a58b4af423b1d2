#include "spatialgee/pqmle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace spatialgee {

namespace {

void check_full_rank(const Dataset& ds) {
  Eigen::ColPivHouseholderQR<Matrix> qr(ds.X);
  qr.setThreshold(1e-10);
  if (qr.rank() == ds.p()) return;
  // Columns past the rank in the pivot order are the dependent ones.
  std::ostringstream os;
  os << "X is rank deficient (rank " << qr.rank() << " of " << ds.p()
     << "); dependent column(s):";
  const auto perm = qr.colsPermutation().indices();
  for (int k = static_cast<int>(qr.rank()); k < ds.p(); ++k) {
    const int col = perm[k];
    if (static_cast<int>(ds.covariate_names.size()) == ds.p())
      os << " " << ds.covariate_names[col];
    else
      os << " x" << (col + 1);
  }
  throw EstimationError(os.str());
}

Vector starting_point(const Dataset& ds, const FamilySpec& f) {
  Vector beta = Vector::Zero(ds.p());
  // Initialize a detected intercept at the link-transformed sample mean.
  int icol = -1;
  for (int j = 0; j < ds.p(); ++j) {
    if ((ds.X.col(j).array() == 1.0).all()) {
      icol = j;
      break;
    }
  }
  if (icol < 0) return beta;
  const double ybar = ds.y.mean();
  if (f.kind == FamilyKind::bernoulli_probit) {
    beta[icol] = normal_quantile(std::min(1.0 - 1e-6, std::max(1e-6, ybar)));
  } else if (ybar > 0.0) {
    beta[icol] = std::log(ybar);
  }
  return beta;
}

double pooled_solver_loglik(const Dataset& ds, const FamilySpec& f, const Vector& beta) {
  double ll = 0.0;
  const Vector eta = ds.X * beta;
  for (int i = 0; i < ds.n(); ++i) ll += solver_loglik_obs(f, ds.y[i], eta[i]);
  return ll;
}

bool probit_separated(const Dataset& ds, const Vector& eta) {
  bool any1 = false, any0 = false, sep1 = true, sep0 = true;
  for (int i = 0; i < ds.n(); ++i) {
    if (ds.y[i] > 0.5) {
      any1 = true;
      if (eta[i] <= 30.0) sep1 = false;
    } else {
      any0 = true;
      if (eta[i] >= -30.0) sep0 = false;
    }
  }
  return (any1 && sep1) || (any0 && sep0);
}

}  // namespace

PqmleResult fit_pqmle(const Dataset& ds, const FamilySpec& f, const SolverOptions& opts) {
  ds.validate();
  ds.validate_for_family(f);
  check_full_rank(ds);

  const int n = ds.n();
  const int p = ds.p();
  Vector beta = opts.start ? *opts.start : starting_point(ds, f);
  if (beta.size() != p) throw ValidationError("starting point has wrong length");

  double ll = pooled_solver_loglik(ds, f, beta);
  if (!std::isfinite(ll)) throw EstimationError("non-finite log likelihood at start");

  PqmleResult res;
  res.family = f;
  double step_norm = HUGE_VAL;

  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    res.iterations = iter;
    // Fisher scoring: H = sum grad' v^-1 grad, s = sum grad (y-m)/v.
    Matrix h = Matrix::Zero(p, p);
    Vector s = Vector::Zero(p);
    const Vector eta = ds.X * beta;
    for (int i = 0; i < n; ++i) {
      const double m = mean_from_eta(f, eta[i]);
      const double v = lef_variance(f, m);
      const double dm = (f.kind == FamilyKind::bernoulli_probit) ? normal_pdf(eta[i]) : m;
      const double w = dm * dm / v;
      h.selfadjointView<Eigen::Lower>().rankUpdate(ds.X.row(i).transpose(), w);
      s.noalias() += ds.X.row(i).transpose() * (dm * (ds.y[i] - m) / v);
    }
    h = h.selfadjointView<Eigen::Lower>();
    res.score_norm = s.lpNorm<Eigen::Infinity>();

    if (std::max(step_norm, res.score_norm / n) <= opts.tol) {
      res.converged = true;
      break;
    }

    Vector delta = solve_spd(h, s, "pooled QMLE scoring matrix");

    // Step-halving keeps the pooled log likelihood non-decreasing.
    double scale = 1.0;
    double ll_new = -HUGE_VAL;
    Vector beta_new;
    int halvings = 0;
    for (; halvings <= opts.max_halvings; ++halvings) {
      beta_new = beta + scale * delta;
      bool ok = true;
      try {
        ll_new = pooled_solver_loglik(ds, f, beta_new);
      } catch (const EstimationError&) {
        ok = false;
      }
      if (ok && std::isfinite(ll_new) && ll_new >= ll - 1e-12 * (1.0 + std::fabs(ll))) break;
      scale *= 0.5;
    }
    if (halvings > opts.max_halvings) {
      if (!std::isfinite(ll_new))
        throw EstimationError("pooled QMLE diverged: non-finite log likelihood after halvings");
      break;  // no ascent direction left; convergence decided by the score below
    }
    step_norm = (scale * delta).lpNorm<Eigen::Infinity>();
    beta = beta_new;
    ll = ll_new;

    if (f.kind == FamilyKind::bernoulli_probit && probit_separated(ds, ds.X * beta)) {
      res.note = "complete separation detected; coefficients unreliable";
      res.converged = false;
      res.beta = beta;
      break;
    }
  }

  if (res.note.empty()) {
    // Final score check (covers the max_iter exit path).
    Vector s = Vector::Zero(p);
    const Vector eta = ds.X * beta;
    for (int i = 0; i < n; ++i) {
      const double m = mean_from_eta(f, eta[i]);
      const double v = lef_variance(f, m);
      const double dm = (f.kind == FamilyKind::bernoulli_probit) ? normal_pdf(eta[i]) : m;
      s.noalias() += ds.X.row(i).transpose() * (dm * (ds.y[i] - m) / v);
    }
    res.score_norm = s.lpNorm<Eigen::Infinity>();
    if (!res.converged) res.converged = res.score_norm / n <= opts.tol;
  }

  res.beta = beta;
  res.loglik = 0.0;
  res.residuals.resize(n);
  res.std_residuals.resize(n);
  res.fitted_means.resize(n);
  res.fitted_variances.resize(n);
  const Vector eta = ds.X * beta;
  for (int i = 0; i < n; ++i) {
    const double m = mean_from_eta(f, eta[i]);
    const double v = lef_variance(f, m);
    res.fitted_means[i] = m;
    res.fitted_variances[i] = v;
    res.residuals[i] = ds.y[i] - m;
    res.std_residuals[i] = res.residuals[i] / std::sqrt(v);
    res.loglik += loglik_obs(f, ds.y[i], ds.X.row(i), beta);
  }
  return res;
}

Matrix robust_avar_pqmle(const Dataset& ds, const FamilySpec& f, const PqmleResult& res,
                         const KernelSpec& kernel) {
  if (!res.converged) throw EstimationError("robust_avar_pqmle requires a converged fit");
  const int n = ds.n();
  const int p = ds.p();

  Matrix bread = Matrix::Zero(p, p);
  Matrix scores(n, p);  // s_i' rows
  const Vector eta = ds.X * res.beta;
  for (int i = 0; i < n; ++i) {
    const double m = res.fitted_means[i];
    const double v = res.fitted_variances[i];
    const double dm = (f.kind == FamilyKind::bernoulli_probit) ? normal_pdf(eta[i]) : m;
    bread.selfadjointView<Eigen::Lower>().rankUpdate(ds.X.row(i).transpose(), dm * dm / v);
    scores.row(i) = ds.X.row(i) * (dm * res.residuals[i] / v);
  }
  bread = bread.selfadjointView<Eigen::Lower>();

  Matrix meat = Matrix::Zero(p, p);
  for (int i = 0; i < n; ++i) {
    meat.selfadjointView<Eigen::Lower>().rankUpdate(scores.row(i).transpose(), 1.0);
    for (int j = i + 1; j < n; ++j) {
      const double k = kernel.weight(pairwise_distance(ds, i, j));
      if (k == 0.0) continue;
      const Matrix cross = k * scores.row(i).transpose() * scores.row(j);
      meat.triangularView<Eigen::Lower>() += cross + cross.transpose();
    }
  }
  meat = meat.selfadjointView<Eigen::Lower>();

  const Matrix binv = solve_spd(bread, Matrix::Identity(p, p), "pooled sandwich bread");
  return symmetrize(binv * meat * binv);
}

OlsResult ols_loglinear(const Dataset& ds) {
  ds.validate();
  std::vector<int> keep;
  for (int i = 0; i < ds.n(); ++i)
    if (ds.y[i] > 0.0) keep.push_back(i);
  const int n = static_cast<int>(keep.size());
  const int p = ds.p();
  OlsResult out;
  out.n_used = n;
  out.n_dropped = ds.n() - n;
  if (n < p) throw EstimationError("ols_loglinear: fewer positive-response rows than columns");

  Matrix x(n, p);
  Vector ly(n);
  for (int i = 0; i < n; ++i) {
    x.row(i) = ds.X.row(keep[i]);
    ly[i] = std::log(ds.y[keep[i]]);
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw EstimationError("ols_loglinear: X is rank deficient");
  out.beta = qr.solve(ly);

  const Vector resid = ly - x * out.beta;
  out.sigma2 = n > p ? resid.squaredNorm() / (n - p) : 0.0;

  const Matrix xtx_inv =
      solve_spd(Matrix(x.transpose() * x), Matrix::Identity(p, p), "OLS normal equations");
  out.se_classical = (out.sigma2 * xtx_inv.diagonal()).cwiseSqrt();

  Matrix meat = Matrix::Zero(p, p);
  for (int i = 0; i < n; ++i)
    meat.selfadjointView<Eigen::Lower>().rankUpdate(x.row(i).transpose(),
                                                    resid[i] * resid[i]);
  meat = meat.selfadjointView<Eigen::Lower>();
  const double hc1 = n > p ? static_cast<double>(n) / (n - p) : 1.0;
  out.se_robust = (hc1 * (xtx_inv * meat * xtx_inv).diagonal()).cwiseSqrt();
  return out;
}

}  // namespace spatialgee
