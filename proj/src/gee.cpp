#include "spatialgee/gee.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace spatialgee {

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double default_group_bandwidth(const Dataset& ds, const GroupIndex& gi) {
  const int ngroups = gi.n_groups();
  if (ngroups < 2) return 1.0;
  std::vector<double> nn(ngroups, HUGE_VAL);
  for (int g = 0; g < ngroups; ++g)
    for (int h = g + 1; h < ngroups; ++h) {
      const double d = group_distance(ds, gi, g, h);
      nn[g] = std::min(nn[g], d);
      nn[h] = std::min(nn[h], d);
    }
  return 1.5 * median_of(nn);
}

double default_obs_bandwidth(const Dataset& ds) {
  const int n = ds.n();
  if (n < 2) return 1.0;
  std::vector<double> nn(n, HUGE_VAL);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = pairwise_distance(ds, i, j);
      nn[i] = std::min(nn[i], d);
      nn[j] = std::min(nn[j], d);
    }
  return 1.5 * median_of(nn);
}

namespace {

double mean_eta_derivative(const FamilySpec& f, double eta) {
  return f.kind == FamilyKind::bernoulli_probit ? normal_pdf(eta) : std::exp(eta);
}

double mean_eta_second_derivative(const FamilySpec& f, double eta) {
  return f.kind == FamilyKind::bernoulli_probit ? -eta * normal_pdf(eta) : std::exp(eta);
}

struct GroupEval {
  Vector u;       // y_g - m_g
  Matrix grad;    // L_g x p, rows dm/deta * x
  Vector eta;
};

GroupEval eval_group(const Dataset& ds, const std::vector<int>& rows, const FamilySpec& f,
                     const Vector& beta) {
  const int lg = static_cast<int>(rows.size());
  GroupEval ev;
  ev.u.resize(lg);
  ev.grad.resize(lg, ds.p());
  ev.eta.resize(lg);
  for (int a = 0; a < lg; ++a) {
    const double eta = ds.X.row(rows[a]).dot(beta);
    ev.eta[a] = eta;
    ev.u[a] = ds.y[rows[a]] - mean_from_eta(f, eta);
    ev.grad.row(a) = mean_eta_derivative(f, eta) * ds.X.row(rows[a]);
  }
  return ev;
}

}  // namespace

double gee_objective(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                     const Vector& beta, const WeightMatrixSet& wm) {
  double q = 0.0;
  for (int g = 0; g < gi.n_groups(); ++g) {
    const auto ev = eval_group(ds, gi.groups[g], f, beta);
    q += ev.u.dot(wm.solve(g, ev.u));
  }
  return q / gi.n_groups();
}

Vector quasi_score(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                   const Vector& beta, const WeightMatrixSet& wm) {
  Vector s = Vector::Zero(ds.p());
  for (int g = 0; g < gi.n_groups(); ++g) {
    const auto ev = eval_group(ds, gi.groups[g], f, beta);
    s.noalias() += ev.grad.transpose() * wm.solve(g, ev.u);
  }
  return s / gi.n_groups();
}

Matrix gee_hessian_diagnostic(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                              const Vector& beta, const WeightMatrixSet& wm) {
  const int p = ds.p();
  Matrix h = Matrix::Zero(p, p);
  for (int g = 0; g < gi.n_groups(); ++g) {
    const auto& rows = gi.groups[g];
    const auto ev = eval_group(ds, rows, f, beta);
    const Vector wu = wm.solve(g, ev.u);
    // d S / d beta' = (1/G) sum_g [ sum_l (W^-1 u)_l m''(eta_l) x_l x_l'
    //                               - grad' W^-1 grad ]   (W frozen)
    for (std::size_t a = 0; a < rows.size(); ++a) {
      const double curv = mean_eta_second_derivative(f, ev.eta[a]);
      h.noalias() += wu[a] * curv * ds.X.row(rows[a]).transpose() * ds.X.row(rows[a]);
    }
    h.noalias() -= ev.grad.transpose() * wm.solve(g, Matrix(ev.grad));
  }
  return h / gi.n_groups();
}

GeeResult gee_solve(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                    const Vector& start, const WeightMatrixSet& wm,
                    const SolverOptions& opts) {
  const int p = ds.p();
  const int ngroups = gi.n_groups();

  GeeResult res;
  res.family = f;

  Vector beta = start;
  double q = gee_objective(ds, gi, f, beta, wm);
  const double y_total = ds.y.cwiseAbs().sum();

  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    res.iterations = iter;
    Matrix h1 = Matrix::Zero(p, p);
    Vector s = Vector::Zero(p);
    for (int g = 0; g < ngroups; ++g) {
      const auto ev = eval_group(ds, gi.groups[g], f, beta);
      const Matrix wg = wm.solve(g, Matrix(ev.grad));
      h1.noalias() += ev.grad.transpose() * wg;
      s.noalias() += ev.grad.transpose() * wm.solve(g, ev.u);
    }
    h1 /= ngroups;
    s /= ngroups;
    res.score_norm = s.lpNorm<Eigen::Infinity>();
    if (res.score_norm <= opts.tol) {
      res.converged = true;
      break;
    }

    Vector delta = solve_spd(h1, s, "GEE scoring matrix");
    // Trust-region cap: the two-step estimator is the root near the first
    // step, not the degenerate far basin of the quadratic criterion.
    const double dn = delta.lpNorm<Eigen::Infinity>();
    if (opts.max_step > 0.0 && dn > opts.max_step) delta *= opts.max_step / dn;

    double scale = 1.0;
    Vector beta_new;
    double q_new = HUGE_VAL;
    int halvings = 0;
    for (; halvings <= opts.max_halvings; ++halvings) {
      beta_new = beta + scale * delta;
      bool ok = true;
      try {
        q_new = gee_objective(ds, gi, f, beta_new, wm);
      } catch (const EstimationError&) {
        ok = false;
      }
      if (ok && std::isfinite(q_new) && q_new <= q + 1e-12 * (1.0 + std::fabs(q))) break;
      scale *= 0.5;
    }
    if (halvings > opts.max_halvings) break;  // no descent; score check decides

    const double step = (scale * delta).lpNorm<Eigen::Infinity>();
    beta = beta_new;
    q = q_new;

    // The second step refines a consistent first step; iterates that leave
    // its neighborhood have escaped into a spurious basin of the quadratic
    // criterion (e.g. the count plateau where means collapse and residuals
    // equal y). Flag them as non-converged rather than report a far root.
    const double travel_cap =
        opts.max_travel * std::max(1.0, start.lpNorm<Eigen::Infinity>());
    if (opts.max_travel > 0.0 && (beta - start).lpNorm<Eigen::Infinity>() > travel_cap) {
      res.converged = false;
      res.beta = beta;
      return res;
    }
    if (f.is_count() && y_total > 0.0) {
      double m_total = 0.0;
      const Vector eta = ds.X * beta;
      for (int i = 0; i < ds.n(); ++i) m_total += mean_from_eta(f, eta[i]);
      if (m_total < 1e-2 * y_total) {
        res.converged = false;
        res.beta = beta;
        return res;
      }
    }
    if (step <= opts.tol) {
      Vector s2 = Vector::Zero(p);
      for (int g = 0; g < ngroups; ++g) {
        const auto ev = eval_group(ds, gi.groups[g], f, beta);
        s2.noalias() += ev.grad.transpose() * wm.solve(g, ev.u);
      }
      res.score_norm = s2.lpNorm<Eigen::Infinity>() / ngroups;
      res.converged = res.score_norm <= opts.tol;
      if (res.converged) break;
    }
  }

  res.beta = beta;
  return res;
}

GeeResult gee_fit(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                  const PqmleResult& first, const SpatialParams& sp, WorkingMode mode,
                  const KernelSpec& kernel, const SolverOptions& opts) {
  if (!first.converged) throw EstimationError("gee_fit requires a converged first step");
  // Working matrices frozen at the first-step coefficients.
  const WeightMatrixSet wm = build_weight_matrices(ds, gi, f, first.beta, sp, mode);
  GeeResult res = gee_solve(ds, gi, f, opts.start ? *opts.start : first.beta, wm, opts);
  res.spatial = sp;
  res.kernel = kernel;
  res.mode = mode;
  res.weight_repairs = wm.repaired_groups();
  return res;
}

Matrix sandwich_avar(const Dataset& ds, const GroupIndex& gi, const FamilySpec& f,
                     const Vector& beta, const SpatialParams& sp, WorkingMode mode,
                     const KernelSpec& kernel) {
  const int p = ds.p();
  const int ngroups = gi.n_groups();
  const WeightMatrixSet wm = build_weight_matrices(ds, gi, f, beta, sp, mode);

  Matrix bread = Matrix::Zero(p, p);
  Matrix z(ngroups, p);  // z_g' = (grad' W^-1 u)'
  for (int g = 0; g < ngroups; ++g) {
    const auto ev = eval_group(ds, gi.groups[g], f, beta);
    bread.noalias() += ev.grad.transpose() * wm.solve(g, Matrix(ev.grad));
    z.row(g) = (ev.grad.transpose() * wm.solve(g, ev.u)).transpose();
  }

  Matrix meat = Matrix::Zero(p, p);
  for (int g = 0; g < ngroups; ++g) {
    meat.noalias() += z.row(g).transpose() * z.row(g);  // own group, weight 1
    for (int h = g + 1; h < ngroups; ++h) {
      const double k = kernel.weight(group_distance(ds, gi, g, h));
      if (k == 0.0) continue;
      const Matrix cross = k * z.row(g).transpose() * z.row(h);
      meat.noalias() += cross + cross.transpose();
    }
  }

  const Matrix binv = solve_spd(bread, Matrix::Identity(p, p), "GEE sandwich bread");
  return symmetrize(binv * meat * binv);
}

PartialEffect partial_effects(const FamilySpec& f, const GeeResult& result, const Dataset& ds,
                              int covariate, EffectKind kind, double from, double to) {
  if (!result.converged) throw EstimationError("partial_effects requires a converged fit");
  if (covariate < 0 || covariate >= ds.p())
    throw ValidationError("partial_effects: covariate index out of range");
  if (result.avar.rows() != ds.p())
    throw EstimationError("partial_effects: fit carries no covariance matrix");
  const int n = ds.n();
  const int p = ds.p();
  const Vector& beta = result.beta;
  const Vector eta = ds.X * beta;

  double ape = 0.0;
  Vector jac = Vector::Zero(p);
  if (kind == EffectKind::continuous) {
    const double bj = beta[covariate];
    for (int i = 0; i < n; ++i) {
      const double h = mean_eta_derivative(f, eta[i]);
      const double hp = mean_eta_second_derivative(f, eta[i]);
      ape += h * bj;
      jac.noalias() += bj * hp * ds.X.row(i).transpose();
      jac[covariate] += h;
    }
  } else {
    for (int i = 0; i < n; ++i) {
      const double base = eta[i] - ds.X(i, covariate) * beta[covariate];
      const double eta_to = base + to * beta[covariate];
      const double eta_from = base + from * beta[covariate];
      ape += mean_from_eta(f, eta_to) - mean_from_eta(f, eta_from);
      Vector x_to = ds.X.row(i).transpose();
      x_to[covariate] = to;
      Vector x_from = ds.X.row(i).transpose();
      x_from[covariate] = from;
      jac.noalias() += mean_eta_derivative(f, eta_to) * x_to;
      jac.noalias() -= mean_eta_derivative(f, eta_from) * x_from;
    }
  }
  ape /= n;
  jac /= n;

  PartialEffect pe;
  pe.estimate = ape;
  pe.se = std::sqrt(std::max(0.0, jac.dot(result.avar * jac)));
  return pe;
}

}  // namespace spatialgee
