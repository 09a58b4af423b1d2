#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "spatialgee/gee.hpp"
#include "spatialgee/rng.hpp"
#include "spatialgee/simulator.hpp"

using namespace spatialgee;

namespace {

struct Instance {
  Dataset ds;
  GroupIndex gi;
};

Instance make_instance(int n, int group_size, FamilyKind kind, Rng& rng,
                       const Vector& beta, double extra_corr = 0.0) {
  Dataset ds;
  ds.y.resize(n);
  ds.X.resize(n, beta.size());
  ds.coords.resize(n, 2);
  ds.group_id.resize(n);
  double common = 0.0;
  for (int i = 0; i < n; ++i) {
    if (i % group_size == 0) common = rng.normal();
    ds.X(i, 0) = 1.0;
    for (int j = 1; j < beta.size(); ++j) ds.X(i, j) = rng.normal();
    ds.coords(i, 0) = i % 7 + 0.1 * (i / 7);
    ds.coords(i, 1) = i / 7;
    ds.group_id[i] = i / group_size;
    const double eta = ds.X.row(i).dot(beta);
    if (kind == FamilyKind::bernoulli_probit) {
      ds.y[i] = static_cast<double>(rng.bernoulli(normal_cdf(eta + extra_corr * common)));
    } else {
      const double v = extra_corr > 0.0 ? std::exp(extra_corr * common -
                                                   0.5 * extra_corr * extra_corr)
                                        : 1.0;
      ds.y[i] = static_cast<double>(rng.poisson(v * std::exp(eta)));
    }
  }
  Instance inst{std::move(ds), {}};
  inst.gi = GroupIndex::from_dataset(inst.ds);
  return inst;
}

}  // namespace

TEST_CASE("gee objective basics and loop oracle") {
  Rng rng(11, 0);
  Vector beta(2);
  beta << 0.3, 0.5;
  auto inst = make_instance(12, 3, FamilyKind::poisson, rng, beta);
  SpatialParams sp;
  sp.corr = {CorrelationKind::exchangeable, 0.3};
  const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), beta, sp,
                                        WorkingMode::generic_correlation);

  SUBCASE("zero at y = m") {
    Dataset exact = inst.ds;
    for (int i = 0; i < exact.n(); ++i)
      exact.y[i] = mean(FamilySpec::poisson(), exact.X.row(i), beta);
    CHECK(gee_objective(exact, inst.gi, FamilySpec::poisson(), beta, wm) ==
          doctest::Approx(0.0));
  }
  SUBCASE("single group with identity W and residual (1,-1)") {
    Dataset two;
    two.y.resize(2);
    two.X.resize(2, 1);
    two.X << 0.0, 0.0;
    two.coords = Matrix::Zero(2, 2);
    two.coords(1, 0) = 1.0;
    two.group_id = {0, 0};
    two.y << 2.0, 0.0;  // m = 1 each, residuals (1, -1)
    const auto gi2 = GroupIndex::from_dataset(two);
    SpatialParams ind;
    const auto w2 = build_weight_matrices(two, gi2, FamilySpec::poisson(), Vector::Zero(1),
                                          ind, WorkingMode::generic_correlation);
    // W = I (Poisson variances at m = 1), q = 1 + 1 = 2.
    CHECK(gee_objective(two, gi2, FamilySpec::poisson(), Vector::Zero(1), w2) ==
          doctest::Approx(2.0));
  }
  SUBCASE("random instance matches a straight-loop oracle") {
    double want = 0.0;
    for (int g = 0; g < inst.gi.n_groups(); ++g) {
      const auto& rows = inst.gi.groups[g];
      const int lg = static_cast<int>(rows.size());
      Vector u(lg);
      for (int a = 0; a < lg; ++a)
        u[a] = inst.ds.y[rows[a]] - mean(FamilySpec::poisson(), inst.ds.X.row(rows[a]), beta);
      const Matrix winv = wm.w(g).inverse();
      double q = 0.0;
      for (int a = 0; a < lg; ++a)
        for (int b = 0; b < lg; ++b) q += u[a] * winv(a, b) * u[b];
      want += q;
    }
    want /= inst.gi.n_groups();
    CHECK(gee_objective(inst.ds, inst.gi, FamilySpec::poisson(), beta, wm) ==
          doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("quasi score: reductions, oracle and gradient consistency") {
  Rng rng(13, 1);
  Vector beta(2);
  beta << 0.2, 0.4;
  auto inst = make_instance(18, 3, FamilyKind::poisson, rng, beta);

  SUBCASE("zero at y = m") {
    Dataset exact = inst.ds;
    for (int i = 0; i < exact.n(); ++i)
      exact.y[i] = mean(FamilySpec::poisson(), exact.X.row(i), beta);
    SpatialParams sp;
    sp.corr = {CorrelationKind::exchangeable, 0.2};
    const auto wm = build_weight_matrices(exact, inst.gi, FamilySpec::poisson(), beta, sp,
                                          WorkingMode::generic_correlation);
    CHECK(quasi_score(exact, inst.gi, FamilySpec::poisson(), beta, wm).norm() ==
          doctest::Approx(0.0));
  }
  SUBCASE("independence working matrices reduce to the pooled score") {
    SpatialParams ind;
    const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), beta,
                                          ind, WorkingMode::generic_correlation);
    const Vector qs = quasi_score(inst.ds, inst.gi, FamilySpec::poisson(), beta, wm);
    Vector pooled = Vector::Zero(2);
    for (int i = 0; i < inst.ds.n(); ++i)
      pooled += score_obs(FamilySpec::poisson(), inst.ds.y[i], inst.ds.X.row(i), beta);
    pooled /= inst.gi.n_groups();
    CHECK((qs - pooled).lpNorm<Eigen::Infinity>() <=
          1e-10 * std::max(1.0, pooled.lpNorm<Eigen::Infinity>()));
  }
  SUBCASE("random instance matches a straight-loop oracle") {
    SpatialParams sp;
    sp.corr = {CorrelationKind::cressie_exp, 1.3};
    const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), beta, sp,
                                          WorkingMode::generic_correlation);
    const Vector got = quasi_score(inst.ds, inst.gi, FamilySpec::poisson(), beta, wm);
    Vector want = Vector::Zero(2);
    for (int g = 0; g < inst.gi.n_groups(); ++g) {
      const auto& rows = inst.gi.groups[g];
      const int lg = static_cast<int>(rows.size());
      Vector u(lg);
      Matrix grad(lg, 2);
      for (int a = 0; a < lg; ++a) {
        const double m = mean(FamilySpec::poisson(), inst.ds.X.row(rows[a]), beta);
        u[a] = inst.ds.y[rows[a]] - m;
        grad.row(a) = m * inst.ds.X.row(rows[a]);
      }
      want += grad.transpose() * wm.w(g).inverse() * u;
    }
    want /= inst.gi.n_groups();
    CHECK((got - want).lpNorm<Eigen::Infinity>() <=
          1e-12 * std::max(1.0, want.lpNorm<Eigen::Infinity>()));
  }
  SUBCASE("equals -1/2 gradient of Q_G with W frozen, and Hessian matches FD") {
    for (const FamilyKind kind : {FamilyKind::poisson, FamilyKind::bernoulli_probit}) {
      const FamilySpec f =
          kind == FamilyKind::poisson ? FamilySpec::poisson() : FamilySpec::probit();
      auto inst2 = make_instance(16, 4, kind, rng, beta);
      SpatialParams sp;
      sp.corr = {CorrelationKind::exchangeable, 0.25};
      const auto wm = build_weight_matrices(inst2.ds, inst2.gi, f, beta, sp,
                                            WorkingMode::generic_correlation);
      const Vector fd = oracle::fd_gradient(
          [&](const Vector& b) { return gee_objective(inst2.ds, inst2.gi, f, b, wm); },
          beta, 1e-6);
      const Vector qs = quasi_score(inst2.ds, inst2.gi, f, beta, wm);
      CHECK((qs + 0.5 * fd).lpNorm<Eigen::Infinity>() <=
            1e-5 * std::max(1.0, qs.lpNorm<Eigen::Infinity>()));

      const Matrix h = gee_hessian_diagnostic(inst2.ds, inst2.gi, f, beta, wm);
      for (int j = 0; j < 2; ++j) {
        Vector hi = beta, lo = beta;
        hi[j] += 1e-6;
        lo[j] -= 1e-6;
        const Vector col = (quasi_score(inst2.ds, inst2.gi, f, hi, wm) -
                            quasi_score(inst2.ds, inst2.gi, f, lo, wm)) /
                           2e-6;
        CHECK((h.col(j) - col).lpNorm<Eigen::Infinity>() <=
              1e-4 * std::max(1.0, col.lpNorm<Eigen::Infinity>()));
      }
    }
  }
}

TEST_CASE("gee_fit reduces to the first step under independence") {
  Rng rng(29, 2);
  Vector beta(3);
  beta << 0.3, 0.6, -0.4;
  const KernelSpec kernel{KernelKind::bartlett, 2.0};
  for (const FamilyKind kind : {FamilyKind::poisson, FamilyKind::bernoulli_probit}) {
    const FamilySpec f =
        kind == FamilyKind::poisson ? FamilySpec::poisson() : FamilySpec::probit();
    auto inst = make_instance(60, 4, kind, rng, beta, 0.5);
    const auto first = fit_pqmle(inst.ds, f);
    REQUIRE(first.converged);
    SpatialParams ind;
    const auto gee = gee_fit(inst.ds, inst.gi, f, first, ind,
                             WorkingMode::generic_correlation, kernel);
    REQUIRE(gee.converged);
    CHECK((gee.beta - first.beta).lpNorm<Eigen::Infinity>() < 1e-6);
  }
}

TEST_CASE("gee_fit matches a 2-D grid minimizer of Q_G on a tiny instance") {
  Rng rng(37, 3);
  Vector beta(2);
  beta << 0.4, 0.7;
  auto inst = make_instance(6, 2, FamilyKind::poisson, rng, beta, 0.6);
  const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
  REQUIRE(first.converged);
  SpatialParams sp;
  sp.corr = {CorrelationKind::exchangeable, 0.35};
  const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), first.beta,
                                        sp, WorkingMode::generic_correlation);
  const auto gee = gee_fit(inst.ds, inst.gi, FamilySpec::poisson(), first, sp,
                           WorkingMode::generic_correlation, {KernelKind::bartlett, 2.0});
  REQUIRE(gee.converged);
  const Vector grid = oracle::grid_argmin_2d(
      [&](const Vector& b) {
        return gee_objective(inst.ds, inst.gi, FamilySpec::poisson(), b, wm);
      },
      -3.0, 3.0, 501);
  const double cell = 6.0 / 500.0;
  CHECK(std::fabs(gee.beta[0] - grid[0]) <= cell);
  CHECK(std::fabs(gee.beta[1] - grid[1]) <= cell);
}

TEST_CASE("argmin is invariant to scaling every W by a constant") {
  Rng rng(43, 4);
  Vector beta(2);
  beta << 0.2, 0.5;
  auto inst = make_instance(24, 4, FamilyKind::poisson, rng, beta, 0.4);
  const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
  REQUIRE(first.converged);
  SpatialParams sp;
  sp.tau2 = estimate_tau2(first);
  sp.corr = {CorrelationKind::exchangeable, 0.3};
  const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), first.beta,
                                        sp, WorkingMode::poisson_structural);
  SolverOptions tight;
  tight.tol = 1e-12;
  const auto fit1 = gee_solve(inst.ds, inst.gi, FamilySpec::poisson(), first.beta, wm, tight);
  const auto fit2 = gee_solve(inst.ds, inst.gi, FamilySpec::poisson(), first.beta,
                              wm.scaled(37.5), tight);
  REQUIRE(fit1.converged);
  REQUIRE(fit2.converged);
  CHECK((fit1.beta - fit2.beta).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("group relabeling leaves the fit unchanged") {
  Rng rng(53, 5);
  Vector beta(2);
  beta << 0.3, 0.5;
  auto inst = make_instance(40, 4, FamilyKind::poisson, rng, beta, 0.5);
  const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
  REQUIRE(first.converged);
  SpatialParams sp;
  sp.corr = {CorrelationKind::exchangeable,
             estimate_exchangeable(first.std_residuals, inst.gi)};
  const KernelSpec kernel{KernelKind::bartlett, 2.5};
  const auto gee1 = gee_fit(inst.ds, inst.gi, FamilySpec::poisson(), first, sp,
                            WorkingMode::generic_correlation, kernel);
  const Matrix avar1 = sandwich_avar(inst.ds, inst.gi, FamilySpec::poisson(), gee1.beta, sp,
                                     WorkingMode::generic_correlation, kernel);

  // Reverse group labels.
  Dataset relabeled = inst.ds;
  const int g = inst.ds.n_groups();
  for (int i = 0; i < inst.ds.n(); ++i) relabeled.group_id[i] = g - 1 - inst.ds.group_id[i];
  const auto gi2 = GroupIndex::from_dataset(relabeled);
  const auto first2 = fit_pqmle(relabeled, FamilySpec::poisson());
  const auto gee2 = gee_fit(relabeled, gi2, FamilySpec::poisson(), first2, sp,
                            WorkingMode::generic_correlation, kernel);
  const Matrix avar2 = sandwich_avar(relabeled, gi2, FamilySpec::poisson(), gee2.beta, sp,
                                     WorkingMode::generic_correlation, kernel);
  CHECK((gee1.beta - gee2.beta).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK((avar1 - avar2).cwiseAbs().maxCoeff() < 1e-10 * avar1.cwiseAbs().maxCoeff());
}

TEST_CASE("sandwich: clustered oracle below the minimum group distance") {
  Rng rng(59, 6);
  Vector beta(2);
  beta << 0.4, 0.6;
  auto inst = make_instance(36, 3, FamilyKind::poisson, rng, beta, 0.5);
  const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
  REQUIRE(first.converged);
  SpatialParams sp;
  sp.corr = {CorrelationKind::exchangeable, 0.25};

  double dmin = 1e300;
  for (int g = 0; g < inst.gi.n_groups(); ++g)
    for (int h = g + 1; h < inst.gi.n_groups(); ++h)
      dmin = std::min(dmin, group_distance(inst.ds, inst.gi, g, h));
  const KernelSpec below{KernelKind::truncation, 0.5 * dmin};
  const auto gee = gee_fit(inst.ds, inst.gi, FamilySpec::poisson(), first, sp,
                           WorkingMode::generic_correlation, below);
  REQUIRE(gee.converged);
  const Matrix avar = sandwich_avar(inst.ds, inst.gi, FamilySpec::poisson(), gee.beta, sp,
                                    WorkingMode::generic_correlation, below);

  // Independent clustered-sandwich loop: bread and per-group scores assembled
  // with explicit inverses and no kernel.
  const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), gee.beta,
                                        sp, WorkingMode::generic_correlation);
  Matrix bread = Matrix::Zero(2, 2), meat = Matrix::Zero(2, 2);
  for (int g = 0; g < inst.gi.n_groups(); ++g) {
    const auto& rows = inst.gi.groups[g];
    const int lg = static_cast<int>(rows.size());
    Matrix grad(lg, 2);
    Vector u(lg);
    for (int a = 0; a < lg; ++a) {
      const double m = mean(FamilySpec::poisson(), inst.ds.X.row(rows[a]), gee.beta);
      grad.row(a) = m * inst.ds.X.row(rows[a]);
      u[a] = inst.ds.y[rows[a]] - m;
    }
    const Matrix winv = wm.w(g).inverse();
    bread += grad.transpose() * winv * grad;
    const Vector z = grad.transpose() * winv * u;
    meat += z * z.transpose();
  }
  const Matrix want = bread.inverse() * meat * bread.inverse();
  CHECK((avar - want).cwiseAbs().maxCoeff() <= 1e-10 * want.cwiseAbs().maxCoeff());
  CHECK(avar.isApprox(avar.transpose()));
  CHECK(avar(0, 0) >= 0.0);
  CHECK(avar(1, 1) >= 0.0);
}

TEST_CASE("sandwich: two-group full double sum by hand") {
  Rng rng(61, 7);
  Vector beta(2);
  beta << 0.3, 0.4;
  auto inst = make_instance(6, 3, FamilyKind::poisson, rng, beta, 0.3);
  const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
  REQUIRE(first.converged);
  SpatialParams sp;
  sp.corr = {CorrelationKind::exchangeable, 0.2};
  const KernelSpec wide{KernelKind::truncation, 1e6};  // k = 1 everywhere
  const auto gee = gee_fit(inst.ds, inst.gi, FamilySpec::poisson(), first, sp,
                           WorkingMode::generic_correlation, wide);
  const Matrix avar = sandwich_avar(inst.ds, inst.gi, FamilySpec::poisson(), gee.beta, sp,
                                    WorkingMode::generic_correlation, wide);

  const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), gee.beta,
                                        sp, WorkingMode::generic_correlation);
  std::vector<Vector> z;
  Matrix bread = Matrix::Zero(2, 2);
  for (int g = 0; g < 2; ++g) {
    const auto& rows = inst.gi.groups[g];
    Matrix grad(3, 2);
    Vector u(3);
    for (int a = 0; a < 3; ++a) {
      const double m = mean(FamilySpec::poisson(), inst.ds.X.row(rows[a]), gee.beta);
      grad.row(a) = m * inst.ds.X.row(rows[a]);
      u[a] = inst.ds.y[rows[a]] - m;
    }
    const Matrix winv = wm.w(g).inverse();
    bread += grad.transpose() * winv * grad;
    z.push_back(grad.transpose() * winv * u);
  }
  const Matrix meat = z[0] * z[0].transpose() + z[1] * z[1].transpose() +
                      z[0] * z[1].transpose() + z[1] * z[0].transpose();
  const Matrix want = bread.inverse() * meat * bread.inverse();
  CHECK((avar - want).cwiseAbs().maxCoeff() <= 1e-10 * want.cwiseAbs().maxCoeff());
}

TEST_CASE("partial effects") {
  Rng rng(67, 8);
  SUBCASE("zero coefficient gives zero APE") {
    Vector beta(2);
    beta << 0.5, 0.0;
    auto inst = make_instance(30, 3, FamilyKind::poisson, rng, beta);
    GeeResult fake;
    fake.converged = true;
    fake.beta = beta;
    fake.avar = 0.01 * Matrix::Identity(2, 2);
    const auto pe =
        partial_effects(FamilySpec::poisson(), fake, inst.ds, 1, EffectKind::continuous);
    CHECK(pe.estimate == 0.0);
  }
  SUBCASE("probit effect at x beta = 0 is phi(0)") {
    Dataset one;
    one.y = Vector::Zero(1);
    one.X = Matrix::Zero(1, 1);
    one.coords = Matrix::Zero(1, 2);
    one.group_id = {0};
    GeeResult fake;
    fake.converged = true;
    fake.beta = Vector::Ones(1);
    fake.avar = Matrix::Zero(1, 1);
    const auto pe =
        partial_effects(FamilySpec::probit(), fake, one, 0, EffectKind::continuous);
    CHECK(pe.estimate == doctest::Approx(0.3989422804).epsilon(1e-8));
  }
  SUBCASE("delta-method se tracks a parametric bootstrap") {
    Vector beta(2);
    beta << 0.4, 0.6;
    auto inst = make_instance(80, 4, FamilyKind::poisson, rng, beta, 0.4);
    const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
    REQUIRE(first.converged);
    SpatialParams sp;
    sp.corr = {CorrelationKind::exchangeable,
               estimate_exchangeable(first.std_residuals, inst.gi)};
    const KernelSpec kernel{KernelKind::bartlett,
                            default_group_bandwidth(inst.ds, inst.gi)};
    auto gee = gee_fit(inst.ds, inst.gi, FamilySpec::poisson(), first, sp,
                       WorkingMode::generic_correlation, kernel);
    REQUIRE(gee.converged);
    gee.avar = sandwich_avar(inst.ds, inst.gi, FamilySpec::poisson(), gee.beta, sp,
                             WorkingMode::generic_correlation, kernel);
    const auto pe =
        partial_effects(FamilySpec::poisson(), gee, inst.ds, 1, EffectKind::continuous);

    // 500 draws from N(beta, avar), APE recomputed per draw.
    Eigen::LLT<Matrix> llt(gee.avar);
    REQUIRE(llt.info() == Eigen::Success);
    const Matrix chol = llt.matrixL();
    Rng brng(2025, 17);
    std::vector<double> apes;
    for (int b = 0; b < 500; ++b) {
      Vector z(2);
      z << brng.normal(), brng.normal();
      const Vector bb = gee.beta + chol * z;
      double a = 0.0;
      for (int i = 0; i < inst.ds.n(); ++i)
        a += std::exp(inst.ds.X.row(i).dot(bb)) * bb[1];
      apes.push_back(a / inst.ds.n());
    }
    double mean = 0.0;
    for (double a : apes) mean += a;
    mean /= apes.size();
    double var = 0.0;
    for (double a : apes) var += (a - mean) * (a - mean);
    const double boot_se = std::sqrt(var / (apes.size() - 1));
    CHECK(pe.se == doctest::Approx(boot_se).epsilon(0.15));
  }
  SUBCASE("discrete effect equals the difference of means") {
    Vector beta(2);
    beta << 0.2, 0.7;
    auto inst = make_instance(20, 2, FamilyKind::poisson, rng, beta);
    GeeResult fake;
    fake.converged = true;
    fake.beta = beta;
    fake.avar = 0.01 * Matrix::Identity(2, 2);
    const auto pe = partial_effects(FamilySpec::poisson(), fake, inst.ds, 1,
                                    EffectKind::discrete, 0.0, 1.0);
    double want = 0.0;
    for (int i = 0; i < inst.ds.n(); ++i) {
      const double base = inst.ds.X(i, 0) * beta[0];
      want += std::exp(base + beta[1]) - std::exp(base);
    }
    want /= inst.ds.n();
    CHECK(pe.estimate == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("probit two-step with a distance-decay working model") {
  Rng rng(71, 9);
  Vector beta(3);
  beta << 0.2, 0.6, -0.5;
  auto inst = make_instance(80, 4, FamilyKind::bernoulli_probit, rng, beta, 0.8);
  const auto first = fit_pqmle(inst.ds, FamilySpec::probit());
  REQUIRE(first.converged);
  const auto sp = estimate_spatial_params(inst.ds, inst.gi, first, 0.0,
                                          CorrelationKind::cressie_exp,
                                          WorkingMode::generic_correlation);
  const KernelSpec gk{KernelKind::bartlett, default_group_bandwidth(inst.ds, inst.gi)};
  const auto gee = gee_fit(inst.ds, inst.gi, FamilySpec::probit(), first, sp,
                           WorkingMode::generic_correlation, gk);
  CHECK(gee.converged);
  CHECK(gee.beta.allFinite());
  // Structural mode is count-only.
  CHECK_THROWS_AS(estimate_spatial_params(inst.ds, inst.gi, first, 0.0,
                                          CorrelationKind::exchangeable,
                                          WorkingMode::poisson_structural),
                  ValidationError);
}

TEST_CASE("solver guards: travel bound and step cap") {
  Rng rng(73, 2);
  Vector beta(2);
  beta << 0.3, 0.5;
  auto inst = make_instance(24, 4, FamilyKind::poisson, rng, beta, 0.4);
  const auto first = fit_pqmle(inst.ds, FamilySpec::poisson());
  REQUIRE(first.converged);
  SpatialParams sp;
  sp.corr = {CorrelationKind::exchangeable, 0.3};
  const auto wm = build_weight_matrices(inst.ds, inst.gi, FamilySpec::poisson(), first.beta,
                                        sp, WorkingMode::generic_correlation);

  // A start far from the root forces travel beyond a tiny bound.
  SolverOptions tight;
  tight.max_travel = 1e-4;
  Vector far = first.beta;
  far[1] += 1.0;
  const auto guarded = gee_solve(inst.ds, inst.gi, FamilySpec::poisson(), far, wm, tight);
  CHECK_FALSE(guarded.converged);

  // A small step cap changes the path but not the answer.
  SolverOptions capped;
  capped.max_step = 0.05;
  capped.max_iter = 400;
  const auto a = gee_solve(inst.ds, inst.gi, FamilySpec::poisson(), first.beta, wm);
  const auto b = gee_solve(inst.ds, inst.gi, FamilySpec::poisson(), far, wm, capped);
  REQUIRE(a.converged);
  REQUIRE(b.converged);
  CHECK((a.beta - b.beta).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("delta-method intervals roughly attain nominal coverage") {
  // Weak calibration smoke test: 95% intervals for a correctly specified mean
  // across 200 seeded replications, allowed nominal rate +- 3 mc se.
  DgpSpec dgp;
  dgp.kind = DgpKind::count_case1;
  dgp.rho = 0.5;
  dgp.side = 20;
  const DgpContext ctx(dgp);
  int cover = 0, n = 0;
  for (int rep = 0; rep < 200; ++rep) {
    Rng rng(777, rep);
    const auto sim = ctx.generate(rng);
    const auto gi = GroupIndex::from_dataset(sim.data);
    try {
      const auto first = fit_pqmle(sim.data, FamilySpec::poisson());
      if (!first.converged) continue;
      const double t2 = estimate_tau2(first);
      const auto sp = estimate_spatial_params(sim.data, gi, first, t2,
                                              CorrelationKind::exchangeable,
                                              WorkingMode::generic_correlation);
      const KernelSpec gk{KernelKind::bartlett, default_group_bandwidth(sim.data, gi)};
      const auto r = gee_fit(sim.data, gi, FamilySpec::poisson(), first, sp,
                             WorkingMode::generic_correlation, gk);
      if (!r.converged) continue;
      const Matrix avar = sandwich_avar(sim.data, gi, FamilySpec::poisson(), r.beta, sp,
                                        WorkingMode::generic_correlation, gk);
      const double se = std::sqrt(avar(1, 1));
      ++n;
      if (std::fabs(r.beta[1] - 1.0) <= 1.959963984540054 * se) ++cover;
    } catch (const std::exception&) {
    }
  }
  REQUIRE(n >= 190);
  const double rate = static_cast<double>(cover) / n;
  const double mcse = std::sqrt(0.95 * 0.05 / n);
  CHECK(rate >= 0.95 - 3.0 * mcse);
  CHECK(rate <= 0.95 + 3.0 * mcse);
}

TEST_CASE("kernel shapes") {
  const KernelSpec bart{KernelKind::bartlett, 2.0};
  CHECK(bart.weight(0.0) == 1.0);
  CHECK(bart.weight(1.0) == doctest::Approx(0.5));
  CHECK(bart.weight(2.0) == 0.0);
  CHECK(bart.weight(5.0) == 0.0);
  const KernelSpec trunc{KernelKind::truncation, 2.0};
  CHECK(trunc.weight(1.9999) == 1.0);
  CHECK(trunc.weight(2.0) == 0.0);
}
