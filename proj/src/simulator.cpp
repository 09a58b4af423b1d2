#include "spatialgee/simulator.hpp"

#include <cmath>
#include <sstream>

namespace spatialgee {

Dataset make_lattice(const LatticeSpec& spec) {
  if (spec.side < 2 || spec.side % 2 != 0)
    throw ValidationError("make_lattice requires an even side >= 2");
  const int n = spec.side * spec.side;
  Dataset ds;
  ds.y = Vector::Zero(n);
  ds.X = Matrix::Ones(n, 1);
  ds.coords.resize(n, 2);
  for (int r = 0; r < spec.side; ++r)
    for (int s = 0; s < spec.side; ++s) {
      const int i = r * spec.side + s;
      ds.coords(i, 0) = (r + 1) * spec.spacing;
      ds.coords(i, 1) = (s + 1) * spec.spacing;
    }
  ds.group_id = block_grouping(spec.side);
  ds.metric = DistanceMetric::euclidean;
  ds.validate();
  return ds;
}

const char* dgp_kind_name(DgpKind k) {
  switch (k) {
    case DgpKind::count_case1: return "count1";
    case DgpKind::count_case2: return "count2";
    case DgpKind::count_case3: return "count3";
    case DgpKind::probit_case1: return "probit1";
    case DgpKind::probit_case2: return "probit2";
  }
  return "unknown";
}

Vector DgpSpec::beta_true() const {
  Vector b(4);
  switch (kind) {
    case DgpKind::count_case1:
    case DgpKind::count_case2:
      b << 0.5, 1.0, 1.0, 1.0;
      break;
    case DgpKind::count_case3:
      b << -1.0, 1.0, 1.0, 1.0;
      break;
    case DgpKind::probit_case1:
    case DgpKind::probit_case2:
      b << 1.0, 1.0, 1.0, 1.0;
      break;
  }
  return b;
}

std::string DgpSpec::grid_warning() const {
  const bool coarse = kind == DgpKind::count_case1 || kind == DgpKind::count_case2 ||
                      kind == DgpKind::probit_case1;
  const double grid1[] = {0.0, 0.5, 1.0, 1.5};
  const double grid2[] = {0.0, 0.2, 0.4, 0.6};
  for (double g : coarse ? grid1 : grid2)
    if (std::fabs(rho - g) < 1e-12) return "";
  std::ostringstream os;
  os << "rho=" << rho << " is outside the usual grid for " << dgp_kind_name(kind);
  return os.str();
}

Vector sar_error(const Matrix& w, double rho, const Vector& eps) {
  const int n = static_cast<int>(w.rows());
  if (w.cols() != n || eps.size() != n) throw ValidationError("sar_error: dimension mismatch");
  const Matrix a = Matrix::Identity(n, n) - rho * w;
  Eigen::PartialPivLU<Matrix> lu(a);
  const double rcond = lu.rcond();
  if (!(rcond > 1e-12)) {
    std::ostringstream os;
    os << "SAR system singular or near-singular at rho=" << rho;
    throw EstimationError(os.str());
  }
  Vector x = lu.solve(eps);
  const double resid = (a * x - eps).lpNorm<Eigen::Infinity>();
  if (!(resid < 1e-8 * std::max(1.0, eps.lpNorm<Eigen::Infinity>()))) {
    std::ostringstream os;
    os << "SAR solve residual " << resid << " too large at rho=" << rho;
    throw EstimationError(os.str());
  }
  return x;
}

MvnSampler::MvnSampler(Matrix sigma) {
  const int n = static_cast<int>(sigma.rows());
  if (sigma.cols() != n) throw ValidationError("mvn_sample: sigma must be square");
  if (!sigma.isApprox(sigma.transpose(), 1e-12))
    throw ValidationError("mvn_sample: sigma must be symmetric");
  for (int i = 0; i < n; ++i)
    if (std::fabs(sigma(i, i) - 1.0) > 1e-12)
      throw ValidationError("mvn_sample: sigma must have a unit diagonal");

  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() == Eigen::Success) {
    chol_ = llt.matrixL();
    return;
  }

  // Nearest-PD repair: floor eigenvalues at 1e-8, then rescale to unit diagonal.
  Eigen::SelfAdjointEigenSolver<Matrix> es(sigma);
  Vector ev = es.eigenvalues().cwiseMax(1e-8);
  Matrix repaired = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  const Vector d = repaired.diagonal().cwiseSqrt();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) repaired(i, j) /= d[i] * d[j];
  repaired = symmetrize(repaired);
  repair_delta_ = (repaired - sigma).cwiseAbs().maxCoeff();
  repaired_ = true;
  if (repair_delta_ > 0.05) {
    std::ostringstream os;
    os << "correlation matrix far from PD (repair changed an entry by " << repair_delta_ << ")";
    throw EstimationError(os.str());
  }
  llt.compute(repaired + 1e-12 * Matrix::Identity(n, n));
  if (llt.info() != Eigen::Success)
    throw EstimationError("correlation matrix repair failed to produce a PD matrix");
  chol_ = llt.matrixL();
}

Vector MvnSampler::draw(Rng& rng) const {
  Vector z(dim());
  for (int i = 0; i < dim(); ++i) z[i] = rng.normal();
  return chol_.triangularView<Eigen::Lower>() * z;
}

Vector mvn_sample(const Matrix& sigma, Rng& rng) { return MvnSampler(sigma).draw(rng); }

namespace {

// Within-tile distances repeat across groups, so one block describes them all.
Matrix block_weight_matrix(const DgpSpec& spec, const Dataset& skeleton,
                           const GroupIndex& gi) {
  const auto& rows = gi.groups[0];
  const int lg = static_cast<int>(rows.size());
  Matrix w = Matrix::Zero(lg, lg);
  if (spec.kind == DgpKind::count_case1 || spec.kind == DgpKind::probit_case1) {
    w.setConstant(1.0 / 3.0);
    w.diagonal().setZero();
  } else {  // count_case2: rho / (6 d)
    for (int a = 0; a < lg; ++a)
      for (int b = 0; b < lg; ++b)
        if (a != b)
          w(a, b) = spec.rho / (6.0 * pairwise_distance(skeleton, rows[a], rows[b]));
  }
  return w;
}

Matrix dense_correlation(const DgpSpec& spec, const Dataset& skeleton) {
  const int n = skeleton.n();
  Matrix sigma(n, n);
  for (int i = 0; i < n; ++i) {
    sigma(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j) {
      const double c = spec.rho / pairwise_distance(skeleton, i, j);
      sigma(i, j) = c;
      sigma(j, i) = c;
    }
  }
  return sigma;
}

}  // namespace

DgpContext::DgpContext(const DgpSpec& spec) : spec_(spec), rho_eff_(spec.rho) {
  skeleton_ = make_lattice({spec.side, 1.0});
  gi_ = GroupIndex::from_dataset(skeleton_);
  setup_warning_ = spec.grid_warning();

  const bool block_case = spec.kind == DgpKind::count_case1 ||
                          spec.kind == DgpKind::count_case2 ||
                          spec.kind == DgpKind::probit_case1;
  if (block_case) {
    const bool unit_block =
        spec.kind == DgpKind::count_case1 || spec.kind == DgpKind::probit_case1;
    if (unit_block && std::fabs(spec.rho - 1.0) < 1e-12) {
      // (I - W) is exactly singular for the row-sum-one block; substitute.
      rho_eff_ = 1.0 - 1e-6;
      if (!setup_warning_.empty()) setup_warning_ += "; ";
      setup_warning_ +=
          "rho=1 makes I - rho W singular for this design; using rho=1-1e-6 instead";
    }
    const Matrix w = block_weight_matrix(spec_, skeleton_, gi_);
    const int lg = static_cast<int>(w.rows());
    // Case 2's displayed block already contains rho; multiply only when the
    // literal double-rho reading is requested.
    const double mult = (spec.kind == DgpKind::count_case2 && !spec.case2_double_rho)
                            ? 1.0
                            : rho_eff_;
    const Matrix m = Matrix::Identity(lg, lg) - mult * w;
    Eigen::PartialPivLU<Matrix> lu(m);
    if (!(lu.rcond() > 1e-12)) {
      std::ostringstream os;
      os << "SAR system singular or near-singular at rho=" << spec.rho;
      throw EstimationError(os.str());
    }
    block_a_ = lu.solve(Matrix::Identity(lg, lg));
    block_sigma2_ = block_a_.array().square().rowwise().sum().matrix();
  } else {
    if (spec.rho != 0.0) {
      sampler_.emplace(dense_correlation(spec_, skeleton_));
      if (sampler_->repaired()) {
        if (!setup_warning_.empty()) setup_warning_ += "; ";
        std::ostringstream os;
        os << "correlation matrix repaired toward PD (max entry change "
           << sampler_->repair_delta() << ")";
        setup_warning_ += os.str();
      }
    }
  }
}

SimulatedData DgpContext::generate(Rng& rng) const {
  const int n = skeleton_.n();
  SimulatedData out;
  out.warning = setup_warning_;
  out.beta_true = spec_.beta_true();

  Dataset ds = skeleton_;
  ds.X.resize(n, 4);
  ds.covariate_names = {"const", "x2", "x3", "x4"};

  if (spec_.is_count()) {
    // Covariates: x2 ~ N(0, 0.25) (or MVN(0, W) in case 3), x3 ~ U(0,1),
    // x4 = 1[x5 > 0] with x5 ~ N(0,1).
    Vector x2(n);
    if (spec_.kind == DgpKind::count_case3 && sampler_) {
      x2 = sampler_->draw(rng);
    } else if (spec_.kind == DgpKind::count_case3) {
      for (int i = 0; i < n; ++i) x2[i] = rng.normal();
    } else {
      for (int i = 0; i < n; ++i) x2[i] = 0.25 * rng.normal();
    }
    Vector x3(n), x4(n);
    for (int i = 0; i < n; ++i) x3[i] = rng.uniform();
    for (int i = 0; i < n; ++i) x4[i] = rng.normal() > 0.0 ? 1.0 : 0.0;

    // Multiplicative lognormal error with E(v_i) = 1.
    Vector v(n);
    if (spec_.kind == DgpKind::count_case3) {
      Vector z(n);
      if (sampler_) {
        z = sampler_->draw(rng);
      } else {
        for (int i = 0; i < n; ++i) z[i] = rng.normal();
      }
      for (int i = 0; i < n; ++i) v[i] = std::exp(-0.5 + z[i]);
    } else {
      const int lg = static_cast<int>(block_a_.rows());
      Vector e(lg);
      for (int g = 0; g < gi_.n_groups(); ++g) {
        for (int a = 0; a < lg; ++a) e[a] = rng.normal();
        const Vector ag = block_a_ * e;
        for (int a = 0; a < lg; ++a)
          v[gi_.groups[g][a]] = std::exp(ag[a] - 0.5 * block_sigma2_[a]);
      }
    }

    const Vector b = out.beta_true;
    for (int i = 0; i < n; ++i) {
      ds.X(i, 0) = 1.0;
      ds.X(i, 1) = x2[i];
      ds.X(i, 2) = x3[i];
      ds.X(i, 3) = x4[i];
      const double m = v[i] * std::exp(b[0] + b[1] * x2[i] + b[2] * x3[i] + b[3] * x4[i]);
      ds.y[i] = static_cast<double>(rng.poisson(m));
    }
  } else {
    // Probit: x2 ~ N(1,1), x3 = 0.2 x2 - 1.2 e1, x5 = 0.2 x2 + 0.2 x3 + e2,
    // x4 = 1[x5 > 0]; latent y* = 1 + x2 + x3 + x4 + e4, y = 1[y* >= 1.5].
    Vector x2(n), x3(n), x4(n);
    for (int i = 0; i < n; ++i) x2[i] = 1.0 + rng.normal();
    for (int i = 0; i < n; ++i) x3[i] = 0.2 * x2[i] - 1.2 * rng.normal();
    for (int i = 0; i < n; ++i) {
      const double x5 = 0.2 * x2[i] + 0.2 * x3[i] + rng.normal();
      x4[i] = x5 > 0.0 ? 1.0 : 0.0;
    }

    Vector e4(n);
    if (spec_.kind == DgpKind::probit_case1) {
      const int lg = static_cast<int>(block_a_.rows());
      Vector e(lg);
      for (int g = 0; g < gi_.n_groups(); ++g) {
        for (int a = 0; a < lg; ++a) e[a] = rng.normal();
        const Vector eg = block_a_ * e;
        for (int a = 0; a < lg; ++a) e4[gi_.groups[g][a]] = eg[a];
      }
    } else if (sampler_) {
      e4 = sampler_->draw(rng);
    } else {
      for (int i = 0; i < n; ++i) e4[i] = rng.normal();
    }

    for (int i = 0; i < n; ++i) {
      ds.X(i, 0) = 1.0;
      ds.X(i, 1) = x2[i];
      ds.X(i, 2) = x3[i];
      ds.X(i, 3) = x4[i];
      const double ystar = 1.0 + x2[i] + x3[i] + x4[i] + e4[i];
      ds.y[i] = ystar >= spec_.probit_threshold ? 1.0 : 0.0;
    }
  }

  out.data = std::move(ds);
  return out;
}

SimulatedData gen_count_case(const DgpSpec& spec, Rng& rng) {
  if (!spec.is_count()) throw ValidationError("gen_count_case: spec is a probit design");
  return DgpContext(spec).generate(rng);
}

SimulatedData gen_probit_case(const DgpSpec& spec, Rng& rng) {
  if (spec.is_count()) throw ValidationError("gen_probit_case: spec is a count design");
  return DgpContext(spec).generate(rng);
}

}  // namespace spatialgee
