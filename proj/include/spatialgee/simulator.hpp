#pragma once

#include <optional>
#include <string>

#include "spatialgee/data_model.hpp"
#include "spatialgee/rng.hpp"

namespace spatialgee {

struct LatticeSpec {
  int side = 20;        // even
  double spacing = 1.0;
};

// Dataset skeleton for a side x side lattice: coordinates {(r,s): 1..side}^2
// in row-major order, 2x2 tile grouping, placeholder response/covariates.
Dataset make_lattice(const LatticeSpec& spec);

enum class DgpKind { count_case1, count_case2, count_case3, probit_case1, probit_case2 };

const char* dgp_kind_name(DgpKind k);

struct DgpSpec {
  DgpKind kind = DgpKind::count_case1;
  double rho = 0.0;
  int side = 20;
  bool case2_double_rho = false;  // literal reading: a = (I - rho * W_rho)^-1 e
  double probit_threshold = 1.5;

  Vector beta_true() const;
  bool is_count() const { return kind != DgpKind::probit_case1 && kind != DgpKind::probit_case2; }
  // Empty when rho is on the paper's grid for this case; otherwise a warning.
  std::string grid_warning() const;
};

// Solves (I - rho W) x = eps directly; throws EstimationError when the system
// is singular or near-singular (condition estimate above 1e12).
Vector sar_error(const Matrix& w, double rho, const Vector& eps);

// Cholesky-based multivariate normal draws from a correlation matrix, with
// nearest-PD repair by eigenvalue flooring when the factorization fails.
class MvnSampler {
 public:
  explicit MvnSampler(Matrix sigma);
  Vector draw(Rng& rng) const;
  int dim() const { return static_cast<int>(chol_.rows()); }
  bool repaired() const { return repaired_; }
  double repair_delta() const { return repair_delta_; }

 private:
  Matrix chol_;
  bool repaired_ = false;
  double repair_delta_ = 0.0;
};

Vector mvn_sample(const Matrix& sigma, Rng& rng);

struct SimulatedData {
  Dataset data;
  Vector beta_true;
  std::string warning;
};

// Precomputed pieces of one data generating process (lattice, SAR block
// inverse or MVN factor). Immutable; generate() may run concurrently.
class DgpContext {
 public:
  explicit DgpContext(const DgpSpec& spec);
  SimulatedData generate(Rng& rng) const;
  const DgpSpec& spec() const { return spec_; }
  const Dataset& skeleton() const { return skeleton_; }
  const std::string& setup_warning() const { return setup_warning_; }

 private:
  DgpSpec spec_;
  double rho_eff_ = 0.0;
  Dataset skeleton_;
  GroupIndex gi_;
  Matrix block_a_;       // per-group (I - rho W_g)^-1 for the block SAR cases
  Vector block_sigma2_;  // per-position Var(a_l) within a block
  std::optional<MvnSampler> sampler_;  // dense correlation cases
  std::string setup_warning_;
};

// One-shot generators (convenience wrappers around DgpContext).
SimulatedData gen_count_case(const DgpSpec& spec, Rng& rng);
SimulatedData gen_probit_case(const DgpSpec& spec, Rng& rng);

}  // namespace spatialgee
