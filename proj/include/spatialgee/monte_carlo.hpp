#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "spatialgee/gee.hpp"
#include "spatialgee/simulator.hpp"

namespace spatialgee {

enum class EstimatorKind {
  pqmle_poisson,
  gee_poisson,
  pqmle_nb2,
  gee_nb2,
  pqmle_probit,
  gee_probit
};

struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::pqmle_poisson;
  CorrelationKind working = CorrelationKind::exchangeable;
  WorkingMode mode = WorkingMode::generic_correlation;
  RhoEstimator rho_est = RhoEstimator::lsq;

  bool is_gee() const;
  bool is_count() const;
  std::string name() const;
};

EstimatorKind parse_estimator_kind(const std::string& name);

struct McConfig {
  int reps = 1000;
  std::uint64_t seed = 0;
  std::vector<EstimatorSpec> estimators;
  int threads = 0;  // 0: SPATIAL_GEE_THREADS env or hardware concurrency
};

struct McSummary {
  struct Cell {
    double mean = 0.0;
    double sd = 0.0;
    double mcse_mean = 0.0;
    double mcse_sd = 0.0;
  };
  std::vector<std::string> estimator_names;
  std::vector<std::string> coef_names;           // slope coefficients (intercept omitted)
  std::vector<std::vector<Cell>> cells;          // [estimator][coef]
  std::vector<int> n_converged;                  // per estimator
  int reps = 0;
  bool single_rep = false;
  bool high_nonconvergence = false;              // > 5% failures for some estimator
  std::string warning;                           // DGP warnings (grid, rho = 1 fallback)

  void write_csv(std::ostream& os) const;
  std::string to_csv() const;
};

// Replicated experiment: per-replication substreams keyed by (seed, rep),
// fits requested estimators, and reports means / standard deviations over the
// converged replications. Output is identical for identical (seed, config,
// dgp) regardless of the number of worker threads.
McSummary run_monte_carlo(const McConfig& cfg, const DgpSpec& dgp);

// Resolves the worker count: explicit value, else SPATIAL_GEE_THREADS, else
// hardware concurrency.
int resolve_thread_count(int requested);

}  // namespace spatialgee
