#include "spatialgee/monte_carlo.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <thread>

namespace spatialgee {

bool EstimatorSpec::is_gee() const {
  return kind == EstimatorKind::gee_poisson || kind == EstimatorKind::gee_nb2 ||
         kind == EstimatorKind::gee_probit;
}

bool EstimatorSpec::is_count() const {
  return kind != EstimatorKind::pqmle_probit && kind != EstimatorKind::gee_probit;
}

std::string EstimatorSpec::name() const {
  std::string base;
  switch (kind) {
    case EstimatorKind::pqmle_poisson: base = "pqmle-poisson"; break;
    case EstimatorKind::gee_poisson: base = "gee-poisson"; break;
    case EstimatorKind::pqmle_nb2: base = "pqmle-nb2"; break;
    case EstimatorKind::gee_nb2: base = "gee-nb2"; break;
    case EstimatorKind::pqmle_probit: base = "pqmle-probit"; break;
    case EstimatorKind::gee_probit: base = "gee-probit"; break;
  }
  if (is_gee() && working != CorrelationKind::exchangeable)
    base += std::string("[") + correlation_kind_name(working) + "]";
  if (is_gee() && mode == WorkingMode::poisson_structural) base += "[structural]";
  return base;
}

EstimatorKind parse_estimator_kind(const std::string& name) {
  if (name == "pqmle-poisson" || name == "poisson") return EstimatorKind::pqmle_poisson;
  if (name == "gee-poisson") return EstimatorKind::gee_poisson;
  if (name == "pqmle-nb2" || name == "nb2") return EstimatorKind::pqmle_nb2;
  if (name == "gee-nb2") return EstimatorKind::gee_nb2;
  if (name == "pqmle-probit" || name == "probit") return EstimatorKind::pqmle_probit;
  if (name == "gee-probit") return EstimatorKind::gee_probit;
  throw ValidationError("unknown estimator '" + name +
                        "' (expected pqmle-poisson, gee-poisson, pqmle-nb2, gee-nb2, "
                        "pqmle-probit or gee-probit)");
}

int resolve_thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SPATIAL_GEE_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

struct RepOutcome {
  // One optional coefficient vector per estimator; empty means failed.
  std::vector<std::optional<Vector>> beta;
};

RepOutcome run_replication_impl(const DgpContext& ctx, const McConfig& cfg,
                                std::uint64_t rep) {
  Rng rng(cfg.seed, rep);
  const SimulatedData sim = ctx.generate(rng);
  const Dataset& ds = sim.data;
  const GroupIndex gi = GroupIndex::from_dataset(ds);

  const auto& specs = cfg.estimators;
  RepOutcome out;
  out.beta.resize(specs.size());

  bool need_poisson = false, need_tau2 = false, need_nb2 = false, need_probit = false;
  for (const auto& s : specs) {
    if (s.is_count()) need_poisson = true;
    if (s.kind == EstimatorKind::gee_poisson || s.kind == EstimatorKind::pqmle_nb2 ||
        s.kind == EstimatorKind::gee_nb2)
      need_tau2 = true;
    if (s.kind == EstimatorKind::pqmle_nb2 || s.kind == EstimatorKind::gee_nb2)
      need_nb2 = true;
    if (!s.is_count()) need_probit = true;
  }

  std::optional<PqmleResult> poisson_first, nb2_first, probit_first;
  double tau2 = 0.0;
  try {
    if (need_poisson) {
      auto r = fit_pqmle(ds, FamilySpec::poisson());
      if (r.converged) poisson_first = std::move(r);
    }
    if (need_tau2 && poisson_first) tau2 = estimate_tau2(*poisson_first);
    if (need_nb2 && poisson_first) {
      auto r = fit_pqmle(ds, FamilySpec::negbin2(tau2));
      if (r.converged) nb2_first = std::move(r);
    }
  } catch (const std::exception&) {
    poisson_first.reset();
    nb2_first.reset();
  }
  try {
    if (need_probit) {
      auto r = fit_pqmle(ds, FamilySpec::probit());
      if (r.converged) probit_first = std::move(r);
    }
  } catch (const std::exception&) {
    probit_first.reset();
  }

  const KernelSpec kernel{KernelKind::bartlett, 1.0};  // avar not computed here
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    try {
      switch (s.kind) {
        case EstimatorKind::pqmle_poisson:
          if (poisson_first) out.beta[k] = poisson_first->beta;
          break;
        case EstimatorKind::pqmle_nb2:
          if (nb2_first) out.beta[k] = nb2_first->beta;
          break;
        case EstimatorKind::pqmle_probit:
          if (probit_first) out.beta[k] = probit_first->beta;
          break;
        case EstimatorKind::gee_poisson: {
          if (!poisson_first) break;
          const auto sp = estimate_spatial_params(ds, gi, *poisson_first, tau2, s.working,
                                                  s.mode, s.rho_est);
          auto r = gee_fit(ds, gi, FamilySpec::poisson(), *poisson_first, sp, s.mode,
                           kernel, {});
          if (r.converged) out.beta[k] = std::move(r.beta);
          break;
        }
        case EstimatorKind::gee_nb2: {
          if (!nb2_first) break;
          const auto sp =
              estimate_spatial_params(ds, gi, *nb2_first, tau2, s.working, s.mode, s.rho_est);
          auto r = gee_fit(ds, gi, FamilySpec::negbin2(tau2), *nb2_first, sp, s.mode, kernel,
                           {});
          if (r.converged) out.beta[k] = std::move(r.beta);
          break;
        }
        case EstimatorKind::gee_probit: {
          if (!probit_first) break;
          const auto sp = estimate_spatial_params(ds, gi, *probit_first, 0.0, s.working,
                                                  s.mode, s.rho_est);
          auto r =
              gee_fit(ds, gi, FamilySpec::probit(), *probit_first, sp, s.mode, kernel, {});
          if (r.converged) out.beta[k] = std::move(r.beta);
          break;
        }
      }
    } catch (const std::exception&) {
      out.beta[k].reset();
    }
  }
  return out;
}

// Nothing may escape a worker thread; a failed replication counts as
// non-converged for every estimator.
RepOutcome run_replication(const DgpContext& ctx, const McConfig& cfg, std::uint64_t rep) {
  try {
    return run_replication_impl(ctx, cfg, rep);
  } catch (const std::exception&) {
    RepOutcome out;
    out.beta.resize(cfg.estimators.size());
    return out;
  }
}

}  // namespace

McSummary run_monte_carlo(const McConfig& cfg, const DgpSpec& dgp) {
  if (cfg.reps < 1) throw ValidationError("run_monte_carlo requires reps >= 1");
  if (cfg.estimators.empty()) throw ValidationError("run_monte_carlo: no estimators requested");
  for (const auto& s : cfg.estimators) {
    if (s.is_count() != dgp.is_count())
      throw ValidationError("estimator " + s.name() + " does not match the " +
                            dgp_kind_name(dgp.kind) + " design");
  }

  const DgpContext ctx(dgp);
  const int reps = cfg.reps;
  std::vector<RepOutcome> results(reps);

  const int threads = std::min(resolve_thread_count(cfg.threads), reps);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= reps) return;
      results[rep] = run_replication(ctx, cfg, static_cast<std::uint64_t>(rep));
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Deterministic ordered aggregation over replication index.
  const int n_est = static_cast<int>(cfg.estimators.size());
  int p = 0;
  for (const auto& r : results)
    for (const auto& b : r.beta)
      if (b) p = static_cast<int>(b->size());
  if (p == 0) throw EstimationError("run_monte_carlo: every replication failed");

  McSummary sum;
  sum.reps = reps;
  sum.single_rep = reps == 1;
  sum.warning = ctx.setup_warning();
  for (const auto& s : cfg.estimators) sum.estimator_names.push_back(s.name());
  for (int j = 1; j < p; ++j) sum.coef_names.push_back("beta" + std::to_string(j + 1));
  sum.cells.assign(n_est, std::vector<McSummary::Cell>(p - 1));
  sum.n_converged.assign(n_est, 0);

  for (int k = 0; k < n_est; ++k) {
    for (int j = 1; j < p; ++j) {
      double s1 = 0.0;
      int m = 0;
      for (int r = 0; r < reps; ++r)
        if (results[r].beta[k]) {
          s1 += (*results[r].beta[k])[j];
          ++m;
        }
      auto& cell = sum.cells[k][j - 1];
      if (m == 0) continue;
      cell.mean = s1 / m;
      double s2 = 0.0;
      for (int r = 0; r < reps; ++r)
        if (results[r].beta[k]) {
          const double d = (*results[r].beta[k])[j] - cell.mean;
          s2 += d * d;
        }
      cell.sd = m > 1 ? std::sqrt(s2 / (m - 1)) : 0.0;
      cell.mcse_mean = m > 0 ? cell.sd / std::sqrt(static_cast<double>(m)) : 0.0;
      cell.mcse_sd = m > 1 ? cell.sd / std::sqrt(2.0 * (m - 1)) : 0.0;
      sum.n_converged[k] = m;
    }
    if (sum.n_converged[k] < reps - reps / 20) sum.high_nonconvergence = true;
  }
  return sum;
}

namespace {
std::string fmt_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}
}  // namespace

void McSummary::write_csv(std::ostream& os) const {
  os << "stat";
  for (const auto& name : estimator_names) os << "," << name;
  os << "\n";
  for (std::size_t j = 0; j < coef_names.size(); ++j) {
    const char* stats[] = {"mean", "sd", "mcse_mean", "mcse_sd"};
    for (int s = 0; s < 4; ++s) {
      os << coef_names[j] << "_" << stats[s];
      for (std::size_t k = 0; k < estimator_names.size(); ++k) {
        const auto& c = cells[k][j];
        const double v = s == 0 ? c.mean : s == 1 ? c.sd : s == 2 ? c.mcse_mean : c.mcse_sd;
        os << "," << fmt_num(v);
      }
      os << "\n";
    }
  }
  os << "n_converged";
  for (int v : n_converged) os << "," << v;
  os << "\n";
  os << "reps";
  for (std::size_t k = 0; k < estimator_names.size(); ++k) os << "," << reps;
  os << "\n";
  os << "flags";
  for (std::size_t k = 0; k < estimator_names.size(); ++k) {
    std::string f;
    if (single_rep) f += "single-rep";
    if (high_nonconvergence) f += f.empty() ? "high-nonconvergence" : ";high-nonconvergence";
    os << "," << f;
  }
  os << "\n";
}

std::string McSummary::to_csv() const {
  std::ostringstream os;
  write_csv(os);
  return os.str();
}

}  // namespace spatialgee
