#pragma once

#include "spatialgee/data_model.hpp"

namespace spatialgee {

enum class KernelKind { truncation, bartlett };

// Distance-decay kernel: k(0) = 1 and k(d) = 0 for d >= bandwidth.
// Bartlett: k(d) = 1 - d/bandwidth on [0, bandwidth).
struct KernelSpec {
  KernelKind kind = KernelKind::bartlett;
  double bandwidth = 1.0;

  double weight(double d) const {
    if (d < 0.0) d = -d;
    if (d >= bandwidth) return 0.0;
    return kind == KernelKind::bartlett ? 1.0 - d / bandwidth : 1.0;
  }
};

// 1.5 x median nearest-neighbor group distance: covers adjacent groups,
// excludes distant ones.
double default_group_bandwidth(const Dataset& ds, const GroupIndex& gi);

// The same rule applied at observation level, for the pooled-QMLE sandwich.
double default_obs_bandwidth(const Dataset& ds);

}  // namespace spatialgee
