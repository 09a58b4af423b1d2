#pragma once

#include <string>
#include <vector>

#include "spatialgee/families.hpp"
#include "spatialgee/linalg.hpp"

namespace spatialgee {

enum class DistanceMetric { euclidean, haversine_km };

// Observations, coordinates and group labels. Immutable after construction;
// all member queries are pure reads.
struct Dataset {
  Vector y;                    // response, length n
  Matrix X;                    // n x p covariates (first column may be an intercept)
  Matrix coords;               // n x 2, lattice units or (lat, lon) degrees
  std::vector<int> group_id;   // 0-based contiguous group labels
  DistanceMetric metric = DistanceMetric::euclidean;
  std::vector<std::string> covariate_names;  // optional, size p when present

  int n() const { return static_cast<int>(y.size()); }
  int p() const { return static_cast<int>(X.cols()); }
  int n_groups() const;

  // Checks the structural invariants (dimensions, finiteness, contiguous
  // groups); throws ValidationError with the offending field.
  void validate() const;
  // Family-specific response checks: {0,1} for probit, non-negative integers
  // for the count families.
  void validate_for_family(const FamilySpec& f) const;
};

// Row indices per group, in dataset order.
struct GroupIndex {
  std::vector<std::vector<int>> groups;
  std::vector<int> sizes;

  static GroupIndex from_dataset(const Dataset& ds);
  int n_groups() const { return static_cast<int>(groups.size()); }
  int max_size() const;
};

double pairwise_distance(const Dataset& ds, int i, int j);

// Partition a side x side lattice (row-major order, coordinates starting at 1)
// into contiguous 2x2 tiles. block must be 4 and side even.
std::vector<int> block_grouping(int lattice_side, int block = 4);

// Smallest distance between observations of two distinct groups.
double group_distance(const Dataset& ds, const GroupIndex& gi, int g, int h);

struct CsvSchema {
  std::string response;
  std::vector<std::string> covariates;
  std::string coord1;          // x or latitude column
  std::string coord2;          // y or longitude column
  std::string group;           // optional: empty puts everything in one group
  DistanceMetric metric = DistanceMetric::euclidean;
  bool add_intercept = true;
};

struct LoadReport {
  int rows_dropped_missing_response = 0;
  int rows_total = 0;
};

// UTF-8 CSV with a header row, ',' delimiter, '.' decimal point. Rows with a
// missing response are dropped and counted; missing covariates are an error.
Dataset load_csv(const std::string& path, const CsvSchema& schema,
                 LoadReport* report = nullptr);

void save_csv(const std::string& path, const Dataset& ds);

// Parses the flat "key = value" config format used for schemas and run files.
std::vector<std::pair<std::string, std::string>> parse_flat_config(const std::string& path);

}  // namespace spatialgee
