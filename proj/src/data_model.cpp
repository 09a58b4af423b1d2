#include "spatialgee/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace spatialgee {

int Dataset::n_groups() const {
  int g = -1;
  for (int v : group_id) g = std::max(g, v);
  return g + 1;
}

void Dataset::validate() const {
  const int nn = n();
  if (nn < 1) throw ValidationError("dataset is empty");
  if (p() < 1) throw ValidationError("dataset has no covariates");
  if (X.rows() != nn) throw ValidationError("X row count does not match y");
  if (coords.rows() != nn || coords.cols() != 2)
    throw ValidationError("coords must be n x 2");
  if (static_cast<int>(group_id.size()) != nn)
    throw ValidationError("group_id length does not match y");
  if (!y.allFinite()) throw ValidationError("non-finite entry in column y");
  if (!X.allFinite()) throw ValidationError("non-finite entry in covariates");
  if (!coords.allFinite()) throw ValidationError("non-finite entry in coords");

  const int g = n_groups();
  std::vector<int> count(g, 0);
  for (int v : group_id) {
    if (v < 0 || v >= g) throw ValidationError("group_id values must be 0-based contiguous");
    ++count[v];
  }
  for (int h = 0; h < g; ++h)
    if (count[h] == 0) throw ValidationError("empty group in group_id");

  if (metric == DistanceMetric::haversine_km) {
    for (int i = 0; i < nn; ++i) {
      if (std::fabs(coords(i, 0)) > 90.0)
        throw ValidationError("haversine latitude out of [-90, 90]");
      if (std::fabs(coords(i, 1)) > 180.0)
        throw ValidationError("haversine longitude out of [-180, 180]");
    }
  }
}

void Dataset::validate_for_family(const FamilySpec& f) const {
  for (int i = 0; i < n(); ++i) {
    const double v = y[i];
    if (f.kind == FamilyKind::bernoulli_probit) {
      if (v != 0.0 && v != 1.0)
        throw ValidationError("column y: probit response must be 0 or 1");
    } else {
      if (v < 0.0 || v != std::floor(v))
        throw ValidationError("column y: count response must be a non-negative integer");
    }
  }
}

GroupIndex GroupIndex::from_dataset(const Dataset& ds) {
  GroupIndex gi;
  const int g = ds.n_groups();
  gi.groups.assign(g, {});
  for (int i = 0; i < ds.n(); ++i) gi.groups[ds.group_id[i]].push_back(i);
  gi.sizes.resize(g);
  for (int h = 0; h < g; ++h) gi.sizes[h] = static_cast<int>(gi.groups[h].size());
  return gi;
}

int GroupIndex::max_size() const {
  int m = 0;
  for (int s : sizes) m = std::max(m, s);
  return m;
}

namespace {

constexpr double kEarthRadiusKm = 6371.0;

double haversine_km(double lat1, double lon1, double lat2, double lon2) {
  const double rad = M_PI / 180.0;
  const double dlat = (lat2 - lat1) * rad;
  const double dlon = (lon2 - lon1) * rad;
  const double s1 = std::sin(0.5 * dlat);
  const double s2 = std::sin(0.5 * dlon);
  double h = s1 * s1 + std::cos(lat1 * rad) * std::cos(lat2 * rad) * s2 * s2;
  h = std::min(1.0, std::max(0.0, h));
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

}  // namespace

double pairwise_distance(const Dataset& ds, int i, int j) {
  if (i < 0 || j < 0 || i >= ds.n() || j >= ds.n())
    throw std::out_of_range("pairwise_distance index out of range");
  if (ds.metric == DistanceMetric::haversine_km) {
    return haversine_km(ds.coords(i, 0), ds.coords(i, 1), ds.coords(j, 0), ds.coords(j, 1));
  }
  const double dx = ds.coords(i, 0) - ds.coords(j, 0);
  const double dy = ds.coords(i, 1) - ds.coords(j, 1);
  return std::sqrt(dx * dx + dy * dy);
}

std::vector<int> block_grouping(int lattice_side, int block) {
  if (block != 4) throw ValidationError("block_grouping supports 2x2 tiles (block = 4) only");
  if (lattice_side < 2 || lattice_side % 2 != 0)
    throw ValidationError("block_grouping requires an even lattice side");
  const int half = lattice_side / 2;
  std::vector<int> gid(static_cast<std::size_t>(lattice_side) * lattice_side);
  for (int r = 0; r < lattice_side; ++r)
    for (int s = 0; s < lattice_side; ++s)
      gid[static_cast<std::size_t>(r) * lattice_side + s] = (r / 2) * half + (s / 2);
  return gid;
}

double group_distance(const Dataset& ds, const GroupIndex& gi, int g, int h) {
  if (g == h) throw std::invalid_argument("group_distance requires distinct groups");
  double best = std::numeric_limits<double>::infinity();
  for (int i : gi.groups[g])
    for (int j : gi.groups[h]) best = std::min(best, pairwise_distance(ds, i, j));
  return best;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& s) {
  if (s.empty()) return true;
  std::string l;
  for (char c : s) l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return l == "na" || l == "nan" || l == ".";
}

double parse_number(const std::string& s, int line_no, const std::string& col) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    std::ostringstream os;
    os << "line " << line_no << ": cannot parse '" << s << "' in column " << col;
    throw ParseError(os.str());
  }
}

int find_column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (trim(header[i]) == name) return static_cast<int>(i);
  throw ValidationError("column '" + name + "' not found in CSV header");
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open file: " + path);

  std::string line;
  if (!std::getline(in, line) || trim(line).empty())
    throw ParseError("line 1: empty file or missing header row in " + path);
  const auto header = split_csv_line(line);

  if (schema.response.empty()) throw ValidationError("schema: response column not set");
  if (schema.covariates.empty()) throw ValidationError("schema: no covariate columns set");
  if (schema.coord1.empty() || schema.coord2.empty())
    throw ValidationError("schema: coordinate columns not set");

  const int yc = find_column(header, schema.response);
  std::vector<int> xc;
  for (const auto& name : schema.covariates) xc.push_back(find_column(header, name));
  const int c1 = find_column(header, schema.coord1);
  const int c2 = find_column(header, schema.coord2);
  const int gc = schema.group.empty() ? -1 : find_column(header, schema.group);

  std::vector<double> yv;
  std::vector<std::vector<double>> xv;
  std::vector<std::array<double, 2>> cv;
  std::vector<std::string> glabels;
  LoadReport rep;

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      std::ostringstream os;
      os << "line " << line_no << ": expected " << header.size() << " fields, got " << f.size();
      throw ParseError(os.str());
    }
    ++rep.rows_total;
    if (is_missing(trim(f[yc]))) {
      ++rep.rows_dropped_missing_response;
      continue;
    }
    yv.push_back(parse_number(trim(f[yc]), line_no, schema.response));
    std::vector<double> row;
    for (std::size_t k = 0; k < xc.size(); ++k) {
      const std::string v = trim(f[xc[k]]);
      if (is_missing(v))
        throw ValidationError("missing covariate value in column " + schema.covariates[k]);
      row.push_back(parse_number(v, line_no, schema.covariates[k]));
    }
    xv.push_back(std::move(row));
    cv.push_back({parse_number(trim(f[c1]), line_no, schema.coord1),
                  parse_number(trim(f[c2]), line_no, schema.coord2)});
    glabels.push_back(gc >= 0 ? trim(f[gc]) : "0");
  }
  if (yv.empty()) throw ParseError("no data rows in " + path);

  const int n = static_cast<int>(yv.size());
  const int p_raw = static_cast<int>(schema.covariates.size());
  const int p = p_raw + (schema.add_intercept ? 1 : 0);

  Dataset ds;
  ds.metric = schema.metric;
  ds.y = Eigen::Map<Vector>(yv.data(), n);
  ds.X.resize(n, p);
  ds.coords.resize(n, 2);
  ds.covariate_names.clear();
  if (schema.add_intercept) ds.covariate_names.push_back("const");
  for (const auto& name : schema.covariates) ds.covariate_names.push_back(name);
  for (int i = 0; i < n; ++i) {
    int c = 0;
    if (schema.add_intercept) ds.X(i, c++) = 1.0;
    for (int k = 0; k < p_raw; ++k) ds.X(i, c++) = xv[i][k];
    ds.coords(i, 0) = cv[i][0];
    ds.coords(i, 1) = cv[i][1];
  }

  // Group labels become contiguous ids in order of first appearance.
  std::map<std::string, int> seen;
  ds.group_id.resize(n);
  for (int i = 0; i < n; ++i) {
    auto it = seen.find(glabels[i]);
    if (it == seen.end()) it = seen.emplace(glabels[i], static_cast<int>(seen.size())).first;
    ds.group_id[i] = it->second;
  }

  ds.validate();
  if (report) *report = rep;
  return ds;
}

void save_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "y";
  for (int j = 0; j < ds.p(); ++j) {
    if (static_cast<int>(ds.covariate_names.size()) == ds.p())
      out << "," << ds.covariate_names[j];
    else
      out << ",x" << (j + 1);
  }
  out << ",coord1,coord2,group\n";
  for (int i = 0; i < ds.n(); ++i) {
    out << num(ds.y[i]);
    for (int j = 0; j < ds.p(); ++j) out << "," << num(ds.X(i, j));
    out << "," << num(ds.coords(i, 0)) << "," << num(ds.coords(i, 1)) << "," << ds.group_id[i]
        << "\n";
  }
}

std::vector<std::pair<std::string, std::string>> parse_flat_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      std::ostringstream os;
      os << "line " << line_no << ": expected 'key = value'";
      throw ParseError(os.str());
    }
    kv.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return kv;
}

}  // namespace spatialgee
