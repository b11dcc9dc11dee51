#ifndef FEDGP_DATA_HPP_
#define FEDGP_DATA_HPP_

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedgp/errors.hpp"
#include "fedgp/kernels.hpp"
#include "fedgp/params.hpp"

namespace fedgp {

/// Generator covariance of the synthetic benchmark: six eigenfunctions under
/// a Gaussian envelope.
inline double scenario_covariance(double x, double x2) {
  const double r = x - x2;
  return std::exp(-(x * x + x2 * x2) / 10.0) *
         (std::cos(r) + std::cos(2.0 * r) + std::cos(3.0 * r));
}

struct MaskSpec {
  int unit = 0;
  double length = 3.0;
};

struct SyntheticSpec {
  int num_units = 10;
  int points_per_unit = 100;
  double lo = -5.0;
  double hi = 5.0;
  double noise_std = 0.2;
  std::vector<MaskSpec> missing{{0, 3.0}};
  std::uint64_t seed = 0;
  std::string id_prefix = "unit";

  void validate() const {
    if (num_units < 1 || points_per_unit < 1) {
      throw ConfigError("synthetic spec needs at least one unit and point");
    }
    if (!(lo < hi)) {
      throw ConfigError("synthetic spec needs lo < hi");
    }
    if (!(noise_std >= 0.0)) {
      throw ConfigError("noise_std must be >= 0");
    }
    for (const auto &m : missing) {
      if (m.unit < 0 || m.unit >= num_units) {
        throw ConfigError("mask refers to unknown unit " +
                          std::to_string(m.unit));
      }
      if (!(m.length > 0.0 && m.length < hi - lo)) {
        throw ConfigError("mask length must lie in (0, hi - lo)");
      }
    }
  }
};

struct HeldOut {
  std::string unit_id;
  Matrix inputs;
  Vector truth; // noiseless function values
};

struct Scenario {
  std::vector<UnitDataset> train;
  std::vector<HeldOut> held_out;
};

inline std::string unit_name(const std::string &prefix, int index) {
  std::ostringstream os;
  os << prefix << '_';
  os.width(2);
  os.fill('0');
  os << index;
  return os.str();
}

/// Independent GP draws per unit on an even grid, Gaussian noise, then masked
/// intervals moved to the held-out set with their noiseless values.
inline Scenario gen_scenario(const SyntheticSpec &spec) {
  spec.validate();
  const int N = spec.points_per_unit;
  Vector grid(N);
  for (int i = 0; i < N; ++i) {
    grid(i) = N == 1 ? 0.5 * (spec.lo + spec.hi)
                     : spec.lo + (spec.hi - spec.lo) * i / (N - 1.0);
  }
  Matrix K(N, N);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j <= i; ++j) {
      K(i, j) = K(j, i) = scenario_covariance(grid(i), grid(j));
    }
  }
  const JitteredCholesky chol = chol_jittered(K, 1e-8, /*allow_zero=*/false);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> truth(static_cast<std::size_t>(spec.num_units));
  std::vector<Vector> noisy(static_cast<std::size_t>(spec.num_units));
  for (int m = 0; m < spec.num_units; ++m) {
    Vector z(N);
    for (int i = 0; i < N; ++i) {
      z(i) = normal(rng);
    }
    truth[static_cast<std::size_t>(m)] = chol.lower * z;
  }
  for (int m = 0; m < spec.num_units; ++m) {
    Vector y = truth[static_cast<std::size_t>(m)];
    for (int i = 0; i < N; ++i) {
      y(i) += spec.noise_std * normal(rng);
    }
    noisy[static_cast<std::size_t>(m)] = std::move(y);
  }

  std::vector<std::vector<bool>> masked(
      static_cast<std::size_t>(spec.num_units),
      std::vector<bool>(static_cast<std::size_t>(N), false));
  for (const auto &mask : spec.missing) {
    std::uniform_real_distribution<double> start_dist(spec.lo,
                                                      spec.hi - mask.length);
    const double start = start_dist(rng);
    for (int i = 0; i < N; ++i) {
      if (grid(i) >= start && grid(i) <= start + mask.length) {
        masked[static_cast<std::size_t>(mask.unit)]
              [static_cast<std::size_t>(i)] = true;
      }
    }
  }

  Scenario out;
  for (int m = 0; m < spec.num_units; ++m) {
    const auto &mk = masked[static_cast<std::size_t>(m)];
    std::vector<int> keep, drop;
    for (int i = 0; i < N; ++i) {
      (mk[static_cast<std::size_t>(i)] ? drop : keep).push_back(i);
    }
    UnitDataset d;
    d.unit_id = unit_name(spec.id_prefix, m);
    d.inputs.resize(static_cast<Eigen::Index>(keep.size()), 1);
    d.outputs.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
      d.inputs(static_cast<Eigen::Index>(k), 0) = grid(keep[k]);
      d.outputs(static_cast<Eigen::Index>(k)) =
          noisy[static_cast<std::size_t>(m)](keep[k]);
    }
    out.train.push_back(std::move(d));
    if (!drop.empty()) {
      HeldOut h;
      h.unit_id = unit_name(spec.id_prefix, m);
      h.inputs.resize(static_cast<Eigen::Index>(drop.size()), 1);
      h.truth.resize(static_cast<Eigen::Index>(drop.size()));
      for (std::size_t k = 0; k < drop.size(); ++k) {
        h.inputs(static_cast<Eigen::Index>(k), 0) = grid(drop[k]);
        h.truth(static_cast<Eigen::Index>(k)) =
            truth[static_cast<std::size_t>(m)](drop[k]);
      }
      out.held_out.push_back(std::move(h));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: header `unit_id,x1,...,xd,y`, one observation per row. Numbers are
// written in shortest round-trip form so save followed by load is exact.

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) {
    throw IoError("cannot format number");
  }
  return std::string(buf, ptr);
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    std::string_view cell = line.substr(start, comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) {
      cell.remove_prefix(1);
    }
    while (!cell.empty() &&
           (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) {
      cell.remove_suffix(1);
    }
    out.push_back(cell);
    if (comma == std::string_view::npos) {
      break;
    }
    start = comma + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, std::size_t line) {
  double v = 0.0;
  const char *first = s.data();
  const char *last = s.data() + s.size();
  if (!s.empty() && *first == '+') {
    ++first;
  }
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || s.empty()) {
    throw ParseError(line, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

} // namespace detail

/// Groups rows by unit_id in order of first appearance, preserving row order
/// within each unit.
inline std::vector<UnitDataset> load_csv(std::istream &in) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) {
    throw ParseError(1, "missing header");
  }
  ++lineno;
  const auto header = detail::split_csv(line);
  if (header.size() < 3 || header.front() != "unit_id" ||
      header.back() != "y") {
    throw ParseError(lineno, "header must be unit_id,x1,...,xd,y");
  }
  const std::size_t d = header.size() - 2;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j + 1] != "x" + std::to_string(j + 1)) {
      throw ParseError(lineno, "expected column x" + std::to_string(j + 1));
    }
  }

  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>
      rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") {
      continue;
    }
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw InconsistentDimension("line " + std::to_string(lineno) + ": " +
                                  std::to_string(cells.size()) +
                                  " columns, header has " +
                                  std::to_string(header.size()));
    }
    const std::string id(cells.front());
    if (id.empty()) {
      throw ParseError(lineno, "empty unit_id");
    }
    auto [it, inserted] = rows.try_emplace(id);
    if (inserted) {
      order.push_back(id);
    }
    for (std::size_t j = 0; j < d; ++j) {
      it->second.first.push_back(detail::parse_double(cells[j + 1], lineno));
    }
    it->second.second.push_back(detail::parse_double(cells.back(), lineno));
  }

  std::vector<UnitDataset> out;
  for (const auto &id : order) {
    const auto &[xs, ys] = rows.at(id);
    UnitDataset u;
    u.unit_id = id;
    const auto n = static_cast<Eigen::Index>(ys.size());
    u.inputs.resize(n, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        u.inputs(i, static_cast<Eigen::Index>(j)) =
            xs[static_cast<std::size_t>(i) * d + j];
      }
    }
    u.outputs = Eigen::Map<const Vector>(ys.data(), n);
    out.push_back(std::move(u));
  }
  return out;
}

inline std::vector<UnitDataset> load_csv(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open '" + path + "'");
  }
  return load_csv(in);
}

inline void save_csv(std::span<const UnitDataset> units, std::ostream &out) {
  const Eigen::Index d = units.empty() ? 1 : units.front().dim();
  out << "unit_id";
  for (Eigen::Index j = 0; j < d; ++j) {
    out << ",x" << (j + 1);
  }
  out << ",y\n";
  for (const auto &u : units) {
    if (u.dim() != d) {
      throw InconsistentDimension("units disagree on input dimension");
    }
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      out << u.unit_id;
      for (Eigen::Index j = 0; j < d; ++j) {
        out << ',' << format_double(u.inputs(i, j));
      }
      out << ',' << format_double(u.outputs(i)) << '\n';
    }
  }
}

inline void save_csv(std::span<const UnitDataset> units,
                     const std::string &path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot open '" + path + "' for writing");
  }
  save_csv(units, out);
  if (!out) {
    throw IoError("write to '" + path + "' failed");
  }
}

/// Held-out points in the same CSV layout, with y the noiseless truth.
inline std::vector<UnitDataset> held_out_as_units(const Scenario &s) {
  std::vector<UnitDataset> out;
  for (const auto &h : s.held_out) {
    out.push_back({h.inputs, h.truth, h.unit_id});
  }
  return out;
}

inline std::vector<HeldOut>
units_as_held_out(const std::vector<UnitDataset> &units) {
  std::vector<HeldOut> out;
  for (const auto &u : units) {
    out.push_back({u.unit_id, u.inputs, u.outputs});
  }
  return out;
}

inline nlohmann::json spec_to_json(const SyntheticSpec &spec) {
  nlohmann::json masks = nlohmann::json::array();
  for (const auto &m : spec.missing) {
    masks.push_back({{"unit", m.unit}, {"length", m.length}});
  }
  return {{"num_units", spec.num_units},
          {"points_per_unit", spec.points_per_unit},
          {"domain", {spec.lo, spec.hi}},
          {"noise_std", spec.noise_std},
          {"missing", masks},
          {"seed", spec.seed},
          {"id_prefix", spec.id_prefix}};
}

/// Writes train.csv, held_out.csv and manifest.json into `dir`.
inline void save_scenario(const Scenario &s, const SyntheticSpec &spec,
                          const std::string &dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  save_csv(s.train, (base / "train.csv").string());
  save_csv(held_out_as_units(s), (base / "held_out.csv").string());
  std::ofstream manifest(base / "manifest.json", std::ios::trunc);
  if (!manifest) {
    throw IoError("cannot write manifest in '" + dir + "'");
  }
  manifest << spec_to_json(spec).dump(2) << '\n';
}

} // namespace fedgp

#endif // FEDGP_DATA_HPP_
