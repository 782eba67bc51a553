#pragma once

// Ingestion, spatial clustering and (kappa, eta) aggregation of raw wind
// observations.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/error.hpp"
#include "mrwind/geo.hpp"

namespace mrwind {

/// One raw observation. time_index counts 15-minute units.
struct WindRecord {
  int farm_id = 0;
  int time_index = 0;
  double speed = 0.0;         // m/s, >= 0
  double direction_deg = 0.0; // [0, 360), compass, heading the wind blows toward
};

struct Farm {
  int id = 0;
  geo::LatLon location;
};

struct FarmCatalog {
  std::vector<Farm> farms; // sorted by id

  std::size_t size() const { return farms.size(); }

  /// Position of `farm_id` in `farms`, or -1.
  int index_of(int farm_id) const {
    auto it = std::lower_bound(farms.begin(), farms.end(), farm_id,
                               [](const Farm &f, int id) { return f.id < id; });
    if (it == farms.end() || it->id != farm_id)
      return -1;
    return static_cast<int>(it - farms.begin());
  }
};

/// Parsed input: catalog, records sorted by (farm_id, time_index) over the
/// complete farm x time grid, and provenance.
struct WindData {
  FarmCatalog catalog;
  std::vector<WindRecord> records;
  int num_steps = 0; // T
  std::uint64_t checksum = 0;

  const WindRecord &at(std::size_t farm_index, int t) const {
    return records[farm_index * static_cast<std::size_t>(num_steps) +
                   static_cast<std::size_t>(t)];
  }
};

struct ClusterAssignment {
  int kappa = 0;
  std::uint64_t seed = 0;
  std::uint64_t source_checksum = 0;
  std::vector<int> labels;               // per catalog index -> cluster
  std::vector<geo::LatLon> centroids;    // per cluster
  std::vector<double> objective_trace;   // k-means objective per Lloyd iteration
  int iterations = 0;

  std::vector<std::vector<int>> members() const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(kappa));
    for (std::size_t f = 0; f < labels.size(); ++f)
      out[static_cast<std::size_t>(labels[f])].push_back(static_cast<int>(f));
    return out;
  }
};

/// Clustered, time-aggregated series for one (kappa, eta). Columns are
/// aggregated steps; column c holds absolute step first_step + c.
struct ResolutionView {
  int kappa = 0;
  int eta = 1;
  int first_step = 0;
  std::uint64_t seed = 0;
  std::uint64_t source_checksum = 0;
  Eigen::MatrixXd speeds;     // kappa x steps, m/s
  Eigen::MatrixXd directions; // kappa x steps, radians [0, 2pi)

  int clusters() const { return static_cast<int>(speeds.rows()); }
  int steps() const { return static_cast<int>(speeds.cols()); }
  int end_step() const { return first_step + steps(); }

  /// Speed at cluster i, absolute step t.
  double speed(int i, int t) const { return speeds(i, t - first_step); }
  double direction(int i, int t) const { return directions(i, t - first_step); }
};

enum class DirectionConvention {
  toward, // column is the heading the wind blows toward
  from,   // meteorological convention; converted to heading on load
};

namespace detail {

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t'))
    s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  return s;
}

template <typename T>
T parse_field(std::string_view field, std::size_t line, const char *name) {
  field = trim(field);
  T value{};
  const auto *end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc{} || ptr != end || field.empty())
    throw ParseError(line, std::string("cannot parse ") + name + " from '" +
                               std::string(field) + "'");
  return value;
}

inline double squared_dist(const geo::LatLon &a, const geo::LatLon &b) {
  const double dl = a.lat - b.lat, dn = a.lon - b.lon;
  return dl * dl + dn * dn;
}

} // namespace detail

inline constexpr std::string_view kWindCsvHeader =
    "farm_id,lat,lon,time_index,speed_mps,direction_deg";

/// Parses wind observations from CSV text (see kWindCsvHeader).
inline WindData parse_wind_csv(std::string_view text,
                               DirectionConvention convention = DirectionConvention::toward) {
  WindData out;
  out.checksum = detail::fnv1a64(text);

  std::map<int, geo::LatLon> farm_loc;
  std::vector<WindRecord> recs;
  std::set<std::pair<int, int>> seen;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos)
      nl = text.size();
    std::string_view line = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (!header_seen) {
      if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
          static_cast<unsigned char>(line[1]) == 0xBB &&
          static_cast<unsigned char>(line[2]) == 0xBF)
        line.remove_prefix(3);
      if (line != kWindCsvHeader)
        throw ParseError(line_no, "expected header '" + std::string(kWindCsvHeader) + "'");
      header_seen = true;
      continue;
    }
    if (line.empty())
      continue;

    std::string_view fields[6];
    std::size_t n = 0, start = 0;
    for (std::size_t k = 0; k <= line.size(); ++k) {
      if (k == line.size() || line[k] == ',') {
        if (n == 6)
          throw ParseError(line_no, "too many fields");
        fields[n++] = line.substr(start, k - start);
        start = k + 1;
      }
    }
    if (n != 6)
      throw ParseError(line_no, "expected 6 fields, got " + std::to_string(n));

    WindRecord r;
    r.farm_id = detail::parse_field<int>(fields[0], line_no, "farm_id");
    const double lat = detail::parse_field<double>(fields[1], line_no, "lat");
    const double lon = detail::parse_field<double>(fields[2], line_no, "lon");
    r.time_index = detail::parse_field<int>(fields[3], line_no, "time_index");
    r.speed = detail::parse_field<double>(fields[4], line_no, "speed_mps");
    r.direction_deg = detail::parse_field<double>(fields[5], line_no, "direction_deg");

    if (!std::isfinite(lat) || !std::isfinite(lon))
      throw ParseError(line_no, "non-finite coordinate");
    if (r.time_index < 0)
      throw ParseError(line_no, "negative time_index");
    if (!std::isfinite(r.speed) || r.speed < 0.0)
      throw ParseError(line_no, "speed out of range");
    if (!std::isfinite(r.direction_deg) || r.direction_deg < 0.0 || r.direction_deg >= 360.0)
      throw ParseError(line_no, "direction out of range");
    if (convention == DirectionConvention::from)
      r.direction_deg = std::fmod(r.direction_deg + 180.0, 360.0);

    auto [it, inserted] = farm_loc.emplace(r.farm_id, geo::LatLon{lat, lon});
    if (!inserted && (it->second.lat != lat || it->second.lon != lon))
      throw ParseError(line_no, "farm " + std::to_string(r.farm_id) +
                                    " has inconsistent coordinates");
    if (!seen.emplace(r.farm_id, r.time_index).second)
      throw ParseError(line_no, "duplicate observation for farm " +
                                    std::to_string(r.farm_id) + " at time " +
                                    std::to_string(r.time_index));
    recs.push_back(r);
  }
  if (!header_seen)
    throw ParseError(1, "empty input");
  if (recs.empty())
    throw ParseError(line_no, "no observations");

  for (const auto &[id, loc] : farm_loc)
    out.catalog.farms.push_back(Farm{id, loc});

  int max_t = 0;
  for (const auto &r : recs)
    max_t = std::max(max_t, r.time_index);
  out.num_steps = max_t + 1;

  std::vector<GapError::Gap> gaps;
  for (const auto &f : out.catalog.farms)
    for (int t = 0; t < out.num_steps; ++t)
      if (!seen.count({f.id, t}))
        gaps.emplace_back(f.id, t);
  if (!gaps.empty())
    throw GapError(std::move(gaps));

  std::sort(recs.begin(), recs.end(), [](const WindRecord &a, const WindRecord &b) {
    return a.farm_id != b.farm_id ? a.farm_id < b.farm_id : a.time_index < b.time_index;
  });
  out.records = std::move(recs);
  return out;
}

inline WindData load_wind_csv(const std::string &path,
                              DirectionConvention convention = DirectionConvention::toward) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(Errc::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_wind_csv(ss.str(), convention);
}

/// Writes records in the load_wind_csv schema, doubles at full precision.
inline void write_wind_csv(std::ostream &os, const FarmCatalog &catalog,
                           const std::vector<WindRecord> &records) {
  os << kWindCsvHeader << '\n';
  char buf[160];
  for (const WindRecord &r : records) {
    const int f = catalog.index_of(r.farm_id);
    if (f < 0)
      throw Error(Errc::config, "record for unknown farm " + std::to_string(r.farm_id));
    const auto &loc = catalog.farms[static_cast<std::size_t>(f)].location;
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%d,%.17g,%.17g\n", r.farm_id, loc.lat, loc.lon,
                  r.time_index, r.speed, r.direction_deg);
    os << buf;
  }
}

/// Lloyd's k-means on raw (lat, lon) with k-means++ seeding.
inline ClusterAssignment kmeans_cluster(const FarmCatalog &catalog, int kappa,
                                        std::uint64_t seed, int max_iter = 300) {
  const int n = static_cast<int>(catalog.size());
  if (n < 1)
    throw Error(Errc::invalid_resolution, "empty farm catalog");
  if (kappa < 1 || kappa > n)
    throw Error(Errc::invalid_resolution,
                "kappa=" + std::to_string(kappa) + " outside [1, " + std::to_string(n) + "]");

  std::vector<geo::LatLon> pts(static_cast<std::size_t>(n));
  for (int f = 0; f < n; ++f)
    pts[static_cast<std::size_t>(f)] = catalog.farms[static_cast<std::size_t>(f)].location;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  ClusterAssignment out;
  out.kappa = kappa;
  out.seed = seed;

  // k-means++ seeding.
  std::vector<geo::LatLon> cents;
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  const int first = static_cast<int>(std::min<double>(n - 1, std::floor(unif(rng) * n)));
  cents.push_back(pts[static_cast<std::size_t>(first)]);
  chosen[static_cast<std::size_t>(first)] = 1;
  std::vector<double> d2(static_cast<std::size_t>(n));
  while (static_cast<int>(cents.size()) < kappa) {
    double total = 0.0;
    for (int f = 0; f < n; ++f) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto &c : cents)
        best = std::min(best, detail::squared_dist(pts[static_cast<std::size_t>(f)], c));
      d2[static_cast<std::size_t>(f)] = chosen[static_cast<std::size_t>(f)] ? 0.0 : best;
      total += d2[static_cast<std::size_t>(f)];
    }
    int pick = -1;
    if (total > 0.0) {
      const double target = unif(rng) * total;
      double acc = 0.0;
      for (int f = 0; f < n; ++f) {
        acc += d2[static_cast<std::size_t>(f)];
        if (d2[static_cast<std::size_t>(f)] > 0.0 && acc >= target) {
          pick = f;
          break;
        }
      }
      if (pick < 0) // rounding at the tail
        for (int f = n - 1; f >= 0 && pick < 0; --f)
          if (d2[static_cast<std::size_t>(f)] > 0.0)
            pick = f;
    } else {
      for (int f = 0; f < n && pick < 0; ++f)
        if (!chosen[static_cast<std::size_t>(f)])
          pick = f;
    }
    chosen[static_cast<std::size_t>(pick)] = 1;
    cents.push_back(pts[static_cast<std::size_t>(pick)]);
  }

  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < std::max(1, max_iter); ++iter) {
    std::vector<int> next(static_cast<std::size_t>(n));
    for (int f = 0; f < n; ++f) {
      int best = 0;
      double bd = detail::squared_dist(pts[static_cast<std::size_t>(f)], cents[0]);
      for (int c = 1; c < kappa; ++c) {
        const double d = detail::squared_dist(pts[static_cast<std::size_t>(f)],
                                              cents[static_cast<std::size_t>(c)]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      next[static_cast<std::size_t>(f)] = best;
    }

    // Empty-cluster repair: move the point farthest from its centroid.
    std::vector<int> counts(static_cast<std::size_t>(kappa), 0);
    for (int l : next)
      ++counts[static_cast<std::size_t>(l)];
    for (int c = 0; c < kappa; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0)
        continue;
      int far = -1;
      double fd = -1.0;
      for (int f = 0; f < n; ++f) {
        const int l = next[static_cast<std::size_t>(f)];
        if (counts[static_cast<std::size_t>(l)] < 2)
          continue;
        const double d = detail::squared_dist(pts[static_cast<std::size_t>(f)],
                                              cents[static_cast<std::size_t>(l)]);
        if (d > fd) {
          fd = d;
          far = f;
        }
      }
      --counts[static_cast<std::size_t>(next[static_cast<std::size_t>(far)])];
      next[static_cast<std::size_t>(far)] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      cents[static_cast<std::size_t>(c)] = pts[static_cast<std::size_t>(far)];
    }

    std::vector<double> sl(static_cast<std::size_t>(kappa), 0.0), sn(static_cast<std::size_t>(kappa), 0.0);
    for (int f = 0; f < n; ++f) {
      sl[static_cast<std::size_t>(next[static_cast<std::size_t>(f)])] += pts[static_cast<std::size_t>(f)].lat;
      sn[static_cast<std::size_t>(next[static_cast<std::size_t>(f)])] += pts[static_cast<std::size_t>(f)].lon;
    }
    for (int c = 0; c < kappa; ++c)
      cents[static_cast<std::size_t>(c)] = {sl[static_cast<std::size_t>(c)] / counts[static_cast<std::size_t>(c)],
                                            sn[static_cast<std::size_t>(c)] / counts[static_cast<std::size_t>(c)]};

    double obj = 0.0;
    for (int f = 0; f < n; ++f)
      obj += detail::squared_dist(pts[static_cast<std::size_t>(f)],
                                  cents[static_cast<std::size_t>(next[static_cast<std::size_t>(f)])]);
    out.objective_trace.push_back(obj);
    out.iterations = iter + 1;

    const bool changed = next != labels;
    labels = std::move(next);
    if (!changed)
      break;
  }

  out.labels = std::move(labels);
  out.centroids = std::move(cents);
  return out;
}

/// Averages speeds (arithmetic) and directions (circular) per cluster and
/// eta-unit window. Trailing partial windows are dropped.
inline ResolutionView aggregate(const WindData &data, const ClusterAssignment &assignment,
                                int eta) {
  if (eta < 1 || eta > data.num_steps)
    throw Error(Errc::invalid_resolution,
                "eta=" + std::to_string(eta) + " outside [1, " + std::to_string(data.num_steps) + "]");
  if (assignment.labels.size() != data.catalog.size())
    throw Error(Errc::invalid_resolution, "assignment does not match the farm catalog");

  const int steps = data.num_steps / eta;
  ResolutionView v;
  v.kappa = assignment.kappa;
  v.eta = eta;
  v.seed = assignment.seed;
  v.source_checksum = data.checksum;
  v.speeds = Eigen::MatrixXd::Zero(assignment.kappa, steps);
  v.directions = Eigen::MatrixXd::Zero(assignment.kappa, steps);

  const auto members = assignment.members();
  std::vector<double> angles;
  for (int c = 0; c < assignment.kappa; ++c) {
    const auto &mem = members[static_cast<std::size_t>(c)];
    if (mem.empty())
      throw Error(Errc::empty_cluster, "cluster " + std::to_string(c) + " has no farms");
    for (int t = 0; t < steps; ++t) {
      double sum = 0.0;
      angles.clear();
      for (int f : mem) {
        for (int u = t * eta; u < (t + 1) * eta; ++u) {
          const auto &r = data.at(static_cast<std::size_t>(f), u);
          sum += r.speed;
          angles.push_back(geo::deg2rad(r.direction_deg));
        }
      }
      v.speeds(c, t) = sum / static_cast<double>(mem.size() * static_cast<std::size_t>(eta));
      v.directions(c, t) = geo::circular_mean(angles);
    }
  }
  return v;
}

/// Symmetric great-circle distance matrix (km).
inline Eigen::MatrixXd pairwise_distances(const std::vector<geo::LatLon> &centroids) {
  const auto n = static_cast<Eigen::Index>(centroids.size());
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = a + 1; b < n; ++b)
      d(a, b) = d(b, a) = geo::haversine_km(centroids[static_cast<std::size_t>(a)],
                                            centroids[static_cast<std::size_t>(b)]);
  return d;
}

/// History strictly before absolute step t, `depth` steps long.
inline ResolutionView trailing_window_view(const ResolutionView &view, int t, int depth) {
  if (depth < 0 || t - depth < view.first_step)
    throw Error(Errc::insufficient_history,
                "need " + std::to_string(depth) + " steps before t=" + std::to_string(t) +
                    ", view starts at " + std::to_string(view.first_step));
  if (t > view.end_step())
    throw Error(Errc::out_of_range, "t=" + std::to_string(t) + " beyond view end " +
                                        std::to_string(view.end_step()));
  ResolutionView out = view;
  out.first_step = t - depth;
  const int c0 = t - depth - view.first_step;
  out.speeds = view.speeds.middleCols(c0, depth);
  out.directions = view.directions.middleCols(c0, depth);
  return out;
}

// JSON ---------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd &m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json &j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(static_cast<std::size_t>(r)).size()) != cols)
      throw Error(Errc::parse, "ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

} // namespace detail

inline void to_json(nlohmann::json &j, const ClusterAssignment &a) {
  nlohmann::json cents = nlohmann::json::array();
  for (const auto &c : a.centroids)
    cents.push_back({{"lat", c.lat}, {"lon", c.lon}});
  j = {{"kappa", a.kappa},
       {"seed", a.seed},
       {"source_checksum", a.source_checksum},
       {"labels", a.labels},
       {"centroids", cents},
       {"objective_trace", a.objective_trace},
       {"iterations", a.iterations}};
}

inline void from_json(const nlohmann::json &j, ClusterAssignment &a) {
  a.kappa = j.at("kappa").get<int>();
  a.seed = j.at("seed").get<std::uint64_t>();
  a.source_checksum = j.at("source_checksum").get<std::uint64_t>();
  a.labels = j.at("labels").get<std::vector<int>>();
  a.centroids.clear();
  for (const auto &c : j.at("centroids"))
    a.centroids.push_back({c.at("lat").get<double>(), c.at("lon").get<double>()});
  a.objective_trace = j.value("objective_trace", std::vector<double>{});
  a.iterations = j.value("iterations", 0);
}

inline void to_json(nlohmann::json &j, const ResolutionView &v) {
  j = {{"kappa", v.kappa},
       {"eta", v.eta},
       {"first_step", v.first_step},
       {"seed", v.seed},
       {"source_checksum", v.source_checksum},
       {"speeds", detail::matrix_to_json(v.speeds)},
       {"directions", detail::matrix_to_json(v.directions)}};
}

inline void from_json(const nlohmann::json &j, ResolutionView &v) {
  v.kappa = j.at("kappa").get<int>();
  v.eta = j.at("eta").get<int>();
  v.first_step = j.value("first_step", 0);
  v.seed = j.at("seed").get<std::uint64_t>();
  v.source_checksum = j.at("source_checksum").get<std::uint64_t>();
  v.speeds = detail::matrix_from_json(j.at("speeds"));
  v.directions = detail::matrix_from_json(j.at("directions"));
}

} // namespace mrwind
