#include "deconf/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>

#include "deconf/textio.hpp"

namespace deconf {

namespace {
constexpr double kEarthRadiusM = 6371008.8;
constexpr double kDegToRad = M_PI / 180.0;
}  // namespace

void IngestConfig::validate() const {
    if (gap_threshold_s < 1) {
        throw config_error("gap_threshold_s must be >= 1, got " + std::to_string(gap_threshold_s));
    }
    if (min_trip_len < 1) {
        throw config_error("min_trip_len must be >= 1, got " + std::to_string(min_trip_len));
    }
    if (resample_interval_s < 1) {
        throw config_error("resample_interval_s must be >= 1, got " +
                           std::to_string(resample_interval_s));
    }
    if (traj_len < 1) {
        throw config_error("traj_len must be >= 1, got " + std::to_string(traj_len));
    }
}

double haversine_m(double lat1, double lon1, double lat2, double lon2) {
    const double phi1 = lat1 * kDegToRad;
    const double phi2 = lat2 * kDegToRad;
    const double dphi = (lat2 - lat1) * kDegToRad;
    const double dlam = (lon2 - lon1) * kDegToRad;
    const double a = std::sin(dphi / 2) * std::sin(dphi / 2) +
                     std::cos(phi1) * std::cos(phi2) * std::sin(dlam / 2) * std::sin(dlam / 2);
    return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

std::vector<GpsPoint> parse_trajectory_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw error("cannot open '" + path + "' for reading");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw parse_error(path + ":1: empty file, expected header 'entity_id,timestamp,lat,lon'");
    }
    {
        const auto header = split(trim(line), ',');
        const char* expected[] = {"entity_id", "timestamp", "lat", "lon"};
        if (header.size() != 4) {
            throw parse_error(path + ":1: expected 4 header columns, got " +
                              std::to_string(header.size()));
        }
        for (int i = 0; i < 4; ++i) {
            if (trim(header[static_cast<std::size_t>(i)]) != expected[i]) {
                throw parse_error(path + ":1: missing required column '" +
                                  std::string(expected[i]) + "'");
            }
        }
    }

    std::vector<GpsPoint> points;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty()) {
            continue;
        }
        const auto fields = split(sv, ',');
        const std::string where = path + ":" + std::to_string(line_no);
        if (fields.size() != 4) {
            throw parse_error(where + ": expected 4 fields, got " +
                              std::to_string(fields.size()));
        }
        GpsPoint p;
        p.entity_id = std::string(trim(fields[0]));
        if (p.entity_id.empty()) {
            throw parse_error(where + ": field 'entity_id' is empty");
        }
        p.timestamp = parse_int(trim(fields[1]), where + ": field 'timestamp'");
        p.lat = parse_double(trim(fields[2]), where + ": field 'lat'");
        p.lon = parse_double(trim(fields[3]), where + ": field 'lon'");
        if (!(p.lat >= -90.0 && p.lat <= 90.0)) {
            throw parse_error(where + ": field 'lat' = " + format_double(p.lat) +
                              " outside [-90, 90]");
        }
        if (!(p.lon >= -180.0 && p.lon <= 180.0)) {
            throw parse_error(where + ": field 'lon' = " + format_double(p.lon) +
                              " outside [-180, 180]");
        }
        points.push_back(std::move(p));
    }
    return points;
}

std::vector<Trip> segment_trips(std::vector<GpsPoint> points, int gap_threshold_s,
                                int min_trip_len) {
    if (gap_threshold_s < 1 || min_trip_len < 1) {
        throw config_error("segment_trips: thresholds must be >= 1");
    }
    // Group per entity, keeping the first-appearance order of entities.
    std::vector<std::string> entity_order;
    std::map<std::string, std::vector<GpsPoint>> by_entity;
    for (GpsPoint& p : points) {
        auto it = by_entity.find(p.entity_id);
        if (it == by_entity.end()) {
            entity_order.push_back(p.entity_id);
            by_entity[p.entity_id].push_back(std::move(p));
        } else {
            it->second.push_back(std::move(p));
        }
    }

    std::vector<Trip> trips;
    for (const std::string& id : entity_order) {
        std::vector<GpsPoint>& pts = by_entity[id];
        std::stable_sort(pts.begin(), pts.end(), [](const GpsPoint& a, const GpsPoint& b) {
            return a.timestamp < b.timestamp;
        });
        pts.erase(std::unique(pts.begin(), pts.end(),
                              [](const GpsPoint& a, const GpsPoint& b) {
                                  return a.timestamp == b.timestamp;
                              }),
                  pts.end());

        Trip current;
        auto flush = [&]() {
            if (static_cast<int>(current.points.size()) >= min_trip_len) {
                trips.push_back(std::move(current));
            }
            current = Trip{};
        };
        for (GpsPoint& p : pts) {
            if (!current.points.empty() &&
                p.timestamp - current.points.back().timestamp > gap_threshold_s) {
                flush();
            }
            current.points.push_back(std::move(p));
        }
        flush();
    }
    return trips;
}

namespace {

// Bearing from a to b, clockwise from north, radians.
double bearing_rad(const GpsPoint& a, const GpsPoint& b) {
    const double phi1 = a.lat * kDegToRad;
    const double phi2 = b.lat * kDegToRad;
    const double dlam = (b.lon - a.lon) * kDegToRad;
    const double y = std::sin(dlam) * std::cos(phi2);
    const double x = std::cos(phi1) * std::sin(phi2) -
                     std::sin(phi1) * std::cos(phi2) * std::cos(dlam);
    if (x == 0.0 && y == 0.0) {
        return 0.0;  // zero displacement, heading defaults to north
    }
    return std::atan2(y, x);
}

}  // namespace

std::vector<GpsPoint> resample_trip(const Trip& trip, int resample_interval_s) {
    if (resample_interval_s < 1) {
        throw config_error("resample_interval_s must be >= 1");
    }
    if (trip.points.size() < 2) {
        return {};
    }
    const std::int64_t t0 = trip.points.front().timestamp;
    const std::int64_t t_end = trip.points.back().timestamp;
    const std::int64_t grid_len = (t_end - t0) / resample_interval_s + 1;

    std::vector<GpsPoint> grid(static_cast<std::size_t>(grid_len));
    std::size_t seg = 0;
    for (std::int64_t i = 0; i < grid_len; ++i) {
        const std::int64_t ts = t0 + i * resample_interval_s;
        while (seg + 1 < trip.points.size() - 1 && trip.points[seg + 1].timestamp <= ts) {
            ++seg;
        }
        const GpsPoint& a = trip.points[seg];
        const GpsPoint& b = trip.points[seg + 1];
        const double span = static_cast<double>(b.timestamp - a.timestamp);
        const double w = span > 0.0 ? (static_cast<double>(ts - a.timestamp) / span) : 0.0;
        GpsPoint& g = grid[static_cast<std::size_t>(i)];
        g.entity_id = a.entity_id;
        g.timestamp = ts;
        g.lat = a.lat + w * (b.lat - a.lat);
        g.lon = a.lon + w * (b.lon - a.lon);
    }
    return grid;
}

std::optional<Trajectory> featurize_trip(const Trip& trip, int resample_interval_s) {
    const std::vector<GpsPoint> grid = resample_trip(trip, resample_interval_s);
    // Need at least 3 grid points: motion features consume one step and the
    // next-step outcome another.
    if (grid.size() < 3) {
        return std::nullopt;
    }

    // Motion features between consecutive grid points.
    const std::int64_t m = static_cast<std::int64_t>(grid.size()) - 1;
    Eigen::MatrixXd motion(m, 3);
    for (std::int64_t i = 0; i < m; ++i) {
        const GpsPoint& a = grid[static_cast<std::size_t>(i)];
        const GpsPoint& b = grid[static_cast<std::size_t>(i + 1)];
        const double dist = haversine_m(a.lat, a.lon, b.lat, b.lon);
        const double theta = bearing_rad(a, b);
        motion(i, 0) = dist / static_cast<double>(resample_interval_s);
        motion(i, 1) = std::sin(theta);
        motion(i, 2) = std::cos(theta);
    }

    const std::int64_t T = m - 1;
    Trajectory traj;
    traj.X = motion.topRows(T);
    traj.A = motion.bottomRows(T) - motion.topRows(T);
    traj.Y = motion.col(0).tail(T);
    return traj;
}

Dataset ingest_dataset(const std::string& path, const IngestConfig& cfg) {
    cfg.validate();
    std::vector<GpsPoint> points = parse_trajectory_csv(path);
    std::vector<Trip> trips = segment_trips(std::move(points), cfg.gap_threshold_s,
                                            cfg.min_trip_len);

    Dataset ds;
    ds.manifest.kind = "ingested";
    int skipped = 0;
    for (const Trip& trip : trips) {
        std::optional<Trajectory> traj = featurize_trip(trip, cfg.resample_interval_s);
        if (!traj) {
            ++skipped;
            std::cerr << "ingest: skipping trip of entity '" << trip.points.front().entity_id
                      << "' (too short after resampling)\n";
            continue;
        }
        // Chunk into uniform-length trajectories; the tail is discarded.
        const Eigen::Index T = traj->steps();
        for (Eigen::Index at = 0; at + cfg.traj_len <= T; at += cfg.traj_len) {
            Trajectory chunk;
            chunk.X = traj->X.middleRows(at, cfg.traj_len);
            chunk.A = traj->A.middleRows(at, cfg.traj_len);
            chunk.Y = traj->Y.segment(at, cfg.traj_len);
            ds.trajectories.push_back(std::move(chunk));
        }
    }

    // Pooled z-score per channel; constants go to the manifest.
    auto record = [&](const std::string& key, double v) {
        ds.manifest.extra[key] = format_double(v);
    };
    if (!ds.trajectories.empty()) {
        const Eigen::Index k = ds.dims();
        const Eigen::Index rows =
            static_cast<Eigen::Index>(ds.trajectories.size()) * ds.steps();
        for (Eigen::Index c = 0; c < k; ++c) {
            Eigen::VectorXd xs(rows), as(rows);
            Eigen::Index at = 0;
            for (const Trajectory& t : ds.trajectories) {
                xs.segment(at, t.steps()) = t.X.col(c);
                as.segment(at, t.steps()) = t.A.col(c);
                at += t.steps();
            }
            const double xm = xs.mean();
            const double xs_sd = std::sqrt((xs.array() - xm).square().mean());
            const double xsd = xs_sd < 1e-12 ? 1.0 : xs_sd;
            const double am = as.mean();
            const double as_sd = std::sqrt((as.array() - am).square().mean());
            const double asd = as_sd < 1e-12 ? 1.0 : as_sd;
            for (Trajectory& t : ds.trajectories) {
                t.X.col(c) = (t.X.col(c).array() - xm) / xsd;
                t.A.col(c) = (t.A.col(c).array() - am) / asd;
            }
            record("norm_mean_x_" + std::to_string(c), xm);
            record("norm_std_x_" + std::to_string(c), xsd);
            record("norm_mean_a_" + std::to_string(c), am);
            record("norm_std_a_" + std::to_string(c), asd);
        }
        Eigen::VectorXd ys(rows);
        Eigen::Index at = 0;
        for (const Trajectory& t : ds.trajectories) {
            ys.segment(at, t.steps()) = t.Y;
            at += t.steps();
        }
        const double ym = ys.mean();
        const double ys_sd = std::sqrt((ys.array() - ym).square().mean());
        const double ysd = ys_sd < 1e-12 ? 1.0 : ys_sd;
        for (Trajectory& t : ds.trajectories) {
            t.Y = (t.Y.array() - ym) / ysd;
        }
        record("norm_mean_y", ym);
        record("norm_std_y", ysd);
    }

    ds.manifest.extra["source"] = path;
    ds.manifest.extra["gap_threshold_s"] = std::to_string(cfg.gap_threshold_s);
    ds.manifest.extra["min_trip_len"] = std::to_string(cfg.min_trip_len);
    ds.manifest.extra["resample_interval_s"] = std::to_string(cfg.resample_interval_s);
    ds.manifest.extra["traj_len"] = std::to_string(cfg.traj_len);
    ds.manifest.extra["trips_kept"] = std::to_string(trips.size() - static_cast<std::size_t>(skipped));
    ds.manifest.extra["trips_skipped"] = std::to_string(skipped);
    ds.validate();
    return ds;
}

}  // namespace deconf
