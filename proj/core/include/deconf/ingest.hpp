#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deconf/simgen.hpp"

namespace deconf {

struct GpsPoint {
    std::string entity_id;
    std::int64_t timestamp = 0;  // seconds since epoch
    double lat = 0.0;
    double lon = 0.0;
};

// Time-ordered points of one entity with no internal gap over the threshold.
struct Trip {
    std::vector<GpsPoint> points;
};

struct IngestConfig {
    int gap_threshold_s = 900;
    int min_trip_len = 10;
    int resample_interval_s = 60;
    int traj_len = 60;  // rows per output trajectory; featurized trips are chunked

    void validate() const;
};

// Schema `entity_id,timestamp,lat,lon` with a mandatory header. Coordinates
// outside [-90,90] x [-180,180] are rejected with the offending line.
std::vector<GpsPoint> parse_trajectory_csv(const std::string& path);

// Groups by entity (first-appearance order), sorts by timestamp within an
// entity dropping exact-duplicate timestamps, splits where the gap exceeds
// the threshold, and discards trips shorter than min_trip_len.
std::vector<Trip> segment_trips(std::vector<GpsPoint> points, int gap_threshold_s,
                                int min_trip_len);

// Linear interpolation of lat/lon onto the uniform grid t0 + i*interval.
std::vector<GpsPoint> resample_trip(const Trip& trip, int resample_interval_s);

// Resamples to a uniform grid and extracts motion features:
// X = (speed m/s, heading sine, heading cosine), A = first difference of X,
// Y = next-step speed. Values are unnormalized. Returns nothing when the
// trip is too short after resampling.
std::optional<Trajectory> featurize_trip(const Trip& trip, int resample_interval_s);

// Full pipeline: parse, segment, featurize, chunk to uniform length, then
// z-score every channel over the pooled dataset, recording the constants in
// the manifest.
Dataset ingest_dataset(const std::string& path, const IngestConfig& cfg);

// Great-circle distance in meters (mean Earth radius 6371008.8 m).
double haversine_m(double lat1, double lon1, double lat2, double lon2);

}  // namespace deconf
