#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gpsmtm/core_types.hpp"

namespace gpsmtm {

struct RawPing {
    std::string agent_id;
    std::int64_t timestamp = 0;
    double lat = 0.0;
    double lon = 0.0;
};

struct StaypointConfig {
    double dist_threshold_m = 200.0;
    double time_threshold_s = 1200.0;

    void validate() const;
};

struct PoiEntry {
    double lat = 0.0;
    double lon = 0.0;
    std::string category;
};

/// Great-circle distance in meters.
double haversine_m(double lat1, double lon1, double lat2, double lon2);

/// Staypoint sweep over one agent's time-ordered pings. A window grows while
/// every ping stays within the distance threshold of the window's first ping;
/// windows lasting at least the time threshold become unlabeled stops at the
/// centroid of their members.
std::vector<StopPoint> detect_staypoints(std::span<const RawPing> pings, const StaypointConfig& cfg);

/// Labels every stop with the category of its nearest POI (lowest index wins ties).
std::vector<StopPoint> assign_poi(std::span<const StopPoint> stops, std::span<const PoiEntry> poi_table, PoiVocab& vocab);

struct StopDataset {
    std::vector<Trajectory> trajectories;  ///< sorted by agent_id
    PoiVocab vocab;
    NormStats stats;
};

enum class RecordFormat { Stops, Pings };

/// Inspects the first record of a JSON-lines file.
RecordFormat detect_format(const std::filesystem::path& path);

StopDataset load_stop_file(const std::filesystem::path& path);
StopDataset parse_stop_lines(std::istream& in);

/// Writes trajectories in the canonical stop-point JSON-lines format.
void write_stop_file(const std::filesystem::path& path, std::span<const Trajectory> trajectories, const PoiVocab& vocab);
void write_stop_lines(std::ostream& out, std::span<const Trajectory> trajectories, const PoiVocab& vocab);

/// Pings grouped per agent (ordered by agent id), each group sorted by time
/// with duplicate timestamps dropped.
std::map<std::string, std::vector<RawPing>> load_ping_file(const std::filesystem::path& path);
std::map<std::string, std::vector<RawPing>> parse_ping_lines(std::istream& in);

std::vector<PoiEntry> load_poi_file(const std::filesystem::path& path);

/// Staypoints + POI labelling for every agent; output order is agent-id order
/// whatever the worker count.
StopDataset stops_from_pings(const std::map<std::string, std::vector<RawPing>>& pings, std::span<const PoiEntry> poi_table,
                             const StaypointConfig& cfg, std::size_t workers = 1);

/// Consecutive non-overlapping windows of `window_len` stops. A trailing
/// remainder of at least two stops is kept as a short window.
std::vector<Trajectory> segment_windows(const Trajectory& t, std::size_t window_len);
std::vector<Trajectory> segment_windows(std::span<const Trajectory> ts, std::size_t window_len);

struct AgentSplit {
    std::vector<Trajectory> train;
    std::vector<Trajectory> heldout;
};

/// Deterministic agent-level split: agents are ranked by a hash of their id
/// and the last floor(heldout_fraction * n) are held out.
AgentSplit split_by_agent(std::span<const Trajectory> trajectories, double heldout_fraction);

}  // namespace gpsmtm
