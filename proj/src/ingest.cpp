#include "gpsmtm/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gpsmtm/error.hpp"
#include "gpsmtm/parallel.hpp"

namespace gpsmtm {

using nlohmann::json;

void StaypointConfig::validate() const {
    if (!(dist_threshold_m > 0.0) || !(time_threshold_s > 0.0))
        throw InvalidConfig("staypoint thresholds must be strictly positive");
}

double haversine_m(double lat1, double lon1, double lat2, double lon2) {
    constexpr double earth_radius_m = 6371008.8;
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (lat2 - lat1) * rad;
    const double dlon = (lon2 - lon1) * rad;
    const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * earth_radius_m * std::asin(std::min(1.0, std::sqrt(a)));
}

std::vector<StopPoint> detect_staypoints(std::span<const RawPing> pings, const StaypointConfig& cfg) {
    cfg.validate();
    for (std::size_t k = 1; k < pings.size(); ++k)
        if (pings[k].timestamp < pings[k - 1].timestamp)
            throw NotSorted("ping " + std::to_string(k) + " precedes its predecessor");

    std::vector<StopPoint> stops;
    const std::size_t n = pings.size();
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && haversine_m(pings[i].lat, pings[i].lon, pings[j].lat, pings[j].lon) <= cfg.dist_threshold_m) ++j;
        const auto duration = static_cast<double>(pings[j - 1].timestamp - pings[i].timestamp);
        if (duration >= cfg.time_threshold_s) {
            double lat = 0.0;
            double lon = 0.0;
            for (std::size_t k = i; k < j; ++k) {
                lat += pings[k].lat;
                lon += pings[k].lon;
            }
            const auto count = static_cast<double>(j - i);
            stops.push_back(StopPoint{-1, pings[i].timestamp, pings[j - 1].timestamp, lat / count, lon / count});
            i = j;
        } else {
            ++i;
        }
    }
    return stops;
}

namespace {

std::size_t nearest_poi(double lat, double lon, std::span<const PoiEntry> poi_table) {
    std::size_t best = 0;
    double best_d = haversine_m(lat, lon, poi_table[0].lat, poi_table[0].lon);
    for (std::size_t k = 1; k < poi_table.size(); ++k) {
        const double d = haversine_m(lat, lon, poi_table[k].lat, poi_table[k].lon);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

}  // namespace

std::vector<StopPoint> assign_poi(std::span<const StopPoint> stops, std::span<const PoiEntry> poi_table, PoiVocab& vocab) {
    if (poi_table.empty()) throw NoPois("POI table is empty");
    std::vector<StopPoint> out(stops.begin(), stops.end());
    for (auto& s : out) s.category = vocab.add(poi_table[nearest_poi(s.lat, s.lon, poi_table)].category);
    return out;
}

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return in;
}

bool blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

json parse_object(const std::string& line, std::size_t line_no) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
    return j;
}

const json& field(const json& j, const char* key, std::size_t line_no) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(line_no, std::string("missing key '") + key + "'");
    return *it;
}

std::string string_field(const json& j, const char* key, std::size_t line_no) {
    const auto& v = field(j, key, line_no);
    if (!v.is_string()) throw ParseError(line_no, std::string("key '") + key + "' must be a string");
    return v.get<std::string>();
}

std::int64_t int_field(const json& j, const char* key, std::size_t line_no) {
    const auto& v = field(j, key, line_no);
    if (!v.is_number_integer()) throw ParseError(line_no, std::string("key '") + key + "' must be an integer");
    return v.get<std::int64_t>();
}

double number_field(const json& j, const char* key, std::size_t line_no) {
    const auto& v = field(j, key, line_no);
    if (!v.is_number()) throw ParseError(line_no, std::string("key '") + key + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ParseError(line_no, std::string("key '") + key + "' is not finite");
    return d;
}

void check_coordinates(double lat, double lon, std::size_t line_no) {
    if (lat < -90.0 || lat > 90.0 || lon < -180.0 || lon > 180.0) throw ParseError(line_no, "coordinates out of range");
}

}  // namespace

RecordFormat detect_format(const std::filesystem::path& path) {
    auto in = open_input(path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        const json j = parse_object(line, line_no);
        if (j.contains("timestamp")) return RecordFormat::Pings;
        if (j.contains("start_time")) return RecordFormat::Stops;
        throw ParseError(line_no, "record is neither a stop nor a ping");
    }
    throw EmptyDataset("'" + path.string() + "' contains no records");
}

StopDataset parse_stop_lines(std::istream& in) {
    StopDataset ds;
    std::map<std::string, std::vector<StopPoint>> by_agent;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        const json j = parse_object(line, line_no);
        if (j.contains("timestamp")) throw ParseError(line_no, "ping record in a stop-point file");
        StopPoint s;
        const std::string agent = string_field(j, "agent_id", line_no);
        const std::string category = string_field(j, "category", line_no);
        s.start_time = int_field(j, "start_time", line_no);
        s.end_time = int_field(j, "end_time", line_no);
        s.lat = number_field(j, "lat", line_no);
        s.lon = number_field(j, "lon", line_no);
        check_coordinates(s.lat, s.lon, line_no);
        if (s.end_time < s.start_time) throw ParseError(line_no, "end_time before start_time");
        s.category = ds.vocab.add(category);
        by_agent[agent].push_back(s);
    }
    for (auto& [agent, stops] : by_agent) {
        std::stable_sort(stops.begin(), stops.end(),
                         [](const StopPoint& a, const StopPoint& b) { return a.start_time < b.start_time; });
        Trajectory t{agent, std::move(stops)};
        validate_trajectory(t);
        ds.trajectories.push_back(std::move(t));
    }
    if (ds.trajectories.empty()) {
        ds.stats = NormStats{0.0, 1.0, 0.0, 1.0, 0};
    } else {
        ds.stats = compute_norm_stats(ds.trajectories);
    }
    return ds;
}

StopDataset load_stop_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    return parse_stop_lines(in);
}

void write_stop_lines(std::ostream& out, std::span<const Trajectory> trajectories, const PoiVocab& vocab) {
    for (const auto& t : trajectories) {
        for (const auto& s : t.stops) {
            nlohmann::ordered_json j;
            j["agent_id"] = t.agent_id;
            j["category"] = vocab.name(s.category);
            j["start_time"] = s.start_time;
            j["end_time"] = s.end_time;
            j["lat"] = s.lat;
            j["lon"] = s.lon;
            out << j.dump() << '\n';
        }
    }
}

void write_stop_file(const std::filesystem::path& path, std::span<const Trajectory> trajectories, const PoiVocab& vocab) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    write_stop_lines(out, trajectories, vocab);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::map<std::string, std::vector<RawPing>> parse_ping_lines(std::istream& in) {
    std::map<std::string, std::vector<RawPing>> by_agent;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        const json j = parse_object(line, line_no);
        if (j.contains("start_time")) throw ParseError(line_no, "stop-point record in a ping file");
        RawPing p;
        p.agent_id = string_field(j, "agent_id", line_no);
        p.timestamp = int_field(j, "timestamp", line_no);
        p.lat = number_field(j, "lat", line_no);
        p.lon = number_field(j, "lon", line_no);
        check_coordinates(p.lat, p.lon, line_no);
        by_agent[p.agent_id].push_back(std::move(p));
    }
    for (auto& [agent, pings] : by_agent) {
        std::stable_sort(pings.begin(), pings.end(), [](const RawPing& a, const RawPing& b) { return a.timestamp < b.timestamp; });
        pings.erase(std::unique(pings.begin(), pings.end(),
                                [](const RawPing& a, const RawPing& b) { return a.timestamp == b.timestamp; }),
                    pings.end());
    }
    return by_agent;
}

std::map<std::string, std::vector<RawPing>> load_ping_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    return parse_ping_lines(in);
}

std::vector<PoiEntry> load_poi_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    std::vector<PoiEntry> pois;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        const json j = parse_object(line, line_no);
        PoiEntry p{number_field(j, "lat", line_no), number_field(j, "lon", line_no), string_field(j, "category", line_no)};
        check_coordinates(p.lat, p.lon, line_no);
        pois.push_back(std::move(p));
    }
    return pois;
}

StopDataset stops_from_pings(const std::map<std::string, std::vector<RawPing>>& pings, std::span<const PoiEntry> poi_table,
                             const StaypointConfig& cfg, std::size_t workers) {
    if (poi_table.empty()) throw NoPois("POI table is empty");
    cfg.validate();
    std::vector<const std::pair<const std::string, std::vector<RawPing>>*> agents;
    for (const auto& entry : pings) agents.push_back(&entry);

    // Nearest-POI indices are computed in parallel; vocabulary indices are
    // assigned afterwards in agent order so they do not depend on scheduling.
    std::vector<std::vector<StopPoint>> stops(agents.size());
    std::vector<std::vector<std::size_t>> nearest(agents.size());
    parallel_for(agents.size(), workers, [&](std::size_t a) {
        stops[a] = detect_staypoints(agents[a]->second, cfg);
        for (const auto& s : stops[a]) nearest[a].push_back(nearest_poi(s.lat, s.lon, poi_table));
    });

    StopDataset ds;
    for (std::size_t a = 0; a < agents.size(); ++a) {
        for (std::size_t k = 0; k < stops[a].size(); ++k) stops[a][k].category = ds.vocab.add(poi_table[nearest[a][k]].category);
        if (!stops[a].empty()) ds.trajectories.push_back(Trajectory{agents[a]->first, std::move(stops[a])});
    }
    ds.stats = ds.trajectories.empty() ? NormStats{0.0, 1.0, 0.0, 1.0, 0} : compute_norm_stats(ds.trajectories);
    return ds;
}

std::vector<Trajectory> segment_windows(const Trajectory& t, std::size_t window_len) {
    if (window_len < 2) throw InvalidConfig("window length must be at least 2");
    std::vector<Trajectory> windows;
    for (std::size_t begin = 0; begin < t.stops.size(); begin += window_len) {
        const std::size_t end = std::min(begin + window_len, t.stops.size());
        if (end - begin < 2) break;
        windows.push_back(Trajectory{t.agent_id, {t.stops.begin() + static_cast<std::ptrdiff_t>(begin),
                                                  t.stops.begin() + static_cast<std::ptrdiff_t>(end)}});
    }
    return windows;
}

std::vector<Trajectory> segment_windows(std::span<const Trajectory> ts, std::size_t window_len) {
    std::vector<Trajectory> windows;
    for (const auto& t : ts) {
        auto w = segment_windows(t, window_len);
        std::move(w.begin(), w.end(), std::back_inserter(windows));
    }
    return windows;
}

AgentSplit split_by_agent(std::span<const Trajectory> trajectories, double heldout_fraction) {
    if (!(heldout_fraction >= 0.0 && heldout_fraction <= 1.0)) throw InvalidConfig("held-out fraction must be in [0, 1]");
    auto hash = [](const std::string& s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    };
    std::vector<std::size_t> order(trajectories.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::uint64_t> keys(trajectories.size());
    for (std::size_t i = 0; i < trajectories.size(); ++i) keys[i] = hash(trajectories[i].agent_id);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (keys[a] != keys[b]) return keys[a] < keys[b];
        return trajectories[a].agent_id < trajectories[b].agent_id;
    });
    const auto n_heldout = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(trajectories.size())));
    std::vector<bool> heldout(trajectories.size(), false);
    for (std::size_t r = trajectories.size() - n_heldout; r < trajectories.size(); ++r) heldout[order[r]] = true;
    AgentSplit split;
    for (std::size_t i = 0; i < trajectories.size(); ++i) (heldout[i] ? split.heldout : split.train).push_back(trajectories[i]);
    return split;
}

}  // namespace gpsmtm
