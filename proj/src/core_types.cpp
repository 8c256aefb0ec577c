#include "gpsmtm/core_types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "gpsmtm/error.hpp"

namespace gpsmtm {

PoiVocab::PoiVocab(std::vector<std::string> categories) {
    for (const auto& c : categories) {
        if (find(c)) throw VocabError("duplicate category '" + c + "'");
        add(c);
    }
}

int PoiVocab::add(std::string_view name) {
    if (auto idx = find(name)) return *idx;
    const int idx = static_cast<int>(categories_.size());
    categories_.emplace_back(name);
    index_.emplace(categories_.back(), idx);
    return idx;
}

std::optional<int> PoiVocab::find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

int PoiVocab::index_of(std::string_view name) const {
    if (auto idx = find(name)) return *idx;
    throw VocabError("unknown category '" + std::string(name) + "'");
}

const std::string& PoiVocab::name(int index) const {
    static const std::string pad = "<PAD>";
    static const std::string mask = "<MASK>";
    if (index == pad_index()) return pad;
    if (index == mask_index()) return mask;
    if (index < 0 || index > mask_index()) throw VocabError("category index " + std::to_string(index) + " out of range");
    return categories_[static_cast<std::size_t>(index)];
}

std::string PoiVocab::fingerprint() const {
    // FNV-1a over the length-prefixed names.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](unsigned char b) {
        h ^= b;
        h *= 0x100000001b3ULL;
    };
    for (const auto& c : categories_) {
        const auto n = static_cast<std::uint32_t>(c.size());
        for (int i = 0; i < 4; ++i) feed(static_cast<unsigned char>(n >> (8 * i)));
        for (char ch : c) feed(static_cast<unsigned char>(ch));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nlohmann::json PoiVocab::to_json() const { return nlohmann::json{{"categories", categories_}}; }

PoiVocab PoiVocab::from_json(const nlohmann::json& j) {
    try {
        return PoiVocab(j.at("categories").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw VocabError(std::string("bad vocabulary json: ") + e.what());
    }
}

void validate_trajectory(const Trajectory& t) {
    for (std::size_t k = 0; k < t.stops.size(); ++k) {
        const auto& s = t.stops[k];
        const std::string where = "agent '" + t.agent_id + "' stop " + std::to_string(k);
        if (s.end_time < s.start_time) throw ValidationError(where + ": end_time before start_time");
        if (!(s.lat >= -90.0 && s.lat <= 90.0) || !(s.lon >= -180.0 && s.lon <= 180.0))
            throw ValidationError(where + ": coordinates out of range");
        if (k + 1 < t.stops.size()) {
            const auto& next = t.stops[k + 1];
            if (next.start_time < s.start_time) throw ValidationError(where + ": stops not sorted by start_time");
            if (s.end_time > next.start_time) throw ValidationError(where + ": overlaps the next stop");
        }
    }
}

void NormStats::validate() const {
    const bool finite = std::isfinite(lat_min) && std::isfinite(lat_max) && std::isfinite(lon_min) && std::isfinite(lon_max);
    if (!finite || !(lat_max > lat_min) || !(lon_max > lon_min))
        throw InvalidConfig("degenerate normalization bounding box");
    if (day_span < 0) throw InvalidConfig("negative day span");
}

nlohmann::json NormStats::to_json() const {
    return nlohmann::json{{"lat_min", lat_min}, {"lat_max", lat_max}, {"lon_min", lon_min},
                          {"lon_max", lon_max}, {"day_span", day_span}};
}

NormStats NormStats::from_json(const nlohmann::json& j) {
    NormStats s;
    try {
        s.lat_min = j.at("lat_min").get<double>();
        s.lat_max = j.at("lat_max").get<double>();
        s.lon_min = j.at("lon_min").get<double>();
        s.lon_max = j.at("lon_max").get<double>();
        s.day_span = j.at("day_span").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("bad norm stats json: ") + e.what());
    }
    s.validate();
    return s;
}

std::int64_t day_of(std::int64_t t) {
    std::int64_t d = t / kSecondsPerDay;
    if (t % kSecondsPerDay < 0) --d;
    return d;
}

NormStats compute_norm_stats(std::span<const Trajectory> trajectories, double min_extent_deg) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    NormStats s{inf, -inf, inf, -inf, 0};
    bool any = false;
    for (const auto& t : trajectories) {
        for (const auto& stop : t.stops) {
            any = true;
            s.lat_min = std::min(s.lat_min, stop.lat);
            s.lat_max = std::max(s.lat_max, stop.lat);
            s.lon_min = std::min(s.lon_min, stop.lon);
            s.lon_max = std::max(s.lon_max, stop.lon);
            s.day_span = std::max(s.day_span, day_of(stop.start_time));
        }
    }
    if (!any) throw EmptyDataset("cannot compute normalization stats without stops");
    auto widen = [min_extent_deg](double& lo, double& hi) {
        if (hi - lo < min_extent_deg) {
            const double mid = 0.5 * (lo + hi);
            lo = mid - 0.5 * min_extent_deg;
            hi = mid + 0.5 * min_extent_deg;
        }
    };
    widen(s.lat_min, s.lat_max);
    widen(s.lon_min, s.lon_max);
    s.validate();
    return s;
}

namespace {

double day_fraction(std::int64_t t) {
    const std::int64_t r = t - day_of(t) * kSecondsPerDay;
    return static_cast<double>(r) / static_cast<double>(kSecondsPerDay);
}

double unit_clamp(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

DetailVec normalize_stop(const StopPoint& s, const NormStats& stats) {
    if (!std::isfinite(s.lat) || !std::isfinite(s.lon)) throw InvalidStop("non-finite stop coordinates");
    DetailVec d;
    d.start_frac = day_fraction(s.start_time);
    d.end_frac = day_fraction(s.end_time);
    const auto span = static_cast<double>(std::max<std::int64_t>(1, stats.day_span));
    d.day_index = unit_clamp(static_cast<double>(day_of(s.start_time)) / span);
    d.x = unit_clamp((s.lon - stats.lon_min) / (stats.lon_max - stats.lon_min));
    d.y = unit_clamp((s.lat - stats.lat_min) / (stats.lat_max - stats.lat_min));
    return d;
}

StopFields denormalize_detail(const DetailVec& d, const NormStats& stats) {
    const auto span = std::max<std::int64_t>(1, stats.day_span);
    const auto day = static_cast<std::int64_t>(std::llround(unit_clamp(d.day_index) * static_cast<double>(span)));
    const auto start_tod = static_cast<std::int64_t>(std::llround(unit_clamp(d.start_frac) * kSecondsPerDay));
    const auto end_tod = static_cast<std::int64_t>(std::llround(unit_clamp(d.end_frac) * kSecondsPerDay));
    StopFields f;
    f.start_time = day * kSecondsPerDay + start_tod;
    f.end_time = day * kSecondsPerDay + end_tod;
    if (f.end_time < f.start_time) f.end_time += kSecondsPerDay;
    f.lon = stats.lon_min + unit_clamp(d.x) * (stats.lon_max - stats.lon_min);
    f.lat = stats.lat_min + unit_clamp(d.y) * (stats.lat_max - stats.lat_min);
    return f;
}

}  // namespace gpsmtm
