#include "gpsmtm/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>

#include "gpsmtm/error.hpp"
#include "gpsmtm/parallel.hpp"
#include "gpsmtm/rng.hpp"

namespace gpsmtm {

void ScenarioConfig::validate() const {
    if (!(skip_prob >= 0.0 && skip_prob <= 1.0)) throw InvalidConfig("skip_prob must be in [0, 1]");
    if (!(schedule_noise_min >= 0.0) || !std::isfinite(schedule_noise_min))
        throw InvalidConfig("schedule noise must be finite and non-negative");
    if (n_agents > 0 && poi_map.empty()) throw NoPois("scenario has agents but an empty POI map");
}

std::vector<PoiEntry> default_poi_map() {
    struct Layer {
        const char* category;
        int count;
    };
    // Homes spread over the whole box; workplaces cluster downtown.
    static constexpr Layer layers[] = {{"home", 60}, {"work", 15},  {"gym", 8},   {"restaurant", 12},
                                       {"grocery", 8}, {"park", 6}, {"social", 8}};
    constexpr double lat_min = 34.00, lat_max = 34.10, lon_min = -118.35, lon_max = -118.20;
    Rng rng(0x5eed'c17fULL);
    std::vector<PoiEntry> pois;
    for (const auto& layer : layers) {
        const bool downtown = std::string_view(layer.category) == "work";
        for (int k = 0; k < layer.count; ++k) {
            double u = rng.uniform();
            double v = rng.uniform();
            if (downtown) {
                u = 0.35 + 0.3 * u;
                v = 0.35 + 0.3 * v;
            }
            const double lat = std::round((lat_min + v * (lat_max - lat_min)) * 1e6) / 1e6;
            const double lon = std::round((lon_min + u * (lon_max - lon_min)) * 1e6) / 1e6;
            pois.push_back(PoiEntry{lat, lon, layer.category});
        }
    }
    return pois;
}

ScenarioConfig default_scenario() {
    ScenarioConfig cfg;
    cfg.poi_map = default_poi_map();
    return cfg;
}

namespace {

enum class Anchor { Home, Work, Gym, LunchNearWork, Grocery, Park, Social, LunchNearHome };

struct Activity {
    Anchor anchor;
    int start_min;
    int end_min;
    bool optional;
};

// home -> gym -> home -> work -> restaurant -> work -> grocery -> home
constexpr Activity kWeekday[] = {
    {Anchor::Home, 0, 360, false},           {Anchor::Gym, 375, 435, true},
    {Anchor::Home, 450, 510, false},         {Anchor::Work, 540, 720, false},
    {Anchor::LunchNearWork, 740, 795, true}, {Anchor::Work, 810, 1050, false},
    {Anchor::Grocery, 1080, 1125, true},     {Anchor::Home, 1140, 1439, false},
};

constexpr Activity kWeekend[] = {
    {Anchor::Home, 0, 570, false},            {Anchor::Park, 600, 690, true},
    {Anchor::LunchNearHome, 750, 810, true},  {Anchor::Home, 840, 1050, false},
    {Anchor::Social, 1080, 1260, true},       {Anchor::Home, 1290, 1439, false},
};

struct AgentPlaces {
    std::optional<std::size_t> place[8];
};

std::vector<std::size_t> indices_of(std::span<const PoiEntry> pois, std::string_view category) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pois.size(); ++i)
        if (pois[i].category == category) out.push_back(i);
    return out;
}

std::optional<std::size_t> nearest_of(std::span<const PoiEntry> pois, std::string_view category, const PoiEntry& from) {
    std::optional<std::size_t> best;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pois.size(); ++i) {
        if (pois[i].category != category) continue;
        const double d = haversine_m(from.lat, from.lon, pois[i].lat, pois[i].lon);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

std::optional<std::size_t> pick(Rng& rng, const std::vector<std::size_t>& candidates) {
    if (candidates.empty()) return std::nullopt;
    return candidates[rng.below(candidates.size())];
}

AgentPlaces choose_places(Rng& rng, std::span<const PoiEntry> pois) {
    AgentPlaces a;
    const auto home = pick(rng, indices_of(pois, "home"));
    if (!home) throw NoPois("POI map has no 'home' entries");
    auto work = pick(rng, indices_of(pois, "work"));
    if (!work) work = home;
    const auto& h = pois[*home];
    const auto& w = pois[*work];
    a.place[static_cast<int>(Anchor::Home)] = home;
    a.place[static_cast<int>(Anchor::Work)] = work;
    a.place[static_cast<int>(Anchor::Gym)] = nearest_of(pois, "gym", h);
    a.place[static_cast<int>(Anchor::LunchNearWork)] = nearest_of(pois, "restaurant", w);
    a.place[static_cast<int>(Anchor::Grocery)] = nearest_of(pois, "grocery", h);
    a.place[static_cast<int>(Anchor::Park)] = nearest_of(pois, "park", h);
    a.place[static_cast<int>(Anchor::Social)] = pick(rng, indices_of(pois, "social"));
    a.place[static_cast<int>(Anchor::LunchNearHome)] = nearest_of(pois, "restaurant", h);
    return a;
}

struct PlannedStop {
    std::size_t poi;
    std::int64_t start_s;
    std::int64_t end_s;
};

/// Truncated at three standard deviations by redrawing.
double truncated_normal(Rng& rng, double sigma) {
    for (;;) {
        const double z = rng.normal();
        if (std::abs(z) <= 3.0) return z * sigma;
    }
}

std::vector<PlannedStop> plan_day(Rng& rng, std::span<const Activity> tmpl, const AgentPlaces& places, double skip_prob,
                                  double noise_min) {
    std::vector<PlannedStop> day;
    for (const auto& act : tmpl) {
        const auto poi = places.place[static_cast<int>(act.anchor)];
        if (!poi) continue;
        if (act.optional && skip_prob > 0.0 && rng.bernoulli(skip_prob)) continue;
        if (!day.empty() && day.back().poi == *poi) {
            day.back().end_s = act.end_min * 60;
            continue;
        }
        day.push_back(PlannedStop{*poi, act.start_min * 60, act.end_min * 60});
    }
    if (noise_min <= 0.0 || day.empty()) return day;

    // Day boundaries stay fixed; interior boundaries are jittered and the whole
    // day is redrawn whenever the jitter would break ordering.
    const double sigma_s = noise_min * 60.0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<PlannedStop> jittered = day;
        for (std::size_t k = 0; k < jittered.size(); ++k) {
            if (k > 0) jittered[k].start_s += std::llround(truncated_normal(rng, sigma_s));
            if (k + 1 < jittered.size()) jittered[k].end_s += std::llround(truncated_normal(rng, sigma_s));
        }
        bool ok = true;
        for (std::size_t k = 0; k < jittered.size() && ok; ++k) {
            ok = jittered[k].end_s > jittered[k].start_s;
            if (ok && k + 1 < jittered.size()) ok = jittered[k].end_s <= jittered[k + 1].start_s;
        }
        if (ok) return jittered;
    }
    return day;
}

struct AgentTrace {
    std::vector<std::size_t> pois;
    std::vector<StopPoint> stops;
};

AgentTrace generate_agent(const ScenarioConfig& cfg, std::size_t agent) {
    Rng rng(derive_seed(cfg.seed, agent));
    const AgentPlaces places = choose_places(rng, cfg.poi_map);
    AgentTrace trace;
    for (std::size_t d = 0; d < cfg.n_days; ++d) {
        const bool weekend = d % 7 >= 5;
        const std::span<const Activity> tmpl = weekend ? std::span<const Activity>(kWeekend) : std::span<const Activity>(kWeekday);
        const auto day_start = static_cast<std::int64_t>(d) * kSecondsPerDay;
        for (const auto& p : plan_day(rng, tmpl, places, cfg.skip_prob, cfg.schedule_noise_min)) {
            const auto& poi = cfg.poi_map[p.poi];
            trace.pois.push_back(p.poi);
            trace.stops.push_back(StopPoint{-1, day_start + p.start_s, day_start + p.end_s, poi.lat, poi.lon});
        }
    }
    return trace;
}

std::string agent_name(std::size_t agent, std::size_t n_agents) {
    int width = 4;
    for (std::size_t n = n_agents; n >= 10000; n /= 10) ++width;
    char buf[64];
    std::snprintf(buf, sizeof buf, "agent_%0*zu", width, agent);
    return buf;
}

}  // namespace

StopDataset generate(const ScenarioConfig& cfg, std::size_t workers) {
    cfg.validate();
    std::vector<AgentTrace> traces(cfg.n_agents);
    parallel_for(cfg.n_agents, workers, [&](std::size_t a) { traces[a] = generate_agent(cfg, a); });

    StopDataset ds;
    for (std::size_t a = 0; a < cfg.n_agents; ++a) {
        auto& trace = traces[a];
        for (std::size_t k = 0; k < trace.stops.size(); ++k) trace.stops[k].category = ds.vocab.add(cfg.poi_map[trace.pois[k]].category);
        Trajectory t{agent_name(a, cfg.n_agents), std::move(trace.stops)};
        validate_trajectory(t);
        ds.trajectories.push_back(std::move(t));
    }
    const bool any_stop = std::any_of(ds.trajectories.begin(), ds.trajectories.end(), [](const Trajectory& t) { return !t.stops.empty(); });
    ds.stats = any_stop ? compute_norm_stats(ds.trajectories) : NormStats{0.0, 1.0, 0.0, 1.0, 0};
    return ds;
}

std::map<std::string, std::size_t> class_histogram(std::span<const Trajectory> trajectories, const PoiVocab& vocab) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : trajectories)
        for (const auto& s : t.stops) ++counts[vocab.name(s.category)];
    return counts;
}

}  // namespace gpsmtm
