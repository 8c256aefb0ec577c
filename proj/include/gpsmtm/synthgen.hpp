#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gpsmtm/ingest.hpp"

namespace gpsmtm {

struct ScenarioConfig {
    std::size_t n_agents = 200;
    std::size_t n_days = 14;
    std::vector<PoiEntry> poi_map;
    double schedule_noise_min = 15.0;
    double skip_prob = 0.1;
    std::uint64_t seed = 7;

    void validate() const;
};

/// Fixed city layout (home, work, gym, restaurant, grocery, park, social)
/// used when no POI map is supplied.
std::vector<PoiEntry> default_poi_map();

/// Default acceptance scenario: 200 agents, 14 days, 15 min noise, skip 0.1, seed 7.
ScenarioConfig default_scenario();

/// Synthetic pattern-of-life dataset. Day 0 is a weekday; days 5 and 6 of
/// every week follow the weekend routine. Each agent's stream is seeded from
/// (seed, agent index), so output is identical for any worker count.
StopDataset generate(const ScenarioConfig& cfg, std::size_t workers = 1);

std::map<std::string, std::size_t> class_histogram(std::span<const Trajectory> trajectories, const PoiVocab& vocab);

}  // namespace gpsmtm
