#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace gpsmtm {

inline constexpr std::int64_t kSecondsPerDay = 86400;
inline constexpr std::size_t kDetailDim = 5;

/// POI category vocabulary. Real categories occupy [0, n); PAD is n and MASK is n + 1.
class PoiVocab {
public:
    PoiVocab() = default;
    explicit PoiVocab(std::vector<std::string> categories);

    /// Returns the index of `name`, appending it if unseen.
    int add(std::string_view name);
    std::optional<int> find(std::string_view name) const;
    int index_of(std::string_view name) const;  // throws VocabError
    const std::string& name(int index) const;

    std::size_t num_categories() const noexcept { return categories_.size(); }
    /// Real categories plus PAD and MASK.
    std::size_t size() const noexcept { return categories_.size() + 2; }
    int pad_index() const noexcept { return static_cast<int>(categories_.size()); }
    int mask_index() const noexcept { return static_cast<int>(categories_.size()) + 1; }
    const std::vector<std::string>& categories() const noexcept { return categories_; }

    /// Stable 64-bit fingerprint of the ordered category list, as 16 hex digits.
    std::string fingerprint() const;

    nlohmann::json to_json() const;
    static PoiVocab from_json(const nlohmann::json& j);

    friend bool operator==(const PoiVocab& a, const PoiVocab& b) { return a.categories_ == b.categories_; }

private:
    std::vector<std::string> categories_;
    std::unordered_map<std::string, int> index_;
};

struct StopPoint {
    int category = -1;  ///< PoiVocab index; -1 while unlabeled
    std::int64_t start_time = 0;
    std::int64_t end_time = 0;
    double lat = 0.0;
    double lon = 0.0;

    friend bool operator==(const StopPoint&, const StopPoint&) = default;
};

struct Trajectory {
    std::string agent_id;
    std::vector<StopPoint> stops;

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Checks time ordering, non-overlap and coordinate ranges; throws ValidationError.
void validate_trajectory(const Trajectory& t);

/// Normalized stop features fed to the action modality.
struct DetailVec {
    double start_frac = 0.0;
    double end_frac = 0.0;
    double day_index = 0.0;
    double x = 0.0;
    double y = 0.0;

    std::array<double, kDetailDim> to_array() const { return {start_frac, end_frac, day_index, x, y}; }
    static DetailVec from_array(std::span<const double, kDetailDim> a) { return {a[0], a[1], a[2], a[3], a[4]}; }

    friend bool operator==(const DetailVec&, const DetailVec&) = default;
};

struct NormStats {
    double lat_min = 0.0;
    double lat_max = 0.0;
    double lon_min = 0.0;
    double lon_max = 0.0;
    std::int64_t day_span = 0;

    /// Throws InvalidConfig on a degenerate or non-finite box.
    void validate() const;

    nlohmann::json to_json() const;
    static NormStats from_json(const nlohmann::json& j);

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Bounding box and day span over every stop. Extents narrower than
/// `min_extent_deg` are widened symmetrically so single-point datasets stay valid.
NormStats compute_norm_stats(std::span<const Trajectory> trajectories, double min_extent_deg = 1e-3);

/// Day number of a timestamp (floor division, so negative times work).
std::int64_t day_of(std::int64_t t);

DetailVec normalize_stop(const StopPoint& s, const NormStats& stats);

struct StopFields {
    std::int64_t start_time = 0;
    std::int64_t end_time = 0;
    double lat = 0.0;
    double lon = 0.0;
};

/// Inverse of normalize_stop. Components are clamped into range first; a stop
/// whose end time-of-day precedes its start is taken to end on the next day.
StopFields denormalize_detail(const DetailVec& d, const NormStats& stats);

}  // namespace gpsmtm
