#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gpsmtm/rng.hpp"

namespace gpsmtm {

enum class TaskKind { Random, ForwardDynamics, InverseDynamics, Goal, PretrainRandom };

/// CLI names: random, fd, id, goal (pretrain is internal).
std::string_view task_name(TaskKind kind);
TaskKind parse_task(std::string_view name);  // throws InvalidConfig listing valid names

/// Evaluation tasks in report column order.
inline constexpr TaskKind kEvalTasks[] = {TaskKind::InverseDynamics, TaskKind::ForwardDynamics, TaskKind::Random, TaskKind::Goal};

/// Per-position masks over one padded sequence. Only the first valid_len
/// positions may be set.
struct MaskPlan {
    std::size_t valid_len = 0;
    std::vector<std::uint8_t> state_mask;
    std::vector<std::uint8_t> action_mask;

    std::size_t total_len() const noexcept { return state_mask.size(); }
    std::size_t masked_state_cells() const;
    std::size_t masked_action_cells() const;
    std::size_t masked_cells() const { return masked_state_cells() + masked_action_cells(); }

    friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

struct MaskParams {
    double pretrain_min_ratio = 0.15;
    double pretrain_max_ratio = 0.5;
    double random_ratio = 0.3;
};

MaskPlan make_plan(TaskKind kind, std::size_t valid_len, std::size_t total_len, const MaskParams& params, Rng& rng);

/// Cell-wise negation over the valid positions.
MaskPlan observed_complement(const MaskPlan& plan);

}  // namespace gpsmtm
