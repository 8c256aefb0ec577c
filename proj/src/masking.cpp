#include "gpsmtm/masking.hpp"

#include <algorithm>
#include <numeric>

#include "gpsmtm/error.hpp"

namespace gpsmtm {

std::string_view task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::Random: return "random";
        case TaskKind::ForwardDynamics: return "fd";
        case TaskKind::InverseDynamics: return "id";
        case TaskKind::Goal: return "goal";
        case TaskKind::PretrainRandom: return "pretrain";
    }
    return "?";
}

TaskKind parse_task(std::string_view name) {
    for (TaskKind k : kEvalTasks)
        if (task_name(k) == name) return k;
    throw InvalidConfig("unknown task '" + std::string(name) + "' (valid: random, fd, id, goal)");
}

std::size_t MaskPlan::masked_state_cells() const {
    return static_cast<std::size_t>(std::count(state_mask.begin(), state_mask.end(), std::uint8_t{1}));
}

std::size_t MaskPlan::masked_action_cells() const {
    return static_cast<std::size_t>(std::count(action_mask.begin(), action_mask.end(), std::uint8_t{1}));
}

namespace {

void mask_independently(MaskPlan& plan, double ratio, Rng& rng) {
    const std::size_t n = plan.valid_len;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        plan.state_mask[i] = rng.uniform() < ratio;
        plan.action_mask[i] = rng.uniform() < ratio;
        any = any || plan.state_mask[i] || plan.action_mask[i];
    }
    if (!any) {
        const std::size_t cell = rng.below(2 * n);
        (cell % 2 == 0 ? plan.state_mask : plan.action_mask)[cell / 2] = 1;
    }
}

void mask_range(MaskPlan& plan, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) plan.state_mask[i] = plan.action_mask[i] = 1;
}

}  // namespace

MaskPlan make_plan(TaskKind kind, std::size_t valid_len, std::size_t total_len, const MaskParams& params, Rng& rng) {
    if (valid_len < 2) throw TooShort("mask plans need at least 2 valid positions, got " + std::to_string(valid_len));
    if (valid_len > total_len) throw InvalidConfig("valid length exceeds sequence length");

    MaskPlan plan{valid_len, std::vector<std::uint8_t>(total_len, 0), std::vector<std::uint8_t>(total_len, 0)};
    const std::size_t half = (valid_len + 1) / 2;
    switch (kind) {
        case TaskKind::PretrainRandom: {
            if (!(params.pretrain_min_ratio >= 0.0 && params.pretrain_min_ratio <= params.pretrain_max_ratio &&
                  params.pretrain_max_ratio <= 1.0))
                throw InvalidConfig("pretraining mask ratio bounds must satisfy 0 <= min <= max <= 1");
            mask_independently(plan, rng.uniform(params.pretrain_min_ratio, params.pretrain_max_ratio), rng);
            break;
        }
        case TaskKind::Random: mask_independently(plan, params.random_ratio, rng); break;
        case TaskKind::ForwardDynamics: mask_range(plan, valid_len - half, valid_len); break;
        case TaskKind::InverseDynamics: mask_range(plan, 0, half); break;
        case TaskKind::Goal: mask_range(plan, valid_len - 1, valid_len); break;
    }
    return plan;
}

MaskPlan observed_complement(const MaskPlan& plan) {
    MaskPlan out = plan;
    for (std::size_t i = 0; i < plan.valid_len; ++i) {
        out.state_mask[i] = !plan.state_mask[i];
        out.action_mask[i] = !plan.action_mask[i];
    }
    return out;
}

}  // namespace gpsmtm
