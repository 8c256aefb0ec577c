#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsmtm/checkpoint.hpp"
#include "gpsmtm/ingest.hpp"
#include "gpsmtm/loss.hpp"
#include "gpsmtm/masking.hpp"
#include "gpsmtm/model.hpp"
#include "gpsmtm/optimizer.hpp"

namespace gpsmtm {

struct TrainConfig {
    std::size_t batch_size = 32;
    AdamWConfig optimizer;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  ///< 0 disables periodic checkpoints
    /// Draw one batch (windows and mask plans) up front and train on it every step.
    bool fixed_batch = false;
    std::size_t workers = 1;

    void validate() const;
};

struct TraceRow {
    std::size_t step = 0;
    LossValue loss;

    nlohmann::ordered_json to_json() const;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<TraceRow> trace;
    TrajectoryBatch fixed_batch;  ///< the repeated batch when TrainConfig::fixed_batch is set
};

struct PretrainOutputs {
    std::filesystem::path checkpoint;  ///< final checkpoint; empty to skip writing
    std::filesystem::path trace;       ///< loss trace JSON-lines; empty to skip
    std::ostream* log = nullptr;       ///< plain-text progress lines
    std::size_t log_every = 100;
};

/// Path of the periodic checkpoint written after `step`.
std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& final_path, std::size_t step);

/// Masked-trajectory pretraining on `trajectories` (split into max_len
/// windows). model.vocab_size is taken from `vocab`. The whole run is a pure
/// function of (seed, configs, data); worker count does not change results.
PretrainResult pretrain(std::span<const Trajectory> trajectories, const PoiVocab& vocab, const NormStats& stats, ModelConfig model,
                        const LossConfig& loss, const TrainConfig& train, const MaskParams& masking = {},
                        const PretrainOutputs& outputs = {});

}  // namespace gpsmtm
