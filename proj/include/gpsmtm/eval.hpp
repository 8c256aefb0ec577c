#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsmtm/checkpoint.hpp"
#include "gpsmtm/masking.hpp"

namespace gpsmtm {

/// Fraction of positions where prediction equals label. Throws NoSamples on empty input.
double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Recall per class over classes with at least one label; (class, recall) ascending by class.
std::vector<std::pair<int, double>> per_class_recall(std::span<const int> preds, std::span<const int> labels);

/// max minus min of per_class_recall.
double recall_range(std::span<const int> preds, std::span<const int> labels);

/// Most frequent label, lowest index on ties.
int majority_class(std::span<const int> labels);

/// P(pred == majority) / P(label == majority).
double bias_ratio(std::span<const int> preds, std::span<const int> labels);

struct TaskReport {
    TaskKind task = TaskKind::Random;
    double accuracy = 0.0;
    double recall_range = 0.0;
    double bias_ratio = 0.0;
    std::vector<std::pair<std::string, double>> per_class_recall;
    std::size_t n_masked_state = 0;
    std::size_t n_masked_action = 0;
    double mse = 0.0;  ///< mean squared detail error per masked action cell

    nlohmann::ordered_json to_json() const;
};

struct EvalOptions {
    std::uint64_t seed = 0;
    std::size_t batch_size = 32;
    std::size_t workers = 1;
    MaskParams masking;
};

/// Runs one downstream task over every max_len window of `trajectories`.
/// `data_vocab` must equal the checkpoint vocabulary (VocabError otherwise).
TaskReport run_task(const Checkpoint& ckpt, std::span<const Trajectory> trajectories, const PoiVocab& data_vocab, TaskKind kind,
                    const EvalOptions& options = {});

/// Fixed-width table, tasks in column order ID, FD, Random, Goal, values to
/// two decimals. Throws InvalidConfig for an empty row list.
std::string render_report(std::span<const TaskReport> rows, const std::string& dataset = "dataset");

/// One JSON object per task at full precision, in the same order as the table.
std::string report_jsonl(std::span<const TaskReport> rows);

}  // namespace gpsmtm
