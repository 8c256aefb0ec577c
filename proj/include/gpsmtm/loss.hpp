#pragma once

#include <cstddef>
#include <span>

#include "gpsmtm/model.hpp"

namespace gpsmtm {

struct LossConfig {
    double alpha = 0.5;
    double gamma = 2.0;
    double lambda = 0.5;

    void validate() const;
};

/// Probabilities are floored here before the log.
inline constexpr double kProbFloor = 1e-12;

/// Sum over cells of -alpha * (1 - p)^gamma * log(p), p = probability of the true class.
double focal_loss(std::span<const double> true_class_probs, const LossConfig& cfg);

/// Sum over cells of the squared Euclidean error; inputs are flattened
/// (cells x dim) and must have equal length.
double mse_loss(std::span<const double> pred, std::span<const double> truth, std::size_t dim = kDetailDim);

double composite_loss(double cls, double reg, const LossConfig& cfg);

enum class LossPart { Total, Classification, Regression };

struct LossValue {
    double cls = 0.0;
    double reg = 0.0;
    double total = 0.0;
    std::size_t masked_state_cells = 0;
    std::size_t masked_action_cells = 0;
};

/// Composite loss of a forward pass, read only at masked cells. When `grads`
/// is given it receives d(part)/d(outputs) in the ForwardOutput layout.
/// Throws NoMaskedCells if the batch masks nothing.
template <typename T>
LossValue masked_loss(const ForwardOutput<T>& out, const TrajectoryBatch& batch, const LossConfig& cfg,
                      OutputGrads<T>* grads = nullptr, LossPart part = LossPart::Total);

}  // namespace gpsmtm
