#pragma once

#include <cstdint>

#include "gpsmtm/tensor.hpp"

namespace gpsmtm {

struct AdamWConfig {
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

template <typename T>
struct OptimizerState {
    ParamSet<T> first_moment;
    ParamSet<T> second_moment;
    std::int64_t step = 0;

    static OptimizerState zeros_like(const ParamSet<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

/// One decoupled-weight-decay Adam update. Decay (theta -= lr * wd * theta)
/// is applied before the moment step and skipped for embeddings and norm
/// tensors. Throws NumericalError, leaving everything untouched, if any
/// gradient is non-finite.
template <typename T>
void adamw_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state, const AdamWConfig& cfg);

}  // namespace gpsmtm
