#pragma once

// Reference implementations used to check the library. They follow the
// textbook definitions directly and share no code with src/.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "gpsmtm/loss.hpp"
#include "gpsmtm/model.hpp"

namespace oracle {

struct Metrics {
    double accuracy = 0.0;
    double recall_range = 0.0;
    double bias_ratio = 0.0;
};

/// Accuracy, recall range and bias ratio read off a full confusion matrix.
inline Metrics confusion_metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
    int k = 0;
    for (int v : preds) k = std::max(k, v + 1);
    for (int v : labels) k = std::max(k, v + 1);
    std::vector<std::vector<long>> confusion(static_cast<std::size_t>(k), std::vector<long>(static_cast<std::size_t>(k), 0));
    for (std::size_t i = 0; i < labels.size(); ++i) ++confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];

    long diagonal = 0;
    std::vector<long> row_sum(static_cast<std::size_t>(k), 0);
    std::vector<long> col_sum(static_cast<std::size_t>(k), 0);
    for (std::size_t r = 0; r < confusion.size(); ++r) {
        diagonal += confusion[r][r];
        for (std::size_t c = 0; c < confusion.size(); ++c) {
            row_sum[r] += confusion[r][c];
            col_sum[c] += confusion[r][c];
        }
    }
    Metrics m;
    m.accuracy = static_cast<double>(diagonal) / static_cast<double>(labels.size());
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    std::size_t majority = 0;
    for (std::size_t r = 0; r < confusion.size(); ++r) {
        if (row_sum[r] == 0) continue;
        const double recall = static_cast<double>(confusion[r][r]) / static_cast<double>(row_sum[r]);
        lo = std::min(lo, recall);
        hi = std::max(hi, recall);
        if (row_sum[r] > row_sum[majority]) majority = r;
    }
    m.recall_range = hi - lo;
    m.bias_ratio = static_cast<double>(col_sum[majority]) / static_cast<double>(row_sum[majority]);
    return m;
}

/// -alpha * (1 - p)^gamma * ln(p) summed, evaluated in long double.
inline double focal(const std::vector<double>& probs, double alpha, double gamma) {
    long double sum = 0.0L;
    for (double p : probs) {
        const long double q = std::max<long double>(p, 1e-12L);
        sum += -static_cast<long double>(alpha) * std::pow(1.0L - q, static_cast<long double>(gamma)) * std::log(q);
    }
    return static_cast<double>(sum);
}

inline double cross_entropy(const std::vector<double>& probs) {
    long double sum = 0.0L;
    for (double p : probs) sum -= std::log(std::max<long double>(p, 1e-12L));
    return static_cast<double>(sum);
}

inline double squared_error(const std::vector<double>& pred, const std::vector<double>& truth) {
    long double sum = 0.0L;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const long double e = static_cast<long double>(pred[i]) - truth[i];
        sum += e * e;
    }
    return static_cast<double>(sum);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Composite masked loss of a forward pass, recomputed from the outputs with
/// a long double log-softmax.
template <typename T>
long double composite_loss(const gpsmtm::ForwardOutput<T>& out, const gpsmtm::TrajectoryBatch& batch, const gpsmtm::LossConfig& cfg) {
    const std::size_t nc = out.n_classes;
    const std::size_t dd = out.d_detail;
    long double cls = 0.0L;
    long double reg = 0.0L;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        for (std::size_t i = 0; i < batch.plans[b].valid_len; ++i) {
            const std::size_t cell = batch.cell(b, i);
            if (batch.plans[b].state_mask[i]) {
                const std::size_t y = static_cast<std::size_t>(batch.target_category[cell]);
                long double zmax = out.logits[cell * nc];
                for (std::size_t j = 0; j < nc; ++j) zmax = std::max<long double>(zmax, out.logits[cell * nc + j]);
                long double denom = 0.0L;
                for (std::size_t j = 0; j < nc; ++j) denom += std::exp(static_cast<long double>(out.logits[cell * nc + j]) - zmax);
                const long double p = std::max(std::exp(static_cast<long double>(out.logits[cell * nc + y]) - zmax) / denom, 1e-12L);
                cls += -static_cast<long double>(cfg.alpha) * std::pow(1.0L - p, static_cast<long double>(cfg.gamma)) * std::log(p);
            }
            if (batch.plans[b].action_mask[i]) {
                for (std::size_t k = 0; k < dd; ++k) {
                    const long double e = static_cast<long double>(out.detail_preds[cell * dd + k]) - batch.target_detail[cell * dd + k];
                    reg += e * e;
                }
            }
        }
    }
    return cls + static_cast<long double>(cfg.lambda) * reg;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

/// Compares backward() against central differences of the composite masked
/// loss for every scalar parameter, all in extended precision.
inline GradCheck gradient_check(const gpsmtm::ModelConfig& cfg, const gpsmtm::ParamSet<long double>& params,
                                const gpsmtm::TrajectoryBatch& batch, const gpsmtm::LossConfig& loss, long double step = 1e-4L) {
    using namespace gpsmtm;
    using T = long double;
    Rng rng(0);
    ForwardCache<T> cache;
    const auto out = forward(batch, params, cfg, Mode::Train, rng, &cache);
    OutputGrads<T> og;
    masked_loss(out, batch, loss, &og);
    const ParamSet<T> analytic = backward(batch, params, cfg, cache, og);

    auto loss_at = [&](const ParamSet<T>& p) {
        Rng r(0);
        return composite_loss(forward(batch, p, cfg, Mode::Eval, r), batch, loss);
    };
    GradCheck result;
    ParamSet<T> work = params;
    for (std::size_t t = 0; t < work.size(); ++t) {
        for (std::size_t i = 0; i < work[t].data.size(); ++i) {
            const T saved = work[t].data[i];
            work[t].data[i] = saved + step;
            const T plus = loss_at(work);
            work[t].data[i] = saved - step;
            const T minus = loss_at(work);
            work[t].data[i] = saved;
            const double numeric = static_cast<double>((plus - minus) / (2.0L * step));
            const double a = static_cast<double>(analytic[t].data[i]);
            const double rel = relative_error(a, numeric);
            ++result.checked;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_tensor = work[t].name;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace oracle
