#include "gpsmtm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gpsmtm/error.hpp"

namespace gpsmtm {

void LossConfig::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidConfig("alpha must be in (0, 1]");
    if (!(gamma >= 0.0)) throw InvalidConfig("gamma must be non-negative");
    if (!(lambda >= 0.0)) throw InvalidConfig("lambda must be non-negative");
}

double focal_loss(std::span<const double> true_class_probs, const LossConfig& cfg) {
    if (true_class_probs.empty()) throw NoMaskedCells("focal loss over an empty cell list");
    double sum = 0.0;
    for (double p : true_class_probs) {
        const double floored = std::max(p, kProbFloor);
        sum += -cfg.alpha * std::pow(1.0 - p, cfg.gamma) * std::log(floored);
    }
    return sum;
}

double mse_loss(std::span<const double> pred, std::span<const double> truth, std::size_t dim) {
    if (pred.size() != truth.size() || dim == 0 || pred.size() % dim != 0)
        throw InvalidConfig("mse inputs must be congruent (cells x dim)");
    if (pred.empty()) throw NoMaskedCells("squared error over an empty cell list");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = truth[i] - pred[i];
        sum += e * e;
    }
    return sum;
}

double composite_loss(double cls, double reg, const LossConfig& cfg) { return cls + cfg.lambda * reg; }

template <typename T>
LossValue masked_loss(const ForwardOutput<T>& out, const TrajectoryBatch& batch, const LossConfig& cfg, OutputGrads<T>* grads,
                      LossPart part) {
    cfg.validate();
    const std::size_t nc = out.n_classes;
    const std::size_t dd = out.d_detail;
    if (grads) {
        grads->logits.assign(out.logits.size(), T{0});
        grads->detail_preds.assign(out.detail_preds.size(), T{0});
    }
    const double cls_weight = part == LossPart::Regression ? 0.0 : 1.0;
    const double reg_weight = part == LossPart::Classification ? 0.0 : cfg.lambda;
    const double log_floor = std::log(kProbFloor);

    LossValue v;
    std::vector<double> probs(nc);
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        const MaskPlan& plan = batch.plans[b];
        for (std::size_t i = 0; i < batch.max_len; ++i) {
            const std::size_t cell = batch.cell(b, i);
            if (!batch.valid_mask[cell]) continue;
            if (plan.state_mask[i]) {
                const int y = batch.target_category[cell];
                if (y < 0 || static_cast<std::size_t>(y) >= nc)
                    throw VocabError("masked cell target " + std::to_string(y) + " is not a predictable category");
                const T* z = out.logits.data() + cell * nc;
                double zmax = static_cast<double>(z[0]);
                for (std::size_t j = 1; j < nc; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
                double denom = 0.0;
                for (std::size_t j = 0; j < nc; ++j) {
                    probs[j] = std::exp(static_cast<double>(z[j]) - zmax);
                    denom += probs[j];
                }
                for (auto& p : probs) p /= denom;
                const double logp_raw = static_cast<double>(z[y]) - zmax - std::log(denom);
                const bool floored = logp_raw < log_floor;
                const double logp = floored ? log_floor : logp_raw;
                const double p = std::exp(logp);
                const double one_minus_p = -std::expm1(logp);
                const double focal = std::pow(one_minus_p, cfg.gamma);
                v.cls += -cfg.alpha * focal * logp;
                ++v.masked_state_cells;
                if (grads && !floored && cls_weight != 0.0) {
                    // d/dz_j = -alpha [(1-p)^g - g (1-p)^(g-1) p log p] (delta_jy - s_j)
                    const double pull = (cfg.gamma == 0.0 || one_minus_p == 0.0)
                                            ? 0.0
                                            : cfg.gamma * std::pow(one_minus_p, cfg.gamma - 1.0) * p * logp;
                    const double coeff = -cfg.alpha * (focal - pull) * cls_weight;
                    T* gz = grads->logits.data() + cell * nc;
                    for (std::size_t j = 0; j < nc; ++j)
                        gz[j] = static_cast<T>(coeff * ((static_cast<int>(j) == y ? 1.0 : 0.0) - probs[j]));
                }
            }
            if (plan.action_mask[i]) {
                for (std::size_t k = 0; k < dd; ++k) {
                    const double e = static_cast<double>(out.detail_preds[cell * dd + k]) - batch.target_detail[cell * dd + k];
                    v.reg += e * e;
                    if (grads) grads->detail_preds[cell * dd + k] = static_cast<T>(2.0 * reg_weight * e);
                }
                ++v.masked_action_cells;
            }
        }
    }
    if (v.masked_state_cells + v.masked_action_cells == 0) throw NoMaskedCells("batch has no masked cells");
    v.total = composite_loss(v.cls, v.reg, cfg);
    return v;
}

template LossValue masked_loss<float>(const ForwardOutput<float>&, const TrajectoryBatch&, const LossConfig&, OutputGrads<float>*, LossPart);
template LossValue masked_loss<double>(const ForwardOutput<double>&, const TrajectoryBatch&, const LossConfig&, OutputGrads<double>*,
                                       LossPart);
template LossValue masked_loss<long double>(const ForwardOutput<long double>&, const TrajectoryBatch&, const LossConfig&,
                                            OutputGrads<long double>*, LossPart);

}  // namespace gpsmtm
