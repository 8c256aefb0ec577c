#include "gpsmtm/optimizer.hpp"

#include <cmath>

#include "gpsmtm/error.hpp"
#include "gpsmtm/model.hpp"

namespace gpsmtm {

void AdamWConfig::validate() const {
    if (!(learning_rate > 0.0)) throw InvalidConfig("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw InvalidConfig("weight decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidConfig("betas must be in [0, 1)");
    if (!(eps > 0.0)) throw InvalidConfig("eps must be positive");
}

template <typename T>
void adamw_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state, const AdamWConfig& cfg) {
    cfg.validate();
    if (grads.size() != params.size() || state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
        throw StateError("optimizer inputs are not congruent with the parameters");
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (grads[t].shape != params[t].shape) throw StateError("gradient shape mismatch for '" + params[t].name + "'");
        for (T g : grads[t].data)
            if (!std::isfinite(static_cast<double>(g))) throw NumericalError(-1, "non-finite gradient for '" + params[t].name + "'");
    }

    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& theta = params[t].data;
        const auto& g = grads[t].data;
        auto& m = state.first_moment[t].data;
        auto& v = state.second_moment[t].data;
        const double decay = is_decay_exempt(params[t].name) ? 0.0 : cfg.learning_rate * cfg.weight_decay;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            double th = static_cast<double>(theta[i]);
            th -= decay * th;
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            th -= cfg.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            theta[i] = static_cast<T>(th);
        }
    }
}

template void adamw_step<float>(ParamSet<float>&, const ParamSet<float>&, OptimizerState<float>&, const AdamWConfig&);
template void adamw_step<double>(ParamSet<double>&, const ParamSet<double>&, OptimizerState<double>&, const AdamWConfig&);

}  // namespace gpsmtm
