#include "gpsmtm/train.hpp"

#include <fstream>
#include <ostream>

#include "gpsmtm/error.hpp"

namespace gpsmtm {

void TrainConfig::validate() const {
    if (batch_size == 0) throw InvalidConfig("batch size must be positive");
    optimizer.validate();
}

nlohmann::ordered_json TraceRow::to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss_cls"] = loss.cls;
    j["loss_reg"] = loss.reg;
    j["loss_total"] = loss.total;
    j["masked_state_cells"] = loss.masked_state_cells;
    j["masked_action_cells"] = loss.masked_action_cells;
    j["loss_cls_per_cell"] = loss.masked_state_cells ? loss.cls / static_cast<double>(loss.masked_state_cells) : 0.0;
    j["loss_reg_per_cell"] = loss.masked_action_cells ? loss.reg / static_cast<double>(loss.masked_action_cells) : 0.0;
    return j;
}

std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& final_path, std::size_t step) {
    auto p = final_path;
    p += ".step" + std::to_string(step);
    return p;
}

namespace {

// Independent streams derived from the run seed.
enum Stream : std::uint64_t { kInit = 1, kSampling = 2, kMasking = 3, kDropout = 4 };

}  // namespace

PretrainResult pretrain(std::span<const Trajectory> trajectories, const PoiVocab& vocab, const NormStats& stats, ModelConfig model,
                        const LossConfig& loss, const TrainConfig& train, const MaskParams& masking, const PretrainOutputs& outputs) {
    train.validate();
    loss.validate();
    model.vocab_size = vocab.size();
    model.validate();
    const std::vector<Trajectory> windows = segment_windows(trajectories, model.max_len);
    if (windows.empty()) throw EmptyDataset("dataset yields no training windows of at least 2 stops");

    PretrainResult result;
    result.checkpoint = Checkpoint{model, vocab, stats, init_params(model, derive_seed(train.seed, kInit))};
    ParamSet<float>& params = result.checkpoint.params;
    auto opt = OptimizerState<float>::zeros_like(params);

    Rng sampler(derive_seed(train.seed, kSampling));
    Rng mask_rng(derive_seed(train.seed, kMasking));
    Rng dropout_rng(derive_seed(train.seed, kDropout));

    std::ofstream trace_out;
    if (!outputs.trace.empty()) {
        trace_out.open(outputs.trace, std::ios::binary | std::ios::trunc);
        if (!trace_out) throw IoError("cannot write '" + outputs.trace.string() + "'");
    }

    auto draw_batch = [&] {
        std::vector<Trajectory> picked;
        std::vector<MaskPlan> plans;
        for (std::size_t k = 0; k < train.batch_size; ++k) {
            picked.push_back(windows[sampler.below(windows.size())]);
            plans.push_back(make_plan(TaskKind::PretrainRandom, picked.back().stops.size(), model.max_len, masking, mask_rng));
        }
        return make_batch(picked, plans, vocab, stats, model.max_len);
    };

    TrajectoryBatch& fixed = result.fixed_batch;
    if (train.fixed_batch) fixed = draw_batch();

    ForwardCache<float> cache;
    OutputGrads<float> out_grads;
    for (std::size_t step = 1; step <= train.steps; ++step) {
        TrajectoryBatch fresh;
        if (!train.fixed_batch) fresh = draw_batch();
        const TrajectoryBatch& batch = train.fixed_batch ? fixed : fresh;

        const auto out = forward(batch, params, model, Mode::Train, dropout_rng, &cache, train.workers);
        const LossValue value = masked_loss(out, batch, loss, &out_grads);
        const auto grads = backward(batch, params, model, cache, out_grads, train.workers);
        adamw_step(params, grads, opt, train.optimizer);

        TraceRow row{step, value};
        if (trace_out) trace_out << row.to_json().dump() << '\n';
        if (outputs.log && (step == 1 || step % outputs.log_every == 0 || step == train.steps))
            *outputs.log << "step " << step << " loss " << value.total << " (cls " << value.cls << ", reg " << value.reg << ")\n";
        result.trace.push_back(row);

        if (train.checkpoint_every && step % train.checkpoint_every == 0 && step != train.steps && !outputs.checkpoint.empty())
            save_checkpoint(periodic_checkpoint_path(outputs.checkpoint, step), result.checkpoint);
    }
    if (trace_out) {
        trace_out.flush();
        if (!trace_out) throw IoError("write failed for '" + outputs.trace.string() + "'");
    }
    if (!outputs.checkpoint.empty()) save_checkpoint(outputs.checkpoint, result.checkpoint);
    return result;
}

}  // namespace gpsmtm
