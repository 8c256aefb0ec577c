#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsmtm/core_types.hpp"
#include "gpsmtm/masking.hpp"
#include "gpsmtm/rng.hpp"
#include "gpsmtm/tensor.hpp"

namespace gpsmtm {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 256;
    std::size_t n_heads = 4;
    double dropout_p = 0.1;
    std::size_t d_detail = kDetailDim;
    std::size_t vocab_size = 0;  ///< including PAD and MASK
    std::size_t max_len = 64;

    std::size_t d_ff() const noexcept { return 4 * d_model; }
    std::size_t n_classes() const noexcept { return vocab_size - 2; }
    std::size_t head_dim() const noexcept { return d_model / n_heads; }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-12;

/// Tensor indices of one encoder block inside a ParamSet.
struct LayerSlots {
    std::size_t ln1_scale, ln1_offset;
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_scale, ln2_offset;
    std::size_t w1, b1, w2, b2;
};

/// Tensor indices of every model parameter. Linear weights are stored
/// (in_features x out_features) so activations multiply on the left.
struct ParamSlots {
    std::size_t category_embedding, detail_weight, detail_bias;
    std::size_t modality_state, modality_action, position;
    std::size_t mask_state, mask_action;
    std::vector<LayerSlots> layers;
    std::size_t final_scale, final_offset;
    std::size_t cls_weight, cls_bias, reg_weight, reg_bias;
};

/// Builds the zero-initialized parameter set for `cfg` and reports where
/// each tensor lives. The naming and ordering are stable across versions.
template <typename T>
ParamSet<T> make_param_set(const ModelConfig& cfg, ParamSlots* slots = nullptr);

ParamSlots param_slots(const ModelConfig& cfg);

/// Expected name -> shape manifest for `cfg`, in storage order.
std::vector<std::pair<std::string, Shape>> param_manifest(const ModelConfig& cfg);

/// Embedding tables and normalization tensors; AdamW skips decay on these.
bool is_decay_exempt(const std::string& tensor_name);

/// N(0, 0.02) for embeddings and linear weights, zero biases, unit norm scales.
ParamSet<float> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Padded, masked two-modality batch. Inputs carry MASK/zeros at masked
/// cells; targets keep the ground truth for every valid cell.
struct TrajectoryBatch {
    std::size_t batch_size = 0;
    std::size_t max_len = 0;
    std::vector<int> category_ids;         ///< B*L
    std::vector<double> detail_vecs;       ///< B*L*d_detail
    std::vector<std::uint8_t> valid_mask;  ///< B*L
    std::vector<MaskPlan> plans;           ///< B
    std::vector<int> target_category;      ///< B*L
    std::vector<double> target_detail;     ///< B*L*d_detail

    std::size_t cell(std::size_t b, std::size_t i) const noexcept { return b * max_len + i; }
    std::size_t valid_len(std::size_t b) const;
};

/// Windows must be at most `max_len` long and plans must match them.
TrajectoryBatch make_batch(std::span<const Trajectory> windows, std::span<const MaskPlan> plans, const PoiVocab& vocab,
                           const NormStats& stats, std::size_t max_len);

template <typename T>
struct ForwardOutput {
    std::size_t batch_size = 0;
    std::size_t max_len = 0;
    std::size_t n_classes = 0;
    std::size_t d_detail = 0;
    std::vector<T> logits;        ///< B*L*n_classes; zero at PAD positions
    std::vector<T> detail_preds;  ///< B*L*d_detail; zero at PAD positions
};

/// Loss gradients with respect to the forward outputs, same layout.
template <typename T>
struct OutputGrads {
    std::vector<T> logits;
    std::vector<T> detail_preds;
};

enum class Mode { Train, Eval };

template <typename T>
struct BlockCache;

/// Activations recorded by forward() for backward(). Also exposes the
/// attention probabilities and normalized activations for inspection.
template <typename T>
class ForwardCache {
public:
    ForwardCache();
    ~ForwardCache();
    ForwardCache(ForwardCache&&) noexcept;
    ForwardCache& operator=(ForwardCache&&) noexcept;

    bool empty() const noexcept { return blocks.empty(); }
    void clear() {
        blocks.clear();
        batch_size = 0;
    }

    /// Attention probabilities of one head: (2n x 2n) row-major over the
    /// sample's valid tokens, n = valid length.
    std::vector<T> attention(std::size_t sample, std::size_t layer, std::size_t head) const;
    /// Pre-scale LayerNorm output (2n x d_model) of the first norm in `layer`;
    /// layer == n_layers selects the final norm.
    std::vector<T> normalized(std::size_t sample, std::size_t layer) const;

    std::vector<std::unique_ptr<BlockCache<T>>> blocks;
    std::size_t batch_size = 0;

private:
    std::pair<const BlockCache<T>*, std::size_t> locate(std::size_t sample) const;
};

/// Embedding layer only: (B x 2L x d_model), tokens interleaved
/// state_0, action_0, state_1, ... PAD tokens are zero rows.
template <typename T>
std::vector<T> embed(const TrajectoryBatch& batch, const ParamSet<T>& params, const ModelConfig& cfg);

/// Bidirectional pre-norm encoder. Attention is restricted to the valid
/// tokens of each sample, which is exactly additive -inf masking of the PAD
/// columns; PAD rows of the outputs are left at zero. Samples are processed in
/// a fixed number of contiguous blocks and dropout draws come from per-sample
/// streams seeded by one draw from `rng`, so the result does not depend on
/// `workers`. Passing `cache` records activations for backward().
template <typename T>
ForwardOutput<T> forward(const TrajectoryBatch& batch, const ParamSet<T>& params, const ModelConfig& cfg, Mode mode, Rng& rng,
                         ForwardCache<T>* cache = nullptr, std::size_t workers = 1);

/// Reverse-mode gradients of a scalar loss given its gradients with respect to
/// the forward outputs. Samples are reduced in the forward blocks and the blocks summed
/// in order, so the result is independent of `workers`.
template <typename T>
ParamSet<T> backward(const TrajectoryBatch& batch, const ParamSet<T>& params, const ModelConfig& cfg, const ForwardCache<T>& cache,
                     const OutputGrads<T>& grads, std::size_t workers = 1);

}  // namespace gpsmtm
