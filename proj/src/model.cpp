#include "gpsmtm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "gpsmtm/error.hpp"
#include "gpsmtm/parallel.hpp"

namespace gpsmtm {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowVec<T>>;
template <typename T>
using RowMap = Eigen::Map<RowVec<T>>;
// Every other row of a row-major (2n x d) token matrix.
template <typename T>
using ConstStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
ConstMatMap<T> as_mat(const NamedTensor<T>& t) {
    return ConstMatMap<T>(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
}
template <typename T>
MatMap<T> as_mat(NamedTensor<T>& t) {
    return MatMap<T>(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
}
template <typename T>
ConstRowMap<T> as_row(const NamedTensor<T>& t) {
    return ConstRowMap<T>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
}
template <typename T>
RowMap<T> as_row(NamedTensor<T>& t) {
    return RowMap<T>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
}
template <typename T>
ConstRowMap<T> table_row(const NamedTensor<T>& t, std::size_t r) {
    return ConstRowMap<T>(t.data.data() + r * t.shape[1], static_cast<Eigen::Index>(t.shape[1]));
}
template <typename T>
RowMap<T> table_row(NamedTensor<T>& t, std::size_t r) {
    return RowMap<T>(t.data.data() + r * t.shape[1], static_cast<Eigen::Index>(t.shape[1]));
}

template <typename T>
ConstStridedMap<T> token_rows(const Mat<T>& m, int parity) {
    return ConstStridedMap<T>(m.data() + parity * m.cols(), m.rows() / 2, m.cols(), Eigen::OuterStride<>(2 * m.cols()));
}
template <typename T>
StridedMap<T> token_rows(Mat<T>& m, int parity) {
    return StridedMap<T>(m.data() + parity * m.cols(), m.rows() / 2, m.cols(), Eigen::OuterStride<>(2 * m.cols()));
}

// Column sums accumulated row by row in order. Eigen's partial reductions
// may regroup the additions depending on buffer alignment, which would make
// gradients differ between otherwise identical runs.
template <typename T, typename Derived>
void add_column_sums(RowMap<T> dst, const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) dst += m.row(r);
}

template <typename T>
void layer_norm(const Mat<T>& x, Mat<T>& xhat, ColVec<T>& rstd) {
    xhat.resize(x.rows(), x.cols());
    rstd.resize(x.rows());
    const T eps = static_cast<T>(kLayerNormEps);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T mean = x.row(r).mean();
        xhat.row(r) = x.row(r).array() - mean;
        const T var = xhat.row(r).squaredNorm() / static_cast<T>(x.cols());
        const T rs = T{1} / std::sqrt(var + eps);
        xhat.row(r) *= rs;
        rstd(r) = rs;
    }
}

template <typename T>
Mat<T> affine(const Mat<T>& xhat, const NamedTensor<T>& scale, const NamedTensor<T>& offset) {
    Mat<T> out = xhat;
    out.array().rowwise() *= as_row(scale).array();
    out.rowwise() += as_row(offset);
    return out;
}

/// Backpropagates through xhat * scale + offset and the normalization itself.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dout, const Mat<T>& xhat, const ColVec<T>& rstd, const NamedTensor<T>& scale,
                           NamedTensor<T>& dscale, NamedTensor<T>& doffset) {
    add_column_sums<T>(as_row(dscale), (dout.array() * xhat.array()).matrix());
    add_column_sums<T>(as_row(doffset), dout);
    Mat<T> dxhat = dout;
    dxhat.array().rowwise() *= as_row(scale).array();
    const T inv_d = T{1} / static_cast<T>(xhat.cols());
    Mat<T> dx(dout.rows(), dout.cols());
    for (Eigen::Index r = 0; r < dout.rows(); ++r) {
        const T mean_g = dxhat.row(r).sum() * inv_d;
        const T mean_gx = dxhat.row(r).dot(xhat.row(r)) * inv_d;
        dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_g - xhat.row(r).array() * mean_gx).matrix();
    }
    return dx;
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

// tanh approximation of GELU.
template <typename T>
Mat<T> gelu(const Mat<T>& u) {
    const auto x = u.array();
    return (T{0.5} * x * (T{1} + (kGeluC<T> * (x + kGeluA<T> * x.cube())).tanh())).matrix();
}

template <typename T>
Mat<T> gelu_grad(const Mat<T>& u) {
    const auto x = u.array();
    const auto t = (kGeluC<T> * (x + kGeluA<T> * x.cube())).tanh().eval();
    return (T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t.square()) * kGeluC<T> * (T{1} + T{3} * kGeluA<T> * x.square()))
        .matrix();
}

template <typename T>
void softmax_rows(Mat<T>& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        s.row(r).array() -= s.row(r).maxCoeff();
        s.row(r) = s.row(r).array().exp().matrix();
        s.row(r) /= s.row(r).sum();
    }
}

template <typename T>
Mat<T> dropout_mask(Rng& rng, Eigen::Index rows, Eigen::Index cols, double p) {
    Mat<T> m(rows, cols);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? T{0} : keep_scale;
    return m;
}

}  // namespace

template <typename T>
struct LayerCache {
    Mat<T> xhat1;
    ColVec<T> rstd1;
    Mat<T> h1, q, k, v;
    std::vector<Mat<T>> probs;  ///< [sample_in_block * n_heads + head]
    Mat<T> attn;
    Mat<T> drop1;
    Mat<T> xhat2;
    ColVec<T> rstd2;
    Mat<T> h2, u, g;
    Mat<T> drop2;
};

/// Activations of a contiguous run of samples whose valid tokens are stacked
/// into one matrix; sample j owns rows [offsets[j], offsets[j+1]).
template <typename T>
struct BlockCache {
    std::size_t first_sample = 0;
    std::vector<std::vector<std::size_t>> positions;
    std::vector<Eigen::Index> offsets;
    std::vector<LayerCache<T>> layers;
    Mat<T> xhat_final;
    ColVec<T> rstd_final;
    Mat<T> z;

    std::size_t size() const noexcept { return positions.size(); }
    Eigen::Index rows_of(std::size_t j) const noexcept { return offsets[j + 1] - offsets[j]; }
};

template <typename T>
ForwardCache<T>::ForwardCache() = default;
template <typename T>
ForwardCache<T>::~ForwardCache() = default;
template <typename T>
ForwardCache<T>::ForwardCache(ForwardCache&&) noexcept = default;
template <typename T>
ForwardCache<T>& ForwardCache<T>::operator=(ForwardCache&&) noexcept = default;

template <typename T>
std::pair<const BlockCache<T>*, std::size_t> ForwardCache<T>::locate(std::size_t sample) const {
    for (const auto& blk : blocks)
        if (sample >= blk->first_sample && sample < blk->first_sample + blk->size()) return {blk.get(), sample - blk->first_sample};
    throw StateError("sample " + std::to_string(sample) + " is not in the forward cache");
}

template <typename T>
std::vector<T> ForwardCache<T>::attention(std::size_t sample, std::size_t layer, std::size_t head) const {
    const auto [blk, j] = locate(sample);
    const auto& lc = blk->layers.at(layer);
    const std::size_t heads = lc.probs.size() / blk->size();
    if (head >= heads) throw StateError("attention head out of range");
    const Mat<T>& p = lc.probs[j * heads + head];
    return {p.data(), p.data() + p.size()};
}

template <typename T>
std::vector<T> ForwardCache<T>::normalized(std::size_t sample, std::size_t layer) const {
    const auto [blk, j] = locate(sample);
    const Mat<T>& x = layer == blk->layers.size() ? blk->xhat_final : blk->layers.at(layer).xhat1;
    const auto rows = x.middleRows(blk->offsets[j], blk->rows_of(j));
    const Mat<T> copy = rows;
    return {copy.data(), copy.data() + copy.size()};
}

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0) throw InvalidConfig("model dimensions must be positive");
    if (d_model % n_heads != 0) throw InvalidConfig("d_model must be divisible by n_heads");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidConfig("dropout must be in [0, 1)");
    if (d_detail != kDetailDim) throw InvalidConfig("detail dimension is fixed at 5");
    if (vocab_size < 3) throw InvalidConfig("vocabulary needs at least one real category plus PAD and MASK");
    if (max_len < 2) throw InvalidConfig("max_len must be at least 2");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"n_layers", n_layers},     {"d_model", d_model},   {"n_heads", n_heads},
                          {"dropout_p", dropout_p},   {"d_detail", d_detail}, {"vocab_size", vocab_size},
                          {"max_len", max_len},       {"d_ff", d_ff()}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.dropout_p = j.at("dropout_p").get<double>();
        c.d_detail = j.at("d_detail").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_len = j.at("max_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<std::pair<std::string, Shape>> param_manifest(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    std::vector<std::pair<std::string, Shape>> m = {
        {"embed.category", {cfg.vocab_size, d}},
        {"embed.detail.weight", {cfg.d_detail, d}},
        {"embed.detail.bias", {d}},
        {"embed.modality.state", {d}},
        {"embed.modality.action", {d}},
        {"embed.position", {cfg.max_len, d}},
        {"embed.mask.state", {d}},
        {"embed.mask.action", {d}},
    };
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        m.insert(m.end(), {
                              {p + "norm1.scale", {d}},
                              {p + "norm1.offset", {d}},
                              {p + "attn.query.weight", {d, d}},
                              {p + "attn.query.bias", {d}},
                              {p + "attn.key.weight", {d, d}},
                              {p + "attn.key.bias", {d}},
                              {p + "attn.value.weight", {d, d}},
                              {p + "attn.value.bias", {d}},
                              {p + "attn.output.weight", {d, d}},
                              {p + "attn.output.bias", {d}},
                              {p + "norm2.scale", {d}},
                              {p + "norm2.offset", {d}},
                              {p + "ff.in.weight", {d, cfg.d_ff()}},
                              {p + "ff.in.bias", {cfg.d_ff()}},
                              {p + "ff.out.weight", {cfg.d_ff(), d}},
                              {p + "ff.out.bias", {d}},
                          });
    }
    m.insert(m.end(), {
                          {"final_norm.scale", {d}},
                          {"final_norm.offset", {d}},
                          {"head.cls.weight", {d, cfg.n_classes()}},
                          {"head.cls.bias", {cfg.n_classes()}},
                          {"head.reg.weight", {d, cfg.d_detail}},
                          {"head.reg.bias", {cfg.d_detail}},
                      });
    return m;
}

ParamSlots param_slots(const ModelConfig& cfg) {
    // Indices follow param_manifest order.
    ParamSlots s{};
    std::size_t i = 0;
    s.category_embedding = i++;
    s.detail_weight = i++;
    s.detail_bias = i++;
    s.modality_state = i++;
    s.modality_action = i++;
    s.position = i++;
    s.mask_state = i++;
    s.mask_action = i++;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerSlots ls{};
        ls.ln1_scale = i++;
        ls.ln1_offset = i++;
        ls.wq = i++;
        ls.bq = i++;
        ls.wk = i++;
        ls.bk = i++;
        ls.wv = i++;
        ls.bv = i++;
        ls.wo = i++;
        ls.bo = i++;
        ls.ln2_scale = i++;
        ls.ln2_offset = i++;
        ls.w1 = i++;
        ls.b1 = i++;
        ls.w2 = i++;
        ls.b2 = i++;
        s.layers.push_back(ls);
    }
    s.final_scale = i++;
    s.final_offset = i++;
    s.cls_weight = i++;
    s.cls_bias = i++;
    s.reg_weight = i++;
    s.reg_bias = i++;
    return s;
}

template <typename T>
ParamSet<T> make_param_set(const ModelConfig& cfg, ParamSlots* slots) {
    cfg.validate();
    ParamSet<T> p;
    for (auto& [name, shape] : param_manifest(cfg)) p.add(name, shape);
    if (slots) *slots = param_slots(cfg);
    return p;
}

bool is_decay_exempt(const std::string& name) {
    return name.starts_with("embed.") || name.find("norm") != std::string::npos;
}

ParamSet<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ParamSet<float> p = make_param_set<float>(cfg);
    Rng rng(seed);
    for (auto& t : p) {
        const bool is_scale = t.name.ends_with(".scale");
        const bool is_bias = t.name.ends_with(".bias") || t.name.ends_with(".offset");
        const bool is_embedding = t.name.starts_with("embed.") && t.name != "embed.detail.bias";
        if (is_scale) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else if (is_embedding || (!is_bias && t.shape.size() == 2)) {
            for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, 0.02));
        }
    }
    return p;
}

std::size_t TrajectoryBatch::valid_len(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < max_len; ++i) n += valid_mask[cell(b, i)];
    return n;
}

TrajectoryBatch make_batch(std::span<const Trajectory> windows, std::span<const MaskPlan> plans, const PoiVocab& vocab,
                           const NormStats& stats, std::size_t max_len) {
    if (windows.size() != plans.size()) throw InvalidConfig("one mask plan per window is required");
    TrajectoryBatch batch;
    batch.batch_size = windows.size();
    batch.max_len = max_len;
    const std::size_t cells = windows.size() * max_len;
    batch.category_ids.assign(cells, vocab.pad_index());
    batch.target_category.assign(cells, vocab.pad_index());
    batch.detail_vecs.assign(cells * kDetailDim, 0.0);
    batch.target_detail.assign(cells * kDetailDim, 0.0);
    batch.valid_mask.assign(cells, 0);
    batch.plans.assign(plans.begin(), plans.end());
    for (std::size_t b = 0; b < windows.size(); ++b) {
        const auto& stops = windows[b].stops;
        const auto& plan = plans[b];
        if (stops.size() > max_len) throw InvalidConfig("window longer than max_len");
        if (plan.total_len() != max_len || plan.valid_len != stops.size())
            throw InvalidConfig("mask plan does not match window " + std::to_string(b));
        for (std::size_t i = 0; i < stops.size(); ++i) {
            const std::size_t c = batch.cell(b, i);
            const int category = stops[i].category;
            if (category < 0 || category >= static_cast<int>(vocab.num_categories()))
                throw VocabError("stop category " + std::to_string(category) + " is not a real vocabulary entry");
            const auto detail = normalize_stop(stops[i], stats).to_array();
            batch.valid_mask[c] = 1;
            batch.target_category[c] = category;
            batch.category_ids[c] = plan.state_mask[i] ? vocab.mask_index() : category;
            for (std::size_t k = 0; k < kDetailDim; ++k) {
                batch.target_detail[c * kDetailDim + k] = detail[k];
                batch.detail_vecs[c * kDetailDim + k] = plan.action_mask[i] ? 0.0 : detail[k];
            }
        }
        for (std::size_t i = stops.size(); i < max_len; ++i)
            if (plan.state_mask[i] || plan.action_mask[i]) throw InvalidConfig("mask plan covers a PAD position");
    }
    return batch;
}

namespace {

template <typename T>
struct Context {
    const TrajectoryBatch& batch;
    const ParamSet<T>& p;
    const ParamSlots& s;
    const ModelConfig& cfg;
};

template <typename T>
std::vector<std::size_t> valid_positions(const TrajectoryBatch& batch, std::size_t b) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < batch.max_len; ++i)
        if (batch.valid_mask[batch.cell(b, i)]) pos.push_back(i);
    return pos;
}

template <typename T>
Mat<T> embed_sample(const Context<T>& c, std::size_t b, const std::vector<std::size_t>& pos) {
    const auto& p = c.p;
    const auto& s = c.s;
    const auto n = static_cast<Eigen::Index>(pos.size());
    const auto d = static_cast<Eigen::Index>(c.cfg.d_model);
    if (pos.size() > c.cfg.max_len || c.batch.max_len > c.cfg.max_len)
        throw InvalidConfig("batch sequence length exceeds the model's max_len");
    const MaskPlan& plan = c.batch.plans[b];
    Mat<T> x(2 * n, d);
    Mat<T> detail(1, static_cast<Eigen::Index>(c.cfg.d_detail));
    for (Eigen::Index k = 0; k < n; ++k) {
        const std::size_t i = pos[static_cast<std::size_t>(k)];
        const std::size_t cell = c.batch.cell(b, i);
        const auto position = table_row(p[s.position], i);
        if (plan.state_mask[i]) {
            x.row(2 * k) = as_row(p[s.mask_state]);
        } else {
            const int id = c.batch.category_ids[cell];
            if (id < 0 || id >= static_cast<int>(c.cfg.vocab_size))
                throw VocabError("category index " + std::to_string(id) + " out of range for vocabulary of " +
                                 std::to_string(c.cfg.vocab_size));
            x.row(2 * k) = table_row(p[s.category_embedding], static_cast<std::size_t>(id));
        }
        x.row(2 * k) += position + as_row(p[s.modality_state]);
        if (plan.action_mask[i]) {
            x.row(2 * k + 1) = as_row(p[s.mask_action]);
        } else {
            for (Eigen::Index j = 0; j < detail.cols(); ++j)
                detail(0, j) = static_cast<T>(c.batch.detail_vecs[cell * c.cfg.d_detail + static_cast<std::size_t>(j)]);
            x.row(2 * k + 1) = detail * as_mat(p[s.detail_weight]) + as_row(p[s.detail_bias]);
        }
        x.row(2 * k + 1) += position + as_row(p[s.modality_action]);
    }
    return x;
}

template <typename T>
void check_finite(const Mat<T>& x, int layer, const char* what) {
    if (!x.allFinite()) throw NumericalError(layer, std::string("non-finite ") + what);
}

/// Samples per block: a fixed split of the batch, so the grouping (and with
/// it every floating-point reduction) is the same for any worker count.
inline constexpr std::size_t kBlocks = 8;

std::pair<std::size_t, std::size_t> block_range(std::size_t block, std::size_t n_blocks, std::size_t batch_size) {
    return {block * batch_size / n_blocks, (block + 1) * batch_size / n_blocks};
}

std::size_t block_count(std::size_t batch_size) { return std::max<std::size_t>(1, std::min(kBlocks, batch_size)); }

template <typename T>
void forward_block(const Context<T>& c, std::size_t begin, std::size_t end, bool use_dropout, std::uint64_t base_seed,
                   ForwardOutput<T>& out, BlockCache<T>& bc) {
    const auto& p = c.p;
    const auto& s = c.s;
    const auto& cfg = c.cfg;
    bc.first_sample = begin;
    bc.positions.clear();
    bc.offsets.assign(1, 0);
    for (std::size_t b = begin; b < end; ++b) {
        bc.positions.push_back(valid_positions<T>(c.batch, b));
        bc.offsets.push_back(bc.offsets.back() + 2 * static_cast<Eigen::Index>(bc.positions.back().size()));
    }
    const std::size_t m = bc.size();
    const Eigen::Index tokens = bc.offsets.back();
    bc.layers.clear();
    if (tokens == 0) return;

    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
    const T att_scale = T{1} / std::sqrt(static_cast<T>(dh));
    std::vector<Rng> rngs;
    for (std::size_t b = begin; b < end; ++b) rngs.emplace_back(derive_seed(base_seed, b));
    auto draw_dropout = [&](Mat<T>& mask) {
        mask.resize(tokens, d);
        for (std::size_t j = 0; j < m; ++j)
            mask.middleRows(bc.offsets[j], bc.rows_of(j)) = dropout_mask<T>(rngs[j], bc.rows_of(j), d, cfg.dropout_p);
    };

    Mat<T> x(tokens, d);
    for (std::size_t j = 0; j < m; ++j)
        if (bc.rows_of(j) > 0) x.middleRows(bc.offsets[j], bc.rows_of(j)) = embed_sample(c, begin + j, bc.positions[j]);
    check_finite(x, -1, "embeddings");
    bc.layers.resize(cfg.n_layers);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerSlots& ls = s.layers[l];
        LayerCache<T>& lc = bc.layers[l];

        layer_norm(x, lc.xhat1, lc.rstd1);
        lc.h1 = affine(lc.xhat1, p[ls.ln1_scale], p[ls.ln1_offset]);
        lc.q.noalias() = lc.h1 * as_mat(p[ls.wq]);
        lc.q.rowwise() += as_row(p[ls.bq]);
        lc.k.noalias() = lc.h1 * as_mat(p[ls.wk]);
        lc.k.rowwise() += as_row(p[ls.bk]);
        lc.v.noalias() = lc.h1 * as_mat(p[ls.wv]);
        lc.v.rowwise() += as_row(p[ls.bv]);
        lc.attn.resize(tokens, d);
        lc.probs.resize(m * cfg.n_heads);
        for (std::size_t j = 0; j < m; ++j) {
            const Eigen::Index r0 = bc.offsets[j];
            const Eigen::Index nr = bc.rows_of(j);
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                const auto col = static_cast<Eigen::Index>(h) * dh;
                Mat<T>& prob = lc.probs[j * cfg.n_heads + h];
                prob.noalias() = lc.q.block(r0, col, nr, dh) * lc.k.block(r0, col, nr, dh).transpose();
                prob *= att_scale;
                softmax_rows(prob);
                lc.attn.block(r0, col, nr, dh).noalias() = prob * lc.v.block(r0, col, nr, dh);
            }
        }
        Mat<T> o = lc.attn * as_mat(p[ls.wo]);
        o.rowwise() += as_row(p[ls.bo]);
        if (use_dropout) {
            draw_dropout(lc.drop1);
            o.array() *= lc.drop1.array();
        }
        x += o;

        layer_norm(x, lc.xhat2, lc.rstd2);
        lc.h2 = affine(lc.xhat2, p[ls.ln2_scale], p[ls.ln2_offset]);
        lc.u.noalias() = lc.h2 * as_mat(p[ls.w1]);
        lc.u.rowwise() += as_row(p[ls.b1]);
        lc.g = gelu(lc.u);
        Mat<T> f = lc.g * as_mat(p[ls.w2]);
        f.rowwise() += as_row(p[ls.b2]);
        if (use_dropout) {
            draw_dropout(lc.drop2);
            f.array() *= lc.drop2.array();
        }
        x += f;
        check_finite(x, static_cast<int>(l), "activations");
    }

    layer_norm(x, bc.xhat_final, bc.rstd_final);
    bc.z = affine(bc.xhat_final, p[s.final_scale], p[s.final_offset]);

    Mat<T> logits = token_rows(bc.z, 0) * as_mat(p[s.cls_weight]);
    logits.rowwise() += as_row(p[s.cls_bias]);
    Mat<T> det = token_rows(bc.z, 1) * as_mat(p[s.reg_weight]);
    det.rowwise() += as_row(p[s.reg_bias]);
    check_finite(logits, -1, "classification logits");
    check_finite(det, -1, "regression outputs");

    const std::size_t nc = cfg.n_classes();
    const std::size_t dd = cfg.d_detail;
    for (std::size_t j = 0; j < m; ++j) {
        const auto& pos = bc.positions[j];
        for (std::size_t k = 0; k < pos.size(); ++k) {
            const std::size_t cell = c.batch.cell(begin + j, pos[k]);
            const auto row = bc.offsets[j] / 2 + static_cast<Eigen::Index>(k);
            std::copy_n(logits.row(row).data(), nc, out.logits.begin() + static_cast<std::ptrdiff_t>(cell * nc));
            std::copy_n(det.row(row).data(), dd, out.detail_preds.begin() + static_cast<std::ptrdiff_t>(cell * dd));
        }
    }
}

template <typename T>
void backward_block(const Context<T>& c, const BlockCache<T>& bc, const OutputGrads<T>& og, ParamSet<T>& g) {
    const auto& p = c.p;
    const auto& s = c.s;
    const auto& cfg = c.cfg;
    const std::size_t m = bc.size();
    const Eigen::Index tokens = bc.offsets.back();
    if (tokens == 0) return;
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
    const std::size_t nc = cfg.n_classes();
    const std::size_t dd = cfg.d_detail;
    const T att_scale = T{1} / std::sqrt(static_cast<T>(dh));

    Mat<T> dlogits(tokens / 2, static_cast<Eigen::Index>(nc));
    Mat<T> ddet(tokens / 2, static_cast<Eigen::Index>(dd));
    for (std::size_t j = 0; j < m; ++j) {
        const auto& pos = bc.positions[j];
        for (std::size_t k = 0; k < pos.size(); ++k) {
            const std::size_t cell = c.batch.cell(bc.first_sample + j, pos[k]);
            const auto row = bc.offsets[j] / 2 + static_cast<Eigen::Index>(k);
            std::copy_n(og.logits.begin() + static_cast<std::ptrdiff_t>(cell * nc), nc, dlogits.row(row).data());
            std::copy_n(og.detail_preds.begin() + static_cast<std::ptrdiff_t>(cell * dd), dd, ddet.row(row).data());
        }
    }

    as_mat(g[s.cls_weight]).noalias() += token_rows(bc.z, 0).transpose() * dlogits;
    add_column_sums<T>(as_row(g[s.cls_bias]), dlogits);
    as_mat(g[s.reg_weight]).noalias() += token_rows(bc.z, 1).transpose() * ddet;
    add_column_sums<T>(as_row(g[s.reg_bias]), ddet);

    Mat<T> dz(tokens, d);
    token_rows(dz, 0).noalias() = dlogits * as_mat(p[s.cls_weight]).transpose();
    token_rows(dz, 1).noalias() = ddet * as_mat(p[s.reg_weight]).transpose();
    Mat<T> dx = layer_norm_backward(dz, bc.xhat_final, bc.rstd_final, p[s.final_scale], g[s.final_scale], g[s.final_offset]);

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerSlots& ls = s.layers[li];
        const LayerCache<T>& lc = bc.layers[li];

        // Feed-forward branch.
        Mat<T> df = dx;
        if (lc.drop2.size()) df.array() *= lc.drop2.array();
        as_mat(g[ls.w2]).noalias() += lc.g.transpose() * df;
        add_column_sums<T>(as_row(g[ls.b2]), df);
        Mat<T> du = df * as_mat(p[ls.w2]).transpose();
        du.array() *= gelu_grad(lc.u).array();
        as_mat(g[ls.w1]).noalias() += lc.h2.transpose() * du;
        add_column_sums<T>(as_row(g[ls.b1]), du);
        Mat<T> dh2 = du * as_mat(p[ls.w1]).transpose();
        dx += layer_norm_backward(dh2, lc.xhat2, lc.rstd2, p[ls.ln2_scale], g[ls.ln2_scale], g[ls.ln2_offset]);

        // Attention branch.
        Mat<T> dout = dx;
        if (lc.drop1.size()) dout.array() *= lc.drop1.array();
        as_mat(g[ls.wo]).noalias() += lc.attn.transpose() * dout;
        add_column_sums<T>(as_row(g[ls.bo]), dout);
        Mat<T> dattn = dout * as_mat(p[ls.wo]).transpose();
        Mat<T> dq(tokens, d);
        Mat<T> dk(tokens, d);
        Mat<T> dv(tokens, d);
        for (std::size_t j = 0; j < m; ++j) {
            const Eigen::Index r0 = bc.offsets[j];
            const Eigen::Index nr = bc.rows_of(j);
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                const auto col = static_cast<Eigen::Index>(h) * dh;
                const Mat<T>& prob = lc.probs[j * cfg.n_heads + h];
                const auto da = dattn.block(r0, col, nr, dh);
                Mat<T> dprob = da * lc.v.block(r0, col, nr, dh).transpose();
                dv.block(r0, col, nr, dh).noalias() = prob.transpose() * da;
                const ColVec<T> row_dot = (dprob.array() * prob.array()).rowwise().sum();
                Mat<T> dscore = (prob.array() * (dprob.array().colwise() - row_dot.array())).matrix() * att_scale;
                dq.block(r0, col, nr, dh).noalias() = dscore * lc.k.block(r0, col, nr, dh);
                dk.block(r0, col, nr, dh).noalias() = dscore.transpose() * lc.q.block(r0, col, nr, dh);
            }
        }
        as_mat(g[ls.wq]).noalias() += lc.h1.transpose() * dq;
        add_column_sums<T>(as_row(g[ls.bq]), dq);
        as_mat(g[ls.wk]).noalias() += lc.h1.transpose() * dk;
        add_column_sums<T>(as_row(g[ls.bk]), dk);
        as_mat(g[ls.wv]).noalias() += lc.h1.transpose() * dv;
        add_column_sums<T>(as_row(g[ls.bv]), dv);
        Mat<T> dh1 = dq * as_mat(p[ls.wq]).transpose();
        dh1.noalias() += dk * as_mat(p[ls.wk]).transpose();
        dh1.noalias() += dv * as_mat(p[ls.wv]).transpose();
        dx += layer_norm_backward(dh1, lc.xhat1, lc.rstd1, p[ls.ln1_scale], g[ls.ln1_scale], g[ls.ln1_offset]);
    }

    // Embedding layer.
    auto dw = as_mat(g[s.detail_weight]);
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t b = bc.first_sample + j;
        const MaskPlan& plan = c.batch.plans[b];
        const auto& pos = bc.positions[j];
        for (std::size_t k = 0; k < pos.size(); ++k) {
            const std::size_t i = pos[k];
            const std::size_t cell = c.batch.cell(b, i);
            const auto r = bc.offsets[j] + 2 * static_cast<Eigen::Index>(k);
            const auto ds = dx.row(r);
            const auto da = dx.row(r + 1);
            table_row(g[s.position], i) += ds + da;
            as_row(g[s.modality_state]) += ds;
            as_row(g[s.modality_action]) += da;
            if (plan.state_mask[i]) {
                as_row(g[s.mask_state]) += ds;
            } else {
                table_row(g[s.category_embedding], static_cast<std::size_t>(c.batch.category_ids[cell])) += ds;
            }
            if (plan.action_mask[i]) {
                as_row(g[s.mask_action]) += da;
            } else {
                for (std::size_t q = 0; q < dd; ++q)
                    dw.row(static_cast<Eigen::Index>(q)) += static_cast<T>(c.batch.detail_vecs[cell * dd + q]) * da;
                as_row(g[s.detail_bias]) += da;
            }
        }
    }
}

template <typename T>
void check_params(const ParamSet<T>& params, const ModelConfig& cfg) {
    const auto manifest = param_manifest(cfg);
    if (params.size() != manifest.size()) throw StateError("parameter set does not match the model config");
    for (std::size_t i = 0; i < manifest.size(); ++i)
        if (params[i].name != manifest[i].first || params[i].shape != manifest[i].second)
            throw StateError("parameter '" + params[i].name + "' does not match the model config");
}

}  // namespace

template <typename T>
std::vector<T> embed(const TrajectoryBatch& batch, const ParamSet<T>& params, const ModelConfig& cfg) {
    check_params(params, cfg);
    const ParamSlots slots = param_slots(cfg);
    const Context<T> c{batch, params, slots, cfg};
    const std::size_t d = cfg.d_model;
    std::vector<T> out(batch.batch_size * 2 * batch.max_len * d, T{0});
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        const auto pos = valid_positions<T>(batch, b);
        const Mat<T> x = embed_sample(c, b, pos);
        for (std::size_t k = 0; k < pos.size(); ++k) {
            for (std::size_t t = 0; t < 2; ++t) {
                const std::size_t row = (b * batch.max_len + pos[k]) * 2 + t;
                std::copy_n(x.row(static_cast<Eigen::Index>(2 * k + t)).data(), d, out.begin() + static_cast<std::ptrdiff_t>(row * d));
            }
        }
    }
    return out;
}

template <typename T>
ForwardOutput<T> forward(const TrajectoryBatch& batch, const ParamSet<T>& params, const ModelConfig& cfg, Mode mode, Rng& rng,
                         ForwardCache<T>* cache, std::size_t workers) {
    check_params(params, cfg);
    const ParamSlots slots = param_slots(cfg);
    const Context<T> c{batch, params, slots, cfg};
    ForwardOutput<T> out;
    out.batch_size = batch.batch_size;
    out.max_len = batch.max_len;
    out.n_classes = cfg.n_classes();
    out.d_detail = cfg.d_detail;
    out.logits.assign(batch.batch_size * batch.max_len * out.n_classes, T{0});
    out.detail_preds.assign(batch.batch_size * batch.max_len * out.d_detail, T{0});

    const bool use_dropout = mode == Mode::Train && cfg.dropout_p > 0.0;
    const std::uint64_t base_seed = use_dropout ? rng.next_u64() : 0;
    const std::size_t n_blocks = block_count(batch.batch_size);
    std::vector<std::unique_ptr<BlockCache<T>>> blocks(n_blocks);
    for (auto& blk : blocks) blk = std::make_unique<BlockCache<T>>();
    parallel_for(n_blocks, workers, [&](std::size_t i) {
        const auto [begin, end] = block_range(i, n_blocks, batch.batch_size);
        forward_block(c, begin, end, use_dropout, base_seed, out, *blocks[i]);
    });
    if (cache) {
        cache->blocks = std::move(blocks);
        cache->batch_size = batch.batch_size;
    }
    return out;
}

template <typename T>
ParamSet<T> backward(const TrajectoryBatch& batch, const ParamSet<T>& params, const ModelConfig& cfg, const ForwardCache<T>& cache,
                     const OutputGrads<T>& grads, std::size_t workers) {
    check_params(params, cfg);
    if (cache.empty() || cache.batch_size != batch.batch_size || cache.blocks.size() != block_count(batch.batch_size))
        throw StateError("backward needs the activation cache of a forward pass on this batch");
    const std::size_t expect_logits = batch.batch_size * batch.max_len * cfg.n_classes();
    const std::size_t expect_det = batch.batch_size * batch.max_len * cfg.d_detail;
    if (grads.logits.size() != expect_logits || grads.detail_preds.size() != expect_det)
        throw StateError("output gradient shapes do not match the batch");
    const ParamSlots slots = param_slots(cfg);
    const Context<T> c{batch, params, slots, cfg};

    const std::size_t n_blocks = cache.blocks.size();
    std::vector<ParamSet<T>> block_grads(n_blocks);
    parallel_for(n_blocks, workers, [&](std::size_t i) {
        block_grads[i] = params.zeros_like();
        backward_block(c, *cache.blocks[i], grads, block_grads[i]);
    });
    ParamSet<T> total = std::move(block_grads[0]);
    for (std::size_t i = 1; i < n_blocks; ++i) total.accumulate(block_grads[i]);
    return total;
}

#define GPSMTM_INSTANTIATE(T)                                                                                                   \
    template struct LayerCache<T>;                                                                                              \
    template struct BlockCache<T>;                                                                                              \
    template class ForwardCache<T>;                                                                                             \
    template ParamSet<T> make_param_set<T>(const ModelConfig&, ParamSlots*);                                                    \
    template std::vector<T> embed<T>(const TrajectoryBatch&, const ParamSet<T>&, const ModelConfig&);                           \
    template ForwardOutput<T> forward<T>(const TrajectoryBatch&, const ParamSet<T>&, const ModelConfig&, Mode, Rng&,            \
                                         ForwardCache<T>*, std::size_t);                                                        \
    template ParamSet<T> backward<T>(const TrajectoryBatch&, const ParamSet<T>&, const ModelConfig&, const ForwardCache<T>&,    \
                                     const OutputGrads<T>&, std::size_t);

GPSMTM_INSTANTIATE(float)
GPSMTM_INSTANTIATE(double)
GPSMTM_INSTANTIATE(long double)

#undef GPSMTM_INSTANTIATE

}  // namespace gpsmtm
