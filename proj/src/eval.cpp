#include "gpsmtm/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "gpsmtm/error.hpp"
#include "gpsmtm/ingest.hpp"
#include "gpsmtm/parallel.hpp"

namespace gpsmtm {

namespace {

void check_pair(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) throw InvalidConfig("predictions and labels differ in length");
    if (labels.empty()) throw NoSamples("no masked samples to score");
}

}  // namespace

double accuracy(std::span<const int> preds, std::span<const int> labels) {
    check_pair(preds, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += preds[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<std::pair<int, double>> per_class_recall(std::span<const int> preds, std::span<const int> labels) {
    check_pair(preds, labels);
    std::map<int, std::pair<std::size_t, std::size_t>> counts;  // class -> (correct, support)
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& c = counts[labels[i]];
        ++c.second;
        c.first += preds[i] == labels[i];
    }
    std::vector<std::pair<int, double>> out;
    for (const auto& [k, c] : counts) out.emplace_back(k, static_cast<double>(c.first) / static_cast<double>(c.second));
    return out;
}

double recall_range(std::span<const int> preds, std::span<const int> labels) {
    const auto recalls = per_class_recall(preds, labels);
    const auto [lo, hi] = std::minmax_element(recalls.begin(), recalls.end(),
                                              [](const auto& a, const auto& b) { return a.second < b.second; });
    return hi->second - lo->second;
}

int majority_class(std::span<const int> labels) {
    if (labels.empty()) throw NoSamples("no labels");
    std::map<int, std::size_t> counts;
    for (int l : labels) ++counts[l];
    int best = counts.begin()->first;
    std::size_t best_n = 0;
    for (const auto& [k, n] : counts) {
        if (n > best_n) {
            best = k;
            best_n = n;
        }
    }
    return best;
}

double bias_ratio(std::span<const int> preds, std::span<const int> labels) {
    check_pair(preds, labels);
    const int majority = majority_class(labels);
    const auto predicted = std::count(preds.begin(), preds.end(), majority);
    const auto actual = std::count(labels.begin(), labels.end(), majority);
    return static_cast<double>(predicted) / static_cast<double>(actual);
}

nlohmann::ordered_json TaskReport::to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task_name(task);
    j["accuracy"] = accuracy;
    j["recall_range"] = recall_range;
    j["bias_ratio"] = bias_ratio;
    nlohmann::ordered_json recalls = nlohmann::ordered_json::object();
    for (const auto& [name, r] : per_class_recall) recalls[name] = r;
    j["per_class_recall"] = std::move(recalls);
    j["n_masked_state"] = n_masked_state;
    j["n_masked_action"] = n_masked_action;
    j["mse"] = mse;
    return j;
}

TaskReport run_task(const Checkpoint& ckpt, std::span<const Trajectory> trajectories, const PoiVocab& data_vocab, TaskKind kind,
                    const EvalOptions& options) {
    if (!(data_vocab == ckpt.vocab))
        throw VocabError("dataset vocabulary " + data_vocab.fingerprint() + " does not match checkpoint vocabulary " +
                         ckpt.vocab.fingerprint());
    if (options.batch_size == 0) throw InvalidConfig("batch size must be positive");
    const auto& cfg = ckpt.config;
    const std::vector<Trajectory> windows = segment_windows(trajectories, cfg.max_len);
    if (windows.empty()) throw NoSamples("dataset yields no evaluation windows");

    std::vector<MaskPlan> plans;
    plans.reserve(windows.size());
    for (std::size_t w = 0; w < windows.size(); ++w) {
        Rng rng(derive_seed(options.seed, w));
        plans.push_back(make_plan(kind, windows[w].stops.size(), cfg.max_len, options.masking, rng));
    }

    std::vector<int> preds;
    std::vector<int> labels;
    double sq_error = 0.0;
    std::size_t action_cells = 0;
    Rng unused(0);
    for (std::size_t begin = 0; begin < windows.size(); begin += options.batch_size) {
        const std::size_t end = std::min(windows.size(), begin + options.batch_size);
        const std::span<const Trajectory> chunk(windows.data() + begin, end - begin);
        const std::span<const MaskPlan> chunk_plans(plans.data() + begin, end - begin);
        const TrajectoryBatch batch = make_batch(chunk, chunk_plans, ckpt.vocab, ckpt.stats, cfg.max_len);
        const auto out = forward(batch, ckpt.params, cfg, Mode::Eval, unused,
                                    static_cast<ForwardCache<float>*>(nullptr), options.workers);
        const std::size_t nc = out.n_classes;
        const std::size_t dd = out.d_detail;
        for (std::size_t b = 0; b < batch.batch_size; ++b) {
            const MaskPlan& plan = batch.plans[b];
            for (std::size_t i = 0; i < plan.valid_len; ++i) {
                const std::size_t cell = batch.cell(b, i);
                if (plan.state_mask[i]) {
                    const float* z = out.logits.data() + cell * nc;
                    preds.push_back(static_cast<int>(std::max_element(z, z + nc) - z));
                    labels.push_back(batch.target_category[cell]);
                }
                if (plan.action_mask[i]) {
                    for (std::size_t k = 0; k < dd; ++k) {
                        const double e = static_cast<double>(out.detail_preds[cell * dd + k]) - batch.target_detail[cell * dd + k];
                        sq_error += e * e;
                    }
                    ++action_cells;
                }
            }
        }
    }

    TaskReport r;
    r.task = kind;
    r.n_masked_state = labels.size();
    r.n_masked_action = action_cells;
    r.mse = action_cells ? sq_error / static_cast<double>(action_cells) : 0.0;
    if (!labels.empty()) {
        r.accuracy = accuracy(preds, labels);
        r.recall_range = recall_range(preds, labels);
        r.bias_ratio = bias_ratio(preds, labels);
        for (const auto& [k, rec] : per_class_recall(preds, labels)) r.per_class_recall.emplace_back(ckpt.vocab.name(k), rec);
    }
    return r;
}

namespace {

std::vector<const TaskReport*> table_order(std::span<const TaskReport> rows) {
    if (rows.empty()) throw InvalidConfig("cannot render a report without task rows");
    std::vector<const TaskReport*> ordered;
    for (TaskKind k : kEvalTasks)
        for (const auto& r : rows)
            if (r.task == k) ordered.push_back(&r);
    for (const auto& r : rows)
        if (std::find(std::begin(kEvalTasks), std::end(kEvalTasks), r.task) == std::end(kEvalTasks)) ordered.push_back(&r);
    return ordered;
}

std::string task_heading(TaskKind k) {
    switch (k) {
        case TaskKind::InverseDynamics: return "ID";
        case TaskKind::ForwardDynamics: return "FD";
        case TaskKind::Random: return "Random";
        case TaskKind::Goal: return "Goal";
        case TaskKind::PretrainRandom: return "Pretrain";
    }
    return "?";
}

std::string centered(const std::string& s, std::size_t width) {
    if (s.size() >= width) return s;
    const std::size_t left = (width - s.size()) / 2;
    return std::string(left, ' ') + s + std::string(width - s.size() - left, ' ');
}

std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

std::string render_report(std::span<const TaskReport> rows, const std::string& dataset) {
    const auto ordered = table_order(rows);
    constexpr std::size_t kCell = 6;
    constexpr std::size_t kGroup = 3 * kCell;
    const std::size_t label_width = std::max<std::size_t>(dataset.size(), 8);
    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(s.size(), w), ' ');
        return s;
    };

    std::ostringstream out;
    auto emit = [&out](std::string l) {
        l.erase(l.find_last_not_of(' ') + 1);
        out << l << '\n';
    };
    std::string line = pad("", label_width);
    for (const auto* r : ordered) line += " | " + centered(task_heading(r->task), kGroup);
    emit(line);

    line = pad("Dataset", label_width);
    for (std::size_t i = 0; i < ordered.size(); ++i) line += " | " + pad("Acc.", kCell) + pad("Rec.", kCell) + pad("Bias", kCell);
    emit(line);

    line = std::string(label_width, '-');
    for (std::size_t i = 0; i < ordered.size(); ++i) line += "-+-" + std::string(kGroup, '-');
    emit(line);

    line = pad(dataset, label_width);
    for (const auto* r : ordered)
        line += " | " + pad(fixed2(r->accuracy), kCell) + pad(fixed2(r->recall_range), kCell) + pad(fixed2(r->bias_ratio), kCell);
    emit(line);
    return out.str();
}

std::string report_jsonl(std::span<const TaskReport> rows) {
    std::string out;
    for (const auto* r : table_order(rows)) out += r->to_json().dump() + "\n";
    return out;
}

}  // namespace gpsmtm
