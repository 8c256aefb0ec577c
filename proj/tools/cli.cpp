#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <span>
#include <ostream>
#include <sstream>
#include <string_view>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gpsmtm/checkpoint.hpp"
#include "gpsmtm/error.hpp"
#include "gpsmtm/eval.hpp"
#include "gpsmtm/ingest.hpp"
#include "gpsmtm/synthgen.hpp"
#include "gpsmtm/train.hpp"

namespace gpsmtm::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

bool is_internal_option(const CLI::Option& opt) {
    const auto& names = opt.get_lnames();
    return names.empty() || names.front() == "help" || names.front() == "config";
}

ojson typed_value(const std::string& s) {
    try {
        auto v = ojson::parse(s);
        if (v.is_number() || v.is_boolean()) return v;
    } catch (const nlohmann::json::exception&) {
    }
    return s;
}

/// Every configurable option of `app` with its effective value, keyed by long name.
ojson resolved_config(const CLI::App& app) {
    ojson cfg = ojson::object();
    for (const CLI::Option* opt : app.get_options()) {
        if (is_internal_option(*opt)) continue;
        std::vector<std::string> values;
        if (opt->count() > 0) {
            values = opt->reduced_results();
        } else if (!opt->get_default_str().empty()) {
            values = {opt->get_default_str()};
        }
        if (values.empty()) continue;
        if (values.size() == 1) {
            cfg[opt->get_lnames().front()] = typed_value(values.front());
        } else {
            ojson arr = ojson::array();
            for (const auto& v : values) arr.push_back(typed_value(v));
            cfg[opt->get_lnames().front()] = std::move(arr);
        }
    }
    return cfg;
}

std::string scalar_input(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

// Flat JSON objects map key -> option long name of the chosen subcommand. A
// run manifest is accepted as well; its resolved "config" object is used.
class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(std::string subcommand) : subcommand_(std::move(subcommand)) {}

    std::string to_config(const CLI::App* app, bool, bool, std::string) const override { return resolved_config(*app).dump(2); }

    std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConfigError(std::string("config file is not valid JSON: ") + e.what());
        }
        if (j.is_object() && j.contains("subcommand") && j.contains("config")) {
            const std::string from = j["subcommand"].is_string() ? j["subcommand"].get<std::string>() : j["subcommand"].dump();
            if (from != subcommand_) throw CLI::ConfigError("config file is a manifest for '" + from + "', not '" + subcommand_ + "'");
            j = j["config"];
        }
        if (!j.is_object()) throw CLI::ConfigError("config file must hold a JSON object");
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            if (value.is_null()) continue;
            if (value.is_object()) throw CLI::ConfigError("config key '" + key + "' must not be an object");
            CLI::ConfigItem item;
            item.name = key;
            if (!subcommand_.empty()) item.parents = {subcommand_};
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar_input(v));
            } else {
                item.inputs.push_back(scalar_input(value));
            }
            items.push_back(std::move(item));
        }
        return items;
    }

private:
    std::string subcommand_;
};

void write_text_atomic(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out << text;
        if (!out.flush()) throw IoError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
    fs::path s = p;
    s += suffix;
    return s;
}

struct Common {
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

void add_common(CLI::App& sub, Common& common) {
    sub.add_option("--seed", common.seed, "Random seed");
    sub.add_option("--workers", common.workers, "Threads for parallel sections")->check(CLI::PositiveNumber);
    sub.allow_config_extras(CLI::config_extras_mode::error);
}

class Manifest {
public:
    explicit Manifest(const CLI::App& sub) : sub_(sub), start_(std::chrono::steady_clock::now()) {}

    void input(const fs::path& p) { inputs_.push_back(p.string()); }
    void output(const fs::path& p) { outputs_.push_back(p.string()); }

    void write(const fs::path& primary, std::uint64_t seed) const {
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
        ojson m;
        m["subcommand"] = sub_.get_name();
        m["config"] = resolved_config(sub_);
        m["seed"] = seed;
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        m["tool_version"] = kToolVersion;
        m["duration_s"] = elapsed.count();
        write_text_atomic(sibling(primary, ".manifest.json"), m.dump(2) + "\n");
    }

private:
    const CLI::App& sub_;
    std::chrono::steady_clock::time_point start_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
};

std::vector<Trajectory> select_split(std::vector<Trajectory> all, double heldout_fraction, const std::string& split) {
    if (split == "all") return all;
    AgentSplit parts = split_by_agent(all, heldout_fraction);
    return split == "train" ? std::move(parts.train) : std::move(parts.heldout);
}

std::size_t stop_count(const std::vector<Trajectory>& ts) {
    std::size_t n = 0;
    for (const auto& t : ts) n += t.stops.size();
    return n;
}

// ---- synth ----

struct SynthArgs {
    Common common{7, 1};
    fs::path output;
    fs::path poi_map;
    std::size_t agents = 200;
    std::size_t days = 14;
    double noise_min = 15.0;
    double skip_prob = 0.1;
};

void add_synth(CLI::App& app, SynthArgs& a) {
    add_common(app, a.common);
    app.add_option("-o,--output", a.output, "Stop-point JSON-lines file to write")->required();
    app.add_option("--poi-map", a.poi_map, "POI table (JSON-lines lat, lon, category); built-in city map if omitted");
    app.add_option("--agents", a.agents, "Number of agents");
    app.add_option("--days", a.days, "Number of simulated days");
    app.add_option("--noise-min", a.noise_min, "Schedule jitter standard deviation in minutes")->check(CLI::NonNegativeNumber);
    app.add_option("--skip-prob", a.skip_prob, "Probability of skipping an optional activity")->check(CLI::Range(0.0, 1.0));
}

int cmd_synth(const CLI::App& app, const SynthArgs& a, std::ostream& out) {
    Manifest manifest(app);
    ScenarioConfig cfg;
    cfg.n_agents = a.agents;
    cfg.n_days = a.days;
    cfg.schedule_noise_min = a.noise_min;
    cfg.skip_prob = a.skip_prob;
    cfg.seed = a.common.seed;
    if (a.poi_map.empty()) {
        cfg.poi_map = default_poi_map();
    } else {
        cfg.poi_map = load_poi_file(a.poi_map);
        manifest.input(a.poi_map);
    }
    const StopDataset ds = generate(cfg, a.common.workers);
    std::ostringstream text;
    write_stop_lines(text, ds.trajectories, ds.vocab);
    write_text_atomic(a.output, text.str());
    manifest.output(a.output);
    manifest.write(a.output, a.common.seed);
    out << "wrote " << ds.trajectories.size() << " agents, " << stop_count(ds.trajectories) << " stops to " << a.output.string() << '\n';
    return kExitOk;
}

// ---- ingest ----

struct IngestArgs {
    Common common;
    fs::path input;
    fs::path output;
    fs::path poi_table;
    double distance_m = 200.0;
    double duration_s = 1200.0;
};

void add_ingest(CLI::App& app, IngestArgs& a) {
    add_common(app, a.common);
    app.add_option("-i,--input", a.input, "Ping or stop-point JSON-lines file")->required()->check(CLI::ExistingFile);
    app.add_option("-o,--output", a.output, "Canonical stop-point file to write")->required();
    app.add_option("--poi-table", a.poi_table, "POI table used to label staypoints (ping input only)");
    app.add_option("--distance-m", a.distance_m, "Staypoint distance threshold in meters");
    app.add_option("--duration-s", a.duration_s, "Staypoint minimum dwell in seconds");
}

int cmd_ingest(const CLI::App& app, const IngestArgs& a, std::ostream& out) {
    Manifest manifest(app);
    manifest.input(a.input);
    StopDataset ds;
    if (detect_format(a.input) == RecordFormat::Stops) {
        ds = load_stop_file(a.input);
    } else {
        if (a.poi_table.empty()) throw InvalidConfig("ping input needs --poi-table to label staypoints");
        const StaypointConfig sp{a.distance_m, a.duration_s};
        sp.validate();
        const auto table = load_poi_file(a.poi_table);
        manifest.input(a.poi_table);
        ds = stops_from_pings(load_ping_file(a.input), table, sp, a.common.workers);
    }

    std::ostringstream text;
    write_stop_lines(text, ds.trajectories, ds.vocab);
    write_text_atomic(a.output, text.str());
    manifest.output(a.output);

    ojson meta;
    meta["vocab"] = ds.vocab.to_json();
    meta["vocab_fingerprint"] = ds.vocab.fingerprint();
    meta["norm_stats"] = ds.stats.to_json();
    meta["agents"] = ds.trajectories.size();
    meta["stops"] = stop_count(ds.trajectories);
    const fs::path meta_path = sibling(a.output, ".meta.json");
    write_text_atomic(meta_path, meta.dump(2) + "\n");
    manifest.output(meta_path);
    manifest.write(a.output, a.common.seed);
    out << "ingested " << ds.trajectories.size() << " agents, " << stop_count(ds.trajectories) << " stops, "
        << ds.vocab.num_categories() << " categories (vocab " << ds.vocab.fingerprint() << ")\n";
    return kExitOk;
}

// ---- pretrain ----

struct PretrainArgs {
    Common common;
    fs::path data;
    fs::path output;
    fs::path trace;
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    MaskParams masking;
    double heldout_fraction = 0.0;
    std::size_t log_every = 100;
};

void add_pretrain(CLI::App& app, PretrainArgs& a) {
    add_common(app, a.common);
    a.train.steps = 5000;
    app.add_option("-d,--data", a.data, "Stop-point JSON-lines file")->required()->check(CLI::ExistingFile);
    app.add_option("-o,--output", a.output, "Checkpoint to write")->required();
    app.add_option("--trace", a.trace, "Loss trace JSON-lines (default <output>.trace.jsonl)");
    app.add_option("--steps", a.train.steps, "Optimizer steps");
    app.add_option("--batch-size", a.train.batch_size, "Windows per batch");
    app.add_option("--lr", a.train.optimizer.learning_rate, "AdamW learning rate");
    app.add_option("--weight-decay", a.train.optimizer.weight_decay, "AdamW decoupled weight decay");
    app.add_option("--beta1", a.train.optimizer.beta1, "AdamW first-moment decay");
    app.add_option("--beta2", a.train.optimizer.beta2, "AdamW second-moment decay");
    app.add_option("--eps", a.train.optimizer.eps, "AdamW denominator epsilon");
    app.add_option("--checkpoint-every", a.train.checkpoint_every, "Write <output>.step<N> every N steps (0 = never)");
    app.add_flag("--fixed-batch", a.train.fixed_batch, "Train on a single repeated batch");
    app.add_option("--layers", a.model.n_layers, "Encoder layers");
    app.add_option("--d-model", a.model.d_model, "Hidden width");
    app.add_option("--heads", a.model.n_heads, "Attention heads");
    app.add_option("--dropout", a.model.dropout_p, "Dropout probability");
    app.add_option("--max-len", a.model.max_len, "Stops per training window");
    app.add_option("--alpha", a.loss.alpha, "Focal loss weight");
    app.add_option("--gamma", a.loss.gamma, "Focal loss focusing parameter");
    app.add_option("--lambda", a.loss.lambda, "Regression loss weight");
    app.add_option("--mask-min", a.masking.pretrain_min_ratio, "Lower bound of the pretraining mask ratio");
    app.add_option("--mask-max", a.masking.pretrain_max_ratio, "Upper bound of the pretraining mask ratio");
    app.add_option("--heldout-fraction", a.heldout_fraction, "Fraction of agents withheld from training")->check(CLI::Range(0.0, 1.0));
    app.add_option("--log-every", a.log_every, "Steps between progress lines (0 = silent)");
}

int cmd_pretrain(const CLI::App& app, PretrainArgs& a, std::ostream& out) {
    Manifest manifest(app);
    manifest.input(a.data);
    const StopDataset ds = load_stop_file(a.data);
    const auto train_set = select_split(ds.trajectories, a.heldout_fraction, a.heldout_fraction > 0.0 ? "train" : "all");
    if (stop_count(train_set) == 0) throw EmptyDataset("no stop points to train on in '" + a.data.string() + "'");
    const NormStats stats = compute_norm_stats(train_set);

    a.train.seed = a.common.seed;
    a.train.workers = a.common.workers;
    PretrainOutputs outputs;
    outputs.checkpoint = a.output;
    outputs.trace = a.trace.empty() ? sibling(a.output, ".trace.jsonl") : a.trace;
    outputs.log = a.log_every > 0 ? &out : nullptr;
    outputs.log_every = std::max<std::size_t>(a.log_every, 1);
    const PretrainResult result = pretrain(train_set, ds.vocab, stats, a.model, a.loss, a.train, a.masking, outputs);

    manifest.output(outputs.checkpoint);
    manifest.output(outputs.trace);
    if (a.train.checkpoint_every > 0)
        for (std::size_t s = a.train.checkpoint_every; s < a.train.steps; s += a.train.checkpoint_every)
            manifest.output(periodic_checkpoint_path(a.output, s));
    manifest.write(a.output, a.common.seed);
    out << "trained " << result.trace.size() << " steps on " << train_set.size() << " agents; checkpoint " << a.output.string() << '\n';
    return kExitOk;
}

// ---- eval ----

struct EvalArgs {
    Common common;
    fs::path checkpoint;
    fs::path data;
    fs::path output;
    std::string tasks = "id,fd,random,goal";
    std::string dataset_name;
    std::string split = "all";
    double heldout_fraction = 0.0;
    std::size_t batch_size = 32;
    double random_ratio = 0.3;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    add_common(app, a.common);
    app.add_option("-c,--checkpoint", a.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    app.add_option("-d,--data", a.data, "Stop-point JSON-lines file")->required()->check(CLI::ExistingFile);
    app.add_option("-o,--output", a.output, "Report JSON-lines file to write");
    app.add_option("--tasks", a.tasks, "Comma-separated tasks: id, fd, random, goal");
    app.add_option("--dataset-name", a.dataset_name, "Row label in the report (default: data file stem)");
    app.add_option("--split", a.split, "Agents to evaluate")->check(CLI::IsMember({"all", "train", "heldout"}));
    app.add_option("--heldout-fraction", a.heldout_fraction, "Held-out agent fraction used by --split")->check(CLI::Range(0.0, 1.0));
    app.add_option("--batch-size", a.batch_size, "Windows per forward pass")->check(CLI::PositiveNumber);
    app.add_option("--random-ratio", a.random_ratio, "Masked fraction for the random task")->check(CLI::Range(0.0, 1.0));
}

std::vector<TaskKind> parse_task_list(const std::string& list) {
    std::vector<TaskKind> tasks;
    std::stringstream ss(list);
    std::string name;
    while (std::getline(ss, name, ',')) {
        if (name.empty()) continue;
        const TaskKind k = parse_task(name);
        if (k == TaskKind::PretrainRandom) throw InvalidConfig("task 'pretrain' is not an evaluation task; valid: id, fd, random, goal");
        if (std::find(tasks.begin(), tasks.end(), k) == tasks.end()) tasks.push_back(k);
    }
    if (tasks.empty()) throw InvalidConfig("no tasks given; valid: id, fd, random, goal");
    return tasks;
}

int cmd_eval(const CLI::App& app, const EvalArgs& a, std::ostream& out) {
    const auto tasks = parse_task_list(a.tasks);
    Manifest manifest(app);
    manifest.input(a.checkpoint);
    manifest.input(a.data);
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const StopDataset ds = load_stop_file(a.data);
    const auto trajectories = select_split(ds.trajectories, a.heldout_fraction, a.split);

    EvalOptions options;
    options.seed = a.common.seed;
    options.workers = a.common.workers;
    options.batch_size = a.batch_size;
    options.masking.random_ratio = a.random_ratio;
    std::vector<TaskReport> rows;
    for (TaskKind k : tasks) rows.push_back(run_task(ckpt, trajectories, ds.vocab, k, options));

    const std::string name = a.dataset_name.empty() ? a.data.stem().string() : a.dataset_name;
    out << render_report(rows, name);
    if (!a.output.empty()) {
        write_text_atomic(a.output, report_jsonl(rows));
        manifest.output(a.output);
        manifest.write(a.output, a.common.seed);
    }
    return kExitOk;
}

// ---- inspect ----

struct InspectArgs {
    Common common;
    fs::path checkpoint;
};

void add_inspect(CLI::App& app, InspectArgs& a) {
    add_common(app, a.common);
    app.add_option("checkpoint", a.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
    out << read_checkpoint_header(a.checkpoint).dump(2) << '\n';
    return kExitOk;
}

// Global flags written before the subcommand are moved just after it, so
// they are parsed as the subcommand's own command-line values.
std::vector<std::string> hoist_global_flags(const std::vector<std::string>& args, std::span<const std::string_view> subcommands) {
    static constexpr std::string_view kGlobal[] = {"--seed", "--workers", "--config"};
    std::vector<std::string> hoisted;
    std::vector<std::string> rest;
    std::size_t i = 0;
    for (; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (std::find(subcommands.begin(), subcommands.end(), a) != subcommands.end()) break;
        const bool bare = std::find(std::begin(kGlobal), std::end(kGlobal), a) != std::end(kGlobal);
        const bool joined = std::any_of(std::begin(kGlobal), std::end(kGlobal),
                                        [&](std::string_view g) { return a.size() > g.size() && a.starts_with(g) && a[g.size()] == '='; });
        if (bare && i + 1 < args.size()) {
            hoisted.push_back(a);
            hoisted.push_back(args[++i]);
        } else if (joined) {
            hoisted.push_back(a);
        } else {
            rest.push_back(a);
        }
    }
    if (i == args.size()) return args;
    rest.push_back(args[i]);
    rest.insert(rest.end(), hoisted.begin(), hoisted.end());
    rest.insert(rest.end(), args.begin() + static_cast<std::ptrdiff_t>(i) + 1, args.end());
    return rest;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Masked trajectory modeling on stop-point sequences"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    static constexpr std::string_view kSubcommands[] = {"synth", "ingest", "pretrain", "eval", "inspect"};
    const auto moved = hoist_global_flags(args, kSubcommands);
    // CLI11 only reads config files on the top-level app, so the file is
    // attached there and its keys are routed to the chosen subcommand.
    std::string chosen;
    for (const auto& a : moved)
        if (std::find(std::begin(kSubcommands), std::end(kSubcommands), a) != std::end(kSubcommands)) {
            chosen = a;
            break;
        }
    Common global;
    app.add_option("--seed", global.seed, "Random seed (applies to the subcommand)");
    app.add_option("--workers", global.workers, "Threads for parallel sections (applies to the subcommand)");
    app.set_config("--config", "", "JSON file of option values or a run manifest (applies to the subcommand)");
    app.config_formatter(std::make_shared<JsonConfig>(chosen));
    app.allow_config_extras(CLI::config_extras_mode::error);

    SynthArgs synth;
    IngestArgs ingest;
    PretrainArgs pretrain_args;
    EvalArgs eval;
    InspectArgs inspect;
    CLI::App* synth_app = app.add_subcommand("synth", "Generate a synthetic pattern-of-life dataset");
    CLI::App* ingest_app = app.add_subcommand("ingest", "Convert pings or stop points into a canonical stop file");
    CLI::App* pretrain_app = app.add_subcommand("pretrain", "Masked-trajectory pretraining");
    CLI::App* eval_app = app.add_subcommand("eval", "Run downstream tasks against a checkpoint");
    CLI::App* inspect_app = app.add_subcommand("inspect", "Print a checkpoint header");
    add_synth(*synth_app, synth);
    add_ingest(*ingest_app, ingest);
    add_pretrain(*pretrain_app, pretrain_args);
    add_eval(*eval_app, eval);
    add_inspect(*inspect_app, inspect);
    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        std::vector<std::string> reversed(moved.rbegin(), moved.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        return kExitUsage;
    }

    try {
        if (synth_app->parsed()) {
            return cmd_synth(*synth_app, synth, out);
        }
        if (ingest_app->parsed()) {
            return cmd_ingest(*ingest_app, ingest, out);
        }
        if (pretrain_app->parsed()) {
            return cmd_pretrain(*pretrain_app, pretrain_args, out);
        }
        if (eval_app->parsed()) {
            return cmd_eval(*eval_app, eval, out);
        }
        if (inspect_app->parsed()) return cmd_inspect(inspect, out);
    } catch (const InvalidConfig& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace gpsmtm::cli
