#include <fstream>
#include <iterator>
#include <sstream>

#include "../tools/cli.hpp"
#include "doctest.h"
#include "gpsmtm/checkpoint.hpp"
#include "gpsmtm/ingest.hpp"
#include "test_support.hpp"

using namespace gpsmtm;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

nlohmann::json read_json(const std::filesystem::path& p) { return nlohmann::json::parse(slurp(p)); }

/// Small synthetic dataset plus tiny-model training flags.
struct Workspace {
    testing::TempDir dir;
    std::filesystem::path data = dir / "data.jsonl";

    Workspace() { REQUIRE(run({"synth", "--agents", "6", "--days", "4", "-o", data.string()}).code == 0); }

    std::vector<std::string> pretrain_args(const std::string& out, const std::string& steps = "3") const {
        return {"pretrain", "-d", data.string(), "-o", (dir / out).string(), "--steps", steps, "--layers", "1", "--d-model", "16",
                "--heads", "2", "--batch-size", "4", "--max-len", "8", "--log-every", "0"};
    }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
    testing::TempDir dir;
    CHECK(run({}).code == 2);
    CHECK(run({"bogus"}).code == 2);
    CHECK(run({"synth"}).code == 2);
    CHECK(run({"synth", "-o", (dir / "x.jsonl").string(), "--agents", "abc"}).code == 2);
    CHECK(run({"synth", "-o", (dir / "x.jsonl").string(), "--skip-prob", "2"}).code == 2);
    CHECK(run({"synth", "-o", (dir / "x.jsonl").string(), "--no-such-flag"}).code == 2);
    CHECK(run({"eval", "-c", (dir / "missing.ckpt").string(), "-d", (dir / "missing.jsonl").string()}).code == 2);
    CHECK_FALSE(std::filesystem::exists(dir / "x.jsonl"));
    const auto help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("pretrain") != std::string::npos);
    CHECK(run({"--version"}).out.find(cli::kToolVersion) != std::string::npos);
}

TEST_CASE("synth writes the dataset and a manifest") {
    testing::TempDir dir;
    const auto out = dir / "empty.jsonl";
    const auto r = run({"synth", "--agents", "0", "--days", "1", "--seed", "7", "-o", out.string()});
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(out));
    CHECK(slurp(out).empty());

    const auto a = dir / "a.jsonl";
    const auto b = dir / "b.jsonl";
    CHECK(run({"synth", "--agents", "5", "--days", "3", "-o", a.string()}).code == 0);
    CHECK(run({"synth", "--agents", "5", "--days", "3", "-o", b.string()}).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK_FALSE(slurp(a).empty());

    const auto m = read_json(dir / "a.jsonl.manifest.json");
    CHECK(m.at("subcommand") == "synth");
    CHECK(m.at("seed") == 7);
    CHECK(m.at("config").at("agents") == 5);
    CHECK(m.at("config").at("skip-prob") == 0.1);
    CHECK(m.at("outputs") == nlohmann::json::array({a.string()}));
    CHECK(m.at("tool_version") == cli::kToolVersion);
    CHECK(m.at("duration_s").get<double>() >= 0.0);
}

TEST_CASE("global flags before the subcommand apply to it") {
    testing::TempDir dir;
    const auto a = dir / "a.jsonl";
    const auto b = dir / "b.jsonl";
    CHECK(run({"--seed", "99", "synth", "--agents", "3", "--days", "2", "-o", a.string()}).code == 0);
    CHECK(run({"synth", "--agents", "3", "--days", "2", "--seed", "99", "-o", b.string()}).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(read_json(dir / "a.jsonl.manifest.json").at("seed") == 99);
}

TEST_CASE("config files sit between flags and defaults") {
    testing::TempDir dir;
    spit(dir / "cfg.json", R"({"agents": 4, "days": 2, "seed": 3})");
    const auto a = dir / "a.jsonl";
    CHECK(run({"synth", "--config", (dir / "cfg.json").string(), "-o", a.string()}).code == 0);
    auto cfg = read_json(dir / "a.jsonl.manifest.json").at("config");
    CHECK(cfg.at("agents") == 4);
    CHECK(cfg.at("seed") == 3);
    CHECK(cfg.at("noise-min") == 15.0);

    CHECK(run({"synth", "--config", (dir / "cfg.json").string(), "--agents", "2", "-o", a.string()}).code == 0);
    cfg = read_json(dir / "a.jsonl.manifest.json").at("config");
    CHECK(cfg.at("agents") == 2);
    CHECK(cfg.at("days") == 2);

    spit(dir / "bad.json", R"({"agentz": 4})");
    CHECK(run({"synth", "--config", (dir / "bad.json").string(), "-o", a.string()}).code == 2);
    spit(dir / "broken.json", "{");
    CHECK(run({"synth", "--config", (dir / "broken.json").string(), "-o", a.string()}).code == 2);
}

TEST_CASE("re-running from a manifest reproduces the artifact") {
    testing::TempDir dir;
    const auto a = dir / "a.jsonl";
    CHECK(run({"synth", "--agents", "3", "--days", "2", "--seed", "11", "--noise-min", "5", "-o", a.string()}).code == 0);
    const std::string first = slurp(a);
    std::filesystem::rename(dir / "a.jsonl.manifest.json", dir / "m.json");
    std::filesystem::remove(a);
    CHECK(run({"synth", "--config", (dir / "m.json").string()}).code == 0);
    CHECK(slurp(a) == first);
}

TEST_CASE("ingest passes stop files through and emits the vocabulary") {
    Workspace ws;
    const auto out = ws.dir / "canon.jsonl";
    const auto r = run({"ingest", "-i", ws.data.string(), "-o", out.string()});
    CHECK(r.code == 0);
    CHECK(slurp(out) == slurp(ws.data));
    const auto meta = read_json(ws.dir / "canon.jsonl.meta.json");
    const auto ds = load_stop_file(ws.data);
    CHECK(meta.at("vocab_fingerprint") == ds.vocab.fingerprint());
    CHECK(meta.at("vocab").at("categories") == ds.vocab.categories());
    CHECK(meta.at("agents") == 6);
    CHECK(NormStats::from_json(meta.at("norm_stats")) == ds.stats);
    CHECK(std::filesystem::exists(ws.dir / "canon.jsonl.manifest.json"));
}

TEST_CASE("ingest of pings matches staypoint detection") {
    testing::TempDir dir;
    std::string pings;
    std::vector<RawPing> raw;
    for (int k = 0; k < 30; ++k) {
        const double lat = k < 15 ? 34.0 : 34.05;
        raw.push_back(RawPing{"a", 300 * k, lat, -118.0});
        pings += R"({"agent_id":"a","timestamp":)" + std::to_string(300 * k) + R"(,"lat":)" + std::to_string(lat) + R"(,"lon":-118.0})" + "\n";
    }
    spit(dir / "pings.jsonl", pings);
    spit(dir / "pois.jsonl", R"({"lat":34.0,"lon":-118.0,"category":"home"})"
                             "\n"
                             R"({"lat":34.05,"lon":-118.0,"category":"work"})"
                             "\n");
    CHECK(run({"ingest", "-i", (dir / "pings.jsonl").string(), "-o", (dir / "out.jsonl").string()}).code == 2);
    const auto r = run({"ingest", "-i", (dir / "pings.jsonl").string(), "-o", (dir / "out.jsonl").string(), "--poi-table",
                        (dir / "pois.jsonl").string()});
    REQUIRE(r.code == 0);
    const auto ds = load_stop_file(dir / "out.jsonl");
    const auto expected = detect_staypoints(raw, StaypointConfig{});
    REQUIRE(ds.trajectories.size() == 1);
    REQUIRE(ds.trajectories[0].stops.size() == expected.size());
    REQUIRE(expected.size() == 2);
    for (std::size_t k = 0; k < expected.size(); ++k) {
        CHECK(ds.trajectories[0].stops[k].start_time == expected[k].start_time);
        CHECK(ds.trajectories[0].stops[k].end_time == expected[k].end_time);
    }
    CHECK(ds.vocab.categories() == std::vector<std::string>{"home", "work"});
}

TEST_CASE("ingest reports the first malformed line") {
    testing::TempDir dir;
    spit(dir / "mixed.jsonl", R"({"agent_id":"a","category":"x","start_time":0,"end_time":5,"lat":1,"lon":2})"
                              "\n"
                              R"({"agent_id":"a","timestamp":9,"lat":1,"lon":2})"
                              "\n");
    const auto r = run({"ingest", "-i", (dir / "mixed.jsonl").string(), "-o", (dir / "out.jsonl").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("line 2") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(dir / "out.jsonl"));
}

TEST_CASE("pretrain defaults") {
    Workspace ws;
    const auto r = run({"pretrain", "-d", ws.data.string(), "-o", (ws.dir / "m.ckpt").string(), "--steps", "0"});
    REQUIRE(r.code == 0);
    const auto cfg = read_json(ws.dir / "m.ckpt.manifest.json").at("config");
    CHECK(cfg.at("layers") == 4);
    CHECK(cfg.at("d-model") == 256);
    CHECK(cfg.at("heads") == 4);
    CHECK(cfg.at("dropout") == 0.1);
    CHECK(cfg.at("lr") == 1e-4);
    CHECK(cfg.at("batch-size") == 32);
    CHECK(cfg.at("lambda") == 0.5);
    CHECK(cfg.at("alpha") == 0.5);
    CHECK(cfg.at("gamma") == 2.0);
    CHECK(slurp(ws.dir / "m.ckpt.trace.jsonl").empty());
    const auto header = read_checkpoint_header(ws.dir / "m.ckpt");
    CHECK(header.at("model").at("n_layers") == 4);
    const auto inspect = run({"inspect", (ws.dir / "m.ckpt").string()});
    CHECK(inspect.code == 0);
    CHECK(nlohmann::json::parse(inspect.out) == header);
}

TEST_CASE("pretrain is byte-reproducible across runs and worker counts") {
    Workspace ws;
    auto a = ws.pretrain_args("a.ckpt");
    a.insert(a.end(), {"--seed", "1"});
    auto b = ws.pretrain_args("b.ckpt");
    b.insert(b.end(), {"--seed", "1", "--workers", "3"});
    REQUIRE(run(a).code == 0);
    REQUIRE(run(b).code == 0);
    CHECK(slurp(ws.dir / "a.ckpt") == slurp(ws.dir / "b.ckpt"));
    CHECK(slurp(ws.dir / "a.ckpt.trace.jsonl") == slurp(ws.dir / "b.ckpt.trace.jsonl"));
    CHECK_FALSE(slurp(ws.dir / "a.ckpt.trace.jsonl").empty());
}

TEST_CASE("pretrain failures") {
    Workspace ws;
    spit(ws.dir / "empty.jsonl", "");
    CHECK(run({"pretrain", "-d", (ws.dir / "empty.jsonl").string(), "-o", (ws.dir / "m.ckpt").string()}).code == 1);
    auto args = ws.pretrain_args("m.ckpt");
    args.insert(args.end(), {"--heads", "3"});
    CHECK(run(args).code == 2);
}

TEST_CASE("eval prints the table and writes the report") {
    Workspace ws;
    REQUIRE(run(ws.pretrain_args("m.ckpt")).code == 0);
    const auto ckpt = (ws.dir / "m.ckpt").string();
    const auto r = run({"eval", "-c", ckpt, "-d", ws.data.string(), "-o", (ws.dir / "r.jsonl").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("ID") < r.out.find("Goal"));
    CHECK(r.out.find("data ") != std::string::npos);
    std::istringstream lines(slurp(ws.dir / "r.jsonl"));
    std::vector<std::string> tasks;
    for (std::string line; std::getline(lines, line);) tasks.push_back(nlohmann::json::parse(line).at("task"));
    CHECK(tasks == std::vector<std::string>{"id", "fd", "random", "goal"});
    CHECK(std::filesystem::exists(ws.dir / "r.jsonl.manifest.json"));

    const std::string first = slurp(ws.dir / "r.jsonl");
    REQUIRE(run({"eval", "-c", ckpt, "-d", ws.data.string(), "-o", (ws.dir / "r.jsonl").string()}).code == 0);
    CHECK(slurp(ws.dir / "r.jsonl") == first);

    const auto goal = run({"eval", "-c", ckpt, "-d", ws.data.string(), "--tasks", "goal"});
    CHECK(goal.code == 0);
    CHECK(goal.out.find("Random") == std::string::npos);
    CHECK(std::count(goal.out.begin(), goal.out.end(), '\n') == 4);

    const auto bad = run({"eval", "-c", ckpt, "-d", ws.data.string(), "--tasks", "goal,teleport"});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("random, fd, id, goal") != std::string::npos);
    CHECK(run({"eval", "-c", ckpt, "-d", ws.data.string(), "--tasks", "pretrain"}).code == 2);
}

TEST_CASE("eval rejects a dataset with a different vocabulary") {
    Workspace ws;
    REQUIRE(run(ws.pretrain_args("m.ckpt")).code == 0);
    spit(ws.dir / "other.jsonl", R"({"agent_id":"a","category":"zoo","start_time":0,"end_time":5,"lat":34.05,"lon":-118.3})"
                                 "\n"
                                 R"({"agent_id":"a","category":"home","start_time":9,"end_time":15,"lat":34.05,"lon":-118.3})"
                                 "\n");
    const auto r = run({"eval", "-c", (ws.dir / "m.ckpt").string(), "-d", (ws.dir / "other.jsonl").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find(load_stop_file(ws.dir / "other.jsonl").vocab.fingerprint()) != std::string::npos);
    CHECK(r.err.find(load_stop_file(ws.data).vocab.fingerprint()) != std::string::npos);
}

TEST_CASE("a manifest from another subcommand is rejected") {
    Workspace ws;
    const auto r = run({"pretrain", "--config", (ws.dir / "data.jsonl.manifest.json").string(), "-d", ws.data.string(), "-o",
                        (ws.dir / "m.ckpt").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("manifest for 'synth'") != std::string::npos);
}
