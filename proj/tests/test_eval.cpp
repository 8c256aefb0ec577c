#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "gpsmtm/error.hpp"
#include "gpsmtm/eval.hpp"
#include "gpsmtm/ingest.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace gpsmtm;

namespace {

std::vector<int> ints(std::initializer_list<int> v) { return v; }

Checkpoint random_checkpoint(std::size_t n_categories, std::size_t max_len, std::uint64_t seed) {
    Checkpoint c;
    c.vocab = testing::letter_vocab(n_categories);
    c.config = testing::tiny_config(c.vocab.size(), max_len);
    c.stats = NormStats{34.0, 34.1, -118.3, -118.2, 1};
    c.params = testing::generic_params(c.config, seed, 0.5);
    return c;
}

TaskReport row(TaskKind k, double acc, double rec, double bias) {
    TaskReport r;
    r.task = k;
    r.accuracy = acc;
    r.recall_range = rec;
    r.bias_ratio = bias;
    return r;
}

}  // namespace

TEST_CASE("accuracy examples") {
    CHECK(accuracy(ints({1, 2, 3}), ints({1, 2, 3})) == 1.0);
    CHECK(accuracy(ints({0, 0, 1}), ints({0, 1, 1})) == 2.0 / 3.0);
    CHECK(accuracy(ints({1}), ints({0})) == 0.0);
    CHECK_THROWS_AS(accuracy(ints({}), ints({})), NoSamples);
    CHECK_THROWS_AS(accuracy(ints({1}), ints({1, 2})), InvalidConfig);
}

TEST_CASE("recall range examples") {
    CHECK(recall_range(ints({0, 1, 2}), ints({0, 1, 2})) == 0.0);
    CHECK(recall_range(ints({0, 0, 0, 0}), ints({0, 0, 1, 1})) == 1.0);
    CHECK(recall_range(ints({0, 1, 1}), ints({1, 1, 1})) == 0.0);
    CHECK_THROWS_AS(recall_range(ints({}), ints({})), NoSamples);
    const auto r = per_class_recall(ints({0, 0, 2, 2, 2}), ints({2, 0, 2, 2, 1}));
    REQUIRE(r.size() == 3);
    CHECK(r[0] == std::pair<int, double>{0, 1.0});
    CHECK(r[1] == std::pair<int, double>{1, 0.0});
    CHECK(r[2] == std::pair<int, double>{2, 2.0 / 3.0});
}

TEST_CASE("bias ratio examples") {
    const auto labels = ints({0, 0, 0, 1, 1});
    CHECK(bias_ratio(ints({1, 0, 0, 0, 1}), labels) == 1.0);
    CHECK(bias_ratio(ints({0, 0, 0, 0, 0}), labels) == doctest::Approx(1.0 / 0.6).epsilon(1e-15));
    CHECK(bias_ratio(ints({0, 0, 0, 0, 0}), labels) == 5.0 / 3.0);
    CHECK(bias_ratio(ints({1, 1, 2, 2, 1}), labels) == 0.0);
    CHECK(majority_class(ints({3, 1, 1, 3})) == 1);
    CHECK(majority_class(ints({5})) == 5);
    CHECK_THROWS_AS(bias_ratio(ints({}), ints({})), NoSamples);
    CHECK_THROWS_AS(majority_class(ints({})), NoSamples);
}

TEST_CASE("metrics agree with a brute-force confusion matrix") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(60);
        const int k = 1 + static_cast<int>(rng.below(6));
        std::vector<int> preds(n), labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
        for (std::size_t i = 0; i < n; ++i)
            preds[i] = rng.bernoulli(0.5) ? labels[i] : static_cast<int>(rng.below(static_cast<std::uint64_t>(k + 1)));
        const auto m = oracle::confusion_metrics(preds, labels);
        CHECK(accuracy(preds, labels) == m.accuracy);
        CHECK(recall_range(preds, labels) == m.recall_range);
        CHECK(bias_ratio(preds, labels) == m.bias_ratio);

        CHECK(m.accuracy >= 0.0);
        CHECK(m.accuracy <= 1.0);
        CHECK(m.recall_range >= 0.0);
        CHECK(m.recall_range <= 1.0);
        CHECK(m.bias_ratio >= 0.0);
        CHECK(bias_ratio(labels, labels) == 1.0);

        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        std::vector<int> p2(n), l2(n);
        for (std::size_t i = 0; i < n; ++i) {
            p2[i] = preds[perm[i]];
            l2[i] = labels[perm[i]];
        }
        CHECK(accuracy(p2, l2) == accuracy(preds, labels));
        CHECK(recall_range(p2, l2) == recall_range(preds, labels));
        CHECK(bias_ratio(p2, l2) == bias_ratio(preds, labels));
    }
}

TEST_CASE("report json has the documented keys") {
    TaskReport r = row(TaskKind::Goal, 0.5, 0.25, 1.5);
    r.per_class_recall = {{"home", 1.0}, {"work", 0.75}};
    r.n_masked_state = 10;
    r.n_masked_action = 9;
    r.mse = 0.0125;
    const auto j = r.to_json();
    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"task", "accuracy", "recall_range", "bias_ratio", "per_class_recall", "n_masked_state",
                                           "n_masked_action", "mse"});
    CHECK(j.at("task") == "goal");
    CHECK(j.at("per_class_recall").at("work") == 0.75);
}

TEST_CASE("rendering rounds to two decimals and orders tasks ID, FD, Random, Goal") {
    const std::vector<TaskReport> rows{row(TaskKind::Goal, 0.6543, 0.212, 1.047), row(TaskKind::Random, 1.0, 0.0, 0.999),
                                       row(TaskKind::InverseDynamics, 0.1, 0.2, 0.3), row(TaskKind::ForwardDynamics, 0.4, 0.5, 0.6)};
    const std::string table = render_report(rows, "synthetic");
    CHECK(table.find("0.65  0.21  1.05") != std::string::npos);
    CHECK(table.find("1.00  0.00  1.00") != std::string::npos);
    const auto id = table.find("ID");
    const auto fd = table.find("FD");
    const auto random = table.find("Random");
    const auto goal = table.find("Goal");
    CHECK(id < fd);
    CHECK(fd < random);
    CHECK(random < goal);
    CHECK(table.find("0.10  0.20  0.30") < table.find("0.40  0.50  0.60"));
    CHECK(table.find("synthetic") != std::string::npos);
    for (std::size_t pos = table.find('\n'); pos != std::string::npos; pos = table.find('\n', pos + 1)) CHECK(table[pos - 1] != ' ');

    const auto jsonl = report_jsonl(rows);
    CHECK(jsonl.find("\"task\":\"id\"") < jsonl.find("\"task\":\"goal\""));
    CHECK(jsonl.find("0.6543") != std::string::npos);

    CHECK_THROWS_AS(render_report(std::vector<TaskReport>{}), InvalidConfig);
    CHECK_THROWS_AS(report_jsonl(std::vector<TaskReport>{}), InvalidConfig);
}

TEST_CASE("single-task table has one column group") {
    const std::vector<TaskReport> rows{row(TaskKind::Goal, 0.5, 0.0, 1.0)};
    const std::string table = render_report(rows);
    CHECK(table.find("Goal") != std::string::npos);
    CHECK(table.find("Random") == std::string::npos);
    CHECK(std::count(table.begin(), table.end(), '\n') == 4);
}

TEST_CASE("run_task is deterministic and counts masked cells per task") {
    const auto c = random_checkpoint(4, 8, 3);
    Rng rng(1);
    const auto trajectories = testing::random_windows(rng, 20, 2, 20, 4);
    std::size_t windows = 0;
    for (const auto& t : trajectories) windows += segment_windows(t, 8).size();

    const auto goal = run_task(c, trajectories, c.vocab, TaskKind::Goal);
    CHECK(goal.n_masked_state == windows);
    CHECK(goal.n_masked_action == windows);
    const auto fd = run_task(c, trajectories, c.vocab, TaskKind::ForwardDynamics);
    const auto id = run_task(c, trajectories, c.vocab, TaskKind::InverseDynamics);
    CHECK(fd.n_masked_state == id.n_masked_state);

    EvalOptions opts;
    opts.seed = 5;
    const auto a = run_task(c, trajectories, c.vocab, TaskKind::Random, opts);
    opts.workers = 3;
    const auto b = run_task(c, trajectories, c.vocab, TaskKind::Random, opts);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.mse >= 0.0);
}

TEST_CASE("run_task errors") {
    const auto c = random_checkpoint(4, 8, 3);
    Rng rng(1);
    const auto trajectories = testing::random_windows(rng, 3, 2, 6, 4);
    try {
        run_task(c, trajectories, testing::letter_vocab(5), TaskKind::Goal);
        FAIL("expected a vocabulary error");
    } catch (const VocabError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(testing::letter_vocab(5).fingerprint()) != std::string::npos);
        CHECK(msg.find(c.vocab.fingerprint()) != std::string::npos);
    }
    const auto singles = testing::random_windows(rng, 3, 1, 1, 4);
    CHECK_THROWS_AS(run_task(c, singles, c.vocab, TaskKind::Goal), NoSamples);
}

TEST_CASE("a model that always predicts the true class scores perfectly") {
    auto c = random_checkpoint(3, 8, 4);
    const auto slots = param_slots(c.config);
    std::fill(c.params[slots.cls_weight].data.begin(), c.params[slots.cls_weight].data.end(), 0.0f);
    c.params[slots.cls_bias].data = {0.0f, 0.0f, 10.0f};
    Rng rng(2);
    auto trajectories = testing::random_windows(rng, 10, 2, 12, 3);
    for (auto& t : trajectories)
        for (auto& s : t.stops) s.category = 2;
    for (TaskKind k : kEvalTasks) {
        const auto r = run_task(c, trajectories, c.vocab, k);
        CHECK(r.accuracy == 1.0);
        CHECK(r.recall_range == 0.0);
        CHECK(r.bias_ratio == 1.0);
        REQUIRE(r.per_class_recall.size() == 1);
        CHECK(r.per_class_recall[0].first == "c");
    }
}

TEST_CASE("an uninformed model scores chance on balanced random labels") {
    const auto c = random_checkpoint(4, 16, 8);
    Rng rng(12);
    const auto trajectories = testing::random_windows(rng, 400, 16, 16, 4);
    const auto r = run_task(c, trajectories, c.vocab, TaskKind::Random);
    // Labels are independent of everything the model sees, so hits are
    // Binomial(n, 1/4); allow four standard deviations.
    const double n = static_cast<double>(r.n_masked_state);
    CHECK(n > 1000);
    CHECK(std::abs(r.accuracy - 0.25) <= 4.0 * std::sqrt(0.25 * 0.75 / n));
}
