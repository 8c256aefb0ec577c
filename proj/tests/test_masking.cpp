#include <algorithm>

#include "doctest.h"
#include "gpsmtm/error.hpp"
#include "gpsmtm/masking.hpp"

using namespace gpsmtm;

namespace {

std::vector<std::uint8_t> bits(std::size_t n, std::initializer_list<std::size_t> set) {
    std::vector<std::uint8_t> v(n, 0);
    for (auto i : set) v[i] = 1;
    return v;
}

MaskPlan reversed(const MaskPlan& p) {
    MaskPlan r = p;
    std::reverse(r.state_mask.begin(), r.state_mask.begin() + static_cast<std::ptrdiff_t>(p.valid_len));
    std::reverse(r.action_mask.begin(), r.action_mask.begin() + static_cast<std::ptrdiff_t>(p.valid_len));
    return r;
}

std::size_t pad_violations(const MaskPlan& p) {
    std::size_t n = 0;
    for (std::size_t i = p.valid_len; i < p.total_len(); ++i) n += p.state_mask[i] + p.action_mask[i];
    return n;
}

}  // namespace

TEST_CASE("task names") {
    CHECK(task_name(TaskKind::Random) == "random");
    CHECK(task_name(TaskKind::ForwardDynamics) == "fd");
    CHECK(task_name(TaskKind::InverseDynamics) == "id");
    CHECK(task_name(TaskKind::Goal) == "goal");
    for (TaskKind k : kEvalTasks) CHECK(parse_task(task_name(k)) == k);
    CHECK_THROWS_AS(parse_task("pretrain"), InvalidConfig);
    CHECK_THROWS_AS(parse_task("FD"), InvalidConfig);
    try {
        parse_task("nope");
    } catch (const InvalidConfig& e) {
        CHECK(std::string(e.what()).find("random, fd, id, goal") != std::string::npos);
    }
}

TEST_CASE("deterministic plan examples") {
    Rng rng(0);
    const auto goal = make_plan(TaskKind::Goal, 8, 10, {}, rng);
    CHECK(goal.state_mask == bits(10, {7}));
    CHECK(goal.action_mask == bits(10, {7}));

    const auto fd = make_plan(TaskKind::ForwardDynamics, 8, 8, {}, rng);
    CHECK(fd.state_mask == bits(8, {4, 5, 6, 7}));
    CHECK(fd.action_mask == bits(8, {4, 5, 6, 7}));

    const auto id = make_plan(TaskKind::InverseDynamics, 7, 9, {}, rng);
    CHECK(id.state_mask == bits(9, {0, 1, 2, 3}));
    CHECK(id.action_mask == bits(9, {0, 1, 2, 3}));

    const auto fd_odd = make_plan(TaskKind::ForwardDynamics, 7, 9, {}, rng);
    CHECK(fd_odd.state_mask == bits(9, {3, 4, 5, 6}));
}

TEST_CASE("plan preconditions") {
    Rng rng(0);
    CHECK_THROWS_AS(make_plan(TaskKind::Goal, 1, 4, {}, rng), TooShort);
    CHECK_THROWS_AS(make_plan(TaskKind::Random, 0, 4, {}, rng), TooShort);
    CHECK_THROWS_AS(make_plan(TaskKind::Goal, 5, 4, {}, rng), InvalidConfig);
    CHECK_THROWS_AS(make_plan(TaskKind::PretrainRandom, 4, 4, MaskParams{0.6, 0.5, 0.3}, rng), InvalidConfig);
}

TEST_CASE("a zero ratio still masks exactly one cell") {
    Rng rng(11);
    const MaskParams zero{0.0, 0.0, 0.0};
    for (int i = 0; i < 200; ++i) {
        const std::size_t n = 2 + rng.below(30);
        CHECK(make_plan(TaskKind::PretrainRandom, n, 32, zero, rng).masked_cells() == 1);
        CHECK(make_plan(TaskKind::Random, n, 32, zero, rng).masked_cells() == 1);
    }
}

TEST_CASE("random plans: ratios, PAD cells and the masking floor") {
    Rng rng(12);
    double pretrain_fraction = 0.0;
    double random_fraction = 0.0;
    const int draws = 4000;
    for (int i = 0; i < draws; ++i) {
        const auto p = make_plan(TaskKind::PretrainRandom, 64, 64, {}, rng);
        pretrain_fraction += static_cast<double>(p.masked_cells()) / 128.0;
        const auto r = make_plan(TaskKind::Random, 64, 64, {}, rng);
        random_fraction += static_cast<double>(r.masked_cells()) / 128.0;

        const std::size_t n = 2 + rng.below(20);
        for (TaskKind k : {TaskKind::PretrainRandom, TaskKind::Random}) {
            const auto q = make_plan(k, n, 24, {}, rng);
            CHECK(pad_violations(q) == 0);
            CHECK(q.masked_cells() >= 1);
        }
    }
    CHECK(pretrain_fraction / draws >= 0.30);
    CHECK(pretrain_fraction / draws <= 0.35);
    CHECK(random_fraction / draws == doctest::Approx(0.3).epsilon(0.02));
}

TEST_CASE("same seed gives the same plans") {
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) CHECK(make_plan(TaskKind::PretrainRandom, 16, 20, {}, a) == make_plan(TaskKind::PretrainRandom, 16, 20, {}, b));
}

TEST_CASE("forward and inverse dynamics mirror each other") {
    Rng rng(0);
    for (std::size_t n = 2; n <= 64; ++n) {
        const auto fd = make_plan(TaskKind::ForwardDynamics, n, 64, {}, rng);
        const auto id = make_plan(TaskKind::InverseDynamics, n, 64, {}, rng);
        CHECK(reversed(fd) == id);
        CHECK(fd.masked_state_cells() == (n + 1) / 2);
        CHECK(fd.state_mask == fd.action_mask);
        CHECK(pad_violations(fd) == 0);
        CHECK(pad_violations(id) == 0);
    }
}

TEST_CASE("observed complement") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const std::size_t n = 2 + rng.below(15);
        const auto kind = static_cast<TaskKind>(rng.below(5));
        const auto p = make_plan(kind, n, 16, {}, rng);
        const auto c = observed_complement(p);
        CHECK(observed_complement(c) == p);
        CHECK(p.masked_cells() + c.masked_cells() == 2 * n);
        CHECK(pad_violations(c) == 0);
        for (std::size_t k = 0; k < n; ++k) {
            CHECK(p.state_mask[k] != c.state_mask[k]);
            CHECK(p.action_mask[k] != c.action_mask[k]);
        }
    }
    const auto goal = make_plan(TaskKind::Goal, 5, 6, {}, rng);
    const auto obs = observed_complement(goal);
    CHECK(obs.state_mask == bits(6, {0, 1, 2, 3}));
    CHECK(obs.action_mask == bits(6, {0, 1, 2, 3}));
}
