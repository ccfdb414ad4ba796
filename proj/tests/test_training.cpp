// Copyright 2026 The pirate-sim Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pirate/adversary.hpp>
#include <pirate/aggregation.hpp>
#include <pirate/training.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace pirate;
using namespace pirate::training;

namespace {

double batch_loss(const LearningTask &t, std::span<const double> w, std::span<const Sample> data,
                  std::span<const std::size_t> batch) {
    double s = 0.0;
    for (std::size_t i : batch) s += sample_loss(t.spec.kind, w, data[i]);
    return s / static_cast<double>(batch.size());
}

// Flat synchronous SGD where the first `byz` nodes submit harmful gradients.
double flat_run(const LearningTask &task, std::size_t n, std::size_t byz, aggregation::AggregatorSpec spec,
                std::size_t iterations) {
    ModelState m = ModelState::initial(task.dimension());
    adversary::Strategy st;
    st.kind = adversary::StrategyKind::HarmfulGradient;
    st.magnitude = 5.0;
    Rng rng(1);
    for (std::size_t t = 0; t < iterations; ++t) {
        std::vector<aggregation::Gradient> gs;
        for (std::size_t node = 0; node < n; ++node) {
            auto g = local_gradient(task, m.params, node, t, 3, 1);
            if (node < byz) g = adversary::corrupt_gradient(g, st, rng).gradient;
            gs.push_back(g);
        }
        apply_update(m, aggregation::aggregate(spec, gs).gradient, task.spec.learning_rate);
    }
    return task.global_loss(m.params);
}

} // namespace

TEST(Gradient, ZeroAtTheOptimum) {
    TaskSpec spec;
    spec.noise = 0.0;
    const auto task = make_task(spec, 2, 5);
    const auto g = local_gradient(task, task.true_params, 0, 0, 5, 1);
    for (double v : g.values) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Gradient, SinglePointByHand) {
    std::vector<Sample> data{{{1.0}, 0.0}};
    const std::vector<std::size_t> batch{0};
    const std::vector<double> w{1.0};
    EXPECT_DOUBLE_EQ(batch_gradient(TaskKind::LeastSquares, w, data, batch)[0], 1.0);
    EXPECT_DOUBLE_EQ(sample_loss(TaskKind::LeastSquares, w, data[0]), 0.5);
}

class FiniteDifference : public ::testing::TestWithParam<TaskKind> {};

TEST_P(FiniteDifference, AgreesWithCentralDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        TaskSpec spec;
        spec.kind = GetParam();
        spec.dimension = 6;
        const auto task = make_task(spec, 3, seed);
        Rng r(seed);
        std::vector<double> w(spec.dimension);
        for (auto &v : w) v = r.uniform(-1, 1);
        const auto batch = batch_indices(task.shards[1].size(), spec.batch_size, seed, 1, 0);
        const auto g = batch_gradient(spec.kind, w, task.shards[1], batch);
        const double h = 1e-6;
        for (std::size_t k = 0; k < w.size(); ++k) {
            auto up = w, down = w;
            up[k] += h;
            down[k] -= h;
            const double fd = (batch_loss(task, up, task.shards[1], batch) - batch_loss(task, down, task.shards[1], batch)) / (2 * h);
            EXPECT_NEAR(g[k], fd, 1e-5 * std::max(1.0, std::fabs(fd))) << "seed " << seed << " coord " << k;
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Tasks, FiniteDifference, ::testing::Values(TaskKind::LeastSquares, TaskKind::Logistic));

TEST(Batches, DeterministicDistinctInRange) {
    const auto a = batch_indices(64, 16, 9, 3, 7);
    EXPECT_EQ(a, batch_indices(64, 16, 9, 3, 7));
    EXPECT_NE(a, batch_indices(64, 16, 9, 3, 8));
    std::set<std::size_t> s(a.begin(), a.end());
    EXPECT_EQ(s.size(), 16u);
    EXPECT_LT(*s.rbegin(), 64u);
    EXPECT_EQ(batch_indices(5, 16, 1, 0, 0).size(), 5u);
    EXPECT_THROW(batch_indices(0, 4, 1, 0, 0), PreconditionError);
}

TEST(Task, ShardsAndValidation) {
    TaskSpec spec;
    const auto t = make_task(spec, 4, 2);
    EXPECT_EQ(t.shards.size(), 4u);
    for (const auto &sh : t.shards) EXPECT_EQ(sh.size(), spec.samples_per_node);
    EXPECT_EQ(t.holdout.size(), spec.holdout);
    spec.dimension = 0;
    EXPECT_THROW(make_task(spec, 4, 2), ConfigError);
}

TEST(Task, NonIidShardsAreLabelSorted) {
    TaskSpec spec;
    spec.kind = TaskKind::Logistic;
    spec.sharding = ShardingMode::NonIidByLabel;
    const auto t = make_task(spec, 4, 2);
    EXPECT_LE(t.shards.front().back().y, t.shards.back().front().y);
}

TEST(Update, Examples) {
    auto m = ModelState::initial(3);
    const auto d0 = m.digest;
    aggregation::Gradient zero;
    zero.values = {0, 0, 0};
    EXPECT_TRUE(apply_update(m, zero, 0.1).applied);
    EXPECT_EQ(m.digest, d0);
    EXPECT_EQ(m.iteration, 1u);
    aggregation::Gradient g;
    g.values = {1, 2, 3};
    apply_update(m, g, 0.0);
    EXPECT_EQ(m.params, (std::vector<double>{0, 0, 0}));
    apply_update(m, g, 0.5);
    EXPECT_EQ(m.params, (std::vector<double>{-0.5, -1, -1.5}));
    auto twin = ModelState::initial(3);
    apply_update(twin, zero, 0.1);
    apply_update(twin, g, 0.0);
    apply_update(twin, g, 0.5);
    EXPECT_EQ(twin.digest, m.digest);
}

TEST(Update, NonFiniteAggregateSkipped) {
    auto m = ModelState::initial(2);
    aggregation::Gradient bad;
    bad.values = {1.0, std::nan("")};
    EXPECT_FALSE(apply_update(m, bad, 0.1).applied);
    EXPECT_EQ(m.params, (std::vector<double>{0, 0}));
    bad.values = {1.0};
    EXPECT_THROW(apply_update(m, bad, 0.1), PreconditionError);
}

TEST(Convergence, CentralizedSgdReducesLoss) {
    const auto task = make_task({}, 8, 4);
    const double start = task.global_loss(std::vector<double>(task.dimension(), 0.0));
    const auto losses = centralized_sgd(task, 8, 200, 4);
    EXPECT_LT(losses.back(), 0.05 * start);
    EXPECT_TRUE(centralized_sgd(task, 8, 0, 4).empty());
}

TEST(Convergence, HarmfulMinorityBreaksMeanNotMultiKrum) {
    const std::size_t n = 12, byz = 4, iters = 150;
    const auto task = make_task({}, n, 3);
    const double honest = flat_run(task, n, 0, {aggregation::AggregatorKind::Mean}, iters);
    const double krum = flat_run(task, n, byz, {aggregation::AggregatorKind::MultiKrum, byz, n - 2 * byz}, iters);
    const double mean = flat_run(task, n, byz, {aggregation::AggregatorKind::Mean}, iters);
    RecordProperty("honest", std::to_string(honest));
    RecordProperty("multi_krum", std::to_string(krum));
    RecordProperty("mean", std::to_string(mean));
    EXPECT_LT(krum, 2.0 * honest);
    EXPECT_GE(mean, 10.0 * honest);
}
