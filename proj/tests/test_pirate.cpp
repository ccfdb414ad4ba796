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

#include "harness.hpp"

#include <gtest/gtest.h>

using namespace pirate;
using harness::Scenario;

namespace {

void expect_ring_matches_oracle(const Scenario &s, std::size_t iterations) {
    auto b = harness::build(s);
    auto &sys = *b->system;
    const std::size_t k = s.n / s.c;
    for (std::uint64_t t = 0; t < iterations; ++t) {
        const auto rep = sys.run_iteration(t);
        EXPECT_EQ(rep.handoffs, allreduce::handoffs_per_iteration(k)) << "iteration " << t;
        std::set<Digest> finals;
        for (const auto &[id, d] : rep.final_digests) finals.insert(d);
        EXPECT_EQ(finals.size(), 1u);
        const auto oracle = harness::ring_oracle(sys, s.gradients_per_step, s.aggregator);
        ASSERT_TRUE(rep.final_aggregate);
        for (std::size_t i = 0; i < oracle.dim(); ++i)
            EXPECT_NEAR(rep.final_aggregate->values[i], oracle.values[i], 1e-9);
    }
    EXPECT_TRUE(harness::prefix_consistent(sys));
}

} // namespace

TEST(Ring, SingleCommitteeMatchesOracle) {
    Scenario s;
    s.n = 4;
    s.c = 4;
    expect_ring_matches_oracle(s, 3);
}

TEST(Ring, TwoCommitteesMatchOracle) {
    Scenario s;
    s.n = 8;
    s.c = 4;
    expect_ring_matches_oracle(s, 3);
}

TEST(Ring, FourCommitteesDetectionWeighted) {
    Scenario s;
    s.n = 16;
    s.c = 4;
    s.aggregator = {aggregation::AggregatorKind::DetectionWeighted};
    expect_ring_matches_oracle(s, 2);
}

TEST(Ring, MultiKrumFoldWithWideSteps) {
    Scenario s;
    s.n = 16;
    s.c = 8;
    s.gradients_per_step = 4;
    s.aggregator = {aggregation::AggregatorKind::MultiKrum, 1, 3};
    expect_ring_matches_oracle(s, 2);
}

TEST(Ring, UnevenLastStep) {
    Scenario s;
    s.n = 14;
    s.c = 7;
    s.gradients_per_step = 3;
    expect_ring_matches_oracle(s, 2);
}

TEST(Ring, LeaderBroadcastHandoffAgreesWithMemberRelay) {
    Scenario s;
    s.n = 12;
    s.c = 4;
    auto relay = harness::build(s);
    s.handoff = HandoffMode::LeaderBroadcast;
    auto bcast = harness::build(s);
    for (std::uint64_t t = 0; t < 2; ++t) {
        const auto a = relay->system->run_iteration(t);
        const auto b = bcast->system->run_iteration(t);
        EXPECT_EQ(a.final_digests.begin()->second, b.final_digests.begin()->second);
        EXPECT_EQ(b.handoffs, 4u);
    }
}

TEST(Pirate, AllHonestMeanTracksCentralizedSgd) {
    Scenario s;
    s.n = 8;
    s.c = 4;
    s.gradients_per_step = 1;
    auto b = harness::build(s);
    for (std::uint64_t t = 0; t < 20; ++t) b->system->run_iteration(t);
    std::vector<double> central;
    training::centralized_sgd(b->task, s.n, 20, s.seed, &central);
    const auto &mine = b->system->model_of(0);
    for (std::size_t i = 0; i < central.size(); ++i) EXPECT_NEAR(mine[i], central[i], 1e-9);
}

TEST(Pirate, HonestModelsAgreeAfterEveryIteration) {
    Scenario s;
    s.n = 12;
    s.c = 4;
    auto b = harness::build(s);
    for (std::uint64_t t = 0; t < 3; ++t) {
        b->system->run_iteration(t);
        std::set<Digest> digests;
        for (NodeId id = 0; id < s.n; ++id) digests.insert(b->system->model_digest_of(id));
        EXPECT_EQ(digests.size(), 1u);
    }
}

TEST(Pirate, StorageStaysWithinTwelvePayloads) {
    Scenario s;
    s.n = 8;
    s.c = 8;
    s.gradients_per_step = 1;
    auto b = harness::build(s);
    for (std::uint64_t t = 0; t < 4; ++t) {
        const auto rep = b->system->run_iteration(t);
        EXPECT_LE(rep.max_storage_count, consensus::kRetainedLimit);
        EXPECT_LE(rep.max_storage_bytes, consensus::kRetainedLimit * s.payload_bytes);
    }
}

TEST(Pirate, StepWidthBelowAggregatorMinimumIsAConfigError) {
    Scenario s;
    s.aggregator = {aggregation::AggregatorKind::Krum, 2};
    EXPECT_THROW(harness::build(s), ConfigError);
}

TEST(Pirate, DeterministicFingerprint) {
    Scenario s;
    s.n = 8;
    s.c = 4;
    auto a = harness::build(s);
    auto b = harness::build(s);
    a->system->run_iteration(0);
    b->system->run_iteration(0);
    EXPECT_EQ(a->system->fingerprint(), b->system->fingerprint());
}

class Byzantine : public ::testing::TestWithParam<std::tuple<std::size_t, adversary::StrategyKind>> {};

TEST_P(Byzantine, SafetyAndProgress) {
    const auto [c, kind] = GetParam();
    Scenario s;
    s.n = c;
    s.c = c;
    s.gradients_per_step = 1;
    adversary::Strategy st;
    st.kind = kind;
    for (NodeId id = 0; id < consensus::max_faulty(c); ++id) s.byzantine[id] = st;
    auto b = harness::build(s);
    for (std::uint64_t t = 0; t < 3; ++t) b->system->run_iteration(t);
    EXPECT_TRUE(harness::prefix_consistent(*b->system));
    EXPECT_EQ(harness::falsified_commits(*b->system, s.aggregator), 0u);
    const auto [windows, ok] = harness::liveness_windows(*b->system, 0.0);
    EXPECT_EQ(windows, ok);
}

INSTANTIATE_TEST_SUITE_P(
    Strategies, Byzantine,
    ::testing::Combine(::testing::Values(4, 7, 10),
                       ::testing::Values(adversary::StrategyKind::Withhold, adversary::StrategyKind::EquivocateLeader,
                                         adversary::StrategyKind::FalsifyPartialAggregation,
                                         adversary::StrategyKind::ContaminateModel)));

TEST(Adversary, FalsifyingLeaderIsReported) {
    Scenario s;
    s.n = 4;
    s.c = 4;
    s.gradients_per_step = 1;
    s.byzantine[0] = harness::strategy(adversary::StrategyKind::FalsifyPartialAggregation, 5.0);
    auto b = harness::build(s);
    const auto rep = b->system->run_iteration(0);
    EXPECT_GT(rep.rejected_blocks, 0u);
    bool reported = false;
    for (const auto &m : b->system->log().misbehavior)
        reported |= m.accused == 0 && m.reason == RejectReason::AggregationMismatch;
    EXPECT_TRUE(reported);
}

TEST(Adversary, ContaminatedLeaderProposalsRejectedByDigest) {
    Scenario s;
    s.n = 4;
    s.c = 4;
    s.gradients_per_step = 1;
    s.byzantine[1] = harness::strategy(adversary::StrategyKind::ContaminateModel);
    auto b = harness::build(s);
    b->system->run_iteration(0);
    bool reported = false;
    for (const auto &m : b->system->log().misbehavior)
        reported |= m.accused == 1 && m.reason == RejectReason::ModelDigestMismatch;
    EXPECT_TRUE(reported);
}

TEST(Adversary, WithheldHandoffsRecoveredByFallback) {
    Scenario s;
    s.n = 8;
    s.c = 4;
    auto st = harness::strategy(adversary::StrategyKind::Withhold);
    st.scope = adversary::WithholdScope::Handoffs;
    // one handoff-withholding member per committee
    auto probe = harness::build(s);
    for (const auto &m : probe->assignment.committees) s.byzantine[m[0]] = st;
    auto b = harness::build(s);
    const auto rep = b->system->run_iteration(0);
    EXPECT_EQ(harness::falsified_commits(*b->system, s.aggregator), 0u);
    std::set<Digest> finals;
    for (const auto &[id, d] : rep.final_digests) finals.insert(d);
    EXPECT_EQ(finals.size(), 1u);
}

TEST(Adversary, JitterBeforeGstKeepsSafety) {
    Scenario s;
    s.n = 7;
    s.c = 7;
    s.gradients_per_step = 1;
    s.gst_s = 5.0;
    s.jitter_s = 0.5;
    s.byzantine[2] = harness::strategy(adversary::StrategyKind::EquivocateLeader);
    s.byzantine[5] = harness::strategy(adversary::StrategyKind::EquivocateLeader);
    auto b = harness::build(s);
    for (std::uint64_t t = 0; t < 3; ++t) b->system->run_iteration(t);
    EXPECT_TRUE(harness::prefix_consistent(*b->system));
    EXPECT_EQ(harness::falsified_commits(*b->system, s.aggregator), 0u);
    // windows count once stragglers sent before GST have landed
    const auto [windows, ok] = harness::liveness_windows(*b->system, s.gst_s + s.jitter_s + b->system->view_timeout());
    EXPECT_GT(windows, 0u);
    EXPECT_EQ(windows, ok);
}

TEST(Pacemaker, SmallPayloadTimeoutCoversLatency) {
    Scenario s;
    s.n = 8;
    s.c = 4;
    s.payload_bytes = 20000;
    auto b = harness::build(s);
    EXPECT_GT(b->system->view_timeout(), 4 * 0.010);
    for (std::uint64_t t = 0; t < 2; ++t) EXPECT_EQ(b->system->run_iteration(t).timeouts, 0u);
}
