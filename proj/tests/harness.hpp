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

#pragma once

#include <pirate/pirate.hpp>

#include <algorithm>
#include <map>
#include <memory>
#include <set>
#include <vector>

// Shared fixtures: a small system built directly from modules, plus the
// independent checks the protocol tests and the acceptance binary rely on.
namespace harness {

using namespace pirate;

struct Scenario {
    std::size_t n = 8;
    std::size_t c = 4;
    std::size_t gradients_per_step = 2;
    std::uint64_t payload_bytes = 100000;
    aggregation::AggregatorSpec aggregator{aggregation::AggregatorKind::Mean};
    training::TaskSpec task{};
    std::uint64_t seed = 1;
    std::map<NodeId, adversary::Strategy> byzantine;
    HandoffMode handoff = HandoffMode::MemberRelay;
    double gst_s = 0.0;
    double jitter_s = 0.0;
    double view_timeout_s = 0.0;
    double uplink_min = 80.0;
    double uplink_max = 240.0;
};

struct Built {
    training::LearningTask task;
    sharding::CommitteeAssignment assignment;
    std::vector<NodeSetup> setups;
    std::unique_ptr<PirateSystem> system;
};

inline adversary::Strategy strategy(adversary::StrategyKind kind, double magnitude = 1.0) {
    adversary::Strategy st;
    st.kind = kind;
    st.magnitude = magnitude;
    return st;
}

inline std::unique_ptr<Built> build(const Scenario &s) {
    auto b = std::make_unique<Built>();
    b->task = training::make_task(s.task, s.n, s.seed);
    std::vector<NodeId> ids(s.n);
    for (NodeId i = 0; i < s.n; ++i) ids[i] = i;
    b->assignment = sharding::form_committees(ids, s.c, s.seed);
    for (NodeId id : ids) {
        NodeSetup ns;
        ns.id = id;
        Rng r(derive_seed(s.seed, streams::kUplink, id));
        ns.link = {r.uniform(s.uplink_min, s.uplink_max), 1000.0, 10.0};
        ns.shard = id;
        if (auto it = s.byzantine.find(id); it != s.byzantine.end()) {
            ns.behavior = adversary::Behavior(it->second);
            ns.byzantine = true;
        }
        b->setups.push_back(ns);
    }
    PirateParams p;
    p.gradients_per_step = s.gradients_per_step;
    p.payload_bytes = s.payload_bytes;
    p.aggregator = s.aggregator;
    p.handoff = s.handoff;
    p.gst_s = s.gst_s;
    p.pre_gst_jitter_s = s.jitter_s;
    p.view_timeout_s = s.view_timeout_s;
    p.learning_rate = s.task.learning_rate;
    p.seed = s.seed;
    b->system = std::make_unique<PirateSystem>(p, b->assignment, b->setups, b->task,
                                               std::vector<double>(s.task.dimension, 0.0), 0.0);
    return b;
}

/// Central replay of the ring fold from the submissions the system recorded.
inline aggregation::Gradient ring_oracle(const PirateSystem &sys, std::size_t gradients_per_step,
                                         const aggregation::AggregatorSpec &spec) {
    const auto &a = sys.assignment();
    const auto &subs = sys.submissions();
    std::vector<std::vector<std::vector<aggregation::Gradient>>> sel(a.committee_count());
    for (std::size_t j = 0; j < a.committee_count(); ++j) {
        allreduce::RingSchedule s{a.committee_count(), j, a.c, gradients_per_step};
        for (std::size_t step = 0; step < s.steps_per_visit(); ++step) {
            std::vector<aggregation::Gradient> g;
            for (std::size_t m : s.selection(step)) g.push_back(*subs.at(a.committees[j][m]));
            sel[j].push_back(std::move(g));
        }
    }
    return allreduce::oracle_aggregate(sel, spec);
}

/// Committed sequences of honest replicas in one committee are prefixes of
/// one another.
inline bool prefix_consistent(const PirateSystem &sys) {
    const auto &log = sys.log();
    const auto &a = sys.assignment();
    for (const auto &members : a.committees) {
        const std::vector<Digest> *longest = nullptr;
        for (NodeId id : members) {
            if (sys.is_byzantine(id)) continue;
            auto it = log.committed_chain.find(id);
            if (it == log.committed_chain.end()) continue;
            if (!longest || it->second.size() > longest->size()) longest = &it->second;
        }
        if (!longest) continue;
        for (NodeId id : members) {
            if (sys.is_byzantine(id)) continue;
            auto it = log.committed_chain.find(id);
            if (it == log.committed_chain.end()) continue;
            if (!std::equal(it->second.begin(), it->second.end(), longest->begin())) return false;
        }
    }
    return !sys.conflict_detected();
}

/// Recomputes every committed reduce payload from its own recorded inputs.
/// Returns the number of committed payloads whose component 3 is not the
/// aggregation of its component 2 and component 1.
inline std::size_t falsified_commits(const PirateSystem &sys, const aggregation::AggregatorSpec &spec) {
    std::size_t bad = 0;
    for (const auto &[hash, block] : sys.log().committed_blocks) {
        if (block->empty()) continue;
        const auto &p = *block->payload;
        if (p.verbatim) {
            if (!p.component2 || p.component3->values != p.component2->values) ++bad;
            continue;
        }
        const auto inputs = allreduce::step_inputs(p.component2, p.component1);
        const auto expect = aggregation::aggregate(spec, inputs, true).gradient;
        for (std::size_t i = 0; i < expect.dim(); ++i)
            if (std::fabs(expect.values[i] - p.component3->values[i]) > 1e-9) {
                ++bad;
                break;
            }
    }
    return bad;
}

/// Honest-leader windows after `gst`: a view led by an honest replica whose
/// proposal becomes committed by the time three further views have been
/// proposed. Returns {windows, satisfied}.
inline std::pair<std::size_t, std::size_t> liveness_windows(const PirateSystem &sys, double gst) {
    const auto &log = sys.log();
    std::map<std::pair<std::uint32_t, std::uint64_t>, const ProposalRecord *> by_view;
    for (const auto &p : log.proposals) by_view.emplace(std::make_pair(p.committee, p.view), &p);
    std::map<Digest, std::uint64_t> committed_at; // hash -> earliest trigger view (honest)
    for (const auto &c : log.commits) {
        if (sys.is_byzantine(c.node)) continue;
        auto it = committed_at.find(c.hash);
        if (it == committed_at.end() || c.trigger_view < it->second) committed_at[c.hash] = c.trigger_view;
    }
    std::size_t windows = 0, ok = 0;
    for (const auto &[key, p] : by_view) {
        if (p->time < gst || sys.is_byzantine(p->proposer)) continue;
        // window: this view and the next three are all led by honest replicas
        bool honest_run = true;
        for (std::uint64_t v = key.second + 1; v <= key.second + 3; ++v) {
            auto it = by_view.find({key.first, v});
            if (it == by_view.end() || sys.is_byzantine(it->second->proposer)) {
                honest_run = false;
                break;
            }
        }
        if (!honest_run) continue;
        ++windows;
        auto it = committed_at.find(p->hash);
        if (it != committed_at.end() && it->second <= key.second + 3) ++ok;
    }
    return {windows, ok};
}

} // namespace harness
