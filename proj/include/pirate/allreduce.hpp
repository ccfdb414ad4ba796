/**
 * Copyright 2026 The pirate-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <pirate/aggregation.hpp>
#include <pirate/consensus.hpp>

#include <optional>
#include <vector>

/*
 * Committee ring. One running aggregate travels 0 -> 1 -> ... -> K-1 while
 * each committee folds its local selections into it (reduce); the final value
 * then travels K-1 -> 0 -> ... -> K-2 and is committed verbatim by each
 * committee it reaches (gather). Both legs cost K-1 handoffs.
 */
namespace pirate::allreduce {

using aggregation::Gradient;
using aggregation::GradientPtr;
using consensus::InputSource;
using consensus::Phase;
using consensus::QuorumCertificate;
using consensus::StepKey;

constexpr std::size_t handoffs_per_iteration(std::size_t committees) {
    return committees == 0 ? 0 : 2 * (committees - 1);
}

/// Default component-1 width: c^2 / n rounded, at least one.
inline std::size_t default_gradients_per_step(std::size_t n, std::size_t c) {
    const double r = static_cast<double>(c) * static_cast<double>(c) / static_cast<double>(n);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(r)));
}

/// The per-iteration step plan of one committee.
struct RingSchedule {
    std::size_t committees = 1;
    std::size_t committee = 0;
    std::size_t c = 1;
    std::size_t gradients_per_step = 1;

    std::size_t steps_per_visit() const { return (c + gradients_per_step - 1) / gradients_per_step; }

    std::size_t predecessor() const { return (committee + committees - 1) % committees; }
    std::size_t successor() const { return (committee + 1) % committees; }

    bool needs_reduce_token() const { return committees > 1 && committee > 0; }
    bool needs_gather_token() const { return committees > 1 && committee + 1 != committees; }

    /// Member indices selected at reduce step `step` (round robin).
    std::vector<std::size_t> selection(std::size_t step) const {
        std::vector<std::size_t> out;
        for (std::size_t i = step * gradients_per_step; i < std::min(c, (step + 1) * gradients_per_step); ++i)
            out.push_back(i);
        return out;
    }

    StepKey first(std::uint64_t iteration) const {
        return {iteration, static_cast<std::uint32_t>(committee), 0, Phase::Reduce,
                steps_per_visit() == 1};
    }

    /// Step following `cursor` in `iteration`, or nullopt when the committee
    /// has nothing left to commit this iteration.
    std::optional<StepKey> next(const std::optional<StepKey> &cursor, std::uint64_t iteration) const {
        if (!cursor || cursor->iteration < iteration) return first(iteration);
        if (cursor->iteration > iteration) return std::nullopt;
        if (cursor->phase == Phase::Gather) return std::nullopt;
        if (!cursor->final_in_visit) {
            const std::uint32_t s = cursor->step + 1;
            return StepKey{iteration, cursor->ring_step, s, Phase::Reduce, s + 1 == steps_per_visit()};
        }
        if (needs_gather_token())
            return StepKey{iteration, static_cast<std::uint32_t>(committees + committee), 0,
                           Phase::Gather, true};
        return std::nullopt;
    }

    InputSource component2_source(const StepKey &k) const {
        if (k.phase == Phase::Gather) return InputSource::Neighbor;
        if (k.step == 0) return committee == 0 ? InputSource::None : InputSource::Neighbor;
        return InputSource::Parent;
    }

    /// Committing `k` yields the iteration's final aggregate.
    bool yields_final(const StepKey &k) const {
        if (k.phase == Phase::Gather) return true;
        return k.final_in_visit && committee + 1 == committees;
    }

    /// Token phase sent to the successor after committing `k`, if any.
    std::optional<Phase> handoff_after(const StepKey &k) const {
        if (committees < 2 || !k.final_in_visit) return std::nullopt;
        if (k.phase == Phase::Reduce) return committee + 1 == committees ? Phase::Gather : Phase::Reduce;
        if (committee + 2 == committees) return std::nullopt; // last gather receiver
        return Phase::Gather;
    }
};

/// Aggregator inputs of one step: component 2 first, then the selection.
inline std::vector<Gradient> step_inputs(const GradientPtr &component2,
                                         const std::vector<GradientPtr> &component1) {
    std::vector<Gradient> out;
    out.reserve(component1.size() + 1);
    if (component2) out.push_back(*component2);
    for (const auto &g : component1) out.push_back(*g);
    return out;
}

/// Certified value passed between neighbor committees.
struct Token {
    std::uint64_t iteration = 0;
    Phase phase = Phase::Reduce;
    std::uint32_t from_committee = 0;
    GradientPtr value;
    Digest value_digest{};
    QuorumCertificate qc;

    std::size_t wire_bytes() const { return value->payload_bytes + qc.wire_bytes(); }
};

inline bool verify_token(const Token &t, std::span<const NodeId> source_members) {
    if (!t.value) return false;
    if (t.qc.committee != t.from_committee) return false;
    if (t.qc.output_digest != t.value_digest) return false;
    if (t.value->digest() != t.value_digest) return false;
    return consensus::verify_qc(t.qc, source_members, consensus::quorum(source_members.size()));
}

/// Central replay of the reduce fold: selections[committee][step] in ring
/// order, aggregated with the same input convention as the protocol.
inline Gradient oracle_aggregate(const std::vector<std::vector<std::vector<Gradient>>> &selections,
                                 const aggregation::AggregatorSpec &spec) {
    std::optional<Gradient> acc;
    for (const auto &committee : selections)
        for (const auto &step : committee) {
            std::vector<Gradient> inputs;
            if (acc) inputs.push_back(*acc);
            inputs.insert(inputs.end(), step.begin(), step.end());
            acc = aggregation::aggregate(spec, inputs, true).gradient;
        }
    if (!acc) throw PreconditionError("oracle: no selections");
    return *acc;
}

} // namespace pirate::allreduce
