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
#include <pirate/core.hpp>

#include <optional>
#include <string>
#include <vector>

namespace pirate::adversary {

using aggregation::Gradient;

enum class StrategyKind {
    None,
    HarmfulGradient,
    OmniscientCraft,
    FalsifyPartialAggregation,
    Withhold,
    EquivocateLeader,
    ContaminateModel,
};

enum class WithholdScope { All, Votes, Proposals, Handoffs };

inline std::string to_string(StrategyKind k) {
    switch (k) {
    case StrategyKind::None: return "none";
    case StrategyKind::HarmfulGradient: return "harmful-gradient";
    case StrategyKind::OmniscientCraft: return "omniscient-craft";
    case StrategyKind::FalsifyPartialAggregation: return "falsify-partial-aggregation";
    case StrategyKind::Withhold: return "withhold";
    case StrategyKind::EquivocateLeader: return "equivocate-leader";
    case StrategyKind::ContaminateModel: return "contaminate-model";
    }
    return "?";
}

inline std::optional<StrategyKind> strategy_from_string(std::string_view s) {
    for (auto k : {StrategyKind::None, StrategyKind::HarmfulGradient, StrategyKind::OmniscientCraft,
                   StrategyKind::FalsifyPartialAggregation, StrategyKind::Withhold,
                   StrategyKind::EquivocateLeader, StrategyKind::ContaminateModel})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

inline std::string to_string(WithholdScope s) {
    switch (s) {
    case WithholdScope::All: return "all";
    case WithholdScope::Votes: return "votes";
    case WithholdScope::Proposals: return "proposals";
    case WithholdScope::Handoffs: return "handoffs";
    }
    return "?";
}

inline std::optional<WithholdScope> scope_from_string(std::string_view s) {
    for (auto k : {WithholdScope::All, WithholdScope::Votes, WithholdScope::Proposals,
                   WithholdScope::Handoffs})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

struct Strategy {
    StrategyKind kind = StrategyKind::None;
    double magnitude = 1.0;
    double noise = 0.0; // std-dev of the seeded noise added to crafted values
    WithholdScope scope = WithholdScope::All;
    std::optional<std::vector<double>> target; // omniscient target parameters

    void validate() const {
        if (!std::isfinite(magnitude)) throw ConfigError("adversary.magnitude must be finite");
        if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("adversary.noise must be >= 0");
        if (target)
            for (double v : *target)
                if (!std::isfinite(v)) throw ConfigError("adversary.target must be finite");
    }
};

/// What the harness grants an omniscient attacker for one iteration.
struct OmniscientView {
    std::vector<double> others_sum; // sum of every non-colluding submission
    std::size_t total = 0;          // number of submissions in the flat aggregate
    std::size_t colluders = 1;
    std::vector<double> target_mean; // mean the colluders want the aggregate to hit
};

/// Aggregate mean that moves `params` onto `target` in one step of size lr.
inline std::vector<double> steering_mean(std::span<const double> params,
                                         std::span<const double> target, double lr) {
    if (!(lr > 0.0)) throw PreconditionError("steering requires a positive learning rate");
    std::vector<double> out(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) out[i] = (params[i] - target[i]) / lr;
    return out;
}

struct Corruption {
    Gradient gradient;
    bool fell_back = false; // omniscient craft lacked visibility
};

inline Corruption corrupt_gradient(const Gradient &honest, const Strategy &s, Rng &rng,
                                   const std::optional<OmniscientView> &view = std::nullopt) {
    Corruption out;
    out.gradient = honest;
    switch (s.kind) {
    case StrategyKind::OmniscientCraft:
        if (view && view->colluders > 0 && view->others_sum.size() == honest.dim() &&
            view->target_mean.size() == honest.dim()) {
            const double total = static_cast<double>(view->total);
            const double k = static_cast<double>(view->colluders);
            for (std::size_t i = 0; i < honest.dim(); ++i)
                out.gradient.values[i] = (total * view->target_mean[i] - view->others_sum[i]) / k;
            if (s.noise > 0)
                for (auto &v : out.gradient.values) v += s.noise * rng.normal();
            return out;
        }
        out.fell_back = true;
        [[fallthrough]];
    case StrategyKind::HarmfulGradient:
        for (auto &v : out.gradient.values) v = -s.magnitude * v;
        if (s.noise > 0)
            for (auto &v : out.gradient.values) v += s.noise * rng.normal();
        return out;
    default:
        return out;
    }
}

/// Replacement partial aggregation used by a falsifying leader.
inline Gradient falsify(const Gradient &honest, const Strategy &s) {
    Gradient g = honest;
    const double shift = s.magnitude == 0.0 ? 1.0 : s.magnitude;
    for (auto &v : g.values) v += shift;
    return g;
}

/// Persistent parameter offset planted in a compromised node.
inline std::vector<double> contamination(std::size_t d, const Strategy &s, Rng &rng) {
    std::vector<double> offset(d);
    for (auto &v : offset) v = s.magnitude * rng.normal();
    return offset;
}

/// Protocol-facing view of a node's behavior. Honest nodes get the default.
class Behavior {
  public:
    Behavior() = default;
    explicit Behavior(Strategy s) : s_(std::move(s)) {}

    const Strategy &strategy() const { return s_; }

    bool withholds_votes() const { return withholds(WithholdScope::Votes); }
    bool withholds_proposals() const { return withholds(WithholdScope::Proposals); }
    bool withholds_handoffs() const { return withholds(WithholdScope::Handoffs); }
    bool equivocates() const { return s_.kind == StrategyKind::EquivocateLeader; }
    bool falsifies() const { return s_.kind == StrategyKind::FalsifyPartialAggregation; }
    bool votes_blindly() const { return equivocates(); }
    bool corrupts_gradient() const {
        return s_.kind == StrategyKind::HarmfulGradient || s_.kind == StrategyKind::OmniscientCraft;
    }
    bool contaminated() const { return s_.kind == StrategyKind::ContaminateModel; }

  private:
    bool withholds(WithholdScope scope) const {
        return s_.kind == StrategyKind::Withhold && (s_.scope == WithholdScope::All || s_.scope == scope);
    }
    Strategy s_;
};

} // namespace pirate::adversary
