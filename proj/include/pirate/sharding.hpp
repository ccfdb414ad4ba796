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

#include <pirate/core.hpp>
#include <pirate/netsim.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace pirate::sharding {

struct NodeProfile {
    NodeId id = kNoNode;
    double compute_score = 1.0;
    netsim::LinkProfile link;
    std::uint64_t join_epoch = 0;
    std::vector<std::pair<std::uint64_t, double>> credit_history;
};

struct AdmissionPolicy {
    double compute_weight = 0.4;
    double uplink_weight = 0.3;
    double credit_weight = 0.3;
    double threshold = 0.5;
    double uplink_floor_mbps = 80.0; // maps to 0
    double uplink_ceiling_mbps = 240.0; // maps to 1
    double initial_credit = 0.5; // used when a profile has no history yet
    std::size_t credit_window = 3;
    double credit_floor = 0.2;
};

struct Assessment {
    bool admit = false;
    double reliability = 0.0;
};

inline double normalized_uplink(double mbps, const AdmissionPolicy &p) {
    if (p.uplink_ceiling_mbps <= p.uplink_floor_mbps) return 1.0;
    return std::clamp((mbps - p.uplink_floor_mbps) / (p.uplink_ceiling_mbps - p.uplink_floor_mbps),
                      0.0, 1.0);
}

/// Mean of the last `window` credit entries, or nullopt without history.
inline std::optional<double> recent_credit(const NodeProfile &p, std::size_t window) {
    if (p.credit_history.empty() || window == 0) return std::nullopt;
    const std::size_t k = std::min(window, p.credit_history.size());
    double s = 0.0;
    for (std::size_t i = p.credit_history.size() - k; i < p.credit_history.size(); ++i)
        s += p.credit_history[i].second;
    return s / static_cast<double>(k);
}

inline Assessment assess(const NodeProfile &profile, const AdmissionPolicy &policy = {}) {
    const double credit = recent_credit(profile, policy.credit_window).value_or(policy.initial_credit);
    Assessment a;
    a.reliability = policy.compute_weight * std::clamp(profile.compute_score, 0.0, 1.0) +
                    policy.uplink_weight * normalized_uplink(profile.link.uplink_mbps, policy) +
                    policy.credit_weight * credit;
    // Round away representation noise so exact-threshold profiles are admitted.
    a.admit = a.reliability + 1e-12 >= policy.threshold;
    return a;
}

/* ------------------------------------------------------------ committees */

struct CommitteeAssignment {
    std::vector<std::vector<NodeId>> committees; // ring order
    std::size_t c = 0;

    std::size_t committee_count() const { return committees.size(); }

    std::size_t size() const {
        std::size_t s = 0;
        for (const auto &m : committees) s += m.size();
        return s;
    }

    std::optional<std::size_t> committee_of(NodeId id) const {
        for (std::size_t j = 0; j < committees.size(); ++j)
            if (std::find(committees[j].begin(), committees[j].end(), id) != committees[j].end())
                return j;
        return std::nullopt;
    }

    std::vector<NodeId> members() const {
        std::vector<NodeId> out;
        for (const auto &m : committees) out.insert(out.end(), m.begin(), m.end());
        return out;
    }

    /// Disjointness plus exact size c for every committee.
    bool valid() const {
        if (c == 0 || committees.empty()) return false;
        std::set<NodeId> seen;
        for (const auto &m : committees) {
            if (m.size() != c) return false;
            for (NodeId id : m)
                if (!seen.insert(id).second) return false;
        }
        return true;
    }
};

inline void check_divisible(std::size_t n, std::size_t c) {
    if (c == 0) throw ConfigError("committee size c must be >= 1");
    if (n == 0 || n % c != 0)
        throw ConfigError("n (" + std::to_string(n) + ") must be a positive multiple of c (" +
                          std::to_string(c) + ")");
}

/// Seeded uniform shuffle, then consecutive blocks of c form the ring.
inline CommitteeAssignment form_committees(std::vector<NodeId> nodes, std::size_t c,
                                           std::uint64_t seed) {
    check_divisible(nodes.size(), c);
    Rng rng(derive_seed(seed, streams::kCommittee));
    rng.shuffle(nodes);
    CommitteeAssignment a;
    a.c = c;
    for (std::size_t i = 0; i < nodes.size(); i += c)
        a.committees.emplace_back(nodes.begin() + static_cast<std::ptrdiff_t>(i),
                                  nodes.begin() + static_cast<std::ptrdiff_t>(i + c));
    return a;
}

/// Removes a departing node, leaving one vacancy.
inline void depart(CommitteeAssignment &a, NodeId id) {
    for (auto &m : a.committees) {
        auto it = std::find(m.begin(), m.end(), id);
        if (it != m.end()) {
            m.erase(it);
            return;
        }
    }
    throw PreconditionError("depart: node " + std::to_string(id) + " is not assigned");
}

struct CuckooMove {
    NodeId node;
    std::size_t from;
    std::size_t to;
};

/// Bounded cuckoo join. The assignment must hold exactly one vacancy.
inline CommitteeAssignment cuckoo_reassign(CommitteeAssignment a, NodeId joining,
                                           std::size_t k_evict, Rng &rng,
                                           std::vector<CuckooMove> *moves = nullptr) {
    const std::size_t k = a.committee_count();
    if (k == 0) throw PreconditionError("cuckoo: empty assignment");
    if (a.size() + 1 != k * a.c) throw PreconditionError("cuckoo: expected exactly one vacancy");
    if (a.committee_of(joining)) throw PreconditionError("cuckoo: joining node already assigned");

    const std::size_t home = rng.index(k);
    auto &target = a.committees[home];
    const std::size_t evict = k > 1 ? std::min(k_evict, target.size()) : 0;
    for (std::size_t e = 0; e < evict; ++e) {
        const std::size_t pick = rng.index(target.size());
        const NodeId moved = target[pick];
        target.erase(target.begin() + static_cast<std::ptrdiff_t>(pick));
        std::size_t dest = rng.index(k - 1);
        if (dest >= home) ++dest;
        a.committees[dest].push_back(moved);
        if (moves) moves->push_back({moved, home, dest});
    }
    target.push_back(joining);

    for (;;) {
        std::size_t over = k, under = k;
        for (std::size_t j = 0; j < k; ++j) {
            if (over == k && a.committees[j].size() > a.c) over = j;
            if (under == k && a.committees[j].size() < a.c) under = j;
        }
        if (over == k) break;
        auto &src = a.committees[over];
        const std::size_t pick = rng.index(src.size());
        const NodeId moved = src[pick];
        src.erase(src.begin() + static_cast<std::ptrdiff_t>(pick));
        a.committees[under].push_back(moved);
        if (moves) moves->push_back({moved, over, under});
    }
    return a;
}

inline CommitteeAssignment cuckoo_reassign(const CommitteeAssignment &a, NodeId joining,
                                           std::size_t k_evict, std::uint64_t seed) {
    Rng rng(derive_seed(seed, streams::kCuckoo, joining));
    return cuckoo_reassign(a, joining, k_evict, rng);
}

/* ---------------------------------------------------------------- credit */

struct CreditRecords {
    std::map<NodeId, NodeProfile> profiles;
    std::vector<std::string> warnings;
};

/// Appends one credit entry per node: the mean of the weights its gradients
/// received in committed aggregations this epoch.
inline void update_credit(CreditRecords &records,
                          const std::vector<std::pair<NodeId, double>> &weights,
                          std::uint64_t epoch) {
    std::map<NodeId, std::pair<double, std::size_t>> acc;
    for (const auto &[id, w] : weights) {
        if (!records.profiles.count(id)) {
            records.warnings.push_back("credit for unknown node " + std::to_string(id) + " ignored");
            continue;
        }
        auto &slot = acc[id];
        slot.first += w;
        ++slot.second;
    }
    for (const auto &[id, s] : acc)
        records.profiles[id].credit_history.emplace_back(epoch, s.first / static_cast<double>(s.second));
}

inline std::vector<NodeId> evict_low_credit(const CreditRecords &records,
                                            const AdmissionPolicy &policy = {}) {
    std::vector<NodeId> out;
    for (const auto &[id, p] : records.profiles) {
        const auto mean = recent_credit(p, policy.credit_window);
        if (mean && *mean < policy.credit_floor) out.push_back(id);
    }
    return out;
}

/* ------------------------------------------------------ churn experiment */

struct ChurnConfig {
    std::size_t n = 800;
    std::size_t c = 200;
    double byzantine_fraction = 0.25;
    double churn_fraction = 0.20;
    std::size_t epochs = 50;
    std::size_t k_evict = 1;
};

struct ChurnStats {
    std::size_t samples = 0;
    std::size_t safe_samples = 0; // byzantine fraction < 1/3
    double rate() const { return samples ? static_cast<double>(safe_samples) / samples : 0.0; }
};

/// Epochs of join/leave churn under the cuckoo rule. Leavers are uniform over
/// active nodes; joiners are byzantine with the configured probability.
inline ChurnStats churn_simulation(const ChurnConfig &cfg, std::uint64_t seed) {
    check_divisible(cfg.n, cfg.c);
    if (cfg.n / cfg.c < 2) throw ConfigError("churn needs at least two committees");
    Rng rng(derive_seed(seed, streams::kCuckoo));
    std::vector<char> byz;
    std::vector<NodeId> ids(cfg.n);
    for (NodeId i = 0; i < cfg.n; ++i) ids[i] = i;
    byz.assign(cfg.n, 0);
    {
        std::vector<NodeId> order = ids;
        rng.shuffle(order);
        const auto nb = static_cast<std::size_t>(std::llround(cfg.byzantine_fraction * cfg.n));
        for (std::size_t i = 0; i < nb; ++i) byz[order[i]] = 1;
    }
    CommitteeAssignment a = form_committees(ids, cfg.c, seed);
    const auto per_epoch = static_cast<std::size_t>(std::llround(cfg.churn_fraction * cfg.n));

    ChurnStats stats;
    NodeId next = static_cast<NodeId>(cfg.n);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t m = 0; m < per_epoch; ++m) {
            const std::size_t j = rng.index(a.committee_count());
            auto &members = a.committees[j];
            const std::size_t pick = rng.index(members.size());
            members.erase(members.begin() + static_cast<std::ptrdiff_t>(pick));
            const NodeId joining = next++;
            byz.push_back(rng.uniform01() < cfg.byzantine_fraction ? 1 : 0);
            a = cuckoo_reassign(std::move(a), joining, cfg.k_evict, rng);
        }
        for (const auto &members : a.committees) {
            std::size_t bad = 0;
            for (NodeId id : members) bad += byz[id];
            ++stats.samples;
            if (3 * bad < members.size()) ++stats.safe_samples;
        }
    }
    return stats;
}

} // namespace pirate::sharding
