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

#include <pirate/pirate.hpp>

#include <cmath>
#include <map>
#include <memory>
#include <variant>
#include <vector>

// LearningChain comparator: all-to-all gradient broadcast, a lottery leader
// acting as parameter server, and full history kept by every node.
namespace pirate::baseline {

inline std::size_t default_l(std::size_t n) {
    return static_cast<std::size_t>(std::ceil(0.7 * static_cast<double>(n) - 1e-9));
}

struct BaselineParams {
    std::size_t l = 0; // 0 selects default_l(n)
    std::uint64_t payload_bytes = megabytes(28);
    double mining_delay_s = 0.0;
    double learning_rate = 0.05;
    std::size_t liveness_horizon_s = 1000000;
    std::uint64_t seed = 0;
};

/// Leader of iteration t: uniform over node positions.
inline std::size_t lottery_winner(std::uint64_t seed, std::uint64_t iteration, std::size_t n) {
    Rng r(derive_seed(seed, streams::kLottery, iteration));
    return r.index(n);
}

/// History bytes held by every node after `iterations` completed iterations.
constexpr std::uint64_t history_bytes(std::size_t n, std::uint64_t payload, std::uint64_t iterations) {
    return iterations * (n + 1) * payload;
}

class LearningChainSystem {
  public:
    struct GradientMsg {
        std::uint64_t iteration;
        GradientPtr gradient;
    };
    struct BlockMsg {
        std::uint64_t iteration;
        GradientPtr aggregate;
        std::vector<NodeId> selected;
    };
    struct MineDone {
        std::uint64_t iteration;
    };
    using Body = std::variant<GradientMsg, BlockMsg, MineDone>;
    using Message = std::shared_ptr<const Body>;
    using Sim = netsim::Simulator<Message>;

    LearningChainSystem(BaselineParams params, const std::vector<NodeSetup> &setups,
                        const training::LearningTask &task, std::vector<double> initial_params,
                        double start_time)
        : params_(params), task_(task) {
        if (setups.empty()) throw ConfigError("learningchain needs at least one node");
        if (params_.l == 0) params_.l = default_l(setups.size());
        if (params_.l > setups.size()) throw ConfigError("baseline.l must be <= n");
        if (!(params_.mining_delay_s >= 0.0)) throw ConfigError("baseline.mining_delay_s must be >= 0");
        for (const auto &s : setups) {
            auto node = std::make_unique<Node>();
            node->id = s.id;
            node->behavior = s.behavior;
            node->byzantine = s.byzantine;
            node->shard = s.shard;
            node->model.params = initial_params;
            node->model.digest = training::ModelState::digest_of(initial_params);
            node->noise = std::make_unique<Rng>(derive_seed(params_.seed, streams::kAdversary, s.id));
            sim_.add_node(s.id, s.link);
            ids_.push_back(s.id);
            index_[s.id] = nodes_.size();
            nodes_.push_back(std::move(node));
        }
        for (auto &n : nodes_) {
            Node *raw = n.get();
            sim_.set_handler(raw->id, [this, raw](const Sim::Event &ev) { dispatch(*raw, ev); });
        }
        sim_.set_start_time(start_time);
        last_probe_ = start_time;
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (!nodes_[i]->byzantine) {
                probe_ = i;
                break;
            }
    }

    std::size_t l() const { return params_.l; }
    double now() const { return sim_.now(); }
    std::uint64_t fingerprint() const { return sim_.fingerprint(); }
    const std::vector<NodeId> &leaders() const { return leaders_; }
    const std::vector<double> &model_of(NodeId id) const { return nodes_[index_.at(id)]->model.params; }
    std::uint64_t storage_bytes(NodeId id) const { return nodes_[index_.at(id)]->history_bytes; }
    const std::map<NodeId, GradientPtr> &submissions() const { return submissions_; }

    IterationReport run_iteration(std::uint64_t iteration) {
        IterationReport rep;
        rep.iteration = iteration;
        rep.start = sim_.now();
        iteration_ = iteration;
        const std::size_t n = nodes_.size();
        leader_ = lottery_winner(params_.seed, iteration, n);
        leaders_.push_back(ids_[leader_]);

        std::vector<Submitter> who;
        for (auto &nd : nodes_)
            who.push_back({nd->id, nd->shard, &nd->behavior, nd->model.params, &nd->model.params, nd->noise.get()});
        submissions_ = craft_submissions(task_, who, iteration, params_.seed, params_.payload_bytes,
                                         params_.learning_rate);
        for (auto &nd : nodes_) {
            nd->received.clear();
            nd->done = false;
            nd->received[nd->id] = submissions_.at(nd->id);
        }
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<NodeId> receivers;
            for (std::size_t k = 1; k < n; ++k) receivers.push_back(ids_[(i + k) % n]);
            if (!receivers.empty())
                sim_.broadcast(ids_[i], receivers, params_.payload_bytes, "gossip",
                               std::make_shared<const Body>(GradientMsg{iteration, submissions_.at(ids_[i])}));
        }
        maybe_mine(*nodes_[leader_]);

        const double horizon = rep.start + static_cast<double>(params_.liveness_horizon_s);
        while (!all_done()) {
            if (!sim_.step()) throw LivenessFailure("learningchain: event queue drained in iteration " +
                                                    std::to_string(iteration));
            if (sim_.now() > horizon) throw LivenessFailure("learningchain: horizon exceeded");
        }
        rep.end = sim_.now();
        const Node &probe = *nodes_[probe_];
        rep.probe_update_time = probe.applied_at - last_probe_;
        last_probe_ = probe.applied_at;
        for (const auto &nd : nodes_) {
            rep.max_storage_bytes = std::max(rep.max_storage_bytes, nd->history_bytes);
            if (!nd->byzantine) rep.final_digests[nd->id] = nd->final_digest;
        }
        rep.max_storage_count = static_cast<std::size_t>(rep.max_storage_bytes / params_.payload_bytes);
        rep.committed_blocks = 1;
        rep.final_aggregate = probe.final_value;
        rep.weights = weights_;
        return rep;
    }

  private:
    struct Node {
        NodeId id = kNoNode;
        adversary::Behavior behavior;
        bool byzantine = false;
        std::size_t shard = 0;
        training::ModelState model;
        std::unique_ptr<Rng> noise;
        std::map<NodeId, GradientPtr> received;
        bool mining = false;
        bool done = false;
        double applied_at = 0.0;
        std::uint64_t history_bytes = 0;
        Digest final_digest{};
        GradientPtr final_value;
    };

    void dispatch(Node &nd, const Sim::Event &ev) {
        std::visit(
            [&](const auto &body) {
                using T = std::decay_t<decltype(body)>;
                if constexpr (std::is_same_v<T, GradientMsg>) {
                    if (body.iteration != iteration_) return;
                    nd.received.emplace(body.gradient->origin, body.gradient);
                    if (&nd == nodes_[leader_].get()) maybe_mine(nd);
                } else if constexpr (std::is_same_v<T, MineDone>) {
                    if (body.iteration == iteration_) announce(nd);
                } else {
                    if (body.iteration == iteration_) accept(nd, body.aggregate);
                }
            },
            *ev.payload);
    }

    void maybe_mine(Node &leader) {
        if (leader.mining || leader.received.size() < nodes_.size()) return;
        leader.mining = true;
        sim_.schedule_timer(leader.id, params_.mining_delay_s, "mine",
                            std::make_shared<const Body>(MineDone{iteration_}));
    }

    void announce(Node &leader) {
        leader.mining = false;
        std::vector<Gradient> inputs;
        std::vector<NodeId> origin;
        for (const auto &[id, g] : leader.received) {
            inputs.push_back(*g);
            origin.push_back(id);
        }
        auto r = aggregation::l_nearest(inputs, params_.l);
        weights_.clear();
        std::vector<char> chosen(inputs.size(), 0);
        for (std::size_t i : r.selected) chosen[i] = 1;
        std::vector<NodeId> selected;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            weights_.emplace_back(origin[i], chosen[i] ? 1.0 : 0.0);
            if (chosen[i]) selected.push_back(origin[i]);
        }
        Gradient agg = std::move(r.gradient);
        agg.payload_bytes = params_.payload_bytes;
        agg.iteration = iteration_;
        auto shared = aggregation::share(std::move(agg));
        const std::uint64_t block_bytes = params_.payload_bytes + 32 * nodes_.size();
        std::vector<NodeId> receivers;
        const std::size_t n = nodes_.size();
        for (std::size_t k = 1; k < n; ++k) receivers.push_back(ids_[(leader_ + k) % n]);
        auto msg = std::make_shared<const Body>(BlockMsg{iteration_, shared, selected});
        if (!receivers.empty()) sim_.broadcast(leader.id, receivers, block_bytes, "block", msg);
        accept(leader, shared);
    }

    void accept(Node &nd, const GradientPtr &agg) {
        if (nd.done) return;
        training::apply_update(nd.model, *agg, params_.learning_rate);
        nd.done = true;
        nd.applied_at = sim_.now();
        nd.final_value = agg;
        nd.final_digest = agg->digest();
        // every broadcast local gradient plus the announced aggregation
        nd.history_bytes += (nodes_.size() + 1) * params_.payload_bytes;
    }

    bool all_done() const {
        for (const auto &nd : nodes_)
            if (!nd->done) return false;
        return true;
    }

    BaselineParams params_;
    const training::LearningTask &task_;
    Sim sim_;
    std::vector<std::unique_ptr<Node>> nodes_;
    std::vector<NodeId> ids_;
    std::unordered_map<NodeId, std::size_t> index_;
    std::vector<NodeId> leaders_;
    std::map<NodeId, GradientPtr> submissions_;
    std::vector<std::pair<NodeId, double>> weights_;
    std::uint64_t iteration_ = 0;
    std::size_t leader_ = 0;
    std::size_t probe_ = 0;
    double last_probe_ = 0.0;
};

} // namespace pirate::baseline
