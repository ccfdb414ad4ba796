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

#include <pirate/adversary.hpp>
#include <pirate/aggregation.hpp>
#include <pirate/allreduce.hpp>
#include <pirate/consensus.hpp>
#include <pirate/netsim.hpp>
#include <pirate/sharding.hpp>
#include <pirate/training.hpp>

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

/*
 * One reconfiguration epoch of the sharded system: every admitted node runs a
 * chained-HotStuff replica inside its committee, committees pass certified
 * partial aggregates around the ring, and every node applies the committed
 * global aggregate to its own model.
 */
namespace pirate {

using aggregation::Gradient;
using aggregation::GradientPtr;
using consensus::BlockPtr;
using consensus::Phase;
using consensus::QuorumCertificate;
using consensus::RejectReason;

enum class HandoffMode { MemberRelay, LeaderBroadcast };

inline std::string to_string(HandoffMode m) {
    return m == HandoffMode::MemberRelay ? "member-relay" : "leader-broadcast";
}

struct PirateParams {
    std::size_t gradients_per_step = 1;
    std::uint64_t payload_bytes = megabytes(28);
    aggregation::AggregatorSpec aggregator;
    double view_timeout_s = 0.0;     // 0 selects the default bound
    double fallback_timeout_s = 0.0; // 0 reuses the view timeout
    HandoffMode handoff = HandoffMode::MemberRelay;
    double gst_s = 0.0;
    double pre_gst_jitter_s = 0.0;
    double learning_rate = 0.05;
    std::size_t liveness_timeouts = 400; // iteration budget in view timeouts
    std::uint64_t seed = 0;
};

struct NodeSetup {
    NodeId id = kNoNode;
    netsim::LinkProfile link;
    adversary::Behavior behavior;
    bool byzantine = false; // ground truth for metrics and the omniscient grant only
    std::size_t shard = 0;
};

class LivenessFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct MisbehaviorReport {
    NodeId reporter;
    NodeId accused;
    std::uint64_t view;
    RejectReason reason;
};

struct ProposalRecord {
    std::uint32_t committee;
    std::uint64_t view;
    NodeId proposer;
    Digest hash;
    double time;
    bool payload;
    std::uint64_t iteration;
};

struct CommitRecord {
    NodeId node;
    std::uint32_t committee;
    Digest hash;
    std::uint64_t block_view;
    std::uint64_t trigger_view;
    double time;
};

struct IterationReport {
    std::uint64_t iteration = 0;
    double start = 0.0;
    double end = 0.0;
    double probe_update_time = 0.0;
    std::uint64_t max_storage_bytes = 0;
    std::size_t max_storage_count = 0;
    std::size_t committed_blocks = 0;
    std::size_t rejected_blocks = 0;
    std::size_t handoffs = 0;
    std::size_t timeouts = 0;
    std::size_t fallback_queries = 0;
    std::map<NodeId, Digest> final_digests; // honest nodes
    GradientPtr final_aggregate;            // as applied by the probe node
    std::vector<std::pair<NodeId, double>> weights;
};

struct PirateLog {
    std::vector<ProposalRecord> proposals;
    std::vector<CommitRecord> commits;
    std::map<NodeId, std::vector<Digest>> committed_chain;
    std::unordered_map<Digest, BlockPtr, DigestHash> committed_blocks;
    std::vector<MisbehaviorReport> misbehavior;
    std::set<std::tuple<std::uint64_t, std::uint32_t, Phase>> handoffs;
    std::size_t timeouts = 0;
    std::size_t fallback_queries = 0;
    std::size_t discarded_tokens = 0;
    std::map<RejectReason, std::size_t> rejects; // by honest validators
};

namespace wire {
struct Gossip {
    std::uint64_t iteration;
    std::size_t member;
    GradientPtr gradient;
    Digest digest;
};
struct Proposal {
    BlockPtr block;
};
struct VoteMsg {
    consensus::Vote vote;
};
struct NewView {
    std::uint64_t view;
    QuorumCertificate high;
    std::optional<consensus::Vote> last_vote; // lets the next leader finish a QC the silent one dropped
};
struct Handoff {
    allreduce::Token token;
};
struct FallbackQuery {
    std::uint64_t iteration;
    Phase phase;
};
struct BlockRequest {
    Digest hash;
};
struct BlockResponse {
    BlockPtr block;
};
struct Timer {
    enum Kind { View, Fallback } kind;
    std::uint64_t token;
};
} // namespace wire

using WireBody = std::variant<wire::Gossip, wire::Proposal, wire::VoteMsg, wire::NewView, wire::Handoff,
                              wire::FallbackQuery, wire::BlockRequest, wire::BlockResponse, wire::Timer>;
using WireMessage = std::shared_ptr<const WireBody>;

/// One node's view when producing its local submission.
struct Submitter {
    NodeId id = kNoNode;
    std::size_t shard = 0;
    const adversary::Behavior *behavior = nullptr;
    std::vector<double> params;                   // what the node trains on
    const std::vector<double> *committed = nullptr; // last committed model
    Rng *noise = nullptr;
};

/// Local gradients of every node for one iteration, with adversarial
/// corruption applied. Omniscient colluders see all other submissions.
inline std::map<NodeId, GradientPtr> craft_submissions(const training::LearningTask &task,
                                                      const std::vector<Submitter> &who,
                                                      std::uint64_t iteration, std::uint64_t seed,
                                                      std::uint64_t payload_bytes, double lr) {
    std::map<NodeId, GradientPtr> out;
    std::vector<const Submitter *> omniscient;
    for (const auto &s : who) {
        Gradient g = training::local_gradient(task, s.params, s.shard, iteration, seed, payload_bytes);
        g.origin = s.id;
        const auto &b = *s.behavior;
        if (b.strategy().kind == adversary::StrategyKind::OmniscientCraft) omniscient.push_back(&s);
        else if (b.corrupts_gradient()) g = adversary::corrupt_gradient(g, b.strategy(), *s.noise).gradient;
        out[s.id] = aggregation::share(std::move(g));
    }
    if (omniscient.empty()) return out;
    const std::size_t d = task.dimension();
    adversary::OmniscientView view;
    view.others_sum.assign(d, 0.0);
    std::set<NodeId> colluding;
    for (const auto *s : omniscient) colluding.insert(s->id);
    for (const auto &[id, g] : out)
        if (!colluding.count(id))
            for (std::size_t i = 0; i < d; ++i) view.others_sum[i] += g->values[i];
    view.total = who.size();
    view.colluders = omniscient.size();
    const auto &strategy = omniscient.front()->behavior->strategy();
    std::vector<double> target = strategy.target.value_or(std::vector<double>(d, strategy.magnitude));
    target.resize(d, 0.0);
    std::optional<adversary::OmniscientView> grant;
    if (lr > 0) {
        view.target_mean = adversary::steering_mean(*omniscient.front()->committed, target, lr);
        grant = view;
    }
    for (const auto *s : omniscient) {
        auto c = adversary::corrupt_gradient(*out[s->id], s->behavior->strategy(), *s->noise, grant);
        c.gradient.origin = s->id;
        out[s->id] = aggregation::share(std::move(c.gradient));
    }
    return out;
}

class PirateSystem {
  public:
    using Sim = netsim::Simulator<WireMessage>;

    PirateSystem(PirateParams params, sharding::CommitteeAssignment assignment,
                 const std::vector<NodeSetup> &setups, const training::LearningTask &task,
                 std::vector<double> initial_params, double start_time)
        : params_(std::move(params)), assignment_(std::move(assignment)), task_(task),
          jitter_rng_(derive_seed(params_.seed, streams::kJitter)) {
        if (!assignment_.valid()) throw ConfigError("committee assignment is not a valid partition");
        const std::size_t c = assignment_.c;
        const std::size_t k = assignment_.committee_count();
        if (params_.gradients_per_step < 1 || params_.gradients_per_step > c)
            throw ConfigError("gradients_per_step must be in [1, c]");
        if (params_.payload_bytes == 0) throw ConfigError("payload_bytes must be > 0");
        params_.aggregator.validate();
        check_aggregator_widths(c, k);

        std::map<NodeId, const NodeSetup *> by_id;
        for (const auto &s : setups) by_id[s.id] = &s;
        double slowest = std::numeric_limits<double>::infinity();
        double latency = 0.0;
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t i = 0; i < c; ++i) {
                const NodeId id = assignment_.committees[j][i];
                auto it = by_id.find(id);
                if (it == by_id.end()) throw ConfigError("no setup for node " + std::to_string(id));
                slowest = std::min(slowest, it->second->link.uplink_mbps);
                latency = std::max(latency, it->second->link.latency_ms / 1000.0);
            }
        timeout_ = params_.view_timeout_s > 0
                       ? params_.view_timeout_s
                       : consensus::default_view_timeout(c, params_.payload_bytes, slowest, latency);
        fallback_timeout_ = params_.fallback_timeout_s > 0 ? params_.fallback_timeout_s : timeout_;

        for (std::size_t j = 0; j < k; ++j) {
            genesis_.push_back(consensus::make_genesis(static_cast<std::uint32_t>(j)));
            for (std::size_t i = 0; i < c; ++i) {
                const NodeSetup &s = *by_id.at(assignment_.committees[j][i]);
                auto node = std::make_unique<Node>(assignment_.committees[j],
                                                   static_cast<std::uint32_t>(j));
                node->id = s.id;
                node->committee = static_cast<std::uint32_t>(j);
                node->index = i;
                node->behavior = s.behavior;
                node->byzantine = s.byzantine;
                node->shard = s.shard;
                node->schedule = {k, j, c, params_.gradients_per_step};
                node->core = std::make_unique<consensus::ReplicaCore>(genesis_[j]);
                node->model.params = initial_params;
                node->model.digest = training::ModelState::digest_of(initial_params);
                node->fallback_rng = std::make_unique<Rng>(derive_seed(params_.seed, streams::kFallback, s.id));
                node->noise_rng = std::make_unique<Rng>(derive_seed(params_.seed, streams::kAdversary, s.id));
                if (s.behavior.contaminated()) {
                    Rng r(derive_seed(params_.seed, streams::kContamination, s.id));
                    node->offset = adversary::contamination(initial_params.size(), s.behavior.strategy(), r);
                }
                node->ready_view = 1;
                sim_.add_node(s.id, s.link);
                index_[s.id] = nodes_.size();
                nodes_.push_back(std::move(node));
            }
        }
        for (auto &n : nodes_) {
            Node *raw = n.get();
            sim_.set_handler(raw->id, [this, raw](const Sim::Event &ev) { dispatch(*raw, ev); });
        }
        if (params_.pre_gst_jitter_s > 0)
            sim_.set_delay_injector([this](NodeId, NodeId, double t) {
                return t < params_.gst_s ? jitter_rng_.uniform(0.0, params_.pre_gst_jitter_s) : 0.0;
            });
        sim_.set_start_time(start_time);
        last_probe_update_ = start_time;
        probe_ = probe_node();
    }

    PirateSystem(const PirateSystem &) = delete;
    PirateSystem &operator=(const PirateSystem &) = delete;

    double view_timeout() const { return timeout_; }
    double now() const { return sim_.now(); }
    const Sim &simulator() const { return sim_; }
    const PirateLog &log() const { return log_; }
    const sharding::CommitteeAssignment &assignment() const { return assignment_; }
    std::uint64_t fingerprint() const { return sim_.fingerprint(); }

    const std::vector<double> &model_of(NodeId id) const { return node(id).model.params; }
    const Digest &model_digest_of(NodeId id) const { return node(id).model.digest; }
    bool is_byzantine(NodeId id) const { return node(id).byzantine; }
    std::size_t storage_peak_count(NodeId id) const { return node(id).storage.peak_count(); }

    /// Every local gradient submitted in the last iteration, by node id.
    const std::map<NodeId, GradientPtr> &submissions() const { return submissions_; }

    /// Runs one full iteration and returns its measurements. Throws
    /// LivenessFailure when the ring cannot finish within the budget.
    IterationReport run_iteration(std::uint64_t iteration) {
        IterationReport rep;
        rep.iteration = iteration;
        rep.start = sim_.now();
        iteration_ = iteration;
        committed_this_iteration_.clear();
        rejected_this_iteration_.clear();
        weights_seen_.clear();
        weights_.clear();
        const std::size_t timeouts_before = log_.timeouts;
        const std::size_t queries_before = log_.fallback_queries;

        compute_local_gradients(iteration);
        for (auto &n : nodes_) start_iteration(*n);
        for (auto &n : nodes_) gossip(*n);
        for (auto &n : nodes_) {
            if (n->schedule.needs_reduce_token() || n->schedule.needs_gather_token())
                arm_fallback(*n);
            pump(*n);
        }

        const double horizon = rep.start + static_cast<double>(params_.liveness_timeouts) * timeout_;
        while (!all_honest_done()) {
            if (sim_.pending() == 0)
                throw LivenessFailure(diagnose("event queue drained", iteration));
            if (!sim_.step()) break;
            if (sim_.now() > horizon) throw LivenessFailure(diagnose("liveness budget exceeded", iteration));
        }

        rep.end = sim_.now();
        const Node &probe = *nodes_[probe_];
        rep.probe_update_time = probe.applied_at - last_probe_update_;
        last_probe_update_ = probe.applied_at;
        for (const auto &n : nodes_) {
            rep.max_storage_bytes = std::max(rep.max_storage_bytes, n->storage.peak_bytes());
            rep.max_storage_count = std::max(rep.max_storage_count, n->storage.peak_count());
            if (!n->byzantine) rep.final_digests[n->id] = n->final_digest;
        }
        rep.final_aggregate = probe.final_value;
        rep.committed_blocks = committed_this_iteration_.size();
        rep.rejected_blocks = rejected_this_iteration_.size();
        for (const auto &h : log_.handoffs)
            if (std::get<0>(h) == iteration) ++rep.handoffs;
        rep.timeouts = log_.timeouts - timeouts_before;
        rep.fallback_queries = log_.fallback_queries - queries_before;
        rep.weights = weights_;
        return rep;
    }

  private:
    struct Node {
        Node(std::vector<NodeId> members, std::uint32_t committee)
            : members(std::move(members)), votes(this->members, committee) {}

        NodeId id = kNoNode;
        std::uint32_t committee = 0;
        std::size_t index = 0;
        std::vector<NodeId> members;
        adversary::Behavior behavior;
        bool byzantine = false;
        std::size_t shard = 0;
        allreduce::RingSchedule schedule;
        std::unique_ptr<consensus::ReplicaCore> core;
        consensus::VoteCollector votes;
        std::map<std::uint64_t, std::pair<std::set<NodeId>, QuorumCertificate>> newviews;

        std::uint64_t cur_view = 1;
        std::uint64_t ready_view = 0;
        std::optional<consensus::Vote> last_vote;
        std::uint64_t proposed_view = 0;
        std::uint64_t seen_view = 0; // highest proposal from a rightful leader
        std::vector<BlockPtr> deferred;
        std::set<Digest> requested;

        std::uint64_t timer_token = 0;
        bool timer_armed = false;
        std::uint64_t armed_view = 0;
        std::uint64_t fallback_token = 0;

        std::uint64_t iteration = 0;
        std::vector<GradientPtr> inbox;
        std::vector<Digest> inbox_digests;
        std::optional<allreduce::Token> reduce_token;
        std::optional<allreduce::Token> gather_token;
        std::vector<allreduce::Token> outbox;
        bool done = false;
        double applied_at = 0.0;
        Digest final_digest{};
        GradientPtr final_value;
        GradientPtr local;

        training::ModelState model;
        std::vector<double> offset; // contamination
        consensus::RetainedStorage storage;
        std::unique_ptr<Rng> fallback_rng;
        std::unique_ptr<Rng> noise_rng;

        bool leads(std::uint64_t view) const {
            return consensus::leader_of(view, members.size()) == index;
        }
    };

    /* ------------------------------------------------------------ setup */

    void check_aggregator_widths(std::size_t c, std::size_t k) const {
        allreduce::RingSchedule s{k, 0, c, params_.gradients_per_step};
        const std::size_t need = params_.aggregator.min_inputs();
        for (std::size_t step = 0; step < s.steps_per_visit(); ++step) {
            const std::size_t width = s.selection(step).size();
            const std::size_t lo = step == 0 ? width : width + 1;
            if (lo < need)
                throw ConfigError("aggregator " + aggregation::to_string(params_.aggregator.kind) +
                                  " needs " + std::to_string(need) + " inputs per step but step " +
                                  std::to_string(step) + " has " + std::to_string(lo));
        }
    }

    std::size_t probe_node() const {
        std::size_t best = nodes_.size();
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (!nodes_[i]->byzantine && (best == nodes_.size() || nodes_[i]->id < nodes_[best]->id))
                best = i;
        if (best == nodes_.size()) throw ConfigError("no honest node to probe");
        return best;
    }

    Node &node(NodeId id) { return *nodes_[index_.at(id)]; }
    const Node &node(NodeId id) const { return *nodes_[index_.at(id)]; }

    std::vector<double> working_params(const Node &n) const {
        std::vector<double> p = n.model.params;
        for (std::size_t i = 0; i < n.offset.size(); ++i) p[i] += n.offset[i];
        return p;
    }

    Digest working_digest(const Node &n) const {
        return n.offset.empty() ? n.model.digest : training::ModelState::digest_of(working_params(n));
    }

    /* ------------------------------------------------------ iteration */

    void compute_local_gradients(std::uint64_t iteration) {
        std::vector<Submitter> who;
        for (auto &n : nodes_)
            who.push_back({n->id, n->shard, &n->behavior, working_params(*n), &n->model.params, n->noise_rng.get()});
        submissions_ = craft_submissions(task_, who, iteration, params_.seed, params_.payload_bytes,
                                         params_.learning_rate);
    }

    void start_iteration(Node &n) {
        n.iteration = iteration_;
        n.inbox.assign(n.members.size(), nullptr);
        n.inbox_digests.assign(n.members.size(), Digest{});
        n.reduce_token.reset();
        n.gather_token.reset();
        n.outbox.clear();
        n.done = false;
        n.final_value.reset();
        n.storage.clear_iteration();
        n.local = submissions_.at(n.id);
        n.storage.set_local(n.local);
        n.storage.reset_peak();
        n.inbox[n.index] = n.local;
        n.inbox_digests[n.index] = n.local->digest();
    }

    void gossip(Node &n) {
        const std::size_t c = n.members.size();
        if (c < 2) return;
        std::vector<NodeId> receivers;
        for (std::size_t k = 1; k < c; ++k) receivers.push_back(n.members[(n.index + k) % c]);
        auto msg = make(wire::Gossip{iteration_, n.index, n.local, n.inbox_digests[n.index]});
        sim_.broadcast(n.id, receivers, params_.payload_bytes, "gossip", msg);
    }

    bool all_honest_done() const {
        for (const auto &n : nodes_)
            if (!n->byzantine && !n->done) return false;
        return true;
    }

    std::string diagnose(const std::string &what, std::uint64_t iteration) const {
        std::string s = what + " in iteration " + std::to_string(iteration) + " at t=" +
                        std::to_string(sim_.now()) + "s;";
        for (std::size_t j = 0; j < assignment_.committee_count(); ++j) {
            std::size_t done = 0, honest = 0;
            std::uint64_t view = 0;
            for (const auto &n : nodes_)
                if (n->committee == j && !n->byzantine) {
                    ++honest;
                    done += n->done;
                    view = std::max(view, n->cur_view);
                }
            s += " committee " + std::to_string(j) + ": " + std::to_string(done) + "/" +
                 std::to_string(honest) + " honest done, view " + std::to_string(view) + ";";
        }
        return s;
    }

    /* -------------------------------------------------------- messaging */

    template <class T> static WireMessage make(T body) {
        return std::make_shared<const WireBody>(std::move(body));
    }

    void send(Node &from, NodeId to, std::uint64_t bytes, std::string_view tag, WireMessage msg) {
        if (to == from.id)
            sim_.schedule_timer(from.id, 0.0, tag, std::move(msg));
        else
            sim_.send(from.id, to, bytes, tag, std::move(msg));
    }

    std::vector<NodeId> others(const Node &n) const {
        std::vector<NodeId> out;
        for (NodeId m : n.members)
            if (m != n.id) out.push_back(m);
        return out;
    }

    const std::vector<NodeId> &committee_members(std::size_t j) const { return assignment_.committees[j]; }

    void dispatch(Node &n, const Sim::Event &ev) {
        const NodeId from = ev.source;
        std::visit(
            [&](const auto &body) {
                using T = std::decay_t<decltype(body)>;
                if constexpr (std::is_same_v<T, wire::Gossip>) on_gossip(n, body);
                else if constexpr (std::is_same_v<T, wire::Proposal>) on_proposal(n, body.block, from);
                else if constexpr (std::is_same_v<T, wire::VoteMsg>) on_vote(n, body.vote);
                else if constexpr (std::is_same_v<T, wire::NewView>) on_newview(n, body, from);
                else if constexpr (std::is_same_v<T, wire::Handoff>) on_handoff(n, body.token);
                else if constexpr (std::is_same_v<T, wire::FallbackQuery>) on_fallback_query(n, body, from);
                else if constexpr (std::is_same_v<T, wire::BlockRequest>) on_block_request(n, body, from);
                else if constexpr (std::is_same_v<T, wire::BlockResponse>) on_block_response(n, body.block, from);
                else if constexpr (std::is_same_v<T, wire::Timer>) on_timer(n, body);
            },
            *ev.payload);
        pump(n);
    }

    /* ----------------------------------------------------------- inputs */

    void on_gossip(Node &n, const wire::Gossip &g) {
        if (g.iteration != n.iteration || g.member >= n.inbox.size()) return;
        if (!n.inbox[g.member]) {
            n.inbox[g.member] = g.gradient;
            n.inbox_digests[g.member] = g.digest;
        }
    }

    void on_handoff(Node &n, const allreduce::Token &t) {
        if (t.iteration != n.iteration || t.from_committee != n.schedule.predecessor()) return;
        if (n.schedule.committees < 2) return;
        if (!allreduce::verify_token(t, committee_members(t.from_committee))) {
            ++log_.discarded_tokens;
            log_.misbehavior.push_back({n.id, kNoNode, 0, RejectReason::InvalidNeighborQC});
            return;
        }
        auto &slot = t.phase == Phase::Reduce ? n.reduce_token : n.gather_token;
        if (!slot) slot = t;
    }

    void arm_fallback(Node &n) {
        const std::uint64_t token = ++n.fallback_token;
        sim_.schedule_timer(n.id, fallback_timeout_, "fallback-timer", make(wire::Timer{wire::Timer::Fallback, token}));
    }

    std::optional<Phase> missing_token(const Node &n) const {
        if (n.schedule.needs_reduce_token() && !n.reduce_token) return Phase::Reduce;
        if (n.schedule.needs_gather_token() && !n.gather_token && !n.done) return Phase::Gather;
        return std::nullopt;
    }

    void on_fallback_timer(Node &n) {
        const auto missing = missing_token(n);
        if (!missing) return;
        const auto &src = committee_members(n.schedule.predecessor());
        const NodeId target = src[n.fallback_rng->index(src.size())];
        ++log_.fallback_queries;
        send(n, target, 128, "fallback-query", make(wire::FallbackQuery{n.iteration, *missing}));
        arm_fallback(n);
    }

    void on_fallback_query(Node &n, const wire::FallbackQuery &q, NodeId from) {
        if (n.behavior.withholds_handoffs()) return;
        for (const auto &t : n.outbox)
            if (t.iteration == q.iteration && t.phase == q.phase) {
                send(n, from, t.wire_bytes(), "fallback-reply", make(wire::Handoff{t}));
                return;
            }
    }

    /* ------------------------------------------------------ block sync */

    void request_block(Node &n, const Digest &hash, const std::vector<NodeId> &from) {
        if (n.core->has(hash) || !n.requested.insert(hash).second) return;
        for (NodeId peer : from)
            if (peer != n.id) send(n, peer, 96, "block-request", make(wire::BlockRequest{hash}));
    }

    void on_block_request(Node &n, const wire::BlockRequest &r, NodeId from) {
        if (n.behavior.withholds_proposals()) return;
        if (auto b = n.core->get(r.hash))
            send(n, from, b->wire_bytes(), "block-response", make(wire::BlockResponse{b}));
    }

    bool justify_ok(const Node &n, const consensus::Block &b) const {
        return n.core->is_genesis_qc(b.justify) ||
               (b.justify.committee == n.committee &&
                consensus::verify_qc(b.justify, n.members, consensus::quorum(n.members.size())));
    }

    void on_block_response(Node &n, const BlockPtr &b, NodeId from) {
        if (!b || b->committee != n.committee || n.core->has(b->hash)) return;
        if (b->compute_hash() != b->hash || !justify_ok(n, *b)) return;
        n.core->insert(b);
        n.core->record_qc(b->justify);
        n.requested.erase(b->hash);
        if (auto miss = n.core->missing_ancestor(*b)) request_block(n, *miss, {from});
    }

    /* -------------------------------------------------------- proposals */

    std::pair<std::optional<consensus::StepKey>, BlockPtr> branch_cursor(const Node &n,
                                                                         const BlockPtr &tip) const {
        if (!tip) return {std::nullopt, nullptr};
        if (!tip->empty()) return {tip->payload->key, tip};
        return {tip->cursor, tip->cursor ? n.core->get(tip->cursor_block) : nullptr};
    }

    void on_proposal(Node &n, const BlockPtr &b, NodeId from) {
        if (!b || b->committee != n.committee) return;
        if (b->compute_hash() != b->hash) return;
        if (b->proposer != n.members[consensus::leader_of(b->view, n.members.size())]) {
            reject(n, *b, RejectReason::WrongLeader);
            return;
        }
        n.seen_view = std::max(n.seen_view, b->view);
        if (auto miss = n.core->missing_ancestor(*b)) {
            request_block(n, *miss, {from});
            defer(n, b);
            return;
        }
        if (!process_proposal(n, b)) defer(n, b);
    }

    void defer(Node &n, const BlockPtr &b) {
        for (const auto &d : n.deferred)
            if (d->hash == b->hash) return;
        n.deferred.push_back(b);
    }

    enum class Check { Ok, Reject, NeedInputs };

    /// Returns false when the block must wait for inputs.
    bool process_proposal(Node &n, const BlockPtr &b) {
        if (!justify_ok(n, *b)) {
            reject(n, *b, RejectReason::InvalidJustify);
            return true;
        }
        auto parent = n.core->get(b->parent);
        if (!parent || b->height != parent->height + 1) {
            reject(n, *b, RejectReason::InvalidJustify);
            return true;
        }
        n.core->insert(b);
        handle_commits(n, n.core->update(*b), b->view);

        const bool blind = n.behavior.votes_blindly();
        if (b->view < n.core->voted_view() && !blind) return true; // stale
        if (b->view == n.core->voted_view() && !blind) {
            reject(n, *b, RejectReason::AlreadyVoted);
            return true;
        }
        n.cur_view = std::max(n.cur_view, b->view);
        if (!blind && !n.core->safe_node(*b)) {
            reject(n, *b, RejectReason::SafetyRule);
            return true;
        }
        GradientPtr input;
        if (!b->empty() && !blind) {
            RejectReason why = RejectReason::None;
            const Check c = validate_payload(n, *b, parent, input, why);
            if (c == Check::NeedInputs) return false;
            if (c == Check::Reject) {
                reject(n, *b, why);
                if (why == RejectReason::AggregationMismatch || why == RejectReason::ModelDigestMismatch)
                    log_.misbehavior.push_back({n.id, b->proposer, b->view, why});
                return true;
            }
        } else if (!b->empty()) {
            input = b->payload->component2;
        }
        vote(n, *b, input);
        return true;
    }

    Check validate_payload(Node &n, const consensus::Block &b, const BlockPtr &parent, GradientPtr &input,
                           RejectReason &why) {
        const auto &p = *b.payload;
        const auto [cursor, cursor_block] = branch_cursor(n, parent);
        const auto expected = n.schedule.next(cursor, n.iteration);
        if (!expected || !(*expected == p.key)) {
            why = RejectReason::WrongStep;
            return Check::Reject;
        }
        const auto source = n.schedule.component2_source(p.key);
        if (p.component2_source != source) {
            why = RejectReason::WrongStep;
            return Check::Reject;
        }
        std::vector<std::size_t> selection;
        if (p.key.phase == Phase::Reduce) selection = n.schedule.selection(p.key.step);
        if (p.selected_members != selection || p.component1_digests.size() != selection.size()) {
            why = RejectReason::WrongSelection;
            return Check::Reject;
        }
        std::vector<GradientPtr> mine;
        for (std::size_t k = 0; k < selection.size(); ++k) {
            const std::size_t m = selection[k];
            if (!n.inbox[m]) return Check::NeedInputs;
            if (n.inbox_digests[m] != p.component1_digests[k]) {
                why = RejectReason::WrongSelection;
                return Check::Reject;
            }
            mine.push_back(n.inbox[m]);
        }
        switch (source) {
        case consensus::InputSource::None:
            input = nullptr;
            break;
        case consensus::InputSource::Parent:
            if (!cursor_block || cursor_block->empty()) {
                why = RejectReason::WrongStep;
                return Check::Reject;
            }
            input = cursor_block->payload->component3;
            if (p.component2_digest != cursor_block->payload->component3_digest) {
                why = RejectReason::AggregationMismatch;
                return Check::Reject;
            }
            break;
        case consensus::InputSource::Neighbor: {
            if (!p.neighbor_qc) {
                why = RejectReason::MissingNeighborQC;
                return Check::Reject;
            }
            const auto &token = p.key.phase == Phase::Reduce ? n.reduce_token : n.gather_token;
            if (!token) return Check::NeedInputs;
            const auto &src = committee_members(n.schedule.predecessor());
            if (token->value_digest != p.component2_digest || p.neighbor_qc->block_hash != token->qc.block_hash ||
                p.neighbor_qc->output_digest != p.component2_digest ||
                !consensus::verify_qc(*p.neighbor_qc, src, consensus::quorum(src.size()))) {
                why = RejectReason::InvalidNeighborQC;
                return Check::Reject;
            }
            input = token->value;
            break;
        }
        }
        if (p.key.phase == Phase::Gather) {
            if (!p.verbatim || !p.component3 || p.component3->values != input->values) {
                why = RejectReason::AggregationMismatch;
                return Check::Reject;
            }
        } else {
            const auto inputs = allreduce::step_inputs(input, mine);
            const auto expect = aggregation::aggregate(params_.aggregator, inputs, true).gradient;
            if (!p.component3 || p.component3->dim() != expect.dim()) {
                why = RejectReason::AggregationMismatch;
                return Check::Reject;
            }
            for (std::size_t i = 0; i < expect.dim(); ++i)
                if (!(std::fabs(p.component3->values[i] - expect.values[i]) <= 1e-9)) {
                    why = RejectReason::AggregationMismatch;
                    return Check::Reject;
                }
            if (p.component3->digest() != p.component3_digest) {
                why = RejectReason::AggregationMismatch;
                return Check::Reject;
            }
        }
        if (p.model_digest != n.model.digest) {
            why = RejectReason::ModelDigestMismatch;
            return Check::Reject;
        }
        return Check::Ok;
    }

    void reject(Node &n, const consensus::Block &b, RejectReason why) {
        if (n.byzantine) return;
        rejected_this_iteration_.insert(b.hash);
        ++log_.rejects[why];
    }

    void vote(Node &n, const consensus::Block &b, const GradientPtr &input) {
        n.core->set_voted_view(b.view);
        if (!b.empty()) n.storage.add_set(b.hash, b.height, input, b.payload->component3);
        if (n.behavior.withholds_votes()) return;
        consensus::Vote v{b.view, b.hash, b.empty() ? Digest{} : b.payload->component3_digest, n.id, n.committee};
        n.last_vote = v;
        // progress: restart the view timer
        n.timer_armed = false;
        ++n.timer_token;
        const NodeId next = n.members[consensus::leader_of(b.view + 1, n.members.size())];
        send(n, next, consensus::Vote::kWireBytes, "vote", make(wire::VoteMsg{v}));
    }

    void on_vote(Node &n, const consensus::Vote &v) {
        if (!n.leads(v.view + 1)) return;
        auto qc = n.votes.add(v);
        if (!qc) return;
        n.core->record_qc(*qc);
        if (!n.core->has(qc->block_hash)) request_block(n, qc->block_hash, qc->signers);
        n.cur_view = std::max(n.cur_view, v.view + 1);
        n.ready_view = std::max(n.ready_view, v.view + 1);
        n.votes.prune_below(v.view > 8 ? v.view - 8 : 0);
    }

    void on_newview(Node &n, const wire::NewView &nv, NodeId from) {
        if (!n.leads(nv.view) || nv.view <= n.proposed_view) return;
        const bool genesis = n.core->is_genesis_qc(nv.high);
        if (!genesis && !(nv.high.committee == n.committee &&
                          consensus::verify_qc(nv.high, n.members, consensus::quorum(n.members.size()))))
            return;
        n.core->record_qc(nv.high);
        if (!n.core->has(nv.high.block_hash)) request_block(n, nv.high.block_hash, {from});
        if (nv.last_vote && nv.last_vote->voter == from)
            if (auto qc = n.votes.add(*nv.last_vote)) {
                n.core->record_qc(*qc);
                if (!n.core->has(qc->block_hash)) request_block(n, qc->block_hash, qc->signers);
            }
        auto &entry = n.newviews[nv.view];
        entry.first.insert(from);
        if (entry.first.size() >= consensus::quorum(n.members.size())) {
            n.cur_view = std::max(n.cur_view, nv.view);
            n.ready_view = std::max(n.ready_view, nv.view);
        }
        while (!n.newviews.empty() && n.newviews.begin()->first + 8 < n.cur_view)
            n.newviews.erase(n.newviews.begin());
    }

    /* --------------------------------------------------------- leader */

    bool inputs_ready(const Node &n, const consensus::StepKey &key, const BlockPtr &cursor_block) const {
        const auto source = n.schedule.component2_source(key);
        if (source == consensus::InputSource::Neighbor) {
            if (key.phase == Phase::Reduce ? !n.reduce_token : !n.gather_token) return false;
        }
        if (source == consensus::InputSource::Parent && (!cursor_block || cursor_block->empty())) return false;
        if (key.phase == Phase::Reduce)
            for (std::size_t m : n.schedule.selection(key.step))
                if (!n.inbox[m]) return false;
        return true;
    }

    void try_propose(Node &n) {
        // may lag the pacemaker view; voters only require it to be fresh
        const std::uint64_t v = n.ready_view;
        if (v == 0 || !n.leads(v) || n.proposed_view >= v || n.core->high_qc().view >= v || n.seen_view >= v)
            return;
        auto parent = n.core->get(n.core->high_qc().block_hash);
        if (!parent) {
            request_block(n, n.core->high_qc().block_hash, n.core->high_qc().signers);
            return;
        }
        const auto [cursor, cursor_block] = branch_cursor(n, parent);
        const auto next = n.schedule.next(cursor, n.iteration);
        consensus::PayloadPtr payload;
        if (next && inputs_ready(n, *next, cursor_block))
            payload = build_payload(n, *next, cursor_block);
        else if (!n.core->has_uncommitted_payload(parent->hash))
            return;
        n.proposed_view = v;
        if (n.behavior.withholds_proposals()) return;

        auto block = std::make_shared<consensus::Block>();
        block->view = v;
        block->height = parent->height + 1;
        block->parent = parent->hash;
        block->justify = n.core->high_qc();
        block->payload = payload;
        block->proposer = n.id;
        block->committee = n.committee;
        block->cursor = cursor;
        if (cursor_block) block->cursor_block = cursor_block->hash;
        block->hash = block->compute_hash();
        BlockPtr honest = block;
        log_.proposals.push_back({n.committee, v, n.id, honest->hash, sim_.now(), payload != nullptr, n.iteration});

        if (n.behavior.equivocates()) {
            auto twin = std::make_shared<consensus::Block>(*block);
            twin->payload = nullptr;
            twin->nonce = 1;
            twin->hash = twin->compute_hash();
            const std::size_t half = n.members.size() / 2;
            for (std::size_t i = 0; i < n.members.size(); ++i) {
                const NodeId m = n.members[i];
                BlockPtr which = i < half ? honest : BlockPtr(twin);
                if (m == n.id) continue;
                send(n, m, which->wire_bytes(), "proposal", make(wire::Proposal{which}));
            }
            send(n, n.id, 0, "proposal", make(wire::Proposal{honest}));
            send(n, n.id, 0, "proposal", make(wire::Proposal{BlockPtr(twin)}));
            log_.proposals.push_back({n.committee, v, n.id, twin->hash, sim_.now(), false, n.iteration});
            return;
        }
        const auto receivers = others(n);
        if (!receivers.empty())
            sim_.broadcast(n.id, receivers, honest->wire_bytes(), "proposal", make(wire::Proposal{honest}));
        send(n, n.id, 0, "proposal", make(wire::Proposal{honest}));
    }

    consensus::PayloadPtr build_payload(Node &n, const consensus::StepKey &key, const BlockPtr &cursor_block) {
        auto p = std::make_shared<consensus::ConsensusStepPayload>();
        p->key = key;
        p->component2_source = n.schedule.component2_source(key);
        if (key.phase == Phase::Reduce) {
            p->selected_members = n.schedule.selection(key.step);
            for (std::size_t m : p->selected_members) {
                p->component1.push_back(n.inbox[m]);
                p->component1_digests.push_back(n.inbox_digests[m]);
            }
        }
        switch (p->component2_source) {
        case consensus::InputSource::None: break;
        case consensus::InputSource::Parent:
            p->component2 = cursor_block->payload->component3;
            p->component2_digest = cursor_block->payload->component3_digest;
            break;
        case consensus::InputSource::Neighbor: {
            const auto &t = key.phase == Phase::Reduce ? *n.reduce_token : *n.gather_token;
            p->component2 = t.value;
            p->component2_digest = t.value_digest;
            p->neighbor_qc = t.qc;
            break;
        }
        }
        if (key.phase == Phase::Gather) {
            p->verbatim = true;
            p->component3 = p->component2;
        } else {
            auto r = aggregation::aggregate(params_.aggregator, allreduce::step_inputs(p->component2, p->component1),
                                            true);
            const std::size_t skip = p->component2 ? 1 : 0;
            p->input_weights.assign(r.weights.begin() + static_cast<std::ptrdiff_t>(skip), r.weights.end());
            Gradient out = std::move(r.gradient);
            out.iteration = key.iteration;
            out.origin = kNoNode;
            if (n.behavior.falsifies()) out = adversary::falsify(out, n.behavior.strategy());
            p->component3 = aggregation::share(std::move(out));
        }
        p->component3_digest = p->component3->digest();
        p->model_digest = working_digest(n);
        return p;
    }

    /* --------------------------------------------------------- commits */

    void handle_commits(Node &n, const std::vector<BlockPtr> &blocks, std::uint64_t trigger_view) {
        if (blocks.empty()) return;
        if (n.core->conflict_detected()) conflict_ = true;
        for (const auto &b : blocks) {
            log_.commits.push_back({n.id, n.committee, b->hash, b->view, trigger_view, sim_.now()});
            log_.committed_chain[n.id].push_back(b->hash);
            if (!n.byzantine) {
                committed_this_iteration_.insert(b->hash);
                log_.committed_blocks.emplace(b->hash, b);
            }
            if (b->empty()) continue;
            const auto &p = *b->payload;
            if (weights_seen_.insert(b->hash).second)
                for (std::size_t k = 0; k < p.component1.size() && k < p.input_weights.size(); ++k)
                    weights_.emplace_back(p.component1[k]->origin, p.input_weights[k]);
            if (p.key.iteration != n.iteration) continue;
            if (n.schedule.yields_final(p.key) && !n.done) apply_final(n, p.component3);
            if (auto phase = n.schedule.handoff_after(p.key)) hand_off(n, *b, *phase);
        }
        n.storage.release_through(blocks.back()->height);
        n.core->prune(64);
    }

    void apply_final(Node &n, const GradientPtr &f) {
        training::apply_update(n.model, *f, params_.learning_rate);
        n.done = true;
        n.applied_at = sim_.now();
        n.final_value = f;
        n.final_digest = f->digest();
    }

    void hand_off(Node &n, const consensus::Block &b, Phase phase) {
        auto qc = n.core->qc_for(b.hash);
        if (!qc) return;
        allreduce::Token t{n.iteration, phase, n.committee, b.payload->component3, b.payload->component3_digest, *qc};
        std::erase_if(n.outbox, [&](const allreduce::Token &o) { return o.phase == phase; });
        n.outbox.push_back(t);
        std::vector<GradientPtr> held;
        for (const auto &o : n.outbox) held.push_back(o.value);
        n.storage.set_outbox(std::move(held));
        if (n.behavior.withholds_handoffs()) return;
        const auto &dest = committee_members(n.schedule.successor());
        auto msg = make(wire::Handoff{t});
        if (params_.handoff == HandoffMode::MemberRelay) {
            sim_.send(n.id, dest[n.index], t.wire_bytes(), "handoff", msg);
        } else {
            if (b.proposer != n.id) return;
            sim_.broadcast(n.id, dest, t.wire_bytes(), "handoff", msg);
        }
        log_.handoffs.insert({n.iteration, n.committee, phase});
    }

    /* ------------------------------------------------------- pacemaker */

    bool has_work(const Node &n) const {
        auto tip = n.core->get(n.core->high_qc().block_hash);
        if (!tip) return true;
        if (n.core->has_uncommitted_payload(tip->hash)) return true;
        const auto [cursor, cursor_block] = branch_cursor(n, tip);
        const auto next = n.schedule.next(cursor, n.iteration);
        return next && inputs_ready(n, *next, cursor_block);
    }

    void update_timer(Node &n) {
        if (has_work(n)) {
            if (!n.timer_armed || n.armed_view != n.cur_view) {
                n.timer_armed = true;
                n.armed_view = n.cur_view;
                const std::uint64_t token = ++n.timer_token;
                sim_.schedule_timer(n.id, timeout_, "view-timer", make(wire::Timer{wire::Timer::View, token}));
            }
        } else if (n.timer_armed) {
            n.timer_armed = false;
            ++n.timer_token;
        }
    }

    void on_timer(Node &n, const wire::Timer &t) {
        if (t.kind == wire::Timer::Fallback) {
            if (t.token == n.fallback_token) on_fallback_timer(n);
            return;
        }
        if (t.token != n.timer_token || !n.timer_armed) return;
        n.timer_armed = false;
        ++log_.timeouts;
        n.cur_view += 1;
        const NodeId next = n.members[consensus::leader_of(n.cur_view, n.members.size())];
        if (n.behavior.withholds_votes()) return;
        const auto &high = n.core->high_qc();
        const std::size_t bytes = 128 + high.wire_bytes() + (n.last_vote ? consensus::Vote::kWireBytes : 0);
        send(n, next, bytes, "new-view", make(wire::NewView{n.cur_view, high, n.last_vote}));
    }

    void pump(Node &n) {
        if (!n.deferred.empty()) {
            auto pending = std::move(n.deferred);
            n.deferred.clear();
            std::sort(pending.begin(), pending.end(),
                      [](const BlockPtr &a, const BlockPtr &b) { return a->view < b->view; });
            for (const auto &b : pending) {
                if (b->view < n.core->voted_view()) continue;
                if (n.core->missing_ancestor(*b)) {
                    defer(n, b);
                    continue;
                }
                if (!process_proposal(n, b)) defer(n, b);
            }
        }
        try_propose(n);
        update_timer(n);
    }

    PirateParams params_;
    sharding::CommitteeAssignment assignment_;
    const training::LearningTask &task_;
    Sim sim_;
    std::vector<std::unique_ptr<Node>> nodes_;
    std::unordered_map<NodeId, std::size_t> index_;
    std::vector<BlockPtr> genesis_;
    double timeout_ = 0.0;
    double fallback_timeout_ = 0.0;
    Rng jitter_rng_;
    std::uint64_t iteration_ = 0;
    std::size_t probe_ = 0;
    double last_probe_update_ = 0.0;
    bool conflict_ = false;
    std::map<NodeId, GradientPtr> submissions_;
    std::unordered_set<Digest, DigestHash> committed_this_iteration_;
    std::unordered_set<Digest, DigestHash> rejected_this_iteration_;
    std::unordered_set<Digest, DigestHash> weights_seen_;
    std::vector<std::pair<NodeId, double>> weights_;
    PirateLog log_;

  public:
    bool conflict_detected() const { return conflict_; }
};

} // namespace pirate
