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

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

/*
 * Chained HotStuff pieces shared by every replica: block and certificate
 * types, the vote collector, the locking and three-chain commit rules, and
 * the bounded gradient store each replica keeps for validation.
 */
namespace pirate::consensus {

using aggregation::Gradient;
using aggregation::GradientPtr;

constexpr std::size_t quorum(std::size_t c) { return (2 * c) / 3 + 1; }
constexpr std::size_t max_faulty(std::size_t c) { return c == 0 ? 0 : (c - 1) / 3; }

/// Round-robin view leader as a committee member index.
constexpr std::size_t leader_of(std::uint64_t view, std::size_t c) {
    return static_cast<std::size_t>(view % c);
}

/// Four times the time the slowest uplink needs to push one payload to c-1 peers.
inline double default_view_timeout(std::size_t c, std::uint64_t payload_bytes,
                                   double slowest_uplink_mbps, double latency_s = 0.0) {
    const double per_message = static_cast<double>(payload_bytes) * 8.0 /
                               (slowest_uplink_mbps * kBitsPerMegabit);
    return 4.0 * (static_cast<double>(std::max<std::size_t>(c, 2) - 1) * per_message + latency_s);
}

enum class Phase : std::uint8_t { Reduce, Gather };

struct StepKey {
    std::uint64_t iteration = 0;
    std::uint32_t ring_step = 0;
    std::uint32_t step = 0;
    Phase phase = Phase::Reduce;
    bool final_in_visit = false;

    bool operator==(const StepKey &) const = default;
};

enum class InputSource : std::uint8_t { None, Parent, Neighbor };

struct QuorumCertificate {
    std::uint64_t view = 0;
    Digest block_hash{};
    Digest output_digest{};
    std::uint32_t committee = 0;
    std::vector<NodeId> signers; // sorted, distinct

    std::size_t wire_bytes() const { return 112 + 64 * signers.size(); }
};

struct ConsensusStepPayload {
    StepKey key;
    std::vector<std::size_t> selected_members;
    std::vector<GradientPtr> component1;
    std::vector<Digest> component1_digests;
    InputSource component2_source = InputSource::None;
    GradientPtr component2;
    Digest component2_digest{};
    std::optional<QuorumCertificate> neighbor_qc;
    GradientPtr component3;
    Digest component3_digest{};
    std::vector<double> input_weights; // acceptance weight per component1 entry
    bool verbatim = false;
    Digest model_digest{};

    Digest digest() const {
        Hasher h;
        h.text("payload")
            .u64(key.iteration)
            .u64(key.ring_step)
            .u64(key.step)
            .u64(static_cast<std::uint64_t>(key.phase))
            .u64(key.final_in_visit)
            .u64(component1_digests.size());
        for (std::size_t i = 0; i < component1_digests.size(); ++i)
            h.u64(selected_members[i]).digest(component1_digests[i]);
        h.u64(static_cast<std::uint64_t>(component2_source)).digest(component2_digest);
        if (neighbor_qc) h.u64(neighbor_qc->view).digest(neighbor_qc->block_hash);
        h.digest(component3_digest).u64(verbatim).digest(model_digest);
        return h.finish();
    }
};

using PayloadPtr = std::shared_ptr<const ConsensusStepPayload>;

struct Block {
    std::uint64_t view = 0;
    std::uint64_t height = 0;
    Digest parent{};
    QuorumCertificate justify;
    PayloadPtr payload; // null for an empty block
    NodeId proposer = kNoNode;
    std::uint32_t committee = 0;
    std::optional<StepKey> cursor; // last payload step on this branch
    Digest cursor_block{};         // block carrying that step
    std::uint64_t nonce = 0;
    Digest hash{};

    bool empty() const { return payload == nullptr; }

    Digest compute_hash() const {
        Hasher h;
        h.text("block").u64(view).u64(height).digest(parent).u64(justify.view).digest(justify.block_hash);
        h.u64(proposer).u64(committee).u64(nonce);
        if (payload) h.digest(payload->digest());
        return h.finish();
    }

    /// Light wire form: header, digest references and the justify signatures.
    std::size_t wire_bytes() const {
        std::size_t refs = payload ? payload->component1_digests.size() + 4 : 0;
        if (payload && payload->neighbor_qc) refs += 2 * payload->neighbor_qc->signers.size();
        return 256 + 32 * refs + justify.wire_bytes();
    }
};

using BlockPtr = std::shared_ptr<const Block>;

inline BlockPtr make_genesis(std::uint32_t committee) {
    auto g = std::make_shared<Block>();
    g->committee = committee;
    g->hash = g->compute_hash();
    g->justify.block_hash = g->hash;
    g->justify.committee = committee;
    return g;
}

struct Vote {
    std::uint64_t view = 0;
    Digest block_hash{};
    Digest output_digest{};
    NodeId voter = kNoNode;
    std::uint32_t committee = 0;

    static constexpr std::size_t kWireBytes = 160;
};

enum class RejectReason {
    None,
    WrongLeader,
    StaleView,
    AlreadyVoted,
    InvalidJustify,
    SafetyRule,
    WrongStep,
    WrongSelection,
    MissingNeighborQC,
    InvalidNeighborQC,
    AggregationMismatch,
    ModelDigestMismatch,
};

inline std::string to_string(RejectReason r) {
    switch (r) {
    case RejectReason::None: return "none";
    case RejectReason::WrongLeader: return "wrong-leader";
    case RejectReason::StaleView: return "stale-view";
    case RejectReason::AlreadyVoted: return "already-voted";
    case RejectReason::InvalidJustify: return "invalid-justify";
    case RejectReason::SafetyRule: return "safety-rule";
    case RejectReason::WrongStep: return "wrong-step";
    case RejectReason::WrongSelection: return "wrong-selection";
    case RejectReason::MissingNeighborQC: return "missing-neighbor-qc";
    case RejectReason::InvalidNeighborQC: return "invalid-neighbor-qc";
    case RejectReason::AggregationMismatch: return "aggregation-mismatch";
    case RejectReason::ModelDigestMismatch: return "model-digest-mismatch";
    }
    return "?";
}

/// Signer count, distinctness and membership. Signatures are simulated: a
/// signer entry is trusted to name the node that produced it.
inline bool verify_qc(const QuorumCertificate &qc, std::span<const NodeId> members,
                      std::size_t quorum_size) {
    if (qc.signers.size() < quorum_size) return false;
    for (std::size_t i = 0; i < qc.signers.size(); ++i) {
        if (i > 0 && qc.signers[i] <= qc.signers[i - 1]) return false;
        if (std::find(members.begin(), members.end(), qc.signers[i]) == members.end()) return false;
    }
    return true;
}

/// Gathers votes for one committee until a (view, block, output) triple
/// reaches quorum. Duplicates are idempotent; non-members are discarded.
class VoteCollector {
  public:
    VoteCollector(std::vector<NodeId> members, std::uint32_t committee)
        : members_(std::move(members)), committee_(committee), quorum_(quorum(members_.size())) {}

    std::size_t quorum_size() const { return quorum_; }
    std::size_t discarded() const { return discarded_; }

    std::optional<QuorumCertificate> add(const Vote &v) {
        if (std::find(members_.begin(), members_.end(), v.voter) == members_.end() ||
            v.committee != committee_) {
            ++discarded_;
            return std::nullopt;
        }
        Key key{v.view, v.block_hash, v.output_digest};
        auto &entry = pending_[key];
        if (entry.done) return std::nullopt;
        entry.signers.insert(v.voter);
        if (entry.signers.size() < quorum_) return std::nullopt;
        entry.done = true;
        QuorumCertificate qc;
        qc.view = v.view;
        qc.block_hash = v.block_hash;
        qc.output_digest = v.output_digest;
        qc.committee = committee_;
        qc.signers.assign(entry.signers.begin(), entry.signers.end());
        return qc;
    }

    /// Drops state for views below `view`.
    void prune_below(std::uint64_t view) {
        for (auto it = pending_.begin(); it != pending_.end();)
            it = std::get<0>(it->first) < view ? pending_.erase(it) : std::next(it);
    }

  private:
    using Key = std::tuple<std::uint64_t, Digest, Digest>;
    struct Entry {
        std::set<NodeId> signers;
        bool done = false;
    };
    std::vector<NodeId> members_;
    std::uint32_t committee_;
    std::size_t quorum_;
    std::size_t discarded_ = 0;
    std::map<Key, Entry> pending_;
};

/// Block store plus the HotStuff locking and commit state of one replica.
class ReplicaCore {
  public:
    explicit ReplicaCore(BlockPtr genesis)
        : genesis_(genesis), high_qc_(genesis->justify), locked_qc_(genesis->justify),
          last_committed_(genesis) {
        insert(std::move(genesis));
    }

    const BlockPtr &genesis() const { return genesis_; }
    const QuorumCertificate &high_qc() const { return high_qc_; }
    const QuorumCertificate &locked_qc() const { return locked_qc_; }
    const BlockPtr &last_committed() const { return last_committed_; }
    std::uint64_t voted_view() const { return voted_view_; }
    void set_voted_view(std::uint64_t v) { voted_view_ = std::max(voted_view_, v); }
    bool conflict_detected() const { return conflict_; }

    bool has(const Digest &h) const { return blocks_.count(h) != 0; }

    BlockPtr get(const Digest &h) const {
        auto it = blocks_.find(h);
        return it == blocks_.end() ? nullptr : it->second;
    }

    void insert(BlockPtr b) { blocks_.emplace(b->hash, std::move(b)); }

    bool is_genesis_qc(const QuorumCertificate &qc) const {
        return qc.view == 0 && qc.block_hash == genesis_->hash;
    }

    /// True when `b` has `ancestor` on its parent chain (or is it).
    bool extends(const Block &b, const Digest &ancestor) const {
        if (b.hash == ancestor) return true;
        const Block *cur = &b;
        while (cur->height > 0) {
            auto p = get(cur->parent);
            if (!p) return false;
            if (p->hash == ancestor) return true;
            cur = p.get();
        }
        return false;
    }

    /// Missing ancestor on the parent or justify path, if any.
    std::optional<Digest> missing_ancestor(const Block &b) const {
        if (!has(b.justify.block_hash)) return b.justify.block_hash;
        const Block *cur = &b;
        while (cur->height > last_committed_->height) {
            auto p = get(cur->parent);
            if (!p) return cur->parent;
            cur = p.get();
        }
        return std::nullopt;
    }

    /// Locking rule: extend the locked block, or carry a fresher justify.
    bool safe_node(const Block &b) const {
        return extends(b, locked_qc_.block_hash) || b.justify.view > locked_qc_.view;
    }

    void record_qc(const QuorumCertificate &qc) {
        qcs_.insert_or_assign(qc.block_hash, qc);
        if (qc.view > high_qc_.view) high_qc_ = qc;
    }

    std::optional<QuorumCertificate> qc_for(const Digest &h) const {
        auto it = qcs_.find(h);
        if (it == qcs_.end()) return std::nullopt;
        return it->second;
    }

    /// Processes the justify carried by `b_star`: refreshes highQC and the
    /// lock, and returns newly committed blocks oldest first.
    std::vector<BlockPtr> update(const Block &b_star) {
        record_qc(b_star.justify);
        auto b2 = get(b_star.justify.block_hash);
        if (!b2 || b2->height == 0) return {};
        auto b1 = get(b2->justify.block_hash);
        if (!b1 || b1->height == 0) return {};
        if (b1->height > lock_height()) locked_qc_ = b2->justify;
        auto b0 = get(b1->justify.block_hash);
        if (!b0 || b0->height == 0) return {};
        if (three_chain(*b0, *b1, *b2)) return commit(b0);
        return {};
    }

    /// b <- b' <- b'' with direct parents and consecutive views.
    static bool three_chain(const Block &b, const Block &b1, const Block &b2) {
        return b2.parent == b1.hash && b1.parent == b.hash && b1.view == b.view + 1 &&
               b2.view == b1.view + 1;
    }

    /// Uncommitted payload blocks on the branch ending at `tip`.
    bool has_uncommitted_payload(const Digest &tip) const {
        auto cur = get(tip);
        while (cur && cur->height > last_committed_->height) {
            if (!cur->empty()) return true;
            cur = get(cur->parent);
        }
        return false;
    }

    /// Forgets blocks well below the committed height.
    void prune(std::uint64_t keep_below_committed) {
        if (last_committed_->height <= keep_below_committed) return;
        const std::uint64_t floor = last_committed_->height - keep_below_committed;
        for (auto it = blocks_.begin(); it != blocks_.end();) {
            if (it->second->height > 0 && it->second->height < floor) {
                qcs_.erase(it->first);
                it = blocks_.erase(it);
            } else {
                ++it;
            }
        }
    }

  private:
    std::uint64_t lock_height() const {
        auto b = get(locked_qc_.block_hash);
        return b ? b->height : 0;
    }

    std::vector<BlockPtr> commit(const BlockPtr &b) {
        if (b->height <= last_committed_->height) return {};
        std::vector<BlockPtr> chain;
        BlockPtr cur = b;
        while (cur && cur->height > last_committed_->height) {
            chain.push_back(cur);
            cur = get(cur->parent);
        }
        if (!cur || cur->hash != last_committed_->hash) {
            conflict_ = true;
            return {};
        }
        std::reverse(chain.begin(), chain.end());
        last_committed_ = b;
        return chain;
    }

    BlockPtr genesis_;
    std::unordered_map<Digest, BlockPtr, DigestHash> blocks_;
    std::unordered_map<Digest, QuorumCertificate, DigestHash> qcs_;
    QuorumCertificate high_qc_;
    QuorumCertificate locked_qc_;
    BlockPtr last_committed_;
    std::uint64_t voted_view_ = 0;
    bool conflict_ = false;
};

/// Three-chain check over a block store for the chain certified by `qc`
/// (the QC of b''). Returns b when it becomes committable.
inline BlockPtr three_chain_commit(const ReplicaCore &store, const QuorumCertificate &qc) {
    auto b2 = store.get(qc.block_hash);
    if (!b2 || b2->height == 0) return nullptr;
    auto b1 = store.get(b2->justify.block_hash);
    if (!b1 || b1->height == 0) return nullptr;
    auto b0 = store.get(b1->justify.block_hash);
    if (!b0 || b0->height == 0) return nullptr;
    return ReplicaCore::three_chain(*b0, *b1, *b2) ? b0 : nullptr;
}

/* -------------------------------------------------------- storage bound */

class StorageContractViolation : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

inline constexpr std::size_t kMaxInFlightSets = 4;
inline constexpr std::size_t kGradientsPerSet = 3;
inline constexpr std::size_t kRetainedLimit = kMaxInFlightSets * kGradientsPerSet;

/// Gradients a replica keeps for validation: its own local gradient, one set
/// per voted and still uncommitted payload block (neighbor input and partial
/// aggregate), and the handoff outbox. Checked after every mutation.
class RetainedStorage {
  public:
    struct Set {
        Digest block;
        std::uint64_t height;
        GradientPtr input;
        GradientPtr output;
    };

    void set_local(GradientPtr g) {
        local_ = std::move(g);
        check();
    }

    void add_set(const Digest &block, std::uint64_t height, GradientPtr input, GradientPtr output) {
        for (const auto &s : sets_)
            if (s.block == block) return;
        if (sets_.size() == kMaxInFlightSets) sets_.erase(sets_.begin());
        sets_.push_back({block, height, std::move(input), std::move(output)});
        check();
    }

    void release_through(std::uint64_t height) {
        std::erase_if(sets_, [&](const Set &s) { return s.height <= height; });
        check();
    }

    void set_outbox(std::vector<GradientPtr> outbox) {
        outbox_ = std::move(outbox);
        check();
    }

    void clear_iteration() {
        outbox_.clear();
        sets_.clear();
        check();
    }

    std::size_t set_count() const { return sets_.size(); }
    std::size_t count() const { return distinct().size(); }

    std::uint64_t bytes() const {
        std::uint64_t b = 0;
        for (const auto *g : distinct()) b += g->payload_bytes;
        return b;
    }

    std::size_t peak_count() const { return peak_count_; }
    std::uint64_t peak_bytes() const { return peak_bytes_; }
    void reset_peak() {
        peak_count_ = count();
        peak_bytes_ = bytes();
    }

    /// Largest count any instance has reached in this process.
    static std::size_t &global_peak() {
        static std::size_t peak = 0;
        return peak;
    }

  private:
    std::vector<const Gradient *> distinct() const {
        std::vector<const Gradient *> out;
        auto add = [&](const GradientPtr &g) {
            if (g && std::find(out.begin(), out.end(), g.get()) == out.end()) out.push_back(g.get());
        };
        add(local_);
        for (const auto &s : sets_) {
            add(s.input);
            add(s.output);
        }
        for (const auto &g : outbox_) add(g);
        return out;
    }

    void check() {
        const auto items = distinct();
        std::uint64_t b = 0;
        for (const auto *g : items) b += g->payload_bytes;
        peak_count_ = std::max(peak_count_, items.size());
        peak_bytes_ = std::max(peak_bytes_, b);
        global_peak() = std::max(global_peak(), items.size());
        if (sets_.size() > kMaxInFlightSets || items.size() > kRetainedLimit)
            throw StorageContractViolation("replica retains " + std::to_string(items.size()) +
                                           " gradients in " + std::to_string(sets_.size()) +
                                           " sets");
    }

    GradientPtr local_;
    std::vector<Set> sets_;
    std::vector<GradientPtr> outbox_;
    std::size_t peak_count_ = 0;
    std::uint64_t peak_bytes_ = 0;
};

} // namespace pirate::consensus
