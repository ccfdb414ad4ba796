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

#include <algorithm>
#include <functional>
#include <optional>
#include <queue>
#include <string>
#include <vector>

/*
 * Deterministic discrete-event engine. Every node owns one uplink and one
 * downlink; each direction carries one message at a time (strict serial
 * occupancy, no fair sharing). A message first occupies the sender's uplink,
 * travels for the link latency, then occupies the receiver's downlink. The
 * delivery event fires when the downlink releases the last byte.
 */
namespace pirate::netsim {

struct LinkProfile {
    double uplink_mbps = 0.0;
    double downlink_mbps = 0.0;
    double latency_ms = 0.0;

    void validate() const {
        if (!(uplink_mbps > 0.0) || !std::isfinite(uplink_mbps))
            throw ConfigError("link: uplink bandwidth must be > 0");
        if (!(downlink_mbps > 0.0) || !std::isfinite(downlink_mbps))
            throw ConfigError("link: downlink bandwidth must be > 0");
        if (!(latency_ms >= 0.0) || !std::isfinite(latency_ms))
            throw ConfigError("link: latency must be >= 0");
    }

    double uplink_seconds(std::uint64_t bytes) const {
        return static_cast<double>(bytes) * 8.0 / (uplink_mbps * kBitsPerMegabit);
    }
    double downlink_seconds(std::uint64_t bytes) const {
        return static_cast<double>(bytes) * 8.0 / (downlink_mbps * kBitsPerMegabit);
    }
    double latency_seconds() const { return latency_ms / 1000.0; }
};

struct LinkState {
    LinkProfile profile;
    double uplink_busy_until = 0.0;
    double downlink_busy_until = 0.0;
};

struct Transfer {
    double uplink_start = 0.0;
    double uplink_release = 0.0;
    double downlink_start = 0.0;
    double delivery = 0.0;
};

/// Books one message on both links and advances their busy-until markers.
/// `extra_delay` is added on top of the sender's latency (used for pre-GST
/// jitter); it is zero on a stable network.
inline Transfer transfer_time(std::uint64_t size_bytes, LinkState &sender, LinkState &receiver,
                              double send_start, double extra_delay = 0.0) {
    if (size_bytes == 0) throw PreconditionError("transfer: invalid message of non-positive size");
    Transfer t;
    t.uplink_start = std::max(send_start, sender.uplink_busy_until);
    t.uplink_release = t.uplink_start + sender.profile.uplink_seconds(size_bytes);
    sender.uplink_busy_until = t.uplink_release;
    const double arrival = t.uplink_release + sender.profile.latency_seconds() + extra_delay;
    t.downlink_start = std::max(arrival, receiver.downlink_busy_until);
    t.delivery = t.downlink_start + receiver.profile.downlink_seconds(size_bytes);
    receiver.downlink_busy_until = t.delivery;
    return t;
}

enum class EventKind : std::uint8_t { MessageDelivery, TimerExpiry };

template <class Message> struct SimEvent {
    double fire_time = 0.0;
    std::uint64_t sequence = 0;
    EventKind kind = EventKind::TimerExpiry;
    NodeId source = kNoNode;
    NodeId target = kNoNode;
    std::uint64_t size_bytes = 0;
    std::string_view tag;
    Message payload;
};

struct TraceRecord {
    double fire_time;
    std::uint64_t sequence;
    EventKind kind;
    NodeId source;
    NodeId target;
    std::uint64_t size_bytes;
    std::string_view tag;
};

struct Scheduled {
    std::uint64_t sequence = 0;
    double fire_time = 0.0;
    Transfer transfer;
};

struct RunResult {
    double final_time = 0.0;
    bool truncated = false;
    std::size_t dispatched = 0;
};

struct Interval {
    double begin;
    double end;
};

template <class Message> class Simulator {
  public:
    using Event = SimEvent<Message>;
    using Handler = std::function<void(const Event &)>;
    /// Extra one-way delay for a message (from, to, send time). Zero by default.
    using DelayInjector = std::function<double(NodeId, NodeId, double)>;

    Simulator() = default;
    Simulator(const Simulator &) = delete;
    Simulator &operator=(const Simulator &) = delete;

    void add_node(NodeId id, const LinkProfile &profile) {
        profile.validate();
        if (id >= nodes_.size()) nodes_.resize(static_cast<std::size_t>(id) + 1);
        if (nodes_[id]) throw ConfigError("simulator: duplicate node id " + std::to_string(id));
        nodes_[id].emplace();
        nodes_[id]->link.profile = profile;
    }

    bool has_node(NodeId id) const { return id < nodes_.size() && nodes_[id].has_value(); }

    void set_handler(NodeId id, Handler handler) { slot(id).handler = std::move(handler); }

    void set_delay_injector(DelayInjector injector) { delay_ = std::move(injector); }

    void set_start_time(double t) {
        if (!queue_.empty() || dispatched_ != 0) throw PreconditionError("simulator already running");
        now_ = t;
        for (auto &n : nodes_)
            if (n) n->link.uplink_busy_until = n->link.downlink_busy_until = t;
    }

    double now() const { return now_; }
    const LinkState &link(NodeId id) const { return slot(id).link; }
    std::size_t pending() const { return queue_.size(); }

    void record_trace(bool on) { tracing_ = on; }
    const std::vector<TraceRecord> &trace() const { return trace_; }
    void record_occupancy(bool on) { occupancy_ = on; }
    const std::vector<Interval> &uplink_intervals(NodeId id) const { return slot(id).uplink_log; }

    const std::vector<std::string> &warnings() const { return warnings_; }

    /// Order-sensitive fingerprint of every dispatched event.
    std::uint64_t fingerprint() const { return fingerprint_; }

    Scheduled send(NodeId from, NodeId to, std::uint64_t size_bytes, std::string_view tag,
                   Message message) {
        auto &sender = slot(from);
        auto &receiver = slot(to);
        const double extra = delay_ ? delay_(from, to, now_) : 0.0;
        const Transfer t = transfer_time(size_bytes, sender.link, receiver.link, now_, extra);
        if (occupancy_) sender.uplink_log.push_back({t.uplink_start, t.uplink_release});
        Event ev;
        ev.fire_time = t.delivery;
        ev.kind = EventKind::MessageDelivery;
        ev.source = from;
        ev.target = to;
        ev.size_bytes = size_bytes;
        ev.tag = tag;
        ev.payload = std::move(message);
        Scheduled s = push(std::move(ev));
        s.transfer = t;
        return s;
    }

    /// One uplink occupancy per receiver, queued serially in the given order.
    std::vector<Scheduled> broadcast(NodeId from, std::span<const NodeId> receivers,
                                     std::uint64_t size_bytes, std::string_view tag,
                                     const Message &message) {
        std::vector<Scheduled> out;
        if (receivers.empty()) {
            warnings_.push_back("broadcast from node " + std::to_string(from) + " (" +
                                std::string(tag) + ") has no receivers");
            return out;
        }
        out.reserve(receivers.size());
        for (NodeId r : receivers) out.push_back(send(from, r, size_bytes, tag, message));
        return out;
    }

    Scheduled schedule_timer(NodeId target, double delay, std::string_view tag, Message message) {
        if (!(delay >= 0.0) || !std::isfinite(delay))
            throw PreconditionError("timer delay must be finite and >= 0");
        slot(target);
        Event ev;
        ev.fire_time = now_ + delay;
        ev.kind = EventKind::TimerExpiry;
        ev.source = target;
        ev.target = target;
        ev.tag = tag;
        ev.payload = std::move(message);
        return push(std::move(ev));
    }

    /// Dispatches events in (fire_time, sequence) order until the queue drains
    /// or the next event lies beyond `horizon`.
    RunResult run_until_idle(double horizon = std::numeric_limits<double>::infinity()) {
        RunResult r;
        while (!queue_.empty()) {
            if (queue_.top().fire_time > horizon) {
                now_ = std::max(now_, horizon);
                r.truncated = true;
                break;
            }
            Event ev = queue_.top();
            queue_.pop();
            dispatch(ev);
            ++r.dispatched;
        }
        r.final_time = now_;
        return r;
    }

    /// Dispatches a single event; returns false when the queue is empty.
    bool step() {
        if (queue_.empty()) return false;
        Event ev = queue_.top();
        queue_.pop();
        dispatch(ev);
        return true;
    }

  private:
    struct NodeSlot {
        LinkState link;
        Handler handler;
        std::vector<Interval> uplink_log;
    };

    struct Later {
        bool operator()(const Event &a, const Event &b) const {
            if (a.fire_time != b.fire_time) return a.fire_time > b.fire_time;
            return a.sequence > b.sequence;
        }
    };

    NodeSlot &slot(NodeId id) {
        if (!has_node(id)) throw PreconditionError("simulator: unknown node " + std::to_string(id));
        return *nodes_[id];
    }
    const NodeSlot &slot(NodeId id) const {
        if (!has_node(id)) throw PreconditionError("simulator: unknown node " + std::to_string(id));
        return *nodes_[id];
    }

    Scheduled push(Event ev) {
        if (!std::isfinite(ev.fire_time) || ev.fire_time < now_)
            throw PreconditionError("event scheduled in the past or at a non-finite time");
        ev.sequence = next_sequence_++;
        Scheduled s{ev.sequence, ev.fire_time, {}};
        queue_.push(std::move(ev));
        return s;
    }

    void dispatch(const Event &ev) {
        now_ = ev.fire_time;
        ++dispatched_;
        fingerprint_ = splitmix64(fingerprint_ ^ std::bit_cast<std::uint64_t>(ev.fire_time));
        fingerprint_ = splitmix64(fingerprint_ ^ ev.sequence ^ (std::uint64_t{ev.target} << 32));
        if (tracing_)
            trace_.push_back({ev.fire_time, ev.sequence, ev.kind, ev.source, ev.target,
                              ev.size_bytes, ev.tag});
        auto &s = slot(ev.target);
        if (s.handler)
            s.handler(ev);
        else
            warnings_.push_back("event for node " + std::to_string(ev.target) + " has no handler");
    }

    std::vector<std::optional<NodeSlot>> nodes_;
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    DelayInjector delay_;
    double now_ = 0.0;
    std::uint64_t next_sequence_ = 0;
    std::size_t dispatched_ = 0;
    std::uint64_t fingerprint_ = 0;
    bool tracing_ = false;
    bool occupancy_ = false;
    std::vector<TraceRecord> trace_;
    std::vector<std::string> warnings_;
};

} // namespace pirate::netsim
