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

#include <pirate/baseline.hpp>
#include <pirate/pirate.hpp>

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

// Experiment configs, the run driver, metrics files and manifests.
namespace pirate::experiment {

using json = nlohmann::json;

inline constexpr const char *kVersion = "0.1.0";

enum class Framework { Pirate, LearningChain };

inline std::string to_string(Framework f) { return f == Framework::Pirate ? "pirate" : "learningchain"; }

struct NetworkConfig {
    double latency_ms = 10.0;
    double uplink_min_mbps = 80.0;
    double uplink_max_mbps = 240.0;
    double downlink_mbps = 1000.0;
    double gst_s = 0.0;
    double pre_gst_jitter_s = 0.0;
};

struct AdversaryConfig {
    adversary::Strategy strategy;
    std::size_t count = 0;
    bool placement_first = false; // byzantine ids 0..count-1 instead of a seeded draw
};

struct ConsensusConfig {
    double view_timeout_s = 0.0;
    double fallback_timeout_s = 0.0;
    HandoffMode handoff = HandoffMode::MemberRelay;
    std::size_t liveness_timeouts = 400;
};

struct ShardingConfig {
    std::size_t reconfigure_every = 50; // 0 disables reconfiguration
    double churn_fraction = 0.0;
    std::size_t k_evict = 1;
    sharding::AdmissionPolicy policy;
};

struct BaselineConfig {
    std::size_t l = 0;
    double mining_delay_s = 0.0;
};

struct ExperimentConfig {
    Framework framework = Framework::Pirate;
    std::uint64_t seed = 0;
    std::size_t n = 50;
    std::size_t c = 0;                  // 0 means c = n
    std::size_t gradients_per_step = 0; // 0 means round(c^2 / n)
    std::size_t iterations = 10;
    std::uint64_t payload_bytes = megabytes(28);
    NetworkConfig network;
    aggregation::AggregatorSpec aggregator;
    training::TaskSpec task;
    AdversaryConfig adversary;
    ConsensusConfig consensus;
    ShardingConfig sharding;
    BaselineConfig baseline;

    std::size_t committee_size() const { return c == 0 ? n : c; }
    std::size_t step_width() const {
        return gradients_per_step ? gradients_per_step
                                  : allreduce::default_gradients_per_step(n, committee_size());
    }
};

/* ------------------------------------------------------------- parsing */

namespace detail {

/// Typed field access with the dotted path in every diagnostic.
class Reader {
  public:
    Reader(const json &j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    std::string where(const std::string &key = "") const {
        if (key.empty()) return path_.empty() ? "config" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    bool has(const std::string &key) const { return j_.contains(key); }

    void allow(std::initializer_list<const char *> keys) const {
        std::set<std::string> ok(keys.begin(), keys.end());
        for (const auto &item : j_.items())
            if (!ok.count(item.key())) throw ConfigError(where(item.key()) + ": unknown field");
    }

    double number(const std::string &key, double fallback) const {
        if (!has(key)) return fallback;
        const auto &v = j_.at(key);
        if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) throw ConfigError(where(key) + ": must be finite");
        return d;
    }

    double nonneg(const std::string &key, double fallback) const {
        const double d = number(key, fallback);
        if (d < 0) throw ConfigError(where(key) + ": must be >= 0");
        return d;
    }

    std::uint64_t count(const std::string &key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        const auto &v = j_.at(key);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
            throw ConfigError(where(key) + ": expected a non-negative integer");
        return v.get<std::uint64_t>();
    }

    std::string text(const std::string &key, const std::string &fallback) const {
        if (!has(key)) return fallback;
        const auto &v = j_.at(key);
        if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
        return v.get<std::string>();
    }

    std::optional<Reader> child(const std::string &key) const {
        if (!has(key)) return std::nullopt;
        return Reader(j_.at(key), where(key));
    }

    const json &raw(const std::string &key) const { return j_.at(key); }

  private:
    const json &j_;
    std::string path_;
};

} // namespace detail

/// Parses a config document, or the `config` member of a run manifest.
inline ExperimentConfig parse_config(const json &doc) {
    const json &j = doc.is_object() && doc.contains("config") && doc.contains("version") ? doc.at("config") : doc;
    detail::Reader r(j, "");
    r.allow({"framework", "seed", "n", "c", "gradients_per_step", "iterations", "payload_mb", "payload_bytes",
             "network", "aggregator", "task", "adversary", "consensus", "sharding", "baseline", "output"});
    ExperimentConfig cfg;

    const std::string fw = r.text("framework", "pirate");
    if (fw == "pirate") cfg.framework = Framework::Pirate;
    else if (fw == "learningchain") cfg.framework = Framework::LearningChain;
    else throw ConfigError("framework: expected \"pirate\" or \"learningchain\", got \"" + fw + "\"");

    if (!r.has("seed")) throw ConfigError("seed: required field is missing");
    cfg.seed = r.count("seed", 0);
    cfg.n = r.count("n", cfg.n);
    if (cfg.n < 1) throw ConfigError("n: must be >= 1");
    cfg.c = r.count("c", 0);
    cfg.gradients_per_step = r.count("gradients_per_step", 0);
    cfg.iterations = r.count("iterations", cfg.iterations);
    if (r.has("payload_mb") && r.has("payload_bytes"))
        throw ConfigError("payload_mb: give either payload_mb or payload_bytes, not both");
    if (r.has("payload_bytes")) cfg.payload_bytes = r.count("payload_bytes", 0);
    if (r.has("payload_mb")) {
        const double mb = r.number("payload_mb", 28);
        if (!(mb > 0)) throw ConfigError("payload_mb: must be > 0");
        cfg.payload_bytes = static_cast<std::uint64_t>(std::llround(mb * kBytesPerMegabyte));
    }
    if (cfg.payload_bytes == 0) throw ConfigError("payload_bytes: must be > 0");

    if (auto net = r.child("network")) {
        net->allow({"latency_ms", "uplink_min_mbps", "uplink_max_mbps", "downlink_mbps", "gst_s", "pre_gst_jitter_s"});
        auto &nw = cfg.network;
        nw.latency_ms = net->nonneg("latency_ms", nw.latency_ms);
        nw.uplink_min_mbps = net->number("uplink_min_mbps", nw.uplink_min_mbps);
        nw.uplink_max_mbps = net->number("uplink_max_mbps", nw.uplink_max_mbps);
        nw.downlink_mbps = net->number("downlink_mbps", nw.downlink_mbps);
        nw.gst_s = net->nonneg("gst_s", nw.gst_s);
        nw.pre_gst_jitter_s = net->nonneg("pre_gst_jitter_s", nw.pre_gst_jitter_s);
        if (!(nw.uplink_min_mbps > 0)) throw ConfigError("network.uplink_min_mbps: must be > 0");
        if (nw.uplink_max_mbps < nw.uplink_min_mbps)
            throw ConfigError("network.uplink_max_mbps: must be >= uplink_min_mbps");
        if (!(nw.downlink_mbps > 0)) throw ConfigError("network.downlink_mbps: must be > 0");
    }

    if (auto a = r.child("aggregator")) {
        a->allow({"kind", "f", "m", "l", "threshold"});
        const std::string kind = a->text("kind", aggregation::to_string(cfg.aggregator.kind));
        auto k = aggregation::aggregator_from_string(kind);
        if (!k) throw ConfigError("aggregator.kind: unknown aggregator \"" + kind + "\"");
        cfg.aggregator.kind = *k;
        cfg.aggregator.f = a->count("f", 0);
        cfg.aggregator.m = a->count("m", 1);
        cfg.aggregator.l = a->count("l", 1);
        cfg.aggregator.detection_threshold = a->number("threshold", cfg.aggregator.detection_threshold);
        try {
            cfg.aggregator.validate();
        } catch (const ConfigError &e) {
            throw ConfigError(std::string("aggregator: ") + e.what());
        }
    }

    if (auto t = r.child("task")) {
        t->allow({"kind", "dimension", "samples_per_node", "holdout", "batch_size", "learning_rate", "noise",
                  "sharding"});
        auto &ts = cfg.task;
        const std::string kind = t->text("kind", "least-squares");
        if (kind == "least-squares") ts.kind = training::TaskKind::LeastSquares;
        else if (kind == "logistic") ts.kind = training::TaskKind::Logistic;
        else throw ConfigError("task.kind: expected \"least-squares\" or \"logistic\"");
        ts.dimension = t->count("dimension", ts.dimension);
        ts.samples_per_node = t->count("samples_per_node", ts.samples_per_node);
        ts.holdout = t->count("holdout", ts.holdout);
        ts.batch_size = t->count("batch_size", ts.batch_size);
        ts.learning_rate = t->nonneg("learning_rate", ts.learning_rate);
        ts.noise = t->nonneg("noise", ts.noise);
        const std::string sh = t->text("sharding", "iid");
        if (sh == "iid") ts.sharding = training::ShardingMode::Iid;
        else if (sh == "non-iid-by-label") ts.sharding = training::ShardingMode::NonIidByLabel;
        else throw ConfigError("task.sharding: expected \"iid\" or \"non-iid-by-label\"");
        try {
            ts.validate();
        } catch (const ConfigError &e) {
            throw ConfigError(e.what());
        }
    }

    if (auto a = r.child("adversary")) {
        a->allow({"strategy", "count", "fraction", "magnitude", "noise", "scope", "target", "placement"});
        auto &s = cfg.adversary.strategy;
        const std::string name = a->text("strategy", "none");
        auto k = adversary::strategy_from_string(name);
        if (!k) throw ConfigError("adversary.strategy: unknown strategy \"" + name + "\"");
        s.kind = *k;
        s.magnitude = a->number("magnitude", 1.0);
        s.noise = a->nonneg("noise", 0.0);
        const std::string scope = a->text("scope", "all");
        auto sc = adversary::scope_from_string(scope);
        if (!sc) throw ConfigError("adversary.scope: unknown scope \"" + scope + "\"");
        s.scope = *sc;
        if (a->has("target")) {
            const auto &t = a->raw("target");
            if (!t.is_array()) throw ConfigError("adversary.target: expected an array of numbers");
            std::vector<double> v;
            for (const auto &x : t) {
                if (!x.is_number()) throw ConfigError("adversary.target: expected an array of numbers");
                v.push_back(x.get<double>());
            }
            if (v.size() != cfg.task.dimension)
                throw ConfigError("adversary.target: length must equal task.dimension");
            s.target = v;
        }
        if (a->has("count") && a->has("fraction"))
            throw ConfigError("adversary.count: give either count or fraction, not both");
        cfg.adversary.count = a->count("count", 0);
        if (a->has("fraction")) {
            const double f = a->number("fraction", 0.0);
            if (f < 0 || f > 1) throw ConfigError("adversary.fraction: must be in [0, 1]");
            cfg.adversary.count = static_cast<std::size_t>(std::llround(f * static_cast<double>(cfg.n)));
        }
        if (cfg.adversary.count > cfg.n) throw ConfigError("adversary.count: exceeds n");
        const std::string placement = a->text("placement", "random");
        if (placement != "random" && placement != "first")
            throw ConfigError("adversary.placement: expected \"random\" or \"first\"");
        cfg.adversary.placement_first = placement == "first";
        try {
            s.validate();
        } catch (const ConfigError &e) {
            throw ConfigError(e.what());
        }
        if (s.kind == adversary::StrategyKind::None) cfg.adversary.count = 0;
    }

    if (auto c = r.child("consensus")) {
        c->allow({"view_timeout_s", "fallback_timeout_s", "handoff", "liveness_timeouts"});
        auto &cc = cfg.consensus;
        cc.view_timeout_s = c->nonneg("view_timeout_s", 0.0);
        cc.fallback_timeout_s = c->nonneg("fallback_timeout_s", 0.0);
        const std::string h = c->text("handoff", "member-relay");
        if (h == "member-relay") cc.handoff = HandoffMode::MemberRelay;
        else if (h == "leader-broadcast") cc.handoff = HandoffMode::LeaderBroadcast;
        else throw ConfigError("consensus.handoff: expected \"member-relay\" or \"leader-broadcast\"");
        cc.liveness_timeouts = c->count("liveness_timeouts", cc.liveness_timeouts);
        if (cc.liveness_timeouts < 1) throw ConfigError("consensus.liveness_timeouts: must be >= 1");
    }

    if (auto s = r.child("sharding")) {
        s->allow({"reconfigure_every", "churn_fraction", "k_evict", "credit_floor", "credit_window"});
        auto &sc = cfg.sharding;
        sc.reconfigure_every = s->count("reconfigure_every", sc.reconfigure_every);
        sc.churn_fraction = s->nonneg("churn_fraction", 0.0);
        if (sc.churn_fraction > 1) throw ConfigError("sharding.churn_fraction: must be in [0, 1]");
        sc.k_evict = s->count("k_evict", sc.k_evict);
        sc.policy.credit_floor = s->nonneg("credit_floor", sc.policy.credit_floor);
        sc.policy.credit_window = s->count("credit_window", sc.policy.credit_window);
        if (sc.policy.credit_window < 1) throw ConfigError("sharding.credit_window: must be >= 1");
    }

    if (auto b = r.child("baseline")) {
        b->allow({"l", "mining_delay_s"});
        cfg.baseline.l = b->count("l", 0);
        cfg.baseline.mining_delay_s = b->nonneg("mining_delay_s", 0.0);
    }

    if (cfg.framework == Framework::Pirate) {
        const std::size_t c = cfg.committee_size();
        if (c < 1) throw ConfigError("c: must be >= 1");
        if (cfg.n % c != 0)
            throw ConfigError("c: n (" + std::to_string(cfg.n) + ") must be a multiple of c (" +
                              std::to_string(c) + ")");
        if (cfg.gradients_per_step > c) throw ConfigError("gradients_per_step: must be <= c");
    } else {
        if (cfg.baseline.l > cfg.n) throw ConfigError("baseline.l: must be <= n");
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error &e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config(doc);
}

/// Fully resolved config, defaults written out. Parsing it yields the same config.
inline json to_json(const ExperimentConfig &cfg) {
    json j;
    j["framework"] = to_string(cfg.framework);
    j["seed"] = cfg.seed;
    j["n"] = cfg.n;
    j["iterations"] = cfg.iterations;
    j["payload_bytes"] = cfg.payload_bytes;
    if (cfg.framework == Framework::Pirate) {
        j["c"] = cfg.committee_size();
        j["gradients_per_step"] = cfg.step_width();
    }
    j["network"] = {{"latency_ms", cfg.network.latency_ms},
                    {"uplink_min_mbps", cfg.network.uplink_min_mbps},
                    {"uplink_max_mbps", cfg.network.uplink_max_mbps},
                    {"downlink_mbps", cfg.network.downlink_mbps},
                    {"gst_s", cfg.network.gst_s},
                    {"pre_gst_jitter_s", cfg.network.pre_gst_jitter_s}};
    j["aggregator"] = {{"kind", aggregation::to_string(cfg.aggregator.kind)},
                       {"f", cfg.aggregator.f},
                       {"m", cfg.aggregator.m},
                       {"l", cfg.aggregator.l},
                       {"threshold", cfg.aggregator.detection_threshold}};
    j["task"] = {{"kind", training::to_string(cfg.task.kind)},
                 {"dimension", cfg.task.dimension},
                 {"samples_per_node", cfg.task.samples_per_node},
                 {"holdout", cfg.task.holdout},
                 {"batch_size", cfg.task.batch_size},
                 {"learning_rate", cfg.task.learning_rate},
                 {"noise", cfg.task.noise},
                 {"sharding", training::to_string(cfg.task.sharding)}};
    json adv = {{"strategy", adversary::to_string(cfg.adversary.strategy.kind)},
                {"count", cfg.adversary.count},
                {"magnitude", cfg.adversary.strategy.magnitude},
                {"noise", cfg.adversary.strategy.noise},
                {"scope", adversary::to_string(cfg.adversary.strategy.scope)},
                {"placement", cfg.adversary.placement_first ? "first" : "random"}};
    if (cfg.adversary.strategy.target) adv["target"] = *cfg.adversary.strategy.target;
    j["adversary"] = adv;
    j["consensus"] = {{"view_timeout_s", cfg.consensus.view_timeout_s},
                      {"fallback_timeout_s", cfg.consensus.fallback_timeout_s},
                      {"handoff", to_string(cfg.consensus.handoff)},
                      {"liveness_timeouts", cfg.consensus.liveness_timeouts}};
    j["sharding"] = {{"reconfigure_every", cfg.sharding.reconfigure_every},
                     {"churn_fraction", cfg.sharding.churn_fraction},
                     {"k_evict", cfg.sharding.k_evict},
                     {"credit_floor", cfg.sharding.policy.credit_floor},
                     {"credit_window", cfg.sharding.policy.credit_window}};
    j["baseline"] = {{"l", cfg.baseline.l ? cfg.baseline.l : baseline::default_l(cfg.n)},
                     {"mining_delay_s", cfg.baseline.mining_delay_s}};
    return j;
}

/* ---------------------------------------------------------------- runs */

struct MetricsRow {
    std::uint64_t iteration = 0;
    double simulated_time_s = 0.0;
    std::uint64_t per_node_storage_bytes = 0;
    double global_loss = 0.0;
    std::size_t committed_blocks = 0;
    std::size_t rejected_blocks = 0;
    std::size_t evictions = 0;
};

inline constexpr const char *kMetricsHeader =
    "iteration,simulated_time_s,per_node_storage_bytes,global_loss,committed_blocks,rejected_blocks,evictions";

struct RunOutput {
    std::vector<MetricsRow> rows;
    std::vector<double> iteration_times; // probe update intervals
    std::optional<std::string> failure;  // liveness diagnostics
    Digest fingerprint{};
    std::vector<double> final_params;
    std::size_t total_evictions = 0;
};

using Observer = std::function<void(const IterationReport &)>;

/// Link profile of node `id`; uplinks are drawn per id so they do not shift
/// when n changes.
inline netsim::LinkProfile link_for(const ExperimentConfig &cfg, NodeId id) {
    Rng r(derive_seed(cfg.seed, streams::kUplink, id));
    netsim::LinkProfile p;
    p.uplink_mbps = r.uniform(cfg.network.uplink_min_mbps, cfg.network.uplink_max_mbps);
    p.downlink_mbps = cfg.network.downlink_mbps;
    p.latency_ms = cfg.network.latency_ms;
    return p;
}

inline std::set<NodeId> byzantine_ids(const ExperimentConfig &cfg) {
    std::vector<NodeId> ids(cfg.n);
    for (NodeId i = 0; i < cfg.n; ++i) ids[i] = i;
    if (!cfg.adversary.placement_first) {
        Rng r(derive_seed(cfg.seed, streams::kAdversary, 0xB1Au));
        r.shuffle(ids);
    }
    return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cfg.adversary.count)};
}

namespace detail {

inline MetricsRow row_from(const IterationReport &rep, double loss, std::size_t evictions) {
    return {rep.iteration,         rep.end,   rep.max_storage_bytes, loss, rep.committed_blocks,
            rep.rejected_blocks, evictions};
}

inline Digest fold(const Digest &acc, std::uint64_t fp) { return Hasher{}.digest(acc).u64(fp).finish(); }

} // namespace detail

inline RunOutput run_learningchain(const ExperimentConfig &cfg, const training::LearningTask &task,
                                   const Observer &observe) {
    RunOutput out;
    const auto bad = byzantine_ids(cfg);
    std::vector<NodeSetup> setups;
    for (NodeId id = 0; id < cfg.n; ++id) {
        NodeSetup s;
        s.id = id;
        s.link = link_for(cfg, id);
        s.shard = id;
        if (bad.count(id)) {
            s.behavior = adversary::Behavior(cfg.adversary.strategy);
            s.byzantine = true;
        }
        setups.push_back(s);
    }
    baseline::BaselineParams bp;
    bp.l = cfg.baseline.l;
    bp.payload_bytes = cfg.payload_bytes;
    bp.mining_delay_s = cfg.baseline.mining_delay_s;
    bp.learning_rate = cfg.task.learning_rate;
    bp.seed = cfg.seed;
    baseline::LearningChainSystem sys(bp, setups, task, std::vector<double>(cfg.task.dimension, 0.0), 0.0);
    NodeId probe = 0;
    while (bad.count(probe) && probe + 1 < cfg.n) ++probe;
    try {
        for (std::uint64_t t = 0; t < cfg.iterations; ++t) {
            auto rep = sys.run_iteration(t);
            if (observe) observe(rep);
            out.iteration_times.push_back(rep.probe_update_time);
            out.rows.push_back(detail::row_from(rep, task.global_loss(sys.model_of(probe)), 0));
        }
    } catch (const LivenessFailure &e) {
        out.failure = e.what();
    }
    out.fingerprint = detail::fold(Digest{}, sys.fingerprint());
    out.final_params = sys.model_of(probe);
    return out;
}

inline RunOutput run_pirate(const ExperimentConfig &cfg, const training::LearningTask &task,
                            const Observer &observe) {
    RunOutput out;
    const std::size_t c = cfg.committee_size();
    const auto bad = byzantine_ids(cfg);

    std::vector<NodeId> ids(cfg.n);
    for (NodeId i = 0; i < cfg.n; ++i) ids[i] = i;
    auto assignment = sharding::form_committees(ids, c, cfg.seed);

    std::map<NodeId, NodeSetup> setups;
    sharding::CreditRecords credit;
    for (NodeId id : ids) {
        NodeSetup s;
        s.id = id;
        s.link = link_for(cfg, id);
        s.shard = id;
        if (bad.count(id)) {
            s.behavior = adversary::Behavior(cfg.adversary.strategy);
            s.byzantine = true;
        }
        setups[id] = s;
        sharding::NodeProfile p;
        p.id = id;
        p.link = s.link;
        credit.profiles[id] = p;
    }

    PirateParams pp;
    pp.gradients_per_step = cfg.step_width();
    pp.payload_bytes = cfg.payload_bytes;
    pp.aggregator = cfg.aggregator;
    pp.view_timeout_s = cfg.consensus.view_timeout_s;
    pp.fallback_timeout_s = cfg.consensus.fallback_timeout_s;
    pp.handoff = cfg.consensus.handoff;
    pp.gst_s = cfg.network.gst_s;
    pp.pre_gst_jitter_s = cfg.network.pre_gst_jitter_s;
    pp.learning_rate = cfg.task.learning_rate;
    pp.liveness_timeouts = cfg.consensus.liveness_timeouts;
    pp.seed = cfg.seed;

    std::vector<double> params(cfg.task.dimension, 0.0);
    double clock = 0.0;
    Digest fp{};
    NodeId next_id = static_cast<NodeId>(cfg.n);
    Rng churn(derive_seed(cfg.seed, streams::kProfile));
    const std::size_t epoch_len = cfg.sharding.reconfigure_every ? cfg.sharding.reconfigure_every : cfg.iterations;
    std::size_t pending_evictions = 0;

    std::uint64_t t = 0;
    std::uint64_t epoch = 0;
    while (t < cfg.iterations) {
        std::vector<NodeSetup> active;
        for (NodeId id : assignment.members()) active.push_back(setups.at(id));
        std::sort(active.begin(), active.end(), [](const auto &a, const auto &b) { return a.id < b.id; });
        PirateParams ep = pp;
        ep.seed = derive_seed(cfg.seed, 0xE90C, epoch);
        PirateSystem sys(ep, assignment, active, task, params, clock);
        std::vector<std::pair<NodeId, double>> weights;
        bool failed = false;
        const std::uint64_t stop = std::min<std::uint64_t>(cfg.iterations, t + epoch_len);
        try {
            for (; t < stop; ++t) {
                auto rep = sys.run_iteration(t);
                if (observe) observe(rep);
                weights.insert(weights.end(), rep.weights.begin(), rep.weights.end());
                out.iteration_times.push_back(rep.probe_update_time);
                NodeId probe = kNoNode;
                for (const auto &[id, d] : rep.final_digests) {
                    probe = id;
                    break;
                }
                const double loss = task.global_loss(probe == kNoNode ? params : sys.model_of(probe));
                out.rows.push_back(detail::row_from(rep, loss, pending_evictions));
                pending_evictions = 0;
            }
        } catch (const LivenessFailure &e) {
            out.failure = e.what();
            failed = true;
        }
        fp = detail::fold(fp, sys.fingerprint());
        clock = sys.now();
        for (NodeId id : assignment.members())
            if (!setups.at(id).byzantine) {
                params = sys.model_of(id);
                break;
            }
        if (failed || t >= cfg.iterations) break;

        // reconfiguration: credit, eviction, churn, cuckoo joins
        sharding::update_credit(credit, weights, epoch);
        auto evicted = sharding::evict_low_credit(credit, cfg.sharding.policy);
        std::set<NodeId> leaving(evicted.begin(), evicted.end());
        out.total_evictions += evicted.size();
        pending_evictions = evicted.size();
        const auto churners = static_cast<std::size_t>(std::llround(cfg.sharding.churn_fraction * cfg.n));
        auto members = assignment.members();
        std::sort(members.begin(), members.end());
        for (std::size_t k = 0; k < churners && leaving.size() < members.size(); ++k) {
            NodeId pick;
            do pick = members[churn.index(members.size())];
            while (leaving.count(pick));
            leaving.insert(pick);
        }
        for (NodeId gone : leaving) {
            const std::size_t shard = setups.at(gone).shard;
            sharding::depart(assignment, gone);
            credit.profiles.erase(gone);
            NodeId joining = kNoNode;
            for (int attempt = 0; attempt < 64; ++attempt) {
                const NodeId cand = next_id++;
                sharding::NodeProfile p;
                p.id = cand;
                p.link = link_for(cfg, cand);
                p.join_epoch = epoch + 1;
                if (sharding::assess(p, cfg.sharding.policy).admit) {
                    credit.profiles[cand] = p;
                    joining = cand;
                    break;
                }
            }
            if (joining == kNoNode) throw ConfigError("sharding: no candidate passed admission");
            NodeSetup s;
            s.id = joining;
            s.link = link_for(cfg, joining);
            s.shard = shard;
            setups[joining] = s;
            assignment = sharding::cuckoo_reassign(std::move(assignment), joining, cfg.sharding.k_evict, churn);
        }
        ++epoch;
    }
    out.fingerprint = fp;
    out.final_params = params;
    return out;
}

/// Runs one experiment. Config errors throw ConfigError; liveness failures are
/// reported in RunOutput::failure with the rows completed so far.
inline RunOutput run(const ExperimentConfig &cfg, const Observer &observe = {}) {
    const auto task = training::make_task(cfg.task, cfg.n, cfg.seed);
    return cfg.framework == Framework::Pirate ? run_pirate(cfg, task, observe)
                                              : run_learningchain(cfg, task, observe);
}

/* -------------------------------------------------------------- output */

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRow> &rows) {
    std::ostringstream os;
    os << kMetricsHeader << "\n";
    for (const auto &r : rows)
        os << r.iteration << "," << format_real(r.simulated_time_s) << "," << r.per_node_storage_bytes << ","
           << format_real(r.global_loss) << "," << r.committed_blocks << "," << r.rejected_blocks << ","
           << r.evictions << "\n";
    return os.str();
}

inline json manifest(const ExperimentConfig &cfg, const RunOutput &out) {
    json m;
    m["version"] = kVersion;
    m["seed"] = cfg.seed;
    m["fingerprint"] = to_hex(out.fingerprint);
    m["status"] = out.failure ? "liveness-failure" : "ok";
    if (out.failure) m["failure"] = *out.failure;
    m["config"] = to_json(cfg);
    return m;
}

inline void write_text(const std::filesystem::path &p, const std::string &s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << s;
}

inline void write_outputs(const std::filesystem::path &dir, const ExperimentConfig &cfg, const RunOutput &out) {
    std::filesystem::create_directories(dir);
    write_text(dir / "metrics.csv", metrics_csv(out.rows));
    write_text(dir / "manifest.json", manifest(cfg, out).dump(2) + "\n");
}

/// Reads a metrics file. Throws std::runtime_error naming the defect.
inline std::vector<MetricsRow> read_metrics(const std::filesystem::path &p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error(p.string() + ": cannot open");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(p.string() + ": empty file");
    if (line != kMetricsHeader) throw std::runtime_error(p.string() + ": unexpected header");
    std::vector<MetricsRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw std::runtime_error(p.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
        try {
            MetricsRow r;
            r.iteration = std::stoull(f[0]);
            r.simulated_time_s = std::stod(f[1]);
            r.per_node_storage_bytes = std::stoull(f[2]);
            r.global_loss = std::stod(f[3]);
            r.committed_blocks = std::stoull(f[4]);
            r.rejected_blocks = std::stoull(f[5]);
            r.evictions = std::stoull(f[6]);
            rows.push_back(r);
        } catch (const std::exception &) {
            throw std::runtime_error(p.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    return rows;
}

/* --------------------------------------------------------------- sweeps */

struct SweepAxis {
    std::string field; // dotted path into the config document
    std::vector<json> values;
};

/// Parses "field=v1,v2,..."; values are JSON literals or bare strings.
inline SweepAxis parse_axis(const std::string &spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--vary: expected field=v1,v2,...");
    SweepAxis a;
    a.field = spec.substr(0, eq);
    std::stringstream ss(spec.substr(eq + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        json v = json::parse(item, nullptr, false);
        a.values.push_back(v.is_discarded() ? json(item) : v);
    }
    if (a.values.empty()) throw ConfigError("--vary " + a.field + ": empty value list");
    return a;
}

inline void set_field(json &doc, const std::string &dotted, const json &value) {
    json *cur = &doc;
    std::stringstream ss(dotted);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur->contains(parts[i])) (*cur)[parts[i]] = json::object();
        cur = &(*cur)[parts[i]];
    }
    (*cur)[parts.back()] = value;
}

struct SweepPoint {
    json document;
    std::string label;
};

/// Cross product of the axes over a base document.
inline std::vector<SweepPoint> expand(const json &base, const std::vector<SweepAxis> &axes) {
    std::vector<SweepPoint> points{{base, ""}};
    for (const auto &axis : axes) {
        std::vector<SweepPoint> next;
        for (const auto &p : points)
            for (const auto &v : axis.values) {
                SweepPoint q = p;
                set_field(q.document, axis.field, v);
                const std::string val = v.is_string() ? v.get<std::string>() : v.dump();
                q.label += (q.label.empty() ? "" : "_") + axis.field + "-" + val;
                next.push_back(std::move(q));
            }
        points = std::move(next);
    }
    return points;
}

inline double mean_of(const std::vector<double> &xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

} // namespace pirate::experiment
