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

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include "harness.hpp"

#include <pirate/experiment.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

using namespace pirate;
using nlohmann::json;

namespace {

// Tolerances and sizes, pinned here.
constexpr std::uint64_t kCaseStudyPayload = 28000000;
constexpr std::uint64_t kStorageCap = 12 * kCaseStudyPayload; // 336 MB
constexpr std::size_t kStorageIterations = 100;
constexpr std::size_t kSweepIterations = 20;
constexpr double kFlatnessBound = 0.10;
constexpr std::size_t kRingRunsPerK = 100;
constexpr double kOracleTolerance = 1e-9;
constexpr std::size_t kSafetyRuns = 1200;
constexpr std::size_t kResilienceN = 30;
constexpr std::size_t kResilienceT = 200;
constexpr double kKrumLossFactor = 2.0;
constexpr double kTargetTolerance = 1e-3;
constexpr double kFilteredStepRate = 0.95;
constexpr double kHarmfulMagnitude = 10.0;
constexpr std::size_t kChurnSeeds = 500;
constexpr double kChurnRate = 0.99;

int failures = 0;

void report(int id, const char *name, bool ok, const std::string &detail) {
    std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char *f, auto... xs) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, xs...);
    return buf;
}

json case_study(const std::string &framework, std::size_t n, std::uint64_t payload, std::size_t iterations) {
    json j = {{"framework", framework}, {"seed", 2026},       {"n", n},
              {"iterations", iterations}, {"payload_bytes", payload}, {"aggregator", {{"kind", "mean"}}}};
    if (framework == "pirate") j["c"] = 50;
    return j;
}

experiment::RunOutput run_doc(const json &doc) { return experiment::run(experiment::parse_config(doc)); }

/* ------------------------------------------------------------------ 1 */

void storage_shape() {
    const auto p = run_doc(case_study("pirate", 50, kCaseStudyPayload, kStorageIterations));
    const auto l = run_doc(case_study("learningchain", 50, kCaseStudyPayload, kStorageIterations));
    bool ok = !p.failure && p.rows.size() == kStorageIterations && l.rows.size() == kStorageIterations;
    std::uint64_t pmax = 0;
    bool flat = true;
    for (const auto &r : p.rows) {
        pmax = std::max(pmax, r.per_node_storage_bytes);
        flat &= r.per_node_storage_bytes == p.rows.front().per_node_storage_bytes;
    }
    // linear with zero residual: every first difference equals 51 payloads
    bool linear = true;
    std::uint64_t prev = 0;
    for (const auto &r : l.rows) {
        linear &= r.per_node_storage_bytes - prev == 51 * kCaseStudyPayload;
        prev = r.per_node_storage_bytes;
    }
    const std::uint64_t want = kStorageIterations * 51 * kCaseStudyPayload;
    const std::uint64_t final_lc = l.rows.empty() ? 0 : l.rows.back().per_node_storage_bytes;
    ok = ok && pmax <= kStorageCap && flat && linear && final_lc == want;
    report(1, "storage shape", ok,
           fmt("pirate max %.1f MB (cap 336), constant=%s; learningchain final %.2f GB (want %.2f), linear=%s",
               pmax / 1e6, flat ? "yes" : "no", final_lc / 1e9, want / 1e9, linear ? "yes" : "no"));
}

/* ------------------------------------------------------------------ 2 */

void iteration_time() {
    const std::vector<std::size_t> lc_ns{50, 60, 70, 80, 90, 100, 150, 200};
    const std::vector<std::size_t> pirate_ns{50, 100, 150, 200};
    bool ok = true;
    std::string detail;
    for (std::uint64_t payload : {std::uint64_t{10000000}, kCaseStudyPayload}) {
        std::map<std::size_t, double> lc, pi;
        for (auto n : lc_ns) {
            const auto o = run_doc(case_study("learningchain", n, payload, kSweepIterations));
            ok &= !o.failure;
            lc[n] = experiment::mean_of(o.iteration_times);
        }
        for (auto n : pirate_ns) {
            const auto o = run_doc(case_study("pirate", n, payload, kSweepIterations));
            ok &= !o.failure;
            pi[n] = experiment::mean_of(o.iteration_times);
        }
        bool faster = true, increasing = true;
        for (auto n : pirate_ns) faster &= pi[n] < lc[n];
        for (std::size_t i = 1; i < lc_ns.size(); ++i) increasing &= lc[lc_ns[i]] > lc[lc_ns[i - 1]];
        double lo = 1e300, hi = 0;
        for (auto &[n, t] : pi) {
            lo = std::min(lo, t);
            hi = std::max(hi, t);
        }
        const double spread = (hi - lo) / lo;
        ok &= faster && increasing && spread < kFlatnessBound;
        detail += fmt("%g MB: pirate %.1f..%.1f s (spread %.1f%%), learningchain %.1f..%.1f s, faster=%s increasing=%s; ",
                      payload / 1e6, lo, hi, 100 * spread, lc[lc_ns.front()], lc[lc_ns.back()], faster ? "yes" : "no",
                      increasing ? "yes" : "no");
    }
    report(2, "iteration-time ordering", ok, detail);
}

/* ------------------------------------------------------------------ 3 */

void ring_correctness() {
    std::size_t runs = 0, bad_handoffs = 0, split = 0, oracle_miss = 0, liveness = 0;
    double worst = 0;
    const aggregation::AggregatorSpec specs[] = {{aggregation::AggregatorKind::Mean},
                                                 {aggregation::AggregatorKind::LNearest, 0, 1, 2},
                                                 {aggregation::AggregatorKind::DetectionWeighted},
                                                 {aggregation::AggregatorKind::MultiKrum, 1, 2}};
    for (std::size_t k : {2u, 4u, 8u})
        for (std::size_t r = 0; r < kRingRunsPerK; ++r) {
            harness::Scenario s;
            s.c = 4;
            s.n = k * s.c;
            s.seed = 1000 * k + r;
            s.payload_bytes = 20000;
            s.aggregator = specs[r % 4];
            s.gradients_per_step = s.aggregator.kind == aggregation::AggregatorKind::MultiKrum ? 4 : 1 + r % 2;
            try {
                auto b = harness::build(s);
                for (std::uint64_t t = 0; t < 2; ++t) {
                    const auto rep = b->system->run_iteration(t);
                    bad_handoffs += rep.handoffs != allreduce::handoffs_per_iteration(k);
                    std::set<Digest> finals;
                    for (const auto &[id, d] : rep.final_digests) finals.insert(d);
                    split += finals.size() != 1;
                    const auto oracle = harness::ring_oracle(*b->system, s.gradients_per_step, s.aggregator);
                    double diff = 0;
                    for (std::size_t i = 0; i < oracle.dim(); ++i)
                        diff = std::max(diff, std::fabs(rep.final_aggregate->values[i] - oracle.values[i]));
                    worst = std::max(worst, diff);
                    oracle_miss += !(diff <= kOracleTolerance);
                }
                ++runs;
            } catch (const LivenessFailure &) {
                ++liveness;
            }
        }
    const bool ok = runs == 3 * kRingRunsPerK && !bad_handoffs && !split && !oracle_miss && !liveness;
    report(3, "ring correctness", ok,
           fmt("%zu runs x 2 iterations over K in {2,4,8}; handoff mismatches %zu, split finals %zu, oracle misses %zu "
               "(max diff %.2e), liveness failures %zu",
               runs, bad_handoffs, split, oracle_miss, worst, liveness));
}

/* ------------------------------------------------------------------ 4 */

void consensus_safety() {
    using adversary::StrategyKind;
    const StrategyKind kinds[] = {StrategyKind::EquivocateLeader, StrategyKind::Withhold,
                                  StrategyKind::FalsifyPartialAggregation};
    std::size_t runs = 0, conflicts = 0, falsified = 0, liveness = 0, windows = 0, met = 0;
    for (std::size_t r = 0; r < kSafetyRuns; ++r) {
        harness::Scenario s;
        const std::size_t cs[] = {4, 7, 10};
        s.c = cs[r % 3];
        s.n = (r % 5 == 4) ? 2 * s.c : s.c;
        s.seed = 50000 + r;
        s.payload_bytes = 20000;
        s.gradients_per_step = 1 + r % 2;
        // a quarter of the runs start with an unstable network
        if (r % 4 == 3) {
            s.gst_s = 2.0;
            s.jitter_s = 0.3;
        }
        Rng pick(derive_seed(s.seed, streams::kAdversary));
        auto probe = harness::build(s);
        for (const auto &members : probe->assignment.committees) {
            auto order = members;
            pick.shuffle(order);
            for (std::size_t i = 0; i < consensus::max_faulty(s.c); ++i) {
                // mixed strategies every fourth run, otherwise one per run
                const auto kind = r % 4 == 2 ? kinds[(r + i) % 3] : kinds[r % 3];
                s.byzantine[order[i]] = harness::strategy(kind, 3.0);
            }
        }
        try {
            auto b = harness::build(s);
            for (std::uint64_t t = 0; t < 2; ++t) b->system->run_iteration(t);
            conflicts += !harness::prefix_consistent(*b->system);
            falsified += harness::falsified_commits(*b->system, s.aggregator);
            // pre-GST messages may still be in flight for up to the jitter bound
            const double settled = s.gst_s > 0 ? s.gst_s + s.jitter_s + b->system->view_timeout() : 0.0;
            const auto [w, ok] = harness::liveness_windows(*b->system, settled);
            windows += w;
            met += ok;
            ++runs;
        } catch (const LivenessFailure &) {
            ++liveness;
        }
    }
    const bool ok = runs == kSafetyRuns && !conflicts && !falsified && !liveness && windows == met && windows > 0;
    report(4, "consensus safety", ok,
           fmt("%zu/%zu runs at c in {4,7,10}; conflicting commits %zu, falsified commits %zu, liveness failures %zu, "
               "honest-leader windows committed within 3 views %zu/%zu",
               runs, kSafetyRuns, conflicts, falsified, liveness, met, windows));
}

/* ------------------------------------------------------------------ 5 */

json resilience(const json &aggregator, const json &adv) {
    json j = {{"framework", "pirate"}, {"seed", 77},
              {"n", kResilienceN},       {"c", kResilienceN},
              {"gradients_per_step", kResilienceN}, {"iterations", kResilienceT},
              {"payload_bytes", 10000},  {"aggregator", aggregator},
              {"sharding", {{"reconfigure_every", 0}}}}; // no credit evictions: attackers stay in every step
    if (!adv.is_null()) j["adversary"] = adv;
    return j;
}

// Counts committed steps that carry attacker gradients and those where every
// attacker got weight 0.
bool filtered_steps(double magnitude, std::size_t *steps, std::size_t *filtered) {
    const auto cfg = experiment::parse_config(resilience(
        {{"kind", "detection-weighted"}}, {{"strategy", "harmful-gradient"}, {"count", 9}, {"magnitude", magnitude}}));
    const auto byz = experiment::byzantine_ids(cfg);
    const auto out = experiment::run(cfg, [&](const IterationReport &rep) {
        bool any = false, all_zero = true;
        for (const auto &[id, w] : rep.weights)
            if (byz.count(id)) {
                any = true;
                all_zero &= w == 0.0;
            }
        if (!any) return;
        ++*steps;
        *filtered += all_zero;
    });
    return !out.failure;
}

void aggregator_resilience() {
    // (a) multi-krum against a third of omniscient colluders
    const json mk = {{"kind", "multi-krum"}, {"f", 10}, {"m", 10}};
    const auto honest = run_doc(resilience(mk, nullptr));
    const auto attacked = run_doc(resilience(mk, {{"strategy", "omniscient-craft"}, {"count", 10}, {"magnitude", 5.0}}));
    const double lh = honest.rows.back().global_loss, la = attacked.rows.back().global_loss;
    const bool a = !honest.failure && !attacked.failure && la <= kKrumLossFactor * lh;

    // (b) mean with one omniscient node steering onto its target
    std::vector<double> target(10);
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = 0.5 - 0.1 * static_cast<double>(i);
    const auto steered =
        run_doc(resilience({{"kind", "mean"}}, {{"strategy", "omniscient-craft"}, {"count", 1}, {"target", target}}));
    double dist = 0;
    for (std::size_t i = 0; i < target.size(); ++i)
        dist = std::max(dist, std::fabs(steered.final_params.at(i) - target[i]));
    const bool b = !steered.failure && dist <= kTargetTolerance;

    // (c) detection weights against 30% sign-flipping attackers
    std::size_t steps = 0, filtered = 0;
    const bool c_ok = filtered_steps(kHarmfulMagnitude, &steps, &filtered);
    const double rate = steps ? static_cast<double>(filtered) / steps : 0.0;
    const bool c = c_ok && steps == kResilienceT && rate >= kFilteredStepRate;
    std::string context;
    for (double m : {1.0, 20.0}) {
        std::size_t s2 = 0, f2 = 0;
        filtered_steps(m, &s2, &f2);
        context += fmt(", x%g: %zu/%zu", m, f2, s2);
    }

    report(5, "aggregator resilience", a && b && c,
           fmt("(a) multi-krum loss %.4g vs honest %.4g (ratio %.3f, bound 2) %s; (b) mean steered to target, max "
               "|w - target| %.2e %s; (c) x%g sign flip zero-weighted in %zu/%zu steps (%.1f%%) %s [for reference%s]",
               la, lh, la / lh, a ? "ok" : "MISS", dist, b ? "ok" : "MISS", kHarmfulMagnitude, filtered, steps,
               100 * rate, c ? "ok" : "MISS", context.c_str()));
}

/* ------------------------------------------------------------------ 6 */

void storage_contract() {
    // every replica checks the bound on each mutation and throws on violation;
    // the process-wide peak covers all runs above
    const auto peak = consensus::RetainedStorage::global_peak();
    report(6, "storage contract", peak > 0 && peak <= consensus::kRetainedLimit,
           fmt("largest retained set in this process %zu gradients (limit %zu)", peak, consensus::kRetainedLimit));
}

/* ------------------------------------------------------------------ 7 */

void reconfiguration() {
    sharding::ChurnConfig cfg; // n=800, c=200, 25% byzantine, 20% churn, 50 epochs
    sharding::ChurnStats total;
    for (std::uint64_t seed = 0; seed < kChurnSeeds; ++seed) {
        const auto s = sharding::churn_simulation(cfg, seed);
        total.samples += s.samples;
        total.safe_samples += s.safe_samples;
    }
    sharding::ChurnConfig small = cfg;
    small.c = 50;
    sharding::ChurnStats info;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto s = sharding::churn_simulation(small, seed);
        info.samples += s.samples;
        info.safe_samples += s.safe_samples;
    }
    report(7, "reconfiguration resilience", total.rate() >= kChurnRate,
           fmt("n=800 c=200 over %zu seeds: %zu/%zu samples below 1/3 (%.4f); for reference c=50: %.4f", kChurnSeeds,
               total.safe_samples, total.samples, total.rate(), info.rate()));
}

/* ------------------------------------------------------------------ 8 */

std::string slurp(const std::filesystem::path &p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

bool replays(const json &doc, const std::filesystem::path &dir, std::string *status) {
    const auto cfg = experiment::parse_config(doc);
    experiment::write_outputs(dir / "first", cfg, experiment::run(cfg));
    std::ifstream in(dir / "first" / "manifest.json");
    const auto manifest = json::parse(in);
    *status = manifest.at("status").get<std::string>();
    const auto again = experiment::parse_config(manifest);
    experiment::write_outputs(dir / "replay", again, experiment::run(again));
    return slurp(dir / "first" / "metrics.csv") == slurp(dir / "replay" / "metrics.csv") &&
           slurp(dir / "first" / "manifest.json") == slurp(dir / "replay" / "manifest.json");
}

void determinism() {
    const auto dir = std::filesystem::temp_directory_path() / "pirate_acceptance_replay";
    std::filesystem::remove_all(dir);
    json normal = {{"framework", "pirate"}, {"seed", 5}, {"n", 16}, {"c", 4}, {"iterations", 4},
                   {"payload_mb", 0.5},     {"adversary", {{"strategy", "equivocate-leader"}, {"count", 3}}},
                   {"network", {{"gst_s", 1.0}, {"pre_gst_jitter_s", 0.2}}}};
    // two silent members of a committee of four: quorum is unreachable
    json failing = {{"framework", "pirate"},
                    {"seed", 6},
                    {"n", 4},
                    {"c", 4},
                    {"iterations", 2},
                    {"payload_mb", 0.1},
                    {"adversary", {{"strategy", "withhold"}, {"count", 2}}},
                    {"consensus", {{"liveness_timeouts", 20}}}};
    json lc = {{"framework", "learningchain"}, {"seed", 7}, {"n", 12}, {"iterations", 3}, {"payload_mb", 1}};
    std::string s1, s2, s3;
    const bool a = replays(normal, dir / "normal", &s1);
    const bool b = replays(failing, dir / "failing", &s2);
    const bool c = replays(lc, dir / "learningchain", &s3);
    std::filesystem::remove_all(dir);
    report(8, "determinism", a && b && c && s2 == "liveness-failure",
           fmt("byzantine pirate run (%s) %s; failing run (%s) %s; learningchain run (%s) %s", s1.c_str(),
               a ? "identical" : "DIFFERS", s2.c_str(), b ? "identical" : "DIFFERS", s3.c_str(),
               c ? "identical" : "DIFFERS"));
}

} // namespace

int main() {
    const auto start = std::chrono::steady_clock::now();
    auto guarded = [](int id, const char *name, void (*fn)()) {
        try {
            fn();
        } catch (const std::exception &e) {
            report(id, name, false, std::string("exception: ") + e.what());
        }
    };
    guarded(1, "storage shape", storage_shape);
    guarded(2, "iteration-time ordering", iteration_time);
    guarded(3, "ring correctness", ring_correctness);
    guarded(4, "consensus safety", consensus_safety);
    guarded(5, "aggregator resilience", aggregator_resilience);
    guarded(6, "storage contract", storage_contract);
    guarded(7, "reconfiguration resilience", reconfiguration);
    guarded(8, "determinism", determinism);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%d of 8 criteria failed (%.1f s)\n", failures, secs);
    return failures ? 1 : 0;
}
