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
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace pirate::training {

using aggregation::Gradient;

enum class TaskKind { LeastSquares, Logistic };
enum class ShardingMode { Iid, NonIidByLabel };

inline std::string to_string(TaskKind k) { return k == TaskKind::LeastSquares ? "least-squares" : "logistic"; }
inline std::string to_string(ShardingMode m) { return m == ShardingMode::Iid ? "iid" : "non-iid-by-label"; }

struct Sample {
    std::vector<double> x;
    double y = 0.0;
};

struct TaskSpec {
    TaskKind kind = TaskKind::LeastSquares;
    std::size_t dimension = 10;
    std::size_t samples_per_node = 64;
    std::size_t holdout = 512;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    double noise = 0.1;
    ShardingMode sharding = ShardingMode::Iid;

    void validate() const {
        if (dimension < 1) throw ConfigError("task.dimension must be >= 1");
        if (samples_per_node < 1) throw ConfigError("task.samples_per_node must be >= 1");
        if (batch_size < 1) throw ConfigError("task.batch_size must be >= 1");
        if (holdout < 1) throw ConfigError("task.holdout must be >= 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("task.learning_rate must be finite and >= 0");
        if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("task.noise must be >= 0");
    }
};

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Per-sample loss: 1/2 (x.w - y)^2, or the log loss for logistic.
inline double sample_loss(TaskKind kind, std::span<const double> w, const Sample &s) {
    const double z = dot(s.x, w);
    if (kind == TaskKind::LeastSquares) return 0.5 * (z - s.y) * (z - s.y);
    // log(1 + e^z) - y z, written to avoid overflow
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    return softplus - s.y * z;
}

struct LearningTask {
    TaskSpec spec;
    std::vector<double> true_params; // harness only
    std::vector<std::vector<Sample>> shards;
    std::vector<Sample> holdout;

    std::size_t dimension() const { return spec.dimension; }

    double loss(std::span<const double> w, std::span<const Sample> data) const {
        double s = 0.0;
        for (const auto &x : data) s += sample_loss(spec.kind, w, x);
        return s / static_cast<double>(data.size());
    }

    double global_loss(std::span<const double> w) const { return loss(w, holdout); }
};

namespace detail {

inline Sample draw_sample(TaskKind kind, std::span<const double> w, double noise, Rng &rng) {
    Sample s;
    s.x.resize(w.size());
    for (auto &v : s.x) v = rng.normal();
    const double z = dot(s.x, w);
    if (kind == TaskKind::LeastSquares)
        s.y = z + noise * rng.normal();
    else
        s.y = rng.uniform01() < sigmoid(z) ? 1.0 : 0.0;
    return s;
}

} // namespace detail

/// Synthetic task with one shard per node. Node shards are generated from the
/// seed alone, so a node keeps its data across reconfigurations.
inline LearningTask make_task(const TaskSpec &spec, std::size_t nodes, std::uint64_t seed) {
    spec.validate();
    LearningTask t;
    t.spec = spec;
    Rng param_rng(derive_seed(seed, streams::kTask, 0));
    t.true_params.resize(spec.dimension);
    for (auto &v : t.true_params) v = param_rng.normal();

    std::vector<Sample> pool;
    pool.reserve(nodes * spec.samples_per_node);
    Rng data_rng(derive_seed(seed, streams::kTask, 1));
    for (std::size_t i = 0; i < nodes * spec.samples_per_node; ++i)
        pool.push_back(detail::draw_sample(spec.kind, t.true_params, spec.noise, data_rng));
    if (spec.sharding == ShardingMode::NonIidByLabel)
        std::stable_sort(pool.begin(), pool.end(),
                         [](const Sample &a, const Sample &b) { return a.y < b.y; });
    t.shards.resize(nodes);
    for (std::size_t node = 0; node < nodes; ++node)
        t.shards[node].assign(pool.begin() + static_cast<std::ptrdiff_t>(node * spec.samples_per_node),
                              pool.begin() + static_cast<std::ptrdiff_t>((node + 1) * spec.samples_per_node));

    Rng hold_rng(derive_seed(seed, streams::kTask, 2));
    for (std::size_t i = 0; i < spec.holdout; ++i)
        t.holdout.push_back(detail::draw_sample(spec.kind, t.true_params, spec.noise, hold_rng));
    return t;
}

/// Deterministic mini-batch for (seed, node, iteration): indices without
/// replacement, in draw order.
inline std::vector<std::size_t> batch_indices(std::size_t shard_size, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t node,
                                              std::uint64_t iteration) {
    if (shard_size == 0 || batch_size == 0) throw PreconditionError("empty batch");
    const std::size_t b = std::min(batch_size, shard_size);
    std::vector<std::size_t> idx(shard_size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, streams::kBatch, (node << 32) ^ iteration));
    for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng.index(shard_size - i)]);
    idx.resize(b);
    return idx;
}

/// Exact gradient of the mean task loss over `batch`.
inline std::vector<double> batch_gradient(TaskKind kind, std::span<const double> w,
                                          std::span<const Sample> data,
                                          std::span<const std::size_t> batch) {
    if (batch.empty()) throw PreconditionError("local gradient: empty batch");
    std::vector<double> g(w.size(), 0.0);
    for (std::size_t i : batch) {
        const Sample &s = data[i];
        const double z = dot(s.x, w);
        const double r = kind == TaskKind::LeastSquares ? z - s.y : sigmoid(z) - s.y;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += r * s.x[k];
    }
    for (auto &v : g) v /= static_cast<double>(batch.size());
    return g;
}

struct ModelState {
    std::vector<double> params;
    std::uint64_t iteration = 0;
    Digest digest{};

    static Digest digest_of(std::span<const double> params) {
        return Hasher{}.text("model").reals(params).finish();
    }

    static ModelState initial(std::size_t d) {
        ModelState m;
        m.params.assign(d, 0.0);
        m.digest = digest_of(m.params);
        return m;
    }
};

inline Gradient local_gradient(const LearningTask &task, std::span<const double> params,
                               std::size_t node, std::uint64_t iteration, std::uint64_t seed,
                               std::uint64_t payload_bytes) {
    const auto &shard = task.shards.at(node);
    const auto batch = batch_indices(shard.size(), task.spec.batch_size, seed, node, iteration);
    Gradient g;
    g.values = batch_gradient(task.spec.kind, params, shard, batch);
    g.payload_bytes = payload_bytes;
    g.origin = static_cast<NodeId>(node);
    g.iteration = iteration;
    return g;
}

struct UpdateOutcome {
    bool applied = false;
};

/// params <- params - lr * aggregated. A non-finite aggregate is skipped.
inline UpdateOutcome apply_update(ModelState &model, const Gradient &aggregated, double lr) {
    if (aggregated.dim() != model.params.size())
        throw PreconditionError("apply_update: dimension mismatch");
    UpdateOutcome out;
    ++model.iteration;
    if (!aggregated.finite()) return out;
    for (std::size_t i = 0; i < model.params.size(); ++i)
        model.params[i] -= lr * aggregated.values[i];
    model.digest = ModelState::digest_of(model.params);
    out.applied = true;
    return out;
}

/// Centralized replay: every node's batch gradient averaged and applied, with
/// the same batches the protocol uses. Returns the loss after each iteration.
inline std::vector<double> centralized_sgd(const LearningTask &task, std::size_t nodes,
                                           std::size_t iterations, std::uint64_t seed,
                                           std::vector<double> *final_params = nullptr) {
    ModelState m = ModelState::initial(task.dimension());
    std::vector<double> losses;
    for (std::size_t t = 0; t < iterations; ++t) {
        std::vector<double> sum(task.dimension(), 0.0);
        for (std::size_t node = 0; node < nodes; ++node) {
            const auto g = local_gradient(task, m.params, node, t, seed, 1);
            for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += g.values[k];
        }
        Gradient avg;
        avg.values = sum;
        for (auto &v : avg.values) v /= static_cast<double>(nodes);
        apply_update(m, avg, task.spec.learning_rate);
        losses.push_back(task.global_loss(m.params));
    }
    if (final_params) *final_params = m.params;
    return losses;
}

} // namespace pirate::training
