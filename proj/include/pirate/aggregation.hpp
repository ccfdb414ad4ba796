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
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pirate::aggregation {

/// A gradient vector plus the byte size it would have on the wire.
/// `support` counts how many local gradients an aggregate stands for; it is
/// 1 for a local gradient and lets repeated mean folds reproduce a flat mean.
struct Gradient {
    std::vector<double> values;
    std::uint64_t payload_bytes = 1;
    NodeId origin = kNoNode;
    std::uint64_t iteration = 0;
    std::uint64_t support = 1;

    std::size_t dim() const { return values.size(); }

    void validate() const {
        if (values.empty()) throw PreconditionError("gradient: dimension must be >= 1");
        if (payload_bytes == 0) throw PreconditionError("gradient: payload_bytes must be > 0");
        for (double v : values)
            if (!std::isfinite(v)) throw PreconditionError("gradient: non-finite value");
    }

    bool finite() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }

    Digest digest() const {
        return Hasher{}
            .text("gradient")
            .reals(values)
            .u64(payload_bytes)
            .u64(origin)
            .u64(iteration)
            .u64(support)
            .finish();
    }
};

using GradientPtr = std::shared_ptr<const Gradient>;

inline GradientPtr share(Gradient g) { return std::make_shared<const Gradient>(std::move(g)); }

/// Instrumentation for the complexity witness: counts vector-distance evaluations.
struct AggregationStats {
    std::size_t distance_evaluations = 0;
};

namespace detail {

inline void count(AggregationStats *stats, std::size_t k = 1) {
    if (stats) stats->distance_evaluations += k;
}

inline std::size_t check_inputs(std::span<const Gradient> gs, const char *op) {
    if (gs.empty()) throw PreconditionError(std::string(op) + ": empty gradient list");
    const std::size_t d = gs.front().dim();
    if (d == 0) throw PreconditionError(std::string(op) + ": dimension must be >= 1");
    for (const auto &g : gs)
        if (g.dim() != d) throw PreconditionError(std::string(op) + ": mixed dimensions");
    return d;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double median_of(std::vector<double> xs) {
    const std::size_t n = xs.size();
    const std::size_t mid = n / 2;
    std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
    const double hi = xs[mid];
    if (n % 2 == 1) return hi;
    const double lo = *std::max_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

inline Gradient blank_like(std::span<const Gradient> gs) {
    Gradient out;
    out.values.assign(gs.front().dim(), 0.0);
    out.payload_bytes = 0;
    out.iteration = gs.front().iteration;
    out.support = 0;
    for (const auto &g : gs) {
        out.payload_bytes = std::max(out.payload_bytes, g.payload_bytes);
        out.support += g.support;
    }
    return out;
}

/// Indices of the k smallest keys, ties broken by lower index.
inline std::vector<std::size_t> smallest_k(std::span<const double> keys, std::size_t k) {
    std::vector<std::size_t> idx(keys.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace detail

/// Coordinate-wise mean weighted by support (plain mean for local gradients).
inline Gradient mean(std::span<const Gradient> gradients) {
    const std::size_t d = detail::check_inputs(gradients, "mean");
    Gradient out = detail::blank_like(gradients);
    double total = 0.0;
    for (const auto &g : gradients) total += static_cast<double>(g.support);
    if (total <= 0.0) throw PreconditionError("mean: zero total support");
    for (const auto &g : gradients) {
        const double w = static_cast<double>(g.support) / total;
        for (std::size_t i = 0; i < d; ++i) out.values[i] += w * g.values[i];
    }
    return out;
}

inline Gradient coordinate_median(std::span<const Gradient> gradients) {
    const std::size_t d = detail::check_inputs(gradients, "median");
    Gradient out = detail::blank_like(gradients);
    std::vector<double> column(gradients.size());
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t k = 0; k < gradients.size(); ++k) column[k] = gradients[k].values[i];
        out.values[i] = detail::median_of(column);
    }
    return out;
}

struct KrumScores {
    std::vector<double> scores;
    std::vector<std::size_t> ranking; // ascending score, index tiebreak
};

/// Krum score of every input: sum of squared distances to its n - f - 2
/// nearest neighbours. Evaluates exactly n(n-1)/2 distances.
inline KrumScores krum_scores(std::span<const Gradient> gradients, std::size_t f,
                              AggregationStats *stats = nullptr) {
    detail::check_inputs(gradients, "krum");
    const std::size_t n = gradients.size();
    if (n < f + 3)
        throw PreconditionError("krum requires n - f - 2 >= 1 (n=" + std::to_string(n) +
                                ", f=" + std::to_string(f) + ")");
    const std::size_t neighbours = n - f - 2;
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d2 = detail::squared_distance(gradients[i].values, gradients[j].values);
            detail::count(stats);
            dist[i * n + j] = dist[j * n + i] = d2;
        }
    KrumScores out;
    out.scores.resize(n);
    std::vector<double> row;
    for (std::size_t i = 0; i < n; ++i) {
        row.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) row.push_back(dist[i * n + j]);
        std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(neighbours),
                          row.end());
        out.scores[i] = std::accumulate(row.begin(),
                                        row.begin() + static_cast<std::ptrdiff_t>(neighbours), 0.0);
    }
    out.ranking.resize(n);
    std::iota(out.ranking.begin(), out.ranking.end(), std::size_t{0});
    std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](std::size_t a, std::size_t b) {
        return out.scores[a] < out.scores[b];
    });
    return out;
}

inline Gradient krum(std::span<const Gradient> gradients, std::size_t f,
                     AggregationStats *stats = nullptr) {
    const auto s = krum_scores(gradients, f, stats);
    Gradient out = detail::blank_like(gradients);
    out.values = gradients[s.ranking.front()].values;
    return out;
}

inline Gradient multi_krum(std::span<const Gradient> gradients, std::size_t f, std::size_t m,
                           AggregationStats *stats = nullptr) {
    if (m < 1 || m > gradients.size())
        throw PreconditionError("multi-krum requires 1 <= m <= n (m=" + std::to_string(m) + ")");
    const auto s = krum_scores(gradients, f, stats);
    std::vector<Gradient> chosen;
    chosen.reserve(m);
    std::vector<std::size_t> picked(s.ranking.begin(),
                                    s.ranking.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(picked.begin(), picked.end());
    for (std::size_t i : picked) chosen.push_back(gradients[i]);
    Gradient out = mean(chosen);
    out.support = detail::blank_like(gradients).support;
    return out;
}

struct LNearestResult {
    Gradient gradient;
    std::vector<std::size_t> selected;
    std::vector<double> distances;
    bool fallback = false; // sum of inputs was the zero vector
};

/// Mean of the l inputs closest in cosine distance to the sum of all inputs.
inline LNearestResult l_nearest(std::span<const Gradient> gradients, std::size_t l,
                                AggregationStats *stats = nullptr) {
    const std::size_t d = detail::check_inputs(gradients, "l-nearest");
    const std::size_t n = gradients.size();
    if (l < 1 || l > n)
        throw PreconditionError("l-nearest requires 1 <= l <= n (l=" + std::to_string(l) + ")");
    std::vector<double> sum(d, 0.0);
    for (const auto &g : gradients)
        for (std::size_t i = 0; i < d; ++i) sum[i] += g.values[i];
    const double sum_norm = std::sqrt(detail::dot(sum, sum));

    LNearestResult r;
    if (sum_norm == 0.0) {
        r.gradient = mean(gradients);
        r.selected.resize(n);
        std::iota(r.selected.begin(), r.selected.end(), std::size_t{0});
        r.distances.assign(n, 0.0);
        r.fallback = true;
        return r;
    }
    r.distances.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto &g = gradients[k].values;
        const double norm = std::sqrt(detail::dot(g, g));
        detail::count(stats);
        r.distances[k] = norm == 0.0 ? 2.0 : 1.0 - detail::dot(g, sum) / (norm * sum_norm);
    }
    r.selected = detail::smallest_k(r.distances, l);
    std::vector<Gradient> chosen;
    chosen.reserve(l);
    for (std::size_t i : r.selected) chosen.push_back(gradients[i]);
    r.gradient = mean(chosen);
    r.gradient.support = detail::blank_like(gradients).support;
    return r;
}

inline constexpr double kMadScale = 1.4826;
inline constexpr double kMadEpsilon = 1e-12;

/// Robust z-score of `g` against a reference set: distance to the coordinate
/// median over 1.4826 * (median distance of the reference set) + 1e-12.
inline double anomaly_score(const Gradient &g, std::span<const Gradient> peers,
                            AggregationStats *stats = nullptr) {
    detail::check_inputs(peers, "anomaly score");
    if (g.dim() != peers.front().dim())
        throw PreconditionError("anomaly score: mixed dimensions");
    const Gradient centre = coordinate_median(peers);
    std::vector<double> spread(peers.size());
    for (std::size_t k = 0; k < peers.size(); ++k) {
        spread[k] = std::sqrt(detail::squared_distance(peers[k].values, centre.values));
        detail::count(stats);
    }
    const double mad = detail::median_of(std::move(spread));
    const double dist = std::sqrt(detail::squared_distance(g.values, centre.values));
    detail::count(stats);
    return dist / (kMadScale * mad + kMadEpsilon);
}

/// Pluggable detector: one anomaly score per input (higher = more anomalous).
class AnomalyDetector {
  public:
    virtual ~AnomalyDetector() = default;
    virtual std::vector<double> scores(std::span<const Gradient> gradients,
                                       AggregationStats *stats) const = 0;
};

/// Median/MAD detector. The reference set is the full input set, so median
/// and spread are computed once and scoring costs Theta(n) distances.
class MedianMadDetector final : public AnomalyDetector {
  public:
    std::vector<double> scores(std::span<const Gradient> gradients,
                               AggregationStats *stats) const override {
        detail::check_inputs(gradients, "detector");
        const Gradient centre = coordinate_median(gradients);
        std::vector<double> dist(gradients.size());
        for (std::size_t k = 0; k < gradients.size(); ++k) {
            dist[k] = std::sqrt(detail::squared_distance(gradients[k].values, centre.values));
            detail::count(stats);
        }
        const double scale = kMadScale * detail::median_of(dist) + kMadEpsilon;
        for (double &x : dist) x /= scale;
        return dist;
    }
};

inline const AnomalyDetector &default_detector() {
    static const MedianMadDetector detector;
    return detector;
}

struct DetectionResult {
    Gradient gradient;
    std::vector<double> scores;
    std::vector<double> weights; // raw weights in [0, 1]; 0 means filtered
    bool fallback = false;       // every input was filtered; coordinate median returned
};

inline DetectionResult detection_weighted(std::span<const Gradient> gradients, double threshold,
                                          const AnomalyDetector &detector = default_detector(),
                                          AggregationStats *stats = nullptr) {
    const std::size_t d = detail::check_inputs(gradients, "detection-weighted");
    if (!(threshold > 0.0)) throw PreconditionError("detection threshold must be > 0");
    DetectionResult r;
    r.scores = detector.scores(gradients, stats);
    r.weights.resize(gradients.size());
    double total = 0.0;
    for (std::size_t k = 0; k < gradients.size(); ++k) {
        r.weights[k] = r.scores[k] > threshold ? 0.0 : 1.0 / (1.0 + r.scores[k]);
        total += r.weights[k];
    }
    if (total <= 0.0) {
        r.gradient = coordinate_median(gradients);
        r.fallback = true;
        return r;
    }
    r.gradient = detail::blank_like(gradients);
    for (std::size_t k = 0; k < gradients.size(); ++k) {
        const double w = r.weights[k] / total;
        if (w == 0.0) continue;
        for (std::size_t i = 0; i < d; ++i) r.gradient.values[i] += w * gradients[k].values[i];
    }
    return r;
}

/* ------------------------------------------------------ aggregator specs */

enum class AggregatorKind { Mean, Krum, MultiKrum, LNearest, DetectionWeighted };

inline std::string to_string(AggregatorKind k) {
    switch (k) {
    case AggregatorKind::Mean: return "mean";
    case AggregatorKind::Krum: return "krum";
    case AggregatorKind::MultiKrum: return "multi-krum";
    case AggregatorKind::LNearest: return "l-nearest";
    case AggregatorKind::DetectionWeighted: return "detection-weighted";
    }
    return "?";
}

inline std::optional<AggregatorKind> aggregator_from_string(std::string_view s) {
    for (auto k : {AggregatorKind::Mean, AggregatorKind::Krum, AggregatorKind::MultiKrum,
                   AggregatorKind::LNearest, AggregatorKind::DetectionWeighted})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

struct AggregatorSpec {
    AggregatorKind kind = AggregatorKind::DetectionWeighted;
    std::size_t f = 0;
    std::size_t m = 1;
    std::size_t l = 1;
    double detection_threshold = 3.0;

    /// Smallest input count this spec accepts.
    std::size_t min_inputs() const {
        switch (kind) {
        case AggregatorKind::Krum:
        case AggregatorKind::MultiKrum: return f + 3;
        default: return 1;
        }
    }

    void validate() const {
        if (!(detection_threshold > 0.0) || !std::isfinite(detection_threshold))
            throw ConfigError("aggregator: detection_threshold must be > 0");
        if (kind == AggregatorKind::MultiKrum && m < 1) throw ConfigError("aggregator: m must be >= 1");
        if (kind == AggregatorKind::LNearest && l < 1) throw ConfigError("aggregator: l must be >= 1");
    }
};

struct AggregateResult {
    Gradient gradient;
    /// Per-input acceptance weight in [0, 1]: detection weights for the
    /// detection aggregator, selection indicators for the selection family,
    /// 1 for the mean.
    std::vector<double> weights;
    bool fallback = false;
};

/// Applies a spec to `inputs`. With `clamp_counts`, m and l are clamped to the
/// input count, which lets one spec serve steps of varying width.
inline AggregateResult aggregate(const AggregatorSpec &spec, std::span<const Gradient> inputs,
                                 bool clamp_counts = false, AggregationStats *stats = nullptr) {
    detail::check_inputs(inputs, "aggregate");
    const std::size_t n = inputs.size();
    AggregateResult r;
    switch (spec.kind) {
    case AggregatorKind::Mean:
        r.gradient = mean(inputs);
        r.weights.assign(n, 1.0);
        break;
    case AggregatorKind::Krum: {
        const auto s = krum_scores(inputs, spec.f, stats);
        r.gradient = detail::blank_like(inputs);
        r.gradient.values = inputs[s.ranking.front()].values;
        r.weights.assign(n, 0.0);
        r.weights[s.ranking.front()] = 1.0;
        break;
    }
    case AggregatorKind::MultiKrum: {
        const std::size_t m = clamp_counts ? std::min(spec.m, n) : spec.m;
        r.gradient = multi_krum(inputs, spec.f, m, stats);
        const auto s = krum_scores(inputs, spec.f);
        r.weights.assign(n, 0.0);
        for (std::size_t k = 0; k < m; ++k) r.weights[s.ranking[k]] = 1.0;
        break;
    }
    case AggregatorKind::LNearest: {
        const std::size_t l = clamp_counts ? std::min(spec.l, n) : spec.l;
        auto ln = l_nearest(inputs, l, stats);
        r.gradient = std::move(ln.gradient);
        r.weights.assign(n, 0.0);
        for (std::size_t i : ln.selected) r.weights[i] = 1.0;
        r.fallback = ln.fallback;
        break;
    }
    case AggregatorKind::DetectionWeighted: {
        auto dw = detection_weighted(inputs, spec.detection_threshold, default_detector(), stats);
        r.gradient = std::move(dw.gradient);
        r.weights = std::move(dw.weights);
        r.fallback = dw.fallback;
        break;
    }
    }
    return r;
}

} // namespace pirate::aggregation
