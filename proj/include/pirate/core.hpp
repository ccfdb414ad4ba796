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

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pirate {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

/* Decimal units throughout: 1 MB = 10^6 bytes, 1 Mbps = 10^6 bit/s. */
inline constexpr double kBytesPerMegabyte = 1e6;
inline constexpr double kBitsPerMegabit = 1e6;

constexpr std::uint64_t megabytes(double mb) {
    return static_cast<std::uint64_t>(mb * kBytesPerMegabyte + 0.5);
}

/// Raised when a configuration or parameter combination can never be valid.
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation is called outside its precondition.
class PreconditionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/* ---------------------------------------------------------------- digests */

using Digest = std::array<std::uint8_t, 32>;

inline std::string to_hex(const Digest &d) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(d.size() * 2, '0');
    for (std::size_t i = 0; i < d.size(); ++i) {
        out[2 * i] = kHex[d[i] >> 4];
        out[2 * i + 1] = kHex[d[i] & 0xf];
    }
    return out;
}

struct DigestHash {
    std::size_t operator()(const Digest &d) const noexcept {
        std::uint64_t v;
        std::memcpy(&v, d.data(), sizeof v);
        return static_cast<std::size_t>(v);
    }
};

/// Incremental SHA-256 over a canonical little-endian field encoding.
class Hasher {
  public:
    Hasher() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
            throw std::runtime_error("sha256 init failed");
    }

    Hasher &bytes(const void *data, std::size_t len) {
        EVP_DigestUpdate(ctx_.get(), data, len);
        return *this;
    }
    Hasher &u64(std::uint64_t v) {
        std::array<std::uint8_t, 8> b{};
        for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
        return bytes(b.data(), b.size());
    }
    Hasher &f64(double v) { return u64(std::bit_cast<std::uint64_t>(v)); }
    Hasher &digest(const Digest &d) { return bytes(d.data(), d.size()); }
    Hasher &text(std::string_view s) {
        u64(s.size());
        return bytes(s.data(), s.size());
    }
    Hasher &reals(std::span<const double> xs) {
        u64(xs.size());
        for (double x : xs) f64(x);
        return *this;
    }

    Digest finish() {
        Digest out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
        return out;
    }

  private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

/* -------------------------------------------------------------------- rng */

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream seed for a (run seed, purpose, index) triple.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t index = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
}

/// Seeded generator whose output is identical on every conforming platform.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw PreconditionError("Rng::index: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return static_cast<std::size_t>(x % bound);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class T> void shuffle(std::vector<T> &xs) {
        for (std::size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[index(i)]);
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/* Named stream ids keep unrelated consumers of the run seed independent. */
namespace streams {
inline constexpr std::uint64_t kUplink = 1;
inline constexpr std::uint64_t kCommittee = 2;
inline constexpr std::uint64_t kTask = 3;
inline constexpr std::uint64_t kBatch = 4;
inline constexpr std::uint64_t kAdversary = 5;
inline constexpr std::uint64_t kLottery = 6;
inline constexpr std::uint64_t kCuckoo = 7;
inline constexpr std::uint64_t kJitter = 8;
inline constexpr std::uint64_t kFallback = 9;
inline constexpr std::uint64_t kProfile = 10;
inline constexpr std::uint64_t kContamination = 11;
} // namespace streams

} // namespace pirate
