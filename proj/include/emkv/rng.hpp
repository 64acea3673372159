#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace emkv {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
///
/// Stateless: the output block is a pure function of (counter, key), which
/// lets every variate in a simulation be addressed directly instead of
/// being consumed from a sequential stream.
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static constexpr Counter block(Counter ctr, Key key) noexcept {
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
                   static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
                   static_cast<std::uint32_t>(p0)};
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }
};

/// What a draw is used for. Each purpose owns a disjoint counter range so
/// that, e.g., the Brownian increments of a particle do not depend on how
/// many uniforms its initial-condition sampler consumed.
enum class Purpose : std::uint8_t {
    initial = 1,
    threshold = 2,
    brownian = 3,
    bridge = 4,
};

/// A reproducible random stream addressed by (seed, stream_id, purpose,
/// index, block). Distinct stream ids are statistically independent.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    /// Raw 128-bit block. `index` is the draw index, `block` a sub-counter
    /// for draws that need more than one block (rejection samplers).
    [[nodiscard]] Philox4x32::Counter raw(Purpose purpose, std::uint32_t index,
                                          std::uint32_t block = 0) const noexcept {
        const Philox4x32::Counter ctr{
            index, (static_cast<std::uint32_t>(purpose) << 24) | (block & 0x00FFFFFFu),
            static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32)};
        const Philox4x32::Key key{static_cast<std::uint32_t>(seed),
                                  static_cast<std::uint32_t>(seed >> 32)};
        return Philox4x32::block(ctr, key);
    }

    /// Uniform on the open interval (0,1) with 53 random bits.
    [[nodiscard]] double uniform(Purpose purpose, std::uint32_t index) const noexcept {
        const auto r = raw(purpose, index);
        return to_unit_53(r[0], r[1]);
    }

    /// Unit-rate exponential variate, -log(U).
    [[nodiscard]] double unit_exponential(Purpose purpose, std::uint32_t index) const noexcept {
        return -std::log(uniform(purpose, index));
    }

    /// Four independent standard normals from one block (two Box-Muller pairs).
    [[nodiscard]] std::array<double, 4> normal4(Purpose purpose, std::uint32_t index) const noexcept {
        const auto r = raw(purpose, index);
        std::array<double, 4> z{};
        box_muller(to_unit_32(r[0]), to_unit_32(r[1]), z[0], z[1]);
        box_muller(to_unit_32(r[2]), to_unit_32(r[3]), z[2], z[3]);
        return z;
    }

    static constexpr double to_unit_32(std::uint32_t w) noexcept {
        return (static_cast<double>(w) + 0.5) * 0x1.0p-32;
    }

    static constexpr double to_unit_53(std::uint32_t hi, std::uint32_t lo) noexcept {
        const std::uint64_t bits = (std::uint64_t{hi} << 21) ^ (std::uint64_t{lo} >> 11);
        return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
    }

private:
    static void box_muller(double u1, double u2, double& z0, double& z1) noexcept {
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        z0 = radius * std::cos(angle);
        z1 = radius * std::sin(angle);
    }
};

/// splitmix64 finalizer; used to derive child stream ids.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Stream of the i-th particle (or Monte Carlo sample) under a base stream.
constexpr RngStream child_stream(const RngStream& base, std::uint64_t i) noexcept {
    return RngStream{base.seed, mix64(base.stream_id) + i};
}

/// UniformRandomBitGenerator view over a single draw cell, for feeding
/// standard-library distributions (e.g. std::gamma_distribution) that
/// consume an unknown number of words.
class PhiloxEngine {
public:
    using result_type = std::uint32_t;

    PhiloxEngine(const RngStream& stream, Purpose purpose, std::uint32_t index) noexcept
        : stream_(stream), purpose_(purpose), index_(index) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        if (pos_ == 4) {
            buffer_ = stream_.raw(purpose_, index_, block_++);
            pos_ = 0;
        }
        return buffer_[pos_++];
    }

private:
    RngStream stream_;
    Purpose purpose_;
    std::uint32_t index_;
    std::uint32_t block_ = 0;
    Philox4x32::Counter buffer_{};
    int pos_ = 4;
};

}  // namespace emkv
