#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace vlq {

// Seeded random stream. The engine is std::mt19937_64, whose output sequence
// is fixed by the standard; the distributions below are written out here
// because the std:: distributions are implementation-defined and would make
// seeded runs differ between standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), rejection sampled so there is no modulo bias.
    std::uint64_t uniform_index(std::uint64_t n);

    // Standard normal via Box-Muller.
    double normal();

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            auto j = uniform_index(i);
            std::iter_swap(first + (i - 1), first + j);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Independent sub-stream seed for a named consumer, so that adding or
// removing one consumer never shifts the values drawn by another.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

} // namespace vlq
