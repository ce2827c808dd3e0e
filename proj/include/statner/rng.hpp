#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

// std::uniform_int_distribution and std::sample are implementation-defined in
// how they consume the generator, so seeded runs would differ across standard
// libraries. These helpers pin the exact draw sequence.

namespace statner {

// Unbiased draw from [0, bound) via rejection sampling.
inline std::uint64_t bounded_rand(std::mt19937_64& rng, std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v = rng();
    while (v >= limit) v = rng();
    return v % bound;
}

template <typename T>
void shuffle_deterministic(std::vector<T>& items, std::mt19937_64& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(bounded_rand(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

// k distinct indices from [0, n), returned sorted ascending.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    if (k >= n) return all;
    std::mt19937_64 rng(seed);
    shuffle_deterministic(all, rng);
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace statner
