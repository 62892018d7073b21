#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace driftforge {

using Rng = std::mt19937_64;

// Mixes a base seed with stream identifiers (split, method, purpose...) so that
// independent consumers get decorrelated, reproducible streams.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt);

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> salt = {}) {
    return Rng(derive_seed(base, salt));
}

} // namespace driftforge
