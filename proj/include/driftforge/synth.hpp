#pragma once

#include "driftforge/dataset.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace driftforge {

// Synthetic drifting malware benchmark. Benign samples come from a stationary
// Gaussian mixture. Each malware family is a Gaussian whose mean moves every
// period by
//   - inertia: a fixed per-family velocity of norm ~drift_velocity,
//   - adoption: with probability adoption_rate the family copies another
//     family's current offset on a random block of coordinates,
//   - adaptation: the coordinates weighted most by a probe logistic classifier
//     fit on the previous period move toward the benign mean.
// The first `stationary_families` families are dormant and never drift.
struct SynthConfig {
    std::size_t n_families = 8;
    std::size_t n_periods = 10;
    std::size_t dim = 100;
    std::size_t samples_per_period_per_class = 2000;
    double drift_velocity = 1.0;
    double adoption_rate = 0.1;
    double adaptation_strength = 0.1;
    double noise_scale = 1.0;
    std::uint64_t seed = 1;

    std::size_t stationary_families = 2;
    std::size_t benign_modes = 4;
    double benign_spread = 2.0;      // std of benign mode centres
    double separation = 4.0;         // initial distance of a family from its benign mode
    double benign_pull = 0.5;        // weight of the benign direction in each velocity
    double adoption_block = 0.1;     // fraction of coordinates copied on adoption
    double adaptation_fraction = 0.1;  // fraction of coordinates the adversary adapts
    double unlabeled_fraction = 0.0;
    std::int64_t period_seconds = 7 * kSecondsPerDay;
    std::int64_t start_timestamp = 1561939200;  // truncated to a period boundary

    void validate() const;
};

std::vector<Sample> synth_generate(const SynthConfig& config);

// Family names used by the generator, index-aligned with family ids.
std::string synth_family_name(std::size_t f);

} // namespace driftforge
