#pragma once

#include "driftforge/dataset.hpp"
#include "driftforge/matrix.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace driftforge::drift {

inline constexpr std::size_t kSubsampleCap = 1000;

// RBF kernel exp(-|x - y|^2 / (2 sigma^2)); no bandwidth means the median
// heuristic on the pooled sets.
struct KernelConfig {
    std::optional<double> bandwidth;
};

// Median pairwise Euclidean distance over at most `cap` points (seeded
// subsample); falls back to 1.0 when the median is zero.
double median_heuristic(const Matrix& pooled, std::uint64_t seed = 0, std::size_t cap = kSubsampleCap);

// Square root of the biased (V-statistic) squared MMD, floored at zero.
// Each set is subsampled to `cap` rows with a stream keyed by its size, so the
// value is symmetric in its arguments.
double mmd_biased(const Matrix& x, const Matrix& y, const KernelConfig& kernel = {},
                  std::uint64_t seed = 0, std::size_t cap = kSubsampleCap);

struct RankOptions {
    std::size_t top_m = 21;
    std::size_t min_count = 10;
    KernelConfig kernel;
    std::uint64_t seed = 0;
};

struct FamilyDrift {
    std::string family;
    std::vector<std::optional<double>> per_split;  // nullopt: too few samples
    double sum = 0.0;
};

struct FamilyDriftReport {
    std::vector<TimeSplitSpec> splits;
    std::vector<FamilyDrift> ranked;  // top_m families, descending sum, ties by name

    std::vector<std::string> families() const;
};

// Sums, per malware family, the MMD between its training-window and
// testing-window samples over all splits.
FamilyDriftReport rank_families(std::span<const Sample> samples, const PeriodPartition& partition,
                                const std::vector<TimeSplitSpec>& splits, const RankOptions& options = {});

// family, mmd_k<K>..., sum, rank
void write_csv(std::ostream& out, const FamilyDriftReport& report);

} // namespace driftforge::drift
