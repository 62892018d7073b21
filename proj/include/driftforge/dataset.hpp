#pragma once

#include "driftforge/matrix.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace driftforge {

enum class Label { benign, malware, unlabeled };

std::string to_string(Label label);
Label label_from_string(const std::string& text);

// Class index used by the classifiers: benign 0, malware 1.
inline constexpr int kBenignClass = 0;
inline constexpr int kMalwareClass = 1;

struct Sample {
    std::string id;
    std::int64_t timestamp = 0;  // seconds since epoch
    Label label = Label::unlabeled;
    std::optional<std::string> family;
    std::vector<double> features;

    bool labeled() const { return label != Label::unlabeled; }
    friend bool operator==(const Sample&, const Sample&) = default;
};

// JSON Lines: one object per line with id, timestamp, label, family, features.
// Blank lines are ignored. Errors name the 1-based line number.
std::vector<Sample> read_jsonl(std::istream& in);
std::vector<Sample> ingest_jsonl(const std::filesystem::path& path);
void write_jsonl(std::ostream& out, std::span<const Sample> samples);
void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples);

std::size_t feature_dimension(std::span<const Sample> samples);

inline constexpr std::int64_t kSecondsPerDay = 86400;

enum class Role { train, val, test };
std::string to_string(Role role);

struct RoleRatios {
    double train = 0.7;
    double val = 0.2;
    double test = 0.1;
};

struct PeriodPartition {
    std::int64_t period_length = 0;
    std::int64_t origin = 0;           // start of period 1
    std::vector<std::vector<std::size_t>> periods;  // sample indices of T_1..T_N
    std::vector<int> period_of;        // 1-based period of every sample
    std::vector<Role> roles;           // filled by assign_roles

    int count() const { return static_cast<int>(periods.size()); }
    const std::vector<std::size_t>& period(int one_based) const { return periods.at(static_cast<std::size_t>(one_based - 1)); }
    std::int64_t period_start(int one_based) const { return origin + (one_based - 1) * period_length; }
};

// Bins samples by floor((timestamp - origin) / period_length). Without an
// explicit origin, the earliest timestamp truncated to a period boundary is
// used. Empty leading and trailing periods are dropped.
PeriodPartition partition_by_time(std::span<const Sample> samples, std::int64_t period_length,
                                  std::optional<std::int64_t> origin = std::nullopt);

// Per-period seeded shuffle; counts per role by largest remainder, ties to the
// larger ratio, so every count is within one of its exact share.
std::vector<Role> assign_roles(const PeriodPartition& partition, RoleRatios ratios, std::uint64_t seed);

// Per-feature clamp to [q01, q99] followed by standardisation with statistics
// of the clamped training values.
struct Normalizer {
    RowVector q01;
    RowVector q99;
    RowVector mean;
    RowVector std;

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
    void apply(Matrix& x) const;
    Matrix applied(const Matrix& x) const;
    // Standardisation without the quantile clamp.
    Matrix standardized(const Matrix& x) const;
    // Inverse of the standardisation only; clamping is not undone.
    Matrix inverse(const Matrix& x) const;
};

inline constexpr double kLowerQuantile = 0.01;
inline constexpr double kUpperQuantile = 0.99;
inline constexpr double kDegenerateStd = 1e-12;

// Nearest-rank quantile of an ascending vector: element ceil(p * n) - 1, clamped.
double nearest_rank_quantile(std::span<const double> sorted, double p);

Normalizer fit_normalizer(const Matrix& train);
Normalizer fit_normalizer(std::span<const Sample> samples, std::span<const std::size_t> train_pool);
std::vector<Sample> apply_normalizer(const Normalizer& norm, std::span<const Sample> samples);

struct TimeSplitSpec {
    int k = 0;   // first testing period (1-based)
    int w1 = 1;  // training periods T_{k-w1}..T_{k-1}
    int w2 = 0;  // testing periods T_k..T_{k+w2}

    void validate(int n_periods) const;
    friend bool operator==(const TimeSplitSpec&, const TimeSplitSpec&) = default;
};

// Every admissible k for the given windows, ascending.
std::vector<TimeSplitSpec> enumerate_splits(int n_periods, int w1, int w2);

enum class SplitTag { normal, upper_bound };

struct SplitView {
    SplitTag tag = SplitTag::normal;
    TimeSplitSpec spec;
    std::vector<std::size_t> train_pool;   // includes future_pool for upper_bound
    std::vector<std::size_t> val_pool;
    std::vector<std::size_t> test_pool;    // test-role samples of the testing periods
    std::vector<std::size_t> future_pool;  // upper_bound only: train-role samples of testing periods
};

// Unlabeled samples never enter any pool.
SplitView make_split_view(const PeriodPartition& partition, std::span<const Sample> samples,
                          const TimeSplitSpec& spec, SplitTag tag);

struct LabeledBatch {
    Matrix x;
    std::vector<int> y;
    std::vector<std::size_t> index;  // dataset indices
};

// Feature rows and class indices for the labeled samples among `pool`.
LabeledBatch gather(std::span<const Sample> samples, std::span<const std::size_t> pool);
Matrix gather_features(std::span<const Sample> samples, std::span<const std::size_t> pool);

// Keeps only the listed feature columns, in the given order.
std::vector<Sample> project_features(std::span<const Sample> samples,
                                     std::span<const std::size_t> columns);

} // namespace driftforge
