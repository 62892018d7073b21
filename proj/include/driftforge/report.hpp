#pragma once

#include "driftforge/harness.hpp"

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace driftforge::report {

enum class ReportKind { tpr, f1, fpr, degradation, robustness };
std::string to_string(ReportKind kind);
ReportKind report_kind_from_string(const std::string& name);

// `series` is the method name, or "window_k<K>" for degradation.
struct AggregateRow {
    std::string series;
    int test_period = 0;
    double fpr_target = 0.0;
    double mean = 0.0;
    double sem = 0.0;       // sample std (n - 1) / sqrt(n); 0 when n = 1
    std::size_t n_seeds = 0;

    friend bool operator==(const AggregateRow&, const AggregateRow&) = default;
};

// Groups by (series, test_period, fpr_target), ignoring undefined values.
// Output is sorted by series, target, then period.
std::vector<AggregateRow> aggregate(std::span<const harness::MetricsRecord> records, ReportKind kind);

inline constexpr const char* kAggregateHeader = "series,test_period,fpr_target,mean,sem,n_seeds";
void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows);
std::vector<AggregateRow> read_aggregate_csv(std::istream& in);

struct ChartOptions {
    double fpr_target = 0.01;               // charted target; falls back to the smallest present
    std::vector<std::string> expected_series;  // absences are reported as warnings
};

// Line chart: one polyline and one mean +- sem band per series over test periods.
std::string render_svg(std::span<const AggregateRow> rows, ReportKind kind, const ChartOptions& options,
                       std::vector<std::string>* warnings = nullptr);

struct EmittedReport {
    std::filesystem::path csv;
    std::filesystem::path svg;
    std::vector<std::string> warnings;
};

// Writes <kind>.csv and <kind>.svg into out_dir.
EmittedReport emit_report(std::span<const AggregateRow> rows, ReportKind kind, const std::filesystem::path& out_dir,
                          const ChartOptions& options = {});

} // namespace driftforge::report
