#pragma once

#include "driftforge/attacks.hpp"
#include "driftforge/dataset.hpp"
#include "driftforge/gan.hpp"
#include "driftforge/matrix.hpp"
#include "driftforge/nn.hpp"
#include "driftforge/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace driftforge::harness {

enum class MethodTag { normal, upper_bound, adv_fgsm, adv_pgd, ccygan };
std::string to_string(MethodTag tag);
MethodTag method_from_string(const std::string& name);

struct TrainingMethod {
    MethodTag tag = MethodTag::normal;
    std::optional<attacks::AttackConfig> attack;   // adv_* only
    const gan::PredictorBank* bank = nullptr;      // ccygan only

    static TrainingMethod normal();
    static TrainingMethod upper_bound();
    static TrainingMethod adversarial(const attacks::AttackConfig& attack);
    static TrainingMethod ccygan(const gan::PredictorBank& bank);

    std::string name() const { return to_string(tag); }
    void validate() const;
};

enum class FeatureMode { full, reduced };
std::string to_string(FeatureMode mode);
FeatureMode feature_mode_from_string(const std::string& name);

enum class Study { sweep, degradation, robustness };
std::string to_string(Study study);
Study study_from_string(const std::string& name);

struct ExperimentConfig {
    Study study = Study::sweep;
    int w1 = 3;
    int w2 = 0;
    std::int64_t period_seconds = 7 * kSecondsPerDay;
    std::vector<int> splits;   // restricts the sweep to these k; empty = all
    std::vector<MethodTag> methods{MethodTag::normal, MethodTag::upper_bound};
    std::vector<double> fpr_targets{0.1, 0.01, 0.001};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t max_epochs = 50;
    std::size_t minibatch_size = 512;
    std::size_t batches_per_epoch = 0;  // 0: ceil(train pool / minibatch)
    double learning_rate = 0.01;
    FeatureMode feature_mode = FeatureMode::reduced;
    nn::MlpArch classifier = nn::reduced_feature_classifier();
    std::size_t feature_count = 100;
    double feature_l1 = 1e-3;
    std::size_t top_families = 21;
    RoleRatios roles;
    attacks::AttackConfig attack;
    gan::GanTrainConfig gan;

    void validate() const;
};

struct MetricsRecord {
    int split_k = 0;
    std::string method;
    double fpr_target = 0.0;
    std::uint64_t seed = 0;
    int test_period = 0;
    double threshold = 0.0;
    // NaN when the test pool lacks the class the rate is defined over.
    double tpr = 0.0;
    double fpr = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;
};

// ---------------------------------------------------------------------------
// Minibatches

enum class BatchLayout {
    balanced,          // size/2 clean + size/2 malware
    duplicated_clean,  // N distinct clean twice, N malware, N auxiliary; 4N = size
    split_malware,     // size/2 clean, 3size/8 malware, size/8 auxiliary
};

BatchLayout layout_for(MethodTag method, FeatureMode mode);

// Returns `count` auxiliary malware rows (adversarial, predicted or future).
using AuxSource = std::function<Matrix(std::size_t count, Rng& rng)>;

// Rows are drawn uniformly with replacement; order is clean, malware, auxiliary.
LabeledBatch build_minibatch(BatchLayout layout, const Matrix& clean, const Matrix& malware,
                             const AuxSource& aux, std::size_t size, Rng& rng);

// ---------------------------------------------------------------------------
// Thresholds and metrics

// Scores sorted descending; threshold = the floor(target * n)-th highest score
// (the highest when that rank is 0). A sample is flagged as malware when its
// score is strictly above the threshold, so at most rank - 1 clean scores pass.
double select_threshold(std::span<const double> clean_scores, double target_fpr);

// Softmax probability of the malware class.
std::vector<double> malware_scores(const nn::MlpModel& model, const Matrix& x);

// Fills threshold, rates and confusion counts; identifiers are left untouched.
MetricsRecord metrics_from_scores(std::span<const double> scores, std::span<const int> labels, double threshold);
MetricsRecord evaluate(const nn::MlpModel& model, double threshold, const LabeledBatch& test);

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
    std::size_t epoch = 0;              // 1-based
    double train_loss = 0.0;            // mean minibatch loss
    std::vector<double> thresholds;     // per fpr target
    std::vector<double> val_tpr;        // per fpr target
};

using CheckpointHistory = std::vector<EpochRecord>;

struct SelectedModel {
    double fpr_target = 0.0;
    std::size_t epoch = 0;
    double threshold = 0.0;
    double val_tpr = 0.0;
    double val_fpr = 0.0;
    nn::MlpModel model;
};

struct TrainResult {
    std::vector<SelectedModel> selected;  // parallel to fpr_targets
    CheckpointHistory history;
};

// Normalised training material of one split.
struct CellData {
    Matrix clean;            // benign training rows (upper_bound: includes the testing window)
    Matrix malware;          // malware training rows of the training window
    Matrix future_malware;   // upper_bound only
    LabeledBatch val;
    attacks::ProjectionBox box;
    // ccygan only: raw training malware and the split normaliser
    Matrix raw_malware;
    const Normalizer* normalizer = nullptr;
};

TrainResult train_classifier(const TrainingMethod& method, const CellData& data, const ExperimentConfig& config,
                             std::uint64_t seed);

struct RobustnessPair {
    double normal_tpr = 0.0;
    double adversarial_tpr = 0.0;
};

// Attacks `malware_test` against each model and measures each model's TPR on
// its own adversarial set at its threshold.
RobustnessPair robustness_eval(const nn::MlpModel& normal_model, double normal_threshold,
                               const nn::MlpModel& adv_model, double adv_threshold,
                               const attacks::AttackConfig& attack, const Matrix& malware_test,
                               const attacks::ProjectionBox& box);

// ---------------------------------------------------------------------------
// Experiments

struct PreparedData {
    std::vector<Sample> samples;           // possibly feature-projected and family-filtered
    PeriodPartition partition;             // roles unassigned
    std::vector<TimeSplitSpec> splits;
    std::vector<std::string> vocabulary;   // ccygan conditioning families
    std::vector<std::size_t> selected_features;  // empty: all features kept
};

// Feature selection and family filtering for the configured mode.
PreparedData prepare_data(const ExperimentConfig& config, std::span<const Sample> dataset);

struct SkippedCell {
    int split_k = 0;
    std::string method;
    std::uint64_t seed = 0;
    std::string reason;
};

struct RunOptions {
    std::filesystem::path out;     // empty: in-memory only
    bool resume = false;
    std::size_t stop_after_cells = 0;  // 0: run everything
    std::function<void(const std::string&)> log;
};

struct RunSummary {
    std::vector<MetricsRecord> records;  // complete file contents, in sweep order
    std::vector<SkippedCell> skipped;
    std::size_t cells_run = 0;
    std::size_t cells_resumed = 0;
    std::vector<std::string> warnings;
};

// Executes the configured study. Rows are appended to `options.out` one cell
// at a time; skipped cells go to `<out>.skipped`.
RunSummary run_experiment(const ExperimentConfig& config, std::span<const Sample> dataset,
                          const RunOptions& options = {});

// entry (window, period-1); nullopt off the occupied triangle. Mean over seeds.
std::vector<std::vector<std::optional<double>>> degradation_matrix(std::span<const MetricsRecord> records,
                                                                   double fpr_target, int n_periods);

// ---------------------------------------------------------------------------
// Results CSV

inline constexpr const char* kResultsHeader =
    "split_k,method,fpr_target,seed,test_period,threshold,tpr,fpr,f1,accuracy,tp,fp,tn,fn";

std::string format_double(double v);  // %.17g; NaN as an empty field
std::string to_csv_row(const MetricsRecord& r);
MetricsRecord parse_csv_row(const std::string& line);
std::vector<MetricsRecord> read_results_csv(std::istream& in);
std::vector<MetricsRecord> read_results_csv(const std::filesystem::path& path);
void write_results_csv(std::ostream& out, std::span<const MetricsRecord> records);

} // namespace driftforge::harness
