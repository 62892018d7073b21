#pragma once

#include "driftforge/dataset.hpp"
#include "driftforge/error.hpp"
#include "driftforge/matrix.hpp"
#include "driftforge/nn.hpp"
#include "driftforge/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace driftforge::gan {

// Network shapes. Generators: [x | one-hot] -> hidden SELU stack -> x, no
// normalisation layers. Discriminators: [x | one-hot] -> SELU + dropout stack -> 1 logit.
// A residual generator computes x + f([x | one-hot]) and starts with f = 0.
struct GanArch {
    std::vector<std::size_t> generator_hidden{256, 256};
    std::vector<std::size_t> discriminator_hidden{128, 64};
    double discriminator_dropout = 0.2;
    bool residual_generator = false;
};

struct GanTrainConfig {
    double learning_rate = 1e-4;
    std::size_t total_steps = 3500;
    std::size_t minibatch = 512;
    std::size_t alternation_period = 50;
    double lambda_cyc = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    GanArch arch;

    void validate() const;
};

// Forward generator G: source -> target, backward generator G_b: target -> source,
// D judges the target domain and D_b the source domain. All four networks take
// the family one-hot appended to their input.
struct CycleGanPair {
    nn::MlpModel g;
    nn::MlpModel g_b;
    nn::MlpModel d;
    nn::MlpModel d_b;
    double lambda_cyc = 1.0;
    std::size_t dim = 0;
    std::size_t n_conditions = 0;
    bool residual = false;
};

CycleGanPair make_cycle_gan(std::size_t dim, std::size_t n_conditions, const GanArch& arch,
                            double lambda_cyc, std::uint64_t seed);

// Exact one-hot rows; throws on a condition outside [0, n_conditions).
Matrix one_hot(std::span<const int> conditions, std::size_t n_conditions);
// [x | one_hot(conditions)]
Matrix conditioned(const Matrix& x, std::span<const int> conditions, std::size_t n_conditions);

// Eval-mode generator output for already conditioned rows.
Matrix translate(const nn::MlpModel& generator, bool residual, const Matrix& conditioned_x);

struct GanLosses {
    double discriminator = 0.0;   // -(E log D(real) + E log(1 - D(fake)))
    double generator = 0.0;       // non-saturating: -E log D(fake)
    Matrix discriminator_grad_real;
    Matrix discriminator_grad_fake;
    Matrix generator_grad_fake;
};

// Adversarial criterion on raw discriminator logits via sigmoid cross-entropy.
GanLosses gan_losses(const Matrix& real_logits, const Matrix& fake_logits);

struct CycleLoss {
    double adversarial_forward = 0.0;   // criterion of (G, D)
    double adversarial_backward = 0.0;  // criterion of (G_b, D_b)
    double reconstruction_x = 0.0;      // E |x - G(G_b(x))|_1
    double reconstruction_z = 0.0;      // E |z - G_b(G(z))|_1
    double total = 0.0;
};

// Evaluates the full cycle objective with eval-mode networks. x is a target
// domain batch, z a source domain batch.
CycleLoss cycle_loss(const CycleGanPair& pair, const Matrix& x, std::span<const int> x_conditions,
                     const Matrix& z, std::span<const int> z_conditions);

struct DomainPool {
    Matrix x;
    std::vector<int> conditions;
};

struct StepRecord {
    std::size_t step = 0;
    bool discriminators_updated = false;
    double discriminator_loss = 0.0;   // sum over both discriminators
    double generator_adversarial = 0.0;
    double reconstruction = 0.0;       // reconstruction_x + reconstruction_z
};

struct TrainedCycleGan {
    CycleGanPair pair;
    std::vector<StepRecord> history;
    std::vector<std::string> warnings;
};

// Alternating schedule: blocks of `alternation_period` steps; even blocks
// update all four networks, odd blocks only the generators.
TrainedCycleGan train_ccygan(const DomainPool& source, const DomainPool& target, std::size_t n_conditions,
                             const GanTrainConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Predictor bank

class MethodUnavailable : public DataError {
public:
    explicit MethodUnavailable(const std::string& what) : DataError(what) {}
};

// One trained forward generator with the normaliser of its own window; it maps
// raw feature vectors to predicted raw feature vectors.
struct BankEntry {
    int k = 0;
    nn::MlpModel generator;
    Normalizer normalizer;
    bool residual = false;
};

struct PredictorBank {
    std::vector<std::string> vocabulary;  // one-hot positions
    std::size_t dim = 0;
    std::map<int, BankEntry> entries;

    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }
};

struct BankOptions {
    int w1 = 3;
    GanTrainConfig gan;
    std::uint64_t seed = 0;
    std::size_t min_pool = 2;  // entries whose source or target pool is smaller are skipped
};

// Split indices k' with w1 < k' < k whose predictors may feed split k.
std::vector<int> bank_indices(int k, int w1);

// Trains G_{k'} on the malware of `vocabulary` families among train-role
// samples of T_{k'-w1}..T_{k'-1}: source T_{k'-w1}..T_{k'-2}, target T_{k'-1}.
// Returns nullopt when either pool is too small.
std::optional<BankEntry> train_bank_entry(std::span<const Sample> samples, const PeriodPartition& partition,
                                          int k_prime, const std::vector<std::string>& vocabulary,
                                          const BankOptions& options, std::vector<std::string>* warnings = nullptr);

// Shares trained entries across splits built from the same data and options.
using BankCache = std::map<int, std::optional<BankEntry>>;

PredictorBank build_predictor_bank(std::span<const Sample> samples, const PeriodPartition& partition, int k,
                                   const std::vector<std::string>& vocabulary, const BankOptions& options,
                                   BankCache* cache = nullptr, std::vector<std::string>* warnings = nullptr);

// Draws `quota` triples (x, family, i) uniformly from rows of `x_raw`,
// `conditions` (all vocabulary positions when empty) and bank entries, and
// returns G_i(x, family) in raw feature space.
Matrix predict_samples(const PredictorBank& bank, const Matrix& x_raw, std::size_t quota, Rng& rng,
                       std::span<const int> conditions = {});

// JSON manifest plus little-endian float64 sidecar files.
void save_bank(const PredictorBank& bank, const std::filesystem::path& dir);
PredictorBank load_bank(const std::filesystem::path& dir);

} // namespace driftforge::gan
