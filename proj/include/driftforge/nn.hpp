#pragma once

#include "driftforge/matrix.hpp"
#include "driftforge/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace driftforge::nn {

inline constexpr double kSeluScale = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kBatchNormEpsilon = 1e-8;

enum class LayerKind { dense, batchnorm, selu, dropout };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    double dropout_rate = 0.0;
    double bn_momentum = 0.9;

    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec batchnorm(std::size_t dim, double momentum = 0.9);
    static LayerSpec selu(std::size_t dim);
    static LayerSpec dropout(std::size_t dim, double rate);

    // Throws UsageError when the spec violates its invariants.
    void validate() const;
};

enum class Mode { train, eval };

struct Layer {
    LayerSpec spec;
    Matrix weight;        // dense: out x in; batchnorm: 1 x d scale
    Matrix bias;          // dense: 1 x out; batchnorm: 1 x d shift
    Matrix running_mean;  // batchnorm only
    Matrix running_var;   // batchnorm only

    bool trainable() const {
        return spec.kind == LayerKind::dense || spec.kind == LayerKind::batchnorm;
    }
};

// Hidden stack description: every hidden width gets dense -> [batchnorm] ->
// selu -> [dropout], followed by a final dense layer of width `out`.
struct MlpArch {
    std::vector<std::size_t> hidden;
    bool batchnorm = true;
    double dropout = 0.2;
    std::size_t out = 2;
    double bn_momentum = 0.9;
};

std::vector<LayerSpec> build_layers(std::size_t in_dim, const MlpArch& arch);

// Default classifier shapes: 10 x 512 for the full Ember-sized vectors,
// 4 x 128 for the reduced 100-feature setting.
MlpArch full_feature_classifier();
MlpArch reduced_feature_classifier();

class MlpModel {
public:
    MlpModel() = default;
    // Zero biases, weights uniform in +-sqrt(6 / (fan_in + fan_out)).
    MlpModel(std::vector<LayerSpec> specs, std::uint64_t seed);

    std::size_t in_dim() const;
    std::size_t out_dim() const;
    std::size_t parameter_count() const;
    bool empty() const { return layers_.empty(); }

    const std::vector<Layer>& layers() const { return layers_; }
    // Mutable access invalidates outstanding traces.
    Layer& mutable_layer(std::size_t i);

    Mode mode() const { return mode_; }
    void set_mode(Mode mode) { mode_ = mode; }

    std::uint64_t version() const { return version_; }
    std::uint64_t stats_version() const { return stats_version_; }

    // Trainable parameters flattened layer by layer (weight row-major, then bias),
    // followed by batchnorm running statistics.
    std::vector<double> flat_parameters() const;
    void set_flat_parameters(std::span<const double> values);

    friend bool operator==(const MlpModel& a, const MlpModel& b);

private:
    friend struct ModelAccess;

    std::vector<Layer> layers_;
    Mode mode_ = Mode::train;
    Rng dropout_rng_;
    std::uint64_t version_ = 0;
    std::uint64_t stats_version_ = 0;
};

struct LayerCache {
    Matrix input;
    Matrix normalized;   // batchnorm x-hat
    RowVector inv_std;   // batchnorm 1/sqrt(var + eps)
    Matrix mask;         // dropout mask, already scaled by 1/(1-p)
};

struct ForwardTrace {
    Mode mode = Mode::eval;
    const MlpModel* owner = nullptr;
    std::uint64_t version = 0;
    std::uint64_t stats_version = 0;
    std::vector<LayerCache> layers;
};

struct ForwardResult {
    Matrix output;
    ForwardTrace trace;
};

// Runs the model in its current mode. Train mode draws dropout masks and
// updates batchnorm running statistics.
ForwardResult forward(MlpModel& model, const Matrix& batch);
// Const overload: the model must be in eval mode.
ForwardResult forward(const MlpModel& model, const Matrix& batch);
// Eval-semantics pass with a trace, whatever the model's mode.
ForwardResult forward_eval(const MlpModel& model, const Matrix& batch);

// Eval-mode output without caching, whatever the model's mode.
Matrix predict(const MlpModel& model, const Matrix& batch);

// Recomputes the output for `batch` using the trace's mode and dropout masks,
// with fresh batch statistics and no running-statistic updates.
Matrix replay(const MlpModel& model, const Matrix& batch, const ForwardTrace& trace);

struct LayerGrad {
    Matrix weight;
    Matrix bias;
};

struct Gradients {
    std::vector<LayerGrad> layers;  // empty matrices for parameter-free layers
    Matrix input;
};

// Backpropagates `grad_output` through the traced pass. Throws NumericalError
// when the model changed since the trace was recorded.
Gradients backward(const MlpModel& model, const ForwardTrace& trace, const Matrix& grad_output,
                   bool parameter_grads = true);

// Adds `other` into `acc` layer by layer (for networks used twice in one step).
void accumulate(Gradients& acc, const Gradients& other);

struct LossResult {
    double loss = 0.0;
    Matrix grad;  // d loss / d logits
};

Matrix softmax(const Matrix& logits);

// Mean negative log-softmax of the true class.
LossResult cross_entropy(const Matrix& logits, std::span<const int> labels);

// Mean binary cross-entropy on single-column logits against targets in [0,1].
LossResult sigmoid_cross_entropy(const Matrix& logits, std::span<const double> targets);

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x);

double selu(double x);
double selu_derivative(double x);

struct AdamConfig {
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction over an ordered list of parameter tensors.
class AdamState {
public:
    AdamState() = default;
    AdamState(AdamConfig config, const std::vector<Matrix*>& params);
    explicit AdamState(const MlpModel& model, AdamConfig config = {});

    const AdamConfig& config() const { return config_; }
    std::uint64_t step_count() const { return step_count_; }
    const std::vector<Matrix>& first_moment() const { return m_; }
    const std::vector<Matrix>& second_moment() const { return v_; }

    // Rejects non-finite gradients before touching any parameter.
    void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads);

private:
    AdamConfig config_;
    std::uint64_t step_count_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

void adam_step(AdamState& state, MlpModel& model, const Gradients& grads);

} // namespace driftforge::nn
