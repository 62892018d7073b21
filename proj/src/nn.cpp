#include "driftforge/nn.hpp"

#include "driftforge/error.hpp"

#include <algorithm>
#include <cmath>

namespace driftforge::nn {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::selu: return "selu";
        case LayerKind::dropout: return "dropout";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    if (name == "dense") return LayerKind::dense;
    if (name == "batchnorm") return LayerKind::batchnorm;
    if (name == "selu") return LayerKind::selu;
    if (name == "dropout") return LayerKind::dropout;
    throw DataError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
    return {LayerKind::dense, in, out, 0.0, 0.9};
}

LayerSpec LayerSpec::batchnorm(std::size_t dim, double momentum) {
    return {LayerKind::batchnorm, dim, dim, 0.0, momentum};
}

LayerSpec LayerSpec::selu(std::size_t dim) {
    return {LayerKind::selu, dim, dim, 0.0, 0.9};
}

LayerSpec LayerSpec::dropout(std::size_t dim, double rate) {
    return {LayerKind::dropout, dim, dim, rate, 0.9};
}

void LayerSpec::validate() const {
    if (in_dim < 1 || out_dim < 1) {
        throw UsageError(to_string(kind) + " layer needs positive dimensions");
    }
    if (kind != LayerKind::dense && in_dim != out_dim) {
        throw UsageError(to_string(kind) + " layer must preserve dimension");
    }
    if (kind == LayerKind::dropout && !(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw UsageError("dropout rate must lie in [0, 1)");
    }
    if (kind == LayerKind::batchnorm && !(bn_momentum > 0.0 && bn_momentum < 1.0)) {
        throw UsageError("batchnorm momentum must lie in (0, 1)");
    }
}

std::vector<LayerSpec> build_layers(std::size_t in_dim, const MlpArch& arch) {
    std::vector<LayerSpec> specs;
    std::size_t width = in_dim;
    for (std::size_t h : arch.hidden) {
        specs.push_back(LayerSpec::dense(width, h));
        if (arch.batchnorm) specs.push_back(LayerSpec::batchnorm(h, arch.bn_momentum));
        specs.push_back(LayerSpec::selu(h));
        if (arch.dropout > 0.0) specs.push_back(LayerSpec::dropout(h, arch.dropout));
        width = h;
    }
    specs.push_back(LayerSpec::dense(width, arch.out));
    return specs;
}

MlpArch full_feature_classifier() {
    return MlpArch{std::vector<std::size_t>(10, 512), true, 0.2, 2, 0.9};
}

MlpArch reduced_feature_classifier() {
    return MlpArch{std::vector<std::size_t>(4, 128), true, 0.2, 2, 0.9};
}

// ---------------------------------------------------------------------------
// MlpModel

struct ModelAccess {
    static std::vector<Layer>& layers(MlpModel& m) { return m.layers_; }
    static Rng& rng(MlpModel& m) { return m.dropout_rng_; }
    static void bump_stats(MlpModel& m) { ++m.stats_version_; }
};

MlpModel::MlpModel(std::vector<LayerSpec> specs, std::uint64_t seed)
    : dropout_rng_(derive_seed(seed, {0xd209})) {
    if (specs.empty()) {
        throw UsageError("model needs at least one layer");
    }
    Rng init_rng(derive_seed(seed, {0x1217}));
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const LayerSpec& spec = specs[i];
        spec.validate();
        if (i > 0 && specs[i - 1].out_dim != spec.in_dim) {
            throw UsageError("layer " + std::to_string(i) + " input does not chain with previous output");
        }
        Layer layer;
        layer.spec = spec;
        const auto in = static_cast<Eigen::Index>(spec.in_dim);
        const auto out = static_cast<Eigen::Index>(spec.out_dim);
        if (spec.kind == LayerKind::dense) {
            const double limit = std::sqrt(6.0 / static_cast<double>(spec.in_dim + spec.out_dim));
            std::uniform_real_distribution<double> dist(-limit, limit);
            layer.weight.resize(out, in);
            for (Eigen::Index r = 0; r < out; ++r) {
                for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = dist(init_rng);
            }
            layer.bias = Matrix::Zero(1, out);
        } else if (spec.kind == LayerKind::batchnorm) {
            layer.weight = Matrix::Ones(1, out);
            layer.bias = Matrix::Zero(1, out);
            layer.running_mean = Matrix::Zero(1, out);
            layer.running_var = Matrix::Ones(1, out);
        }
        layers_.push_back(std::move(layer));
    }
}

std::size_t MlpModel::in_dim() const {
    return layers_.empty() ? 0 : layers_.front().spec.in_dim;
}

std::size_t MlpModel::out_dim() const {
    return layers_.empty() ? 0 : layers_.back().spec.out_dim;
}

std::size_t MlpModel::parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers_) {
        if (l.trainable()) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    }
    return n;
}

Layer& MlpModel::mutable_layer(std::size_t i) {
    ++version_;
    ++stats_version_;
    return layers_.at(i);
}

std::vector<double> MlpModel::flat_parameters() const {
    std::vector<double> out;
    auto append = [&](const Matrix& m) { out.insert(out.end(), m.data(), m.data() + m.size()); };
    for (const Layer& l : layers_) {
        if (l.trainable()) {
            append(l.weight);
            append(l.bias);
        }
    }
    for (const Layer& l : layers_) {
        if (l.spec.kind == LayerKind::batchnorm) {
            append(l.running_mean);
            append(l.running_var);
        }
    }
    return out;
}

void MlpModel::set_flat_parameters(std::span<const double> values) {
    std::size_t pos = 0;
    auto take = [&](Matrix& m) {
        const auto n = static_cast<std::size_t>(m.size());
        if (pos + n > values.size()) throw DataError("parameter array too short for model");
        std::copy(values.begin() + static_cast<std::ptrdiff_t>(pos),
                  values.begin() + static_cast<std::ptrdiff_t>(pos + n), m.data());
        pos += n;
    };
    for (Layer& l : layers_) {
        if (l.trainable()) {
            take(l.weight);
            take(l.bias);
        }
    }
    for (Layer& l : layers_) {
        if (l.spec.kind == LayerKind::batchnorm) {
            take(l.running_mean);
            take(l.running_var);
        }
    }
    if (pos != values.size()) throw DataError("parameter array too long for model");
    ++version_;
    ++stats_version_;
}

bool operator==(const MlpModel& a, const MlpModel& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
        const LayerSpec& x = a.layers_[i].spec;
        const LayerSpec& y = b.layers_[i].spec;
        if (x.kind != y.kind || x.in_dim != y.in_dim || x.out_dim != y.out_dim ||
            x.dropout_rate != y.dropout_rate || x.bn_momentum != y.bn_momentum) {
            return false;
        }
    }
    return a.flat_parameters() == b.flat_parameters();
}

// ---------------------------------------------------------------------------
// Forward

double selu(double x) {
    return x > 0.0 ? kSeluScale * x : kSeluScale * kSeluAlpha * std::expm1(x);
}

double selu_derivative(double x) {
    return x > 0.0 ? kSeluScale : kSeluScale * kSeluAlpha * std::exp(x);
}

namespace {

// Branchless forms; Eigen vectorises min/max/exp/ceil but not select.
Matrix selu_array(const Matrix& x) {
    const auto a = x.array();
    return (kSeluScale * a.max(0.0) + kSeluScale * kSeluAlpha * (a.min(0.0).exp() - 1.0)).matrix();
}

Matrix selu_derivative_array(const Matrix& x) {
    const auto a = x.array();
    const double neg_scale = kSeluScale * kSeluAlpha;
    const auto positive = a.max(0.0).min(1.0).ceil();
    return (neg_scale * a.min(0.0).exp() - (neg_scale - kSeluScale) * positive).matrix();
}

enum class StatsPolicy { update, keep };

struct PassOptions {
    Mode mode;
    bool cache;
    StatsPolicy stats;
    const ForwardTrace* replay_masks;  // reuse dropout masks instead of sampling
};

void check_input(std::size_t in_dim, const Matrix& batch) {
    if (static_cast<std::size_t>(batch.cols()) != in_dim) {
        throw UsageError("input has " + std::to_string(batch.cols()) + " columns, model expects " +
                         std::to_string(in_dim));
    }
    require_finite(batch, "model input");
}

Matrix run_pass(std::vector<Layer>& layers, Rng* rng, const Matrix& batch, const PassOptions& opt,
                ForwardTrace* trace) {
    Matrix x = batch;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Layer& layer = layers[i];
        LayerCache cache;
        if (opt.cache) cache.input = x;
        switch (layer.spec.kind) {
            case LayerKind::dense: {
                Matrix y = x * layer.weight.transpose();
                y.rowwise() += layer.bias.row(0);
                x = std::move(y);
                break;
            }
            case LayerKind::batchnorm: {
                RowVector mean;
                RowVector var;
                if (opt.mode == Mode::train) {
                    mean = x.colwise().mean();
                    var = (x.rowwise() - mean).array().square().colwise().mean().matrix();
                    if (opt.stats == StatsPolicy::update) {
                        const double m = layer.spec.bn_momentum;
                        layer.running_mean = m * layer.running_mean + (1.0 - m) * mean;
                        layer.running_var = m * layer.running_var + (1.0 - m) * var;
                    }
                } else {
                    mean = layer.running_mean.row(0);
                    var = layer.running_var.row(0);
                }
                RowVector inv_std = (var.array() + kBatchNormEpsilon).rsqrt().matrix();
                Matrix xhat = ((x.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
                Matrix y = (xhat.array().rowwise() * layer.weight.row(0).array()).matrix();
                y.rowwise() += layer.bias.row(0);
                if (opt.cache) {
                    cache.normalized = std::move(xhat);
                    cache.inv_std = std::move(inv_std);
                }
                x = std::move(y);
                break;
            }
            case LayerKind::selu:
                x = selu_array(x);
                break;
            case LayerKind::dropout: {
                if (opt.mode == Mode::eval) break;
                Matrix mask;
                if (opt.replay_masks != nullptr) {
                    mask = opt.replay_masks->layers.at(i).mask;
                } else {
                    const double p = layer.spec.dropout_rate;
                    const double keep_scale = 1.0 / (1.0 - p);
                    mask.resize(x.rows(), x.cols());
                    // Each 64-bit draw supplies two 32-bit uniforms; entry k is
                    // dropped when its uniform falls below p * 2^32.
                    Rng& gen = *rng;
                    const auto cut = static_cast<std::uint64_t>(std::ldexp(p, 32));
                    std::uint64_t bits = 0;
                    for (Eigen::Index k = 0; k < mask.size(); ++k) {
                        if (k % 2 == 0) bits = gen();
                        const std::uint64_t u = (k % 2 == 0) ? (bits & 0xffffffffULL) : (bits >> 32);
                        mask.data()[k] = u < cut ? 0.0 : keep_scale;
                    }
                }
                x = x.cwiseProduct(mask);
                if (opt.cache) cache.mask = std::move(mask);
                break;
            }
        }
        if (trace != nullptr) trace->layers.push_back(std::move(cache));
    }
    return x;
}

bool has_batchnorm(const std::vector<Layer>& layers) {
    return std::any_of(layers.begin(), layers.end(),
                       [](const Layer& l) { return l.spec.kind == LayerKind::batchnorm; });
}

} // namespace

ForwardResult forward(MlpModel& model, const Matrix& batch) {
    check_input(model.in_dim(), batch);
    ForwardResult result;
    result.trace.mode = model.mode();
    result.trace.owner = &model;
    auto& layers = ModelAccess::layers(model);
    if (model.mode() == Mode::train && has_batchnorm(layers)) ModelAccess::bump_stats(model);
    PassOptions opt{model.mode(), true, StatsPolicy::update, nullptr};
    result.output = run_pass(layers, &ModelAccess::rng(model), batch, opt, &result.trace);
    result.trace.version = model.version();
    result.trace.stats_version = model.stats_version();
    require_finite(result.output, "model output");
    return result;
}

ForwardResult forward(const MlpModel& model, const Matrix& batch) {
    if (model.mode() != Mode::eval) {
        throw UsageError("forward on a const model requires eval mode");
    }
    return forward_eval(model, batch);
}

ForwardResult forward_eval(const MlpModel& model, const Matrix& batch) {
    check_input(model.in_dim(), batch);
    ForwardResult result;
    result.trace.mode = Mode::eval;
    result.trace.owner = &model;
    result.trace.version = model.version();
    result.trace.stats_version = model.stats_version();
    // Eval passes never write to the layers.
    auto& layers = const_cast<std::vector<Layer>&>(model.layers());
    PassOptions opt{Mode::eval, true, StatsPolicy::keep, nullptr};
    result.output = run_pass(layers, nullptr, batch, opt, &result.trace);
    require_finite(result.output, "model output");
    return result;
}

Matrix predict(const MlpModel& model, const Matrix& batch) {
    check_input(model.in_dim(), batch);
    auto& layers = const_cast<std::vector<Layer>&>(model.layers());
    PassOptions opt{Mode::eval, false, StatsPolicy::keep, nullptr};
    Matrix out = run_pass(layers, nullptr, batch, opt, nullptr);
    require_finite(out, "model output");
    return out;
}

Matrix replay(const MlpModel& model, const Matrix& batch, const ForwardTrace& trace) {
    check_input(model.in_dim(), batch);
    if (trace.layers.size() != model.layers().size()) {
        throw UsageError("trace does not belong to this model");
    }
    auto& layers = const_cast<std::vector<Layer>&>(model.layers());
    PassOptions opt{trace.mode, false, StatsPolicy::keep, &trace};
    return run_pass(layers, nullptr, batch, opt, nullptr);
}

// ---------------------------------------------------------------------------
// Backward

Gradients backward(const MlpModel& model, const ForwardTrace& trace, const Matrix& grad_output,
                   bool parameter_grads) {
    if (trace.owner != &model || trace.version != model.version() ||
        (trace.mode == Mode::eval && trace.stats_version != model.stats_version())) {
        throw NumericalError("stale forward trace: model changed since the forward pass");
    }
    const auto& layers = model.layers();
    if (trace.layers.size() != layers.size()) {
        throw NumericalError("trace does not match model depth");
    }
    if (grad_output.cols() != static_cast<Eigen::Index>(model.out_dim()) ||
        grad_output.rows() != trace.layers.front().input.rows()) {
        throw UsageError("output gradient has the wrong shape");
    }
    require_finite(grad_output, "output gradient");

    Gradients grads;
    grads.layers.resize(layers.size());
    Matrix g = grad_output;
    for (std::size_t idx = layers.size(); idx-- > 0;) {
        const Layer& layer = layers[idx];
        const LayerCache& cache = trace.layers[idx];
        switch (layer.spec.kind) {
            case LayerKind::dense: {
                if (parameter_grads) {
                    grads.layers[idx].weight = g.transpose() * cache.input;
                    grads.layers[idx].bias = g.colwise().sum();
                }
                g = g * layer.weight;
                break;
            }
            case LayerKind::batchnorm: {
                const Matrix& xhat = cache.normalized;
                if (parameter_grads) {
                    grads.layers[idx].weight = g.cwiseProduct(xhat).colwise().sum();
                    grads.layers[idx].bias = g.colwise().sum();
                }
                Matrix dxhat = (g.array().rowwise() * layer.weight.row(0).array()).matrix();
                if (trace.mode == Mode::train) {
                    const double n = static_cast<double>(g.rows());
                    RowVector sum_d = dxhat.colwise().sum();
                    RowVector sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
                    Matrix centered = (n * dxhat).rowwise() - sum_d;
                    centered -= (xhat.array().rowwise() * sum_dx.array()).matrix();
                    g = (centered.array().rowwise() * (cache.inv_std.array() / n)).matrix();
                } else {
                    g = (dxhat.array().rowwise() * cache.inv_std.array()).matrix();
                }
                break;
            }
            case LayerKind::selu: {
                g = g.cwiseProduct(selu_derivative_array(cache.input));
                break;
            }
            case LayerKind::dropout:
                if (trace.mode == Mode::train) g = g.cwiseProduct(cache.mask);
                break;
        }
    }
    grads.input = std::move(g);
    return grads;
}

void accumulate(Gradients& acc, const Gradients& other) {
    if (acc.layers.empty()) {
        acc = other;
        return;
    }
    if (acc.layers.size() != other.layers.size()) {
        throw UsageError("cannot accumulate gradients of different models");
    }
    for (std::size_t i = 0; i < acc.layers.size(); ++i) {
        if (acc.layers[i].weight.size() > 0) acc.layers[i].weight += other.layers[i].weight;
        if (acc.layers[i].bias.size() > 0) acc.layers[i].bias += other.layers[i].bias;
    }
    if (acc.input.size() == other.input.size() && acc.input.rows() == other.input.rows()) {
        acc.input += other.input;
    }
}

// ---------------------------------------------------------------------------
// Losses

double log_sigmoid(double x) {
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

Matrix softmax(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        RowVector e = (logits.row(r).array() - mx).exp().matrix();
        p.row(r) = e / e.sum();
    }
    return p;
}

LossResult cross_entropy(const Matrix& logits, std::span<const int> labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
        throw UsageError("cross_entropy: label count does not match logits rows");
    }
    if (logits.cols() < 2) {
        throw UsageError("cross_entropy: need at least two classes");
    }
    require_finite(logits, "logits");
    const double n = static_cast<double>(logits.rows());
    LossResult res;
    res.grad.resize(logits.rows(), logits.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= logits.cols()) {
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range");
        }
        const double mx = logits.row(r).maxCoeff();
        RowVector e = (logits.row(r).array() - mx).exp().matrix();
        const double s = e.sum();
        total += std::log(s) + mx - logits(r, y);
        res.grad.row(r) = e / s;
        res.grad(r, y) -= 1.0;
    }
    if (n > 0) {
        res.loss = total / n;
        res.grad /= n;
    }
    return res;
}

LossResult sigmoid_cross_entropy(const Matrix& logits, std::span<const double> targets) {
    if (logits.cols() != 1 || static_cast<std::size_t>(logits.rows()) != targets.size()) {
        throw UsageError("sigmoid_cross_entropy: expects n x 1 logits and n targets");
    }
    require_finite(logits, "logits");
    const double n = static_cast<double>(logits.rows());
    LossResult res;
    res.grad.resize(logits.rows(), 1);
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double x = logits(r, 0);
        const double t = targets[static_cast<std::size_t>(r)];
        total += -(t * log_sigmoid(x) + (1.0 - t) * log_sigmoid(-x));
        const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        res.grad(r, 0) = p - t;
    }
    if (n > 0) {
        res.loss = total / n;
        res.grad /= n;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Adam

AdamState::AdamState(AdamConfig config, const std::vector<Matrix*>& params) : config_(config) {
    if (!(config.learning_rate > 0.0) || !(config.beta1 > 0.0 && config.beta1 < 1.0) ||
        !(config.beta2 > 0.0 && config.beta2 < 1.0) || !(config.epsilon > 0.0)) {
        throw UsageError("invalid Adam hyper-parameters");
    }
    for (const Matrix* p : params) {
        m_.push_back(Matrix::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
}

namespace {

std::vector<Matrix*> model_params(MlpModel& model) {
    std::vector<Matrix*> out;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        if (!model.layers()[i].trainable()) continue;
        Layer& l = model.mutable_layer(i);
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

} // namespace

AdamState::AdamState(const MlpModel& model, AdamConfig config) : config_(config) {
    MlpModel shapes = model;
    *this = AdamState(config, model_params(shapes));
}

void AdamState::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw UsageError("adam: parameter list does not match optimizer state");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->rows() != m_[i].rows() || params[i]->cols() != m_[i].cols() ||
            grads[i]->rows() != m_[i].rows() || grads[i]->cols() != m_[i].cols()) {
            throw UsageError("adam: shape mismatch at tensor " + std::to_string(i));
        }
        if (!grads[i]->allFinite()) {
            throw NumericalError("adam: non-finite gradient in tensor " + std::to_string(i));
        }
    }
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = *grads[i];
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
        params[i]->array() -= config_.learning_rate * (m_[i].array() / c1) /
                              ((v_[i].array() / c2).sqrt() + config_.epsilon);
    }
}

void adam_step(AdamState& state, MlpModel& model, const Gradients& grads) {
    if (grads.layers.size() != model.layers().size()) {
        throw UsageError("adam: gradients do not match model");
    }
    std::vector<const Matrix*> g;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        if (!model.layers()[i].trainable()) continue;
        g.push_back(&grads.layers[i].weight);
        g.push_back(&grads.layers[i].bias);
    }
    state.step(model_params(model), g);
}

} // namespace driftforge::nn
