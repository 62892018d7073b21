#pragma once

#include "driftforge/nn.hpp"
#include "driftforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace driftforge::testing {

// Random stack of at most 4 layers and 16 units whose first layer is dense.
// With `all_kinds` the network holds exactly one layer of every kind.
inline std::vector<nn::LayerSpec> random_specs(Rng& rng, bool all_kinds) {
    std::uniform_int_distribution<std::size_t> width(1, 16);
    std::uniform_real_distribution<double> rate(0.1, 0.5);
    const std::size_t in = width(rng);
    std::vector<nn::LayerSpec> specs{nn::LayerSpec::dense(in, width(rng))};
    std::vector<nn::LayerKind> rest;
    if (all_kinds) {
        rest = {nn::LayerKind::batchnorm, nn::LayerKind::selu, nn::LayerKind::dropout};
        std::shuffle(rest.begin(), rest.end(), rng);
    } else {
        std::uniform_int_distribution<int> count(1, 3);
        std::uniform_int_distribution<int> kind(0, 3);
        for (int i = count(rng); i > 0; --i) rest.push_back(static_cast<nn::LayerKind>(kind(rng)));
    }
    for (nn::LayerKind k : rest) {
        const std::size_t d = specs.back().out_dim;
        switch (k) {
        case nn::LayerKind::dense: specs.push_back(nn::LayerSpec::dense(d, width(rng))); break;
        case nn::LayerKind::batchnorm: specs.push_back(nn::LayerSpec::batchnorm(d)); break;
        case nn::LayerKind::selu: specs.push_back(nn::LayerSpec::selu(d)); break;
        case nn::LayerKind::dropout: specs.push_back(nn::LayerSpec::dropout(d, rate(rng))); break;
        }
    }
    return specs;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

// Gives every batchnorm layer non-trivial scale, shift and running statistics.
inline void randomise_batchnorm(nn::MlpModel& model, Rng& rng) {
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::normal_distribution<double> n(0.0, 0.5);
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        if (model.layers()[i].spec.kind != nn::LayerKind::batchnorm) continue;
        nn::Layer& l = model.mutable_layer(i);
        for (Eigen::Index j = 0; j < l.weight.size(); ++j) {
            l.weight.data()[j] = u(rng);
            l.bias.data()[j] = n(rng);
            l.running_mean.data()[j] = n(rng);
            l.running_var.data()[j] = u(rng);
        }
    }
}

// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor); 0 when both vanish.
// The floor keeps gradients that are exactly zero (dense bias ahead of train-mode
// batchnorm) from comparing pure finite-difference noise.
inline double relative_error(const Matrix& a, const Matrix& b, double floor = 0.0) {
    const double scale = std::max({a.norm(), b.norm(), floor});
    if (scale == 0.0) return 0.0;
    return (a - b).norm() / scale;
}

struct GradCheck {
    double worst_parameter = 0.0;
    double worst_input = 0.0;
};

// Compares backward() with central differences of sum(output * projection),
// replaying the traced pass so dropout masks stay fixed.
inline GradCheck check_gradients(nn::MlpModel& model, const Matrix& x, const Matrix& projection, double h = 1e-6) {
    const nn::ForwardResult fwd = nn::forward(model, x);
    const nn::Gradients analytic = nn::backward(model, fwd.trace, projection);
    nn::ForwardTrace trace = fwd.trace;
    auto objective = [&](const Matrix& input) { return nn::replay(model, input, trace).cwiseProduct(projection).sum(); };

    GradCheck out;
    Matrix numeric_input(x.rows(), x.cols());
    Matrix probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = probe.data()[i];
        probe.data()[i] = keep + h;
        const double up = objective(probe);
        probe.data()[i] = keep - h;
        const double down = objective(probe);
        probe.data()[i] = keep;
        numeric_input.data()[i] = (up - down) / (2.0 * h);
    }
    out.worst_input = relative_error(analytic.input, numeric_input, 1e-4);

    for (std::size_t l = 0; l < model.layers().size(); ++l) {
        if (!model.layers()[l].trainable()) continue;
        for (int which = 0; which < 2; ++which) {
            auto tensor = [&]() -> Matrix& {
                nn::Layer& layer = model.mutable_layer(l);
                return which == 0 ? layer.weight : layer.bias;
            };
            Matrix numeric(tensor().rows(), tensor().cols());
            for (Eigen::Index i = 0; i < numeric.size(); ++i) {
                const double keep = tensor().data()[i];
                tensor().data()[i] = keep + h;
                const double up = objective(x);
                tensor().data()[i] = keep - h;
                const double down = objective(x);
                tensor().data()[i] = keep;
                numeric.data()[i] = (up - down) / (2.0 * h);
            }
            const Matrix& a = which == 0 ? analytic.layers[l].weight : analytic.layers[l].bias;
            out.worst_parameter = std::max(out.worst_parameter, relative_error(a, numeric, 1e-4));
        }
    }
    return out;
}

} // namespace driftforge::testing
