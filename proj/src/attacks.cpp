#include "driftforge/attacks.hpp"

#include "driftforge/error.hpp"

#include <algorithm>

namespace driftforge::attacks {

bool ProjectionBox::contains(const Matrix& x, double tol) const {
    if (static_cast<std::size_t>(x.cols()) != dim()) return false;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            if (x(i, j) < lo(j) - tol || x(i, j) > hi(j) + tol) return false;
        }
    }
    return true;
}

ProjectionBox fit_projection_box(const Matrix& train) {
    if (train.rows() == 0) throw DataError("cannot fit a projection box on an empty pool");
    require_finite(train, "projection box pool");
    return ProjectionBox{train.colwise().minCoeff(), train.colwise().maxCoeff()};
}

Matrix project(const ProjectionBox& box, const Matrix& x) {
    if (static_cast<std::size_t>(x.cols()) != box.dim()) {
        throw UsageError("projection box dimension does not match input");
    }
    Matrix out = x;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        out.row(i) = out.row(i).cwiseMax(box.lo).cwiseMin(box.hi);
    }
    return out;
}

std::string to_string(AttackMethod m) {
    return m == AttackMethod::fgsm ? "fgsm" : "pgd";
}

AttackMethod attack_method_from_string(const std::string& name) {
    if (name == "fgsm") return AttackMethod::fgsm;
    if (name == "pgd") return AttackMethod::pgd;
    throw UsageError("unknown attack method '" + name + "'");
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.0)) throw UsageError("attack epsilon must be non-negative");
    if (steps < 1) throw UsageError("attack steps must be at least 1");
}

LossGradient classifier_loss_gradient(const nn::MlpModel& model) {
    return [&model](const Matrix& x, std::span<const int> labels) {
        nn::ForwardResult fwd = nn::forward_eval(model, x);
        nn::LossResult loss = nn::cross_entropy(fwd.output, labels);
        // cross_entropy averages over rows; undo it to get per-sample gradients.
        loss.grad *= static_cast<double>(x.rows());
        return nn::backward(model, fwd.trace, loss.grad, false).input;
    };
}

namespace {

Matrix checked_gradient(const LossGradient& grad, const Matrix& x, std::span<const int> labels) {
    Matrix g = grad(x, labels);
    if (g.rows() != x.rows() || g.cols() != x.cols()) {
        throw UsageError("loss gradient has the wrong shape");
    }
    require_finite(g, "attack gradient");
    return g;
}

} // namespace

Matrix fgsm(const LossGradient& grad, const Matrix& x, std::span<const int> labels, double epsilon,
            const ProjectionBox& box) {
    const Matrix g = checked_gradient(grad, x, labels);
    const Matrix sign = g.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    return project(box, x + epsilon * sign);
}

Matrix pgd_step(const LossGradient& grad, const Matrix& x, std::span<const int> labels, double epsilon,
                const ProjectionBox& box) {
    const Matrix g = checked_gradient(grad, x, labels);
    return project(box, x + epsilon * g);
}

Matrix multi_step(AttackMethod method, int k, const LossGradient& grad, const Matrix& x,
                  std::span<const int> labels, double epsilon, const ProjectionBox& box) {
    if (k < 1) throw UsageError("multi-step attack needs k >= 1");
    Matrix cur = x;
    for (int i = 0; i < k; ++i) {
        cur = method == AttackMethod::fgsm ? fgsm(grad, cur, labels, epsilon, box)
                                           : pgd_step(grad, cur, labels, epsilon, box);
    }
    return cur;
}

Matrix attack(const AttackConfig& config, const nn::MlpModel& model, const Matrix& x,
              std::span<const int> labels, const ProjectionBox& box) {
    config.validate();
    if (x.rows() == 0) return x;
    return multi_step(config.method, config.steps, classifier_loss_gradient(model), x, labels,
                      config.epsilon, box);
}

} // namespace driftforge::attacks
