#pragma once

#include "driftforge/matrix.hpp"
#include "driftforge/nn.hpp"

#include <functional>
#include <span>
#include <string>

namespace driftforge::attacks {

// Admissible region for adversarial samples: a per-feature box in normalised space.
struct ProjectionBox {
    RowVector lo;
    RowVector hi;

    std::size_t dim() const { return static_cast<std::size_t>(lo.size()); }
    bool contains(const Matrix& x, double tol = 0.0) const;
};

// Per-feature min/max over the training pool.
ProjectionBox fit_projection_box(const Matrix& train);

Matrix project(const ProjectionBox& box, const Matrix& x);

enum class AttackMethod { fgsm, pgd };
std::string to_string(AttackMethod m);
AttackMethod attack_method_from_string(const std::string& name);

inline constexpr int kDefaultMultiSteps = 10;

struct AttackConfig {
    AttackMethod method = AttackMethod::fgsm;
    double epsilon = 0.1;
    int steps = 1;

    void validate() const;
};

// Gradient of the per-sample loss with respect to every input row.
using LossGradient = std::function<Matrix(const Matrix& x, std::span<const int> labels)>;

// Cross-entropy input gradient of a classifier, evaluated with eval-mode
// semantics (no dropout noise, running batchnorm statistics).
LossGradient classifier_loss_gradient(const nn::MlpModel& model);

// x_adv = project(x + epsilon * sign(grad)), with sign(0) = 0.
Matrix fgsm(const LossGradient& grad, const Matrix& x, std::span<const int> labels, double epsilon,
            const ProjectionBox& box);
// x_adv = project(x + epsilon * grad).
Matrix pgd_step(const LossGradient& grad, const Matrix& x, std::span<const int> labels, double epsilon,
                const ProjectionBox& box);
// Repeats the single step k times, recomputing the gradient at each iterate.
Matrix multi_step(AttackMethod method, int k, const LossGradient& grad, const Matrix& x,
                  std::span<const int> labels, double epsilon, const ProjectionBox& box);

// Runs `config` against a classifier.
Matrix attack(const AttackConfig& config, const nn::MlpModel& model, const Matrix& x,
              std::span<const int> labels, const ProjectionBox& box);

} // namespace driftforge::attacks
