#include "driftforge/feature_select.hpp"

#include "driftforge/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace driftforge::nn {

namespace {

// Largest eigenvalue of [X 1]^T [X 1] / n by power iteration.
double lipschitz_estimate(const Matrix& x) {
    const Eigen::Index d = x.cols();
    const double n = static_cast<double>(x.rows());
    Eigen::VectorXd v = Eigen::VectorXd::Ones(d + 1) / std::sqrt(static_cast<double>(d + 1));
    double lambda = 1.0;
    for (int it = 0; it < 50; ++it) {
        Eigen::VectorXd xv = x * v.head(d);
        xv.array() += v(d);
        Eigen::VectorXd w(d + 1);
        w.head(d) = x.transpose() * xv / n;
        w(d) = xv.sum() / n;
        const double norm = w.norm();
        if (norm == 0.0) return 1.0;
        lambda = norm;
        v = w / norm;
    }
    return lambda;
}

double soft_threshold(double v, double t) {
    if (v > t) return v - t;
    if (v < -t) return v + t;
    return 0.0;
}

} // namespace

LogisticFit fit_l1_logistic(const Matrix& x, std::span<const int> labels, double l1_strength,
                            int iterations) {
    if (static_cast<std::size_t>(x.rows()) != labels.size() || x.rows() == 0) {
        throw UsageError("logistic fit: label count must match non-empty data");
    }
    if (l1_strength < 0.0) throw UsageError("l1 strength must be non-negative");
    const auto positives = std::count(labels.begin(), labels.end(), 1);
    for (int y : labels) {
        if (y != 0 && y != 1) throw DataError("logistic fit: labels must be 0 or 1");
    }
    if (positives == 0 || positives == static_cast<long>(labels.size())) {
        throw DataError("logistic fit: labels are all one class");
    }
    require_finite(x, "logistic fit input");

    const double n = static_cast<double>(x.rows());
    // Logistic loss curvature is at most 1/4.
    const double step = 1.0 / (0.25 * lipschitz_estimate(x) * 1.05);
    Eigen::VectorXd y(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) y(i) = labels[static_cast<std::size_t>(i)];

    Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols());
    double b = 0.0;
    for (int it = 0; it < iterations; ++it) {
        Eigen::VectorXd z = x * w;
        z.array() += b;
        Eigen::VectorXd residual = z.unaryExpr([](double v) {
            return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        }) - y;
        Eigen::VectorXd gw = x.transpose() * residual / n;
        const double gb = residual.sum() / n;
        w -= step * gw;
        b -= step * gb;
        const double t = step * l1_strength;
        for (Eigen::Index j = 0; j < w.size(); ++j) w(j) = soft_threshold(w(j), t);
    }
    LogisticFit fit;
    fit.weights = w.transpose();
    fit.bias = b;
    return fit;
}

std::vector<std::size_t> l1_logistic_select(const Matrix& x, std::span<const int> labels,
                                            double l1_strength, std::size_t k, int iterations) {
    if (k > static_cast<std::size_t>(x.cols())) {
        throw UsageError("cannot select " + std::to_string(k) + " of " + std::to_string(x.cols()) +
                         " features");
    }
    const LogisticFit fit = fit_l1_logistic(x, labels, l1_strength, iterations);
    std::vector<std::size_t> order(static_cast<std::size_t>(x.cols()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(fit.weights(static_cast<Eigen::Index>(a))) >
               std::abs(fit.weights(static_cast<Eigen::Index>(b)));
    });
    order.resize(k);
    return order;
}

} // namespace driftforge::nn
