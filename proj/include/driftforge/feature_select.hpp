#pragma once

#include "driftforge/matrix.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace driftforge::nn {

struct LogisticFit {
    RowVector weights;
    double bias = 0.0;
};

// L1-penalised logistic regression by proximal gradient (ISTA): a gradient
// step on the mean log-loss followed by soft-thresholding of the weights.
// The bias is not penalised. Labels are 0/1.
LogisticFit fit_l1_logistic(const Matrix& x, std::span<const int> labels, double l1_strength,
                            int iterations = 500);

// Indices of the k largest-magnitude weights of the L1 fit, in rank order;
// ties go to the lower index.
std::vector<std::size_t> l1_logistic_select(const Matrix& x, std::span<const int> labels,
                                            double l1_strength, std::size_t k, int iterations = 500);

} // namespace driftforge::nn
