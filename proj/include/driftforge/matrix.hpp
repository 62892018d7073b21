#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace driftforge {

// Row-major dense matrix of 64-bit reals. Rows are samples.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Throws NumericalError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, std::string_view what);

bool all_finite(const Matrix& m);

// Copies the listed rows of `src` into a new matrix, in order.
Matrix select_rows(const Matrix& src, std::span<const std::size_t> rows);

// [a | b] with a.rows() == b.rows().
Matrix hconcat(const Matrix& a, const Matrix& b);

// [a ; b] with a.cols() == b.cols().
Matrix vconcat(const Matrix& a, const Matrix& b);

// Keeps freed batch-sized buffers in the heap instead of returning them to the
// OS after every training step. No-op outside glibc.
void tune_allocator();

} // namespace driftforge
