#include "driftforge/matrix.hpp"

#include "driftforge/error.hpp"

#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace driftforge {

bool all_finite(const Matrix& m) {
    return m.allFinite();
}

void require_finite(const Matrix& m, std::string_view what) {
    if (!m.allFinite()) {
        throw NumericalError("non-finite value in " + std::string(what));
    }
}

Matrix select_rows(const Matrix& src, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw UsageError("hconcat: row count mismatch");
    }
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

Matrix vconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    if (a.cols() != b.cols()) {
        throw UsageError("vconcat: column count mismatch");
    }
    Matrix out(a.rows() + b.rows(), a.cols());
    out << a, b;
    return out;
}

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
}

} // namespace driftforge
