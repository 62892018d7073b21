#include "driftforge/mmd.hpp"

#include "driftforge/error.hpp"
#include "driftforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>

namespace driftforge::drift {

namespace {

Matrix subsample(const Matrix& x, std::size_t cap, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n <= cap) return x;
    Rng rng = make_rng(seed, {0x5ab5, n});
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < cap; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    return select_rows(x, idx);
}

Matrix squared_distances(const Matrix& a, const Matrix& b) {
    const Eigen::VectorXd na = a.rowwise().squaredNorm();
    const Eigen::VectorXd nb = b.rowwise().squaredNorm();
    Matrix d = -2.0 * (a * b.transpose());
    d.colwise() += na;
    d.rowwise() += nb.transpose();
    return d.cwiseMax(0.0);
}

double median_of(std::vector<double>& v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

double pairwise_median(const Matrix& pts) {
    std::vector<double> dists;
    const Eigen::Index n = pts.rows();
    dists.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    const Matrix sq = squared_distances(pts, pts);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) dists.push_back(std::sqrt(sq(i, j)));
    }
    const double m = median_of(dists);
    return m > 0.0 ? m : 1.0;
}

} // namespace

double median_heuristic(const Matrix& pooled, std::uint64_t seed, std::size_t cap) {
    if (pooled.rows() < 2) throw UsageError("median heuristic needs at least two samples");
    return pairwise_median(subsample(pooled, std::max<std::size_t>(cap, 2), seed));
}

double mmd_biased(const Matrix& x, const Matrix& y, const KernelConfig& kernel, std::uint64_t seed,
                  std::size_t cap) {
    if (x.rows() == 0 || y.rows() == 0) throw UsageError("MMD needs two non-empty sets");
    if (x.cols() != y.cols()) throw UsageError("MMD sets differ in dimension");
    const Matrix xs = subsample(x, cap, seed);
    const Matrix ys = subsample(y, cap, seed);

    double sigma = 1.0;
    if (kernel.bandwidth) {
        if (!(*kernel.bandwidth > 0.0)) throw UsageError("kernel bandwidth must be positive");
        sigma = *kernel.bandwidth;
    } else {
        // Half the cap from each side keeps the pooled set independent of argument order.
        const Matrix pooled = vconcat(subsample(xs, cap / 2, seed), subsample(ys, cap / 2, seed));
        sigma = pooled.rows() >= 2 ? pairwise_median(pooled) : 1.0;
    }
    const double gamma = 1.0 / (2.0 * sigma * sigma);
    auto mean_kernel = [gamma](const Matrix& a, const Matrix& b) {
        return (-gamma * squared_distances(a, b).array()).exp().mean();
    };
    const double kxy = 0.5 * (mean_kernel(xs, ys) + mean_kernel(ys, xs));
    const double sq = mean_kernel(xs, xs) + mean_kernel(ys, ys) - 2.0 * kxy;
    return std::sqrt(std::max(sq, 0.0));
}

std::vector<std::string> FamilyDriftReport::families() const {
    std::vector<std::string> out;
    for (const FamilyDrift& f : ranked) out.push_back(f.family);
    return out;
}

FamilyDriftReport rank_families(std::span<const Sample> samples, const PeriodPartition& partition,
                                const std::vector<TimeSplitSpec>& splits, const RankOptions& options) {
    if (splits.empty()) throw UsageError("rank_families needs at least one split");
    for (const TimeSplitSpec& s : splits) s.validate(partition.count());

    // Canonical order makes the result independent of input order.
    std::map<std::string, std::vector<std::size_t>> by_family;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].label == Label::malware && samples[i].family) by_family[*samples[i].family].push_back(i);
    }
    for (auto& [name, idx] : by_family) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (samples[a].timestamp != samples[b].timestamp) return samples[a].timestamp < samples[b].timestamp;
            return samples[a].id < samples[b].id;
        });
    }

    std::vector<FamilyDrift> all;
    bool any_cell = false;
    for (const auto& [name, idx] : by_family) {
        FamilyDrift fd;
        fd.family = name;
        for (const TimeSplitSpec& s : splits) {
            std::vector<std::size_t> before;
            std::vector<std::size_t> after;
            for (std::size_t i : idx) {
                const int p = partition.period_of[i];
                if (p >= s.k - s.w1 && p <= s.k - 1) before.push_back(i);
                if (p >= s.k && p <= s.k + s.w2) after.push_back(i);
            }
            if (before.size() < options.min_count || after.size() < options.min_count) {
                fd.per_split.push_back(std::nullopt);
                continue;
            }
            const double v = mmd_biased(gather_features(samples, before), gather_features(samples, after),
                                        options.kernel, options.seed);
            fd.per_split.push_back(v);
            fd.sum += v;
            any_cell = true;
        }
        all.push_back(std::move(fd));
    }
    if (!any_cell) {
        throw DataError("no malware family has at least " + std::to_string(options.min_count) +
                        " samples on both sides of any split");
    }
    std::stable_sort(all.begin(), all.end(), [](const FamilyDrift& a, const FamilyDrift& b) {
        if (a.sum != b.sum) return a.sum > b.sum;
        return a.family < b.family;
    });
    if (all.size() > options.top_m) all.resize(options.top_m);
    return FamilyDriftReport{splits, std::move(all)};
}

void write_csv(std::ostream& out, const FamilyDriftReport& report) {
    out << "family";
    for (const TimeSplitSpec& s : report.splits) out << ",mmd_k" << s.k;
    out << ",sum,rank\n";
    char buf[64];
    for (std::size_t r = 0; r < report.ranked.size(); ++r) {
        const FamilyDrift& f = report.ranked[r];
        out << f.family;
        for (const auto& v : f.per_split) {
            out << ',';
            if (v) {
                std::snprintf(buf, sizeof buf, "%.17g", *v);
                out << buf;
            }
        }
        std::snprintf(buf, sizeof buf, "%.17g", f.sum);
        out << ',' << buf << ',' << (r + 1) << '\n';
    }
}

} // namespace driftforge::drift
