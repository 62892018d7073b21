#include "driftforge/dataset.hpp"

#include "driftforge/error.hpp"
#include "driftforge/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

namespace driftforge {

using nlohmann::json;

std::string to_string(Label label) {
    switch (label) {
        case Label::benign: return "benign";
        case Label::malware: return "malware";
        case Label::unlabeled: return "unlabeled";
    }
    return "unlabeled";
}

Label label_from_string(const std::string& text) {
    if (text == "benign") return Label::benign;
    if (text == "malware") return Label::malware;
    if (text == "unlabeled") return Label::unlabeled;
    throw DataError("unknown label '" + text + "'");
}

std::string to_string(Role role) {
    switch (role) {
        case Role::train: return "train";
        case Role::val: return "val";
        case Role::test: return "test";
    }
    return "train";
}

// ---------------------------------------------------------------------------
// JSON Lines

namespace {

Sample parse_record(const json& rec) {
    if (!rec.is_object()) throw DataError("record is not a JSON object");
    Sample s;
    const auto id = rec.find("id");
    if (id == rec.end() || !id->is_string()) throw DataError("missing string field 'id'");
    s.id = id->get<std::string>();

    const auto ts = rec.find("timestamp");
    if (ts == rec.end() || !ts->is_number_integer()) {
        throw DataError("missing integer field 'timestamp'");
    }
    s.timestamp = ts->get<std::int64_t>();

    const auto label = rec.find("label");
    if (label == rec.end() || !label->is_string()) throw DataError("missing string field 'label'");
    s.label = label_from_string(label->get<std::string>());

    const auto fam = rec.find("family");
    if (fam != rec.end() && !fam->is_null()) {
        if (!fam->is_string()) throw DataError("field 'family' must be a string or null");
        s.family = fam->get<std::string>();
    }

    const auto feats = rec.find("features");
    if (feats == rec.end() || !feats->is_array()) throw DataError("missing array field 'features'");
    s.features.reserve(feats->size());
    for (const json& v : *feats) {
        if (!v.is_number()) throw DataError("non-numeric feature value");
        const double d = v.get<double>();
        if (!std::isfinite(d)) throw DataError("non-finite feature value");
        s.features.push_back(d);
    }
    return s;
}

} // namespace

std::vector<Sample> read_jsonl(std::istream& in) {
    std::vector<Sample> out;
    std::string line;
    std::size_t line_no = 0;
    std::optional<std::size_t> dim;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
            continue;
        }
        try {
            Sample s = parse_record(json::parse(line));
            if (dim && s.features.size() != *dim) {
                throw DataError("feature dimension " + std::to_string(s.features.size()) +
                                " differs from " + std::to_string(*dim));
            }
            dim = s.features.size();
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw DataError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        } catch (const DataError& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<Sample> ingest_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file " + path.string());
    return read_jsonl(in);
}

void write_jsonl(std::ostream& out, std::span<const Sample> samples) {
    for (const Sample& s : samples) {
        nlohmann::ordered_json rec;
        rec["id"] = s.id;
        rec["timestamp"] = s.timestamp;
        rec["label"] = to_string(s.label);
        rec["family"] = s.family ? nlohmann::ordered_json(*s.family) : nlohmann::ordered_json(nullptr);
        rec["features"] = s.features;
        out << rec.dump() << '\n';
    }
}

void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write dataset file " + path.string());
    write_jsonl(out, samples);
}

std::size_t feature_dimension(std::span<const Sample> samples) {
    return samples.empty() ? 0 : samples.front().features.size();
}

// ---------------------------------------------------------------------------
// Periods and roles

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

} // namespace

PeriodPartition partition_by_time(std::span<const Sample> samples, std::int64_t period_length,
                                  std::optional<std::int64_t> origin) {
    if (samples.empty()) throw DataError("cannot partition an empty dataset");
    if (period_length <= 0) throw UsageError("period length must be positive");

    std::int64_t min_ts = samples.front().timestamp;
    for (const Sample& s : samples) min_ts = std::min(min_ts, s.timestamp);
    const std::int64_t base = origin ? *origin : floor_div(min_ts, period_length) * period_length;

    std::vector<std::int64_t> bin(samples.size());
    std::int64_t lo = std::numeric_limits<std::int64_t>::max();
    std::int64_t hi = std::numeric_limits<std::int64_t>::min();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        bin[i] = floor_div(samples[i].timestamp - base, period_length);
        lo = std::min(lo, bin[i]);
        hi = std::max(hi, bin[i]);
    }

    PeriodPartition p;
    p.period_length = period_length;
    p.origin = base + lo * period_length;
    p.periods.resize(static_cast<std::size_t>(hi - lo + 1));
    p.period_of.resize(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto slot = static_cast<std::size_t>(bin[i] - lo);
        p.periods[slot].push_back(i);
        p.period_of[i] = static_cast<int>(slot) + 1;
    }
    return p;
}

std::vector<Role> assign_roles(const PeriodPartition& partition, RoleRatios ratios, std::uint64_t seed) {
    const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
    for (double v : r) {
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("role ratios must lie in [0, 1]");
    }
    if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw UsageError("role ratios must sum to 1");

    std::vector<Role> roles(partition.period_of.size(), Role::train);
    for (std::size_t p = 0; p < partition.periods.size(); ++p) {
        std::vector<std::size_t> members = partition.periods[p];
        const std::size_t n = members.size();
        if (n == 0) continue;

        std::array<std::size_t, 3> counts{};
        std::array<double, 3> remainder{};
        std::size_t assigned = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            const double exact = static_cast<double>(n) * r[j];
            counts[j] = static_cast<std::size_t>(std::floor(exact + 1e-9));
            remainder[j] = exact - static_cast<double>(counts[j]);
            assigned += counts[j];
        }
        std::array<std::size_t, 3> order{0, 1, 2};
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
            return r[a] > r[b];
        });
        for (std::size_t j = 0; assigned < n; ++j, ++assigned) ++counts[order[j % 3]];

        Rng rng = make_rng(seed, {0x501e, p});
        std::shuffle(members.begin(), members.end(), rng);
        for (std::size_t i = 0; i < n; ++i) {
            roles[members[i]] = i < counts[0] ? Role::train : (i < counts[0] + counts[1] ? Role::val : Role::test);
        }
    }
    return roles;
}

// ---------------------------------------------------------------------------
// Normalisation

double nearest_rank_quantile(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw UsageError("quantile of an empty sample");
    const double n = static_cast<double>(sorted.size());
    auto idx = static_cast<std::int64_t>(std::ceil(p * n - 1e-9)) - 1;
    idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(sorted.size()) - 1);
    return sorted[static_cast<std::size_t>(idx)];
}

Normalizer fit_normalizer(const Matrix& train) {
    if (train.rows() == 0) throw DataError("cannot fit a normaliser on an empty training pool");
    const Eigen::Index d = train.cols();
    Normalizer norm;
    norm.q01.resize(d);
    norm.q99.resize(d);
    norm.mean.resize(d);
    norm.std.resize(d);
    std::vector<double> col(static_cast<std::size_t>(train.rows()));
    for (Eigen::Index j = 0; j < d; ++j) {
        for (Eigen::Index i = 0; i < train.rows(); ++i) col[static_cast<std::size_t>(i)] = train(i, j);
        std::sort(col.begin(), col.end());
        const double lo = nearest_rank_quantile(col, kLowerQuantile);
        const double hi = nearest_rank_quantile(col, kUpperQuantile);
        double sum = 0.0;
        for (double& v : col) {
            v = std::clamp(v, lo, hi);
            sum += v;
        }
        const double mean = sum / static_cast<double>(col.size());
        double ss = 0.0;
        for (double v : col) ss += (v - mean) * (v - mean);
        norm.q01(j) = lo;
        norm.q99(j) = hi;
        norm.mean(j) = mean;
        norm.std(j) = std::sqrt(ss / static_cast<double>(col.size()));
    }
    return norm;
}

Normalizer fit_normalizer(std::span<const Sample> samples, std::span<const std::size_t> train_pool) {
    return fit_normalizer(gather_features(samples, train_pool));
}

void Normalizer::apply(Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != dim()) {
        throw UsageError("normaliser dimension does not match data");
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double s = std::max(std.size() > 0 ? std(j) : 0.0, 0.0);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (s < kDegenerateStd) {
                x(i, j) = 0.0;
            } else {
                x(i, j) = (std::clamp(x(i, j), q01(j), q99(j)) - mean(j)) / s;
            }
        }
    }
}

Matrix Normalizer::applied(const Matrix& x) const {
    Matrix out = x;
    apply(out);
    return out;
}

Matrix Normalizer::standardized(const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != dim()) {
        throw UsageError("normaliser dimension does not match data");
    }
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        if (std(j) < kDegenerateStd) {
            out.col(j).setZero();
        } else {
            out.col(j) = ((x.col(j).array() - mean(j)) / std(j)).matrix();
        }
    }
    return out;
}

Matrix Normalizer::inverse(const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != dim()) {
        throw UsageError("normaliser dimension does not match data");
    }
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double s = std(j) < kDegenerateStd ? 0.0 : std(j);
        out.col(j) = (x.col(j).array() * s + mean(j)).matrix();
    }
    return out;
}

std::vector<Sample> apply_normalizer(const Normalizer& norm, std::span<const Sample> samples) {
    std::vector<Sample> out(samples.begin(), samples.end());
    if (out.empty()) return out;
    std::vector<std::size_t> all(out.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Matrix x = gather_features(samples, all);
    norm.apply(x);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto row = x.row(static_cast<Eigen::Index>(i));
        out[i].features.assign(row.data(), row.data() + row.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Split views

void TimeSplitSpec::validate(int n_periods) const {
    if (w1 < 1 || w2 < 0) throw UsageError("window sizes must satisfy w1 >= 1 and w2 >= 0");
    if (!(w1 < k)) throw UsageError("split k=" + std::to_string(k) + " needs w1 < k");
    if (k + w2 > n_periods) {
        throw UsageError("split k=" + std::to_string(k) + " with w2=" + std::to_string(w2) +
                         " exceeds " + std::to_string(n_periods) + " periods");
    }
}

std::vector<TimeSplitSpec> enumerate_splits(int n_periods, int w1, int w2) {
    std::vector<TimeSplitSpec> out;
    for (int k = w1 + 1; k + w2 <= n_periods; ++k) out.push_back({k, w1, w2});
    return out;
}

SplitView make_split_view(const PeriodPartition& partition, std::span<const Sample> samples,
                          const TimeSplitSpec& spec, SplitTag tag) {
    spec.validate(partition.count());
    if (partition.roles.size() != samples.size()) {
        throw UsageError("partition roles have not been assigned for this dataset");
    }
    SplitView view;
    view.tag = tag;
    view.spec = spec;
    for (int p = spec.k - spec.w1; p <= spec.k - 1; ++p) {
        for (std::size_t i : partition.period(p)) {
            if (!samples[i].labeled()) continue;
            if (partition.roles[i] == Role::train) view.train_pool.push_back(i);
            if (partition.roles[i] == Role::val) view.val_pool.push_back(i);
        }
    }
    for (int p = spec.k; p <= spec.k + spec.w2; ++p) {
        for (std::size_t i : partition.period(p)) {
            if (!samples[i].labeled()) continue;
            if (partition.roles[i] == Role::test) view.test_pool.push_back(i);
            if (tag == SplitTag::upper_bound && partition.roles[i] == Role::train) {
                view.future_pool.push_back(i);
            }
        }
    }
    view.train_pool.insert(view.train_pool.end(), view.future_pool.begin(), view.future_pool.end());
    return view;
}

LabeledBatch gather(std::span<const Sample> samples, std::span<const std::size_t> pool) {
    LabeledBatch out;
    for (std::size_t i : pool) {
        if (samples[i].labeled()) out.index.push_back(i);
    }
    out.x = gather_features(samples, out.index);
    out.y.reserve(out.index.size());
    for (std::size_t i : out.index) {
        out.y.push_back(samples[i].label == Label::malware ? kMalwareClass : kBenignClass);
    }
    return out;
}

Matrix gather_features(std::span<const Sample> samples, std::span<const std::size_t> pool) {
    const std::size_t d = feature_dimension(samples);
    Matrix x(static_cast<Eigen::Index>(pool.size()), static_cast<Eigen::Index>(d));
    for (std::size_t r = 0; r < pool.size(); ++r) {
        const auto& f = samples[pool[r]].features;
        if (f.size() != d) throw DataError("inconsistent feature dimension in sample " + samples[pool[r]].id);
        x.row(static_cast<Eigen::Index>(r)) =
            Eigen::Map<const RowVector>(f.data(), static_cast<Eigen::Index>(d));
    }
    return x;
}

std::vector<Sample> project_features(std::span<const Sample> samples,
                                     std::span<const std::size_t> columns) {
    const std::size_t d = feature_dimension(samples);
    for (std::size_t c : columns) {
        if (c >= d) throw UsageError("feature index " + std::to_string(c) + " out of range");
    }
    std::vector<Sample> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) {
        Sample t = s;
        t.features.resize(columns.size());
        for (std::size_t j = 0; j < columns.size(); ++j) t.features[j] = s.features[columns[j]];
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace driftforge
