#include "driftforge/harness.hpp"

#include "driftforge/error.hpp"
#include "driftforge/feature_select.hpp"
#include "driftforge/mmd.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace driftforge::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& name, const std::pair<Enum, const char*> (&table)[N], const char* what) {
    for (const auto& [value, text] : table) {
        if (name == text) return value;
    }
    throw UsageError(std::string("unknown ") + what + " '" + name + "'");
}

template <typename Enum, std::size_t N>
std::string print_enum(Enum value, const std::pair<Enum, const char*> (&table)[N]) {
    for (const auto& [v, text] : table) {
        if (v == value) return text;
    }
    return "?";
}

constexpr std::pair<MethodTag, const char*> kMethods[] = {
    {MethodTag::normal, "normal"},     {MethodTag::upper_bound, "upper_bound"}, {MethodTag::adv_fgsm, "adv_fgsm"},
    {MethodTag::adv_pgd, "adv_pgd"},   {MethodTag::ccygan, "ccygan"},
};
constexpr std::pair<FeatureMode, const char*> kModes[] = {
    {FeatureMode::full, "full"},
    {FeatureMode::reduced, "reduced"},
};
constexpr std::pair<Study, const char*> kStudies[] = {
    {Study::sweep, "sweep"},
    {Study::degradation, "degradation"},
    {Study::robustness, "robustness"},
};

} // namespace

std::string to_string(MethodTag tag) { return print_enum(tag, kMethods); }
MethodTag method_from_string(const std::string& name) { return parse_enum(name, kMethods, "method"); }
std::string to_string(FeatureMode mode) { return print_enum(mode, kModes); }
FeatureMode feature_mode_from_string(const std::string& name) { return parse_enum(name, kModes, "feature mode"); }
std::string to_string(Study study) { return print_enum(study, kStudies); }
Study study_from_string(const std::string& name) { return parse_enum(name, kStudies, "study"); }

TrainingMethod TrainingMethod::normal() { return {MethodTag::normal, std::nullopt, nullptr}; }
TrainingMethod TrainingMethod::upper_bound() { return {MethodTag::upper_bound, std::nullopt, nullptr}; }

TrainingMethod TrainingMethod::adversarial(const attacks::AttackConfig& attack) {
    const MethodTag tag = attack.method == attacks::AttackMethod::fgsm ? MethodTag::adv_fgsm : MethodTag::adv_pgd;
    return {tag, attack, nullptr};
}

TrainingMethod TrainingMethod::ccygan(const gan::PredictorBank& bank) { return {MethodTag::ccygan, std::nullopt, &bank}; }

void TrainingMethod::validate() const {
    const bool adv = tag == MethodTag::adv_fgsm || tag == MethodTag::adv_pgd;
    if (adv != attack.has_value()) throw UsageError("attack config is required exactly for adversarial methods");
    if (adv) attack->validate();
    if ((tag == MethodTag::ccygan) != (bank != nullptr)) {
        throw UsageError("predictor bank is required exactly for the ccygan method");
    }
}

void ExperimentConfig::validate() const {
    if (w1 < 1 || w2 < 0) throw UsageError("w1 must be at least 1 and w2 non-negative");
    if (period_seconds <= 0) throw UsageError("period length must be positive");
    if (methods.empty()) throw UsageError("no methods configured");
    if (fpr_targets.empty()) throw UsageError("no FPR targets configured");
    for (double t : fpr_targets) {
        if (!(t > 0.0 && t < 1.0)) throw UsageError("FPR targets must lie in (0, 1)");
    }
    if (seeds.empty()) throw UsageError("at least one seed is required");
    if (max_epochs < 1) throw UsageError("max_epochs must be at least 1");
    if (minibatch_size < 8) throw UsageError("minibatch size must be at least 8");
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
    if (feature_count < 1) throw UsageError("feature count must be positive");
    if (classifier.out != 2) throw UsageError("classifier must have two outputs");
    attack.validate();
    gan.validate();
}

// ---------------------------------------------------------------------------
// Minibatches

BatchLayout layout_for(MethodTag method, FeatureMode mode) {
    switch (method) {
    case MethodTag::normal:
        return BatchLayout::balanced;
    case MethodTag::upper_bound:
        return mode == FeatureMode::full ? BatchLayout::balanced : BatchLayout::split_malware;
    case MethodTag::adv_fgsm:
    case MethodTag::adv_pgd:
        return mode == FeatureMode::full ? BatchLayout::duplicated_clean : BatchLayout::split_malware;
    case MethodTag::ccygan:
        return BatchLayout::split_malware;
    }
    return BatchLayout::balanced;
}

namespace {

std::vector<std::size_t> draw_rows(const Matrix& pool, std::size_t count, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, static_cast<std::size_t>(pool.rows()) - 1);
    std::vector<std::size_t> rows(count);
    for (auto& r : rows) r = pick(rng);
    return rows;
}

} // namespace

LabeledBatch build_minibatch(BatchLayout layout, const Matrix& clean, const Matrix& malware, const AuxSource& aux,
                             std::size_t size, Rng& rng) {
    if (clean.rows() == 0 || malware.rows() == 0) throw DataError("minibatch pools must be non-empty");
    std::size_t n_clean = size / 2;
    std::size_t n_malware = size - n_clean;
    std::size_t n_aux = 0;
    bool duplicate = false;
    if (layout == BatchLayout::duplicated_clean) {
        const std::size_t n = size / 4;
        n_clean = n;
        n_malware = n;
        n_aux = n;
        duplicate = true;
    } else if (layout == BatchLayout::split_malware) {
        n_aux = size / 8;
        n_malware -= n_aux;
    }
    if (n_aux > 0 && !aux) throw DataError("auxiliary malware source required by this minibatch layout is missing");

    Matrix x_clean = select_rows(clean, draw_rows(clean, n_clean, rng));
    if (duplicate) x_clean = vconcat(x_clean, x_clean);
    Matrix x = vconcat(x_clean, select_rows(malware, draw_rows(malware, n_malware, rng)));
    if (n_aux > 0) {
        Matrix extra = aux(n_aux, rng);
        if (static_cast<std::size_t>(extra.rows()) != n_aux || extra.cols() != x.cols()) {
            throw DataError("auxiliary malware source returned the wrong shape");
        }
        x = vconcat(x, extra);
    }
    LabeledBatch out;
    out.x = std::move(x);
    out.y.assign(static_cast<std::size_t>(out.x.rows()), kMalwareClass);
    std::fill(out.y.begin(), out.y.begin() + static_cast<std::ptrdiff_t>(x_clean.rows()), kBenignClass);
    return out;
}

// ---------------------------------------------------------------------------
// Thresholds and metrics

double select_threshold(std::span<const double> clean_scores, double target_fpr) {
    if (clean_scores.empty()) throw DataError("threshold selection needs at least one clean validation score");
    if (!(target_fpr >= 0.0 && target_fpr < 1.0)) throw UsageError("target FPR must lie in [0, 1)");
    std::vector<double> sorted(clean_scores.begin(), clean_scores.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    // floor(target * n) is a 1-based rank; rank 0 means the top score.
    const auto rank = static_cast<std::size_t>(std::floor(target_fpr * static_cast<double>(sorted.size())));
    return sorted[std::min(sorted.size(), std::max<std::size_t>(rank, 1)) - 1];
}

std::vector<double> malware_scores(const nn::MlpModel& model, const Matrix& x) {
    if (x.rows() == 0) return {};
    const Matrix p = nn::softmax(nn::predict(model, x));
    std::vector<double> out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) out[static_cast<std::size_t>(i)] = p(i, kMalwareClass);
    return out;
}

MetricsRecord metrics_from_scores(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.size() != labels.size()) throw UsageError("one label per score is required");
    MetricsRecord r;
    r.threshold = threshold;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool flagged = scores[i] > threshold;
        if (labels[i] == kMalwareClass) {
            (flagged ? r.tp : r.fn) += 1;
        } else if (labels[i] == kBenignClass) {
            (flagged ? r.fp : r.tn) += 1;
        } else {
            throw DataError("unexpected class label " + std::to_string(labels[i]));
        }
    }
    const auto d = [](std::size_t v) { return static_cast<double>(v); };
    const std::size_t pos = r.tp + r.fn;
    const std::size_t neg = r.fp + r.tn;
    r.tpr = pos > 0 ? d(r.tp) / d(pos) : kNaN;
    r.fpr = neg > 0 ? d(r.fp) / d(neg) : kNaN;
    if (pos == 0) {
        r.f1 = kNaN;
    } else {
        r.f1 = r.tp > 0 ? 2.0 * d(r.tp) / (2.0 * d(r.tp) + d(r.fp) + d(r.fn)) : 0.0;
    }
    r.accuracy = pos + neg > 0 ? d(r.tp + r.tn) / d(pos + neg) : kNaN;
    return r;
}

MetricsRecord evaluate(const nn::MlpModel& model, double threshold, const LabeledBatch& test) {
    return metrics_from_scores(malware_scores(model, test.x), test.y, threshold);
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct ValidationSplit {
    Matrix benign;
    Matrix malware;
};

ValidationSplit split_by_class(const LabeledBatch& b) {
    std::vector<std::size_t> ben;
    std::vector<std::size_t> mal;
    for (std::size_t i = 0; i < b.y.size(); ++i) (b.y[i] == kMalwareClass ? mal : ben).push_back(i);
    return {select_rows(b.x, ben), select_rows(b.x, mal)};
}

double fraction_above(std::span<const double> scores, double threshold) {
    if (scores.empty()) return kNaN;
    const auto n = std::count_if(scores.begin(), scores.end(), [threshold](double s) { return s > threshold; });
    return static_cast<double>(n) / static_cast<double>(scores.size());
}

} // namespace

TrainResult train_classifier(const TrainingMethod& method, const CellData& data, const ExperimentConfig& config,
                             std::uint64_t seed) {
    method.validate();
    const ValidationSplit val = split_by_class(data.val);
    if (val.benign.rows() == 0 || val.malware.rows() == 0) {
        throw DataError("validation pool needs both benign and malware samples");
    }
    const auto dim = static_cast<std::size_t>(data.clean.cols());
    nn::MlpModel model(nn::build_layers(dim, config.classifier), derive_seed(seed, {0xc1a55}));
    model.set_mode(nn::Mode::train);
    nn::AdamState opt(model, nn::AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8});
    Rng rng = make_rng(seed, {0xba7c4});

    const BatchLayout layout = layout_for(method.tag, config.feature_mode);
    Matrix malware_pool = data.malware;
    AuxSource aux;
    switch (method.tag) {
    case MethodTag::normal:
        break;
    case MethodTag::upper_bound:
        if (data.future_malware.rows() == 0) throw DataError("no future malware available for the upper bound");
        if (layout == BatchLayout::balanced) {
            malware_pool = vconcat(data.malware, data.future_malware);
        } else {
            aux = [&data](std::size_t n, Rng& r) { return select_rows(data.future_malware, draw_rows(data.future_malware, n, r)); };
        }
        break;
    case MethodTag::adv_fgsm:
    case MethodTag::adv_pgd: {
        const attacks::AttackConfig atk = *method.attack;
        aux = [&data, &model, atk](std::size_t n, Rng& r) {
            const Matrix seeds = select_rows(data.malware, draw_rows(data.malware, n, r));
            const std::vector<int> labels(n, kMalwareClass);
            return attacks::attack(atk, model, seeds, labels, data.box);
        };
        break;
    }
    case MethodTag::ccygan:
        if (data.normalizer == nullptr || data.raw_malware.rows() == 0) {
            throw DataError("ccygan needs raw training malware and the split normaliser");
        }
        aux = [&data, &method](std::size_t n, Rng& r) {
            return data.normalizer->applied(gan::predict_samples(*method.bank, data.raw_malware, n, r));
        };
        break;
    }

    const std::size_t pool_rows = static_cast<std::size_t>(data.clean.rows() + malware_pool.rows()) +
                                  (layout == BatchLayout::split_malware && method.tag == MethodTag::upper_bound
                                       ? static_cast<std::size_t>(data.future_malware.rows())
                                       : 0);
    const std::size_t batches = config.batches_per_epoch > 0
                                    ? config.batches_per_epoch
                                    : (pool_rows + config.minibatch_size - 1) / config.minibatch_size;

    const std::size_t n_targets = config.fpr_targets.size();
    TrainResult result;
    result.selected.resize(n_targets);
    std::vector<double> best(n_targets, -1.0);
    for (std::size_t t = 0; t < n_targets; ++t) result.selected[t].fpr_target = config.fpr_targets[t];

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            const LabeledBatch batch = build_minibatch(layout, data.clean, malware_pool, aux, config.minibatch_size, rng);
            nn::ForwardResult fwd = nn::forward(model, batch.x);
            const nn::LossResult loss = nn::cross_entropy(fwd.output, batch.y);
            loss_sum += loss.loss;
            const nn::Gradients grads = nn::backward(model, fwd.trace, loss.grad);
            nn::adam_step(opt, model, grads);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(batches);
        const std::vector<double> ben = malware_scores(model, val.benign);
        const std::vector<double> mal = malware_scores(model, val.malware);
        for (std::size_t t = 0; t < n_targets; ++t) {
            const double thr = select_threshold(ben, config.fpr_targets[t]);
            const double tpr = fraction_above(mal, thr);
            rec.thresholds.push_back(thr);
            rec.val_tpr.push_back(tpr);
            if (tpr > best[t]) {
                best[t] = tpr;
                SelectedModel& s = result.selected[t];
                s.epoch = epoch;
                s.threshold = thr;
                s.val_tpr = tpr;
                s.val_fpr = fraction_above(ben, thr);
                s.model = model;
                s.model.set_mode(nn::Mode::eval);
            }
        }
        result.history.push_back(std::move(rec));
    }
    return result;
}

RobustnessPair robustness_eval(const nn::MlpModel& normal_model, double normal_threshold,
                               const nn::MlpModel& adv_model, double adv_threshold,
                               const attacks::AttackConfig& attack, const Matrix& malware_test,
                               const attacks::ProjectionBox& box) {
    if (malware_test.rows() == 0) throw DataError("robustness evaluation needs test malware");
    const std::vector<int> labels(static_cast<std::size_t>(malware_test.rows()), kMalwareClass);
    const Matrix adv_normal = attacks::attack(attack, normal_model, malware_test, labels, box);
    const Matrix adv_adv = attacks::attack(attack, adv_model, malware_test, labels, box);
    RobustnessPair out;
    out.normal_tpr = fraction_above(malware_scores(normal_model, adv_normal), normal_threshold);
    out.adversarial_tpr = fraction_above(malware_scores(adv_model, adv_adv), adv_threshold);
    return out;
}

// ---------------------------------------------------------------------------
// Experiments

PreparedData prepare_data(const ExperimentConfig& config, std::span<const Sample> dataset) {
    config.validate();
    if (dataset.empty()) throw DataError("dataset is empty");
    PreparedData out;
    const PeriodPartition initial = partition_by_time(dataset, config.period_seconds);
    const int n = initial.count();
    const int w2 = config.study == Study::degradation ? 0 : config.w2;
    std::vector<TimeSplitSpec> splits = enumerate_splits(n, config.w1, w2);
    if (splits.empty()) {
        throw DataError("dataset has " + std::to_string(n) + " periods, too few for w1 = " + std::to_string(config.w1));
    }

    std::vector<Sample> samples(dataset.begin(), dataset.end());
    const std::size_t dim = feature_dimension(samples);
    if (config.feature_mode == FeatureMode::reduced && dim > config.feature_count) {
        const TimeSplitSpec& first = splits.front();
        std::vector<std::size_t> window;
        for (int p = first.k - first.w1; p <= first.k - 1; ++p) {
            for (std::size_t i : initial.period(p)) {
                if (samples[i].labeled()) window.push_back(i);
            }
        }
        LabeledBatch b = gather(samples, window);
        fit_normalizer(b.x).apply(b.x);
        out.selected_features = nn::l1_logistic_select(b.x, b.y, config.feature_l1, config.feature_count);
        samples = project_features(samples, out.selected_features);
    }

    const bool needs_vocab = config.feature_mode == FeatureMode::reduced ||
                             std::find(config.methods.begin(), config.methods.end(), MethodTag::ccygan) !=
                                 config.methods.end();
    if (needs_vocab) {
        drift::RankOptions ro;
        ro.top_m = config.top_families;
        const drift::FamilyDriftReport report = drift::rank_families(samples, initial, splits, ro);
        out.vocabulary = report.families();
        std::sort(out.vocabulary.begin(), out.vocabulary.end());
    }
    if (config.feature_mode == FeatureMode::reduced) {
        const std::set<std::string> keep(out.vocabulary.begin(), out.vocabulary.end());
        std::erase_if(samples, [&](const Sample& s) {
            return s.label == Label::malware && (!s.family || !keep.contains(*s.family));
        });
    }

    out.partition = partition_by_time(samples, config.period_seconds, initial.origin);
    if (out.partition.count() != n) throw DataError("family filtering removed entire periods");
    out.splits = std::move(splits);
    if (!config.splits.empty()) {
        std::erase_if(out.splits, [&](const TimeSplitSpec& s) {
            return std::find(config.splits.begin(), config.splits.end(), s.k) == config.splits.end();
        });
        if (out.splits.empty()) throw UsageError("none of the requested splits is admissible");
    }
    if (config.study == Study::degradation) {
        for (TimeSplitSpec& s : out.splits) s.w2 = n - s.k;
    }
    out.samples = std::move(samples);
    return out;
}

namespace {

struct SeedContext {
    PeriodPartition partition;  // with roles
    gan::BankCache banks;
};

struct SplitMaterial {
    Normalizer normalizer;
    CellData data;
    std::vector<int> test_periods;
    std::vector<LabeledBatch> tests;  // normalised, parallel to test_periods
};

SplitMaterial make_material(const PreparedData& prep, const SeedContext& ctx, const TimeSplitSpec& spec,
                            bool upper_bound) {
    SplitMaterial m;
    const SplitView normal = make_split_view(ctx.partition, prep.samples, spec, SplitTag::normal);
    m.normalizer = fit_normalizer(prep.samples, normal.train_pool);

    const SplitView view = upper_bound ? make_split_view(ctx.partition, prep.samples, spec, SplitTag::upper_bound) : normal;
    std::vector<std::size_t> clean;
    std::vector<std::size_t> malware;
    for (std::size_t i : normal.train_pool) (prep.samples[i].label == Label::malware ? malware : clean).push_back(i);
    const auto normal_clean = static_cast<Eigen::Index>(clean.size());
    std::vector<std::size_t> future_malware;
    for (std::size_t i : view.future_pool) {
        (prep.samples[i].label == Label::malware ? future_malware : clean).push_back(i);
    }
    if (clean.empty() || malware.empty()) throw DataError("training window lacks one of the classes");

    m.data.raw_malware = gather_features(prep.samples, malware);
    m.data.clean = m.normalizer.applied(gather_features(prep.samples, clean));
    m.data.malware = m.normalizer.applied(m.data.raw_malware);
    m.data.future_malware = m.normalizer.applied(gather_features(prep.samples, future_malware));
    m.data.val = gather(prep.samples, normal.val_pool);
    m.normalizer.apply(m.data.val.x);
    m.data.box = attacks::fit_projection_box(vconcat(m.data.clean.topRows(normal_clean), m.data.malware));

    for (int p = spec.k; p <= spec.k + spec.w2; ++p) {
        std::vector<std::size_t> pool;
        for (std::size_t i : normal.test_pool) {
            if (ctx.partition.period_of[i] == p) pool.push_back(i);
        }
        LabeledBatch b = gather(prep.samples, pool);
        m.normalizer.apply(b.x);
        m.test_periods.push_back(p);
        m.tests.push_back(std::move(b));
    }
    return m;
}

void stamp(MetricsRecord& r, int k, const std::string& method, double target, std::uint64_t seed, int period) {
    r.split_k = k;
    r.method = method;
    r.fpr_target = target;
    r.seed = seed;
    r.test_period = period;
}

std::vector<MetricsRecord> evaluate_selected(const TrainResult& trained, const SplitMaterial& m, int k,
                                             const std::string& method, std::uint64_t seed) {
    std::vector<MetricsRecord> out;
    for (const SelectedModel& s : trained.selected) {
        for (std::size_t p = 0; p < m.tests.size(); ++p) {
            MetricsRecord r = evaluate(s.model, s.threshold, m.tests[p]);
            stamp(r, k, method, s.fpr_target, seed, m.test_periods[p]);
            out.push_back(std::move(r));
        }
    }
    return out;
}

std::uint64_t cell_seed(std::uint64_t seed, int k, std::uint64_t salt) {
    return derive_seed(seed, {static_cast<std::uint64_t>(k), salt});
}

struct Cell {
    int split_k = 0;
    std::string method;
    std::uint64_t seed = 0;
    std::size_t seed_index = 0;
    std::size_t expected_rows = 0;
    std::function<std::vector<MetricsRecord>(std::vector<std::string>&)> run;

    std::string key() const { return std::to_string(split_k) + "," + method + "," + std::to_string(seed); }
};

std::filesystem::path skipped_path(const std::filesystem::path& out) {
    std::filesystem::path p = out;
    p += ".skipped";
    return p;
}

std::string attack_label(const attacks::AttackConfig& a) { return attacks::to_string(a.method); }

// Reads the rows and skip keys that belong to a prefix of completed cells.
struct ResumeState {
    std::size_t cells_done = 0;
    std::vector<MetricsRecord> records;
    std::vector<std::string> row_lines;
    std::vector<SkippedCell> skipped;
    std::vector<std::string> skipped_lines;
};

bool row_belongs(const MetricsRecord& r, const Cell& c) {
    if (r.split_k != c.split_k || r.seed != c.seed) return false;
    if (r.method == c.method) return true;
    return c.method.starts_with("robustness_") && r.method.ends_with("_vs_" + c.method.substr(11));
}

ResumeState load_resume(const std::vector<Cell>& cells, const std::filesystem::path& out) {
    ResumeState st;
    std::ifstream in(out);
    if (!in) return st;
    std::vector<std::string> lines;
    std::string line;
    bool first = true;
    bool complete_last = true;
    while (std::getline(in, line)) {
        complete_last = !in.eof();
        if (first) {
            first = false;
            if (line != kResultsHeader) throw DataError(out.string() + " has an unexpected header; refusing to resume");
            continue;
        }
        lines.push_back(line);
    }
    if (!complete_last && !lines.empty()) lines.pop_back();

    std::map<std::string, std::pair<SkippedCell, std::string>> skips;
    std::ifstream sin(skipped_path(out));
    while (sin && std::getline(sin, line)) {
        if (line.empty() || sin.eof()) continue;
        std::istringstream ls(line);
        SkippedCell s;
        std::string k;
        std::string seed;
        if (!std::getline(ls, k, ',') || !std::getline(ls, s.method, ',') || !std::getline(ls, seed, ',')) continue;
        std::getline(ls, s.reason);
        try {
            s.split_k = std::stoi(k);
            s.seed = std::stoull(seed);
        } catch (const std::exception&) {
            continue;
        }
        skips[k + "," + s.method + "," + seed] = {s, line};
    }

    std::size_t pos = 0;
    for (const Cell& c : cells) {
        if (auto it = skips.find(c.key()); it != skips.end()) {
            st.skipped.push_back(it->second.first);
            st.skipped_lines.push_back(it->second.second);
            ++st.cells_done;
            continue;
        }
        if (pos + c.expected_rows > lines.size()) break;
        std::vector<MetricsRecord> rows;
        bool ok = true;
        for (std::size_t i = 0; i < c.expected_rows && ok; ++i) {
            try {
                MetricsRecord r = parse_csv_row(lines[pos + i]);
                ok = row_belongs(r, c);
                rows.push_back(std::move(r));
            } catch (const Error&) {
                ok = false;
            }
        }
        if (!ok) break;
        for (std::size_t i = 0; i < c.expected_rows; ++i) st.row_lines.push_back(lines[pos + i]);
        st.records.insert(st.records.end(), rows.begin(), rows.end());
        pos += c.expected_rows;
        ++st.cells_done;
    }
    return st;
}

} // namespace

RunSummary run_experiment(const ExperimentConfig& config, std::span<const Sample> dataset, const RunOptions& options) {
    const PreparedData prep = prepare_data(config, dataset);
    RunSummary summary;
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    std::vector<SeedContext> contexts;
    for (std::uint64_t seed : config.seeds) {
        SeedContext ctx;
        ctx.partition = prep.partition;
        ctx.partition.roles = assign_roles(ctx.partition, config.roles, derive_seed(seed, {0x201e5}));
        contexts.push_back(std::move(ctx));
    }

    std::vector<Cell> cells;
    const std::size_t n_targets = config.fpr_targets.size();
    for (const TimeSplitSpec& spec : prep.splits) {
        const std::size_t periods = static_cast<std::size_t>(spec.w2) + 1;
        auto add = [&](const std::string& method, std::size_t rows, auto body) {
            for (std::size_t s = 0; s < config.seeds.size(); ++s) {
                Cell c;
                c.split_k = spec.k;
                c.method = method;
                c.seed = config.seeds[s];
                c.seed_index = s;
                c.expected_rows = rows;
                c.run = [body, spec, s, seed = config.seeds[s]](std::vector<std::string>& warnings) {
                    return body(spec, s, seed, warnings);
                };
                cells.push_back(std::move(c));
            }
        };

        if (config.study == Study::robustness) {
            const std::string label = attack_label(config.attack);
            add("robustness_" + label, 2 * n_targets * periods,
                [&, label](const TimeSplitSpec& sp, std::size_t si, std::uint64_t seed, std::vector<std::string>&) {
                    const SplitMaterial m = make_material(prep, contexts[si], sp, false);
                    const TrainResult normal =
                        train_classifier(TrainingMethod::normal(), m.data, config, cell_seed(seed, sp.k, 0));
                    const TrainingMethod adv = TrainingMethod::adversarial(config.attack);
                    const TrainResult hardened = train_classifier(adv, m.data, config, cell_seed(seed, sp.k, 0));
                    std::vector<MetricsRecord> rows;
                    for (const auto* tr : {&normal, &hardened}) {
                        const std::string name = (tr == &normal ? std::string("normal") : adv.name()) + "_vs_" + label;
                        for (const SelectedModel& sel : tr->selected) {
                            for (std::size_t p = 0; p < m.tests.size(); ++p) {
                                LabeledBatch b = m.tests[p];
                                std::vector<std::size_t> mal;
                                for (std::size_t i = 0; i < b.y.size(); ++i) {
                                    if (b.y[i] == kMalwareClass) mal.push_back(i);
                                }
                                if (!mal.empty()) {
                                    const std::vector<int> labels(mal.size(), kMalwareClass);
                                    const Matrix advx =
                                        attacks::attack(config.attack, sel.model, select_rows(b.x, mal), labels, m.data.box);
                                    for (std::size_t r = 0; r < mal.size(); ++r) {
                                        b.x.row(static_cast<Eigen::Index>(mal[r])) = advx.row(static_cast<Eigen::Index>(r));
                                    }
                                }
                                MetricsRecord rec = evaluate(sel.model, sel.threshold, b);
                                stamp(rec, sp.k, name, sel.fpr_target, seed, m.test_periods[p]);
                                rows.push_back(std::move(rec));
                            }
                        }
                    }
                    return rows;
                });
            continue;
        }

        for (MethodTag tag : config.study == Study::degradation ? std::vector<MethodTag>{MethodTag::normal}
                                                                 : config.methods) {
            add(to_string(tag), n_targets * periods,
                [&, tag](const TimeSplitSpec& sp, std::size_t si, std::uint64_t seed, std::vector<std::string>& warnings) {
                    SplitMaterial m = make_material(prep, contexts[si], sp, tag == MethodTag::upper_bound);
                    m.data.normalizer = &m.normalizer;
                    std::optional<gan::PredictorBank> bank;
                    TrainingMethod method;
                    switch (tag) {
                    case MethodTag::normal:
                        method = TrainingMethod::normal();
                        break;
                    case MethodTag::upper_bound:
                        method = TrainingMethod::upper_bound();
                        break;
                    case MethodTag::adv_fgsm:
                    case MethodTag::adv_pgd: {
                        attacks::AttackConfig a = config.attack;
                        a.method = tag == MethodTag::adv_fgsm ? attacks::AttackMethod::fgsm : attacks::AttackMethod::pgd;
                        method = TrainingMethod::adversarial(a);
                        break;
                    }
                    case MethodTag::ccygan: {
                        gan::BankOptions bo;
                        bo.w1 = config.w1;
                        bo.gan = config.gan;
                        bo.seed = derive_seed(seed, {0xba4c});
                        bank = gan::build_predictor_bank(prep.samples, contexts[si].partition, sp.k, prep.vocabulary, bo,
                                                         &contexts[si].banks, &warnings);
                        if (bank->empty()) {
                            throw gan::MethodUnavailable("no predictor can be trained from data before period " +
                                                         std::to_string(sp.k));
                        }
                        method = TrainingMethod::ccygan(*bank);
                        break;
                    }
                    }
                    const TrainResult trained = train_classifier(method, m.data, config, cell_seed(seed, sp.k, 0));
                    return evaluate_selected(trained, m, sp.k, to_string(tag), seed);
                });
        }
    }

    const bool to_file = !options.out.empty();
    std::ofstream csv;
    std::ofstream skipped_file;
    std::size_t start = 0;
    if (to_file) {
        ResumeState st;
        if (options.resume) st = load_resume(cells, options.out);
        start = st.cells_done;
        summary.cells_resumed = st.cells_done;
        summary.records = std::move(st.records);
        summary.skipped = std::move(st.skipped);
        csv.open(options.out, std::ios::trunc);
        skipped_file.open(skipped_path(options.out), std::ios::trunc);
        if (!csv || !skipped_file) throw DataError("cannot write results to " + options.out.string());
        csv << kResultsHeader << '\n';
        for (const auto& l : st.row_lines) csv << l << '\n';
        for (const auto& l : st.skipped_lines) skipped_file << l << '\n';
        csv.flush();
        skipped_file.flush();
        if (start > 0) log("resuming after " + std::to_string(start) + " completed cells");
    }

    for (std::size_t i = start; i < cells.size(); ++i) {
        if (options.stop_after_cells > 0 && summary.cells_run >= options.stop_after_cells) break;
        const Cell& c = cells[i];
        log("cell " + std::to_string(i + 1) + "/" + std::to_string(cells.size()) + ": k=" + std::to_string(c.split_k) +
            " " + c.method + " seed=" + std::to_string(c.seed));
        std::vector<std::string> warnings;
        std::vector<MetricsRecord> rows;
        std::optional<std::string> failure;
        try {
            rows = c.run(warnings);
            if (rows.size() != c.expected_rows) throw NumericalError("cell produced an unexpected number of rows");
        } catch (const Error& e) {
            failure = e.what();
        }
        for (auto& w : warnings) {
            log("warning: " + w);
            summary.warnings.push_back(std::move(w));
        }
        ++summary.cells_run;
        if (failure) {
            SkippedCell s{c.split_k, c.method, c.seed, *failure};
            std::replace(s.reason.begin(), s.reason.end(), '\n', ' ');
            log("skipped: " + s.reason);
            if (to_file) {
                skipped_file << c.key() << ',' << s.reason << '\n';
                skipped_file.flush();
            }
            summary.skipped.push_back(std::move(s));
            continue;
        }
        if (to_file) {
            for (const auto& r : rows) csv << to_csv_row(r) << '\n';
            csv.flush();
        }
        summary.records.insert(summary.records.end(), rows.begin(), rows.end());
    }
    return summary;
}

std::vector<std::vector<std::optional<double>>> degradation_matrix(std::span<const MetricsRecord> records,
                                                                   double fpr_target, int n_periods) {
    std::map<int, std::map<int, std::pair<double, int>>> acc;
    for (const auto& r : records) {
        if (r.fpr_target != fpr_target || std::isnan(r.tpr)) continue;
        auto& cell = acc[r.split_k][r.test_period];
        cell.first += r.tpr;
        cell.second += 1;
    }
    std::vector<std::vector<std::optional<double>>> out;
    for (const auto& [k, row] : acc) {
        std::vector<std::optional<double>> line(static_cast<std::size_t>(n_periods));
        for (const auto& [p, v] : row) {
            if (p >= 1 && p <= n_periods) line[static_cast<std::size_t>(p - 1)] = v.first / v.second;
        }
        out.push_back(std::move(line));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Results CSV

std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string to_csv_row(const MetricsRecord& r) {
    std::string out;
    out += std::to_string(r.split_k) + ',' + r.method + ',' + format_double(r.fpr_target) + ',' +
           std::to_string(r.seed) + ',' + std::to_string(r.test_period) + ',' + format_double(r.threshold) + ',' +
           format_double(r.tpr) + ',' + format_double(r.fpr) + ',' + format_double(r.f1) + ',' +
           format_double(r.accuracy) + ',' + std::to_string(r.tp) + ',' + std::to_string(r.fp) + ',' +
           std::to_string(r.tn) + ',' + std::to_string(r.fn);
    return out;
}

MetricsRecord parse_csv_row(const std::string& line) {
    std::vector<std::string> f;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            f.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    f.push_back(cur);
    if (f.size() != 14) throw DataError("results row has " + std::to_string(f.size()) + " fields, expected 14");
    auto num = [](const std::string& s) {
        if (s.empty()) return kNaN;
        double v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || end != s.data() + s.size()) throw DataError("bad number '" + s + "'");
        return v;
    };
    auto count = [](const std::string& s) {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(s, &used);
        if (used != s.size()) throw DataError("bad count '" + s + "'");
        return static_cast<std::size_t>(v);
    };
    try {
        MetricsRecord r;
        r.split_k = std::stoi(f[0]);
        r.method = f[1];
        r.fpr_target = num(f[2]);
        r.seed = std::stoull(f[3]);
        r.test_period = std::stoi(f[4]);
        r.threshold = num(f[5]);
        r.tpr = num(f[6]);
        r.fpr = num(f[7]);
        r.f1 = num(f[8]);
        r.accuracy = num(f[9]);
        r.tp = count(f[10]);
        r.fp = count(f[11]);
        r.tn = count(f[12]);
        r.fn = count(f[13]);
        if (r.method.empty()) throw DataError("empty method name");
        return r;
    } catch (const std::logic_error& e) {
        throw DataError("malformed results row: " + std::string(e.what()));
    }
}

std::vector<MetricsRecord> read_results_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("results file is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kResultsHeader) throw DataError("results file has an unexpected header");
    std::vector<MetricsRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(parse_csv_row(line));
        } catch (const DataError& e) {
            throw DataError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<MetricsRecord> read_results_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    return read_results_csv(in);
}

void write_results_csv(std::ostream& out, std::span<const MetricsRecord> records) {
    out << kResultsHeader << '\n';
    for (const auto& r : records) out << to_csv_row(r) << '\n';
}

} // namespace driftforge::harness
