#include "doctest.h"

#include "support.hpp"

#include "driftforge/error.hpp"
#include "driftforge/harness.hpp"
#include "driftforge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

using namespace driftforge;
using namespace driftforge::harness;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::filesystem::path temp_file(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("driftforge_" + name);
    std::filesystem::remove(p);
    std::filesystem::remove(std::filesystem::path(p.string() + ".skipped"));
    return p;
}

double realized_fpr(std::span<const double> clean, double thr) {
    double above = 0;
    for (double s : clean) above += s > thr;
    return above / static_cast<double>(clean.size());
}

SynthConfig small_synth() {
    SynthConfig s;
    s.n_periods = 5;
    s.dim = 6;
    s.n_families = 4;
    s.stationary_families = 1;
    s.samples_per_period_per_class = 200;
    return s;
}

ExperimentConfig small_experiment() {
    ExperimentConfig c;
    c.w1 = 2;
    c.feature_mode = FeatureMode::full;
    c.classifier.hidden = {16};
    c.max_epochs = 3;
    c.minibatch_size = 64;
    c.batches_per_epoch = 8;
    c.fpr_targets = {0.1};
    c.seeds = {1};
    c.gan.total_steps = 10;
    c.gan.minibatch = 32;
    c.gan.arch.generator_hidden = {8};
    c.gan.arch.discriminator_hidden = {8};
    return c;
}

// Two well-separated Gaussian clouds in normalised space.
CellData separable_cell(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    CellData d;
    d.clean = testing::random_matrix(rng, static_cast<Eigen::Index>(n), 4, 0.5);
    d.malware = testing::random_matrix(rng, static_cast<Eigen::Index>(n), 4, 0.5);
    d.malware.col(0).array() += 4.0;
    Matrix vb = testing::random_matrix(rng, static_cast<Eigen::Index>(n), 4, 0.5);
    Matrix vm = testing::random_matrix(rng, static_cast<Eigen::Index>(n), 4, 0.5);
    vm.col(0).array() += 4.0;
    d.val.x = vconcat(vb, vm);
    d.val.y.assign(n, kBenignClass);
    d.val.y.resize(2 * n, kMalwareClass);
    d.box = attacks::fit_projection_box(vconcat(d.clean, d.malware));
    return d;
}

} // namespace

TEST_CASE("select_threshold: fixture cases") {
    std::vector<double> scores{0.9, 0.5, 0.1};
    scores.resize(100, 0.05);
    const double thr = select_threshold(scores, 0.01);
    CHECK(realized_fpr(scores, thr) * 100 <= 1.0);

    const std::vector<double> two{0.8, 0.2};
    CHECK(select_threshold(two, 0.5) == 0.8);
    CHECK(realized_fpr(two, 0.8) == 0.0);

    const std::vector<double> same(20, 0.4);
    CHECK(realized_fpr(same, select_threshold(same, 0.1)) == 0.0);

    CHECK_THROWS_AS(select_threshold(std::vector<double>{}, 0.1), DataError);
    CHECK_THROWS_AS(select_threshold(two, 1.0), UsageError);
}

TEST_CASE("select_threshold: realized FPR never exceeds the target") {
    Rng rng(1);
    std::uniform_int_distribution<int> sizes(1, 3000);
    std::uniform_int_distribution<int> levels(0, 9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 300; ++t) {
        std::vector<double> s(static_cast<std::size_t>(sizes(rng)));
        const bool ties = t % 3 == 0;
        for (double& v : s) v = ties ? levels(rng) / 10.0 : u(rng);
        for (double target : {0.1, 0.01, 0.001, u(rng) * 0.99}) {
            CHECK(realized_fpr(s, select_threshold(s, target)) <= target);
        }
    }
}

TEST_CASE("metrics: hand-computed confusion matrix on eight scores") {
    const std::vector<double> s{0.95, 0.7, 0.6, 0.3, 0.8, 0.55, 0.2, 0.1};
    const std::vector<int> y{1, 1, 1, 1, 0, 0, 0, 0};
    const MetricsRecord r = metrics_from_scores(s, y, 0.55);
    // flagged: 0.95 0.7 0.6 (malware), 0.8 (benign); 0.55 is not strictly above.
    CHECK(r.tp == 3);
    CHECK(r.fn == 1);
    CHECK(r.fp == 1);
    CHECK(r.tn == 3);
    CHECK(r.tpr == 0.75);
    CHECK(r.fpr == 0.25);
    CHECK(r.accuracy == 0.75);
    const double precision = 0.75, recall = 0.75;
    CHECK(r.f1 == doctest::Approx(2 * precision * recall / (precision + recall)));
    CHECK(r.threshold == 0.55);
}

TEST_CASE("metrics: degenerate classifiers and missing classes") {
    const std::vector<double> s{0.9, 0.8, 0.1, 0.2};
    const std::vector<int> y{1, 1, 0, 0};
    const MetricsRecord perfect = metrics_from_scores(s, y, 0.5);
    CHECK(perfect.tpr == 1.0);
    CHECK(perfect.fpr == 0.0);
    CHECK(perfect.f1 == 1.0);

    const std::vector<double> zeros(4, 0.0);
    const MetricsRecord none = metrics_from_scores(zeros, y, 0.0);
    CHECK(none.tpr == 0.0);
    CHECK(none.fpr == 0.0);
    CHECK(none.f1 == 0.0);

    const std::vector<int> benign_only{0, 0, 0, 0};
    const MetricsRecord b = metrics_from_scores(s, benign_only, 0.5);
    CHECK(std::isnan(b.tpr));
    CHECK(std::isnan(b.f1));
    CHECK(b.fpr == 0.5);
    const std::vector<int> malware_only{1, 1, 1, 1};
    CHECK(std::isnan(metrics_from_scores(s, malware_only, 0.5).fpr));
    CHECK_THROWS_AS(metrics_from_scores(s, std::vector<int>{1}, 0.5), UsageError);
}

TEST_CASE("metrics: F1 is recomputable from stored counts") {
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::bernoulli_distribution coin(0.3);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> s(50);
        std::vector<int> y(50);
        for (std::size_t i = 0; i < 50; ++i) {
            y[i] = coin(rng) ? 1 : 0;
            s[i] = 0.5 * u(rng) + 0.4 * y[i];
        }
        if (std::count(y.begin(), y.end(), 1) == 0) continue;
        const MetricsRecord r = metrics_from_scores(s, y, u(rng));
        for (double v : {r.tpr, r.fpr, r.f1, r.accuracy}) CHECK((v >= 0.0 && v <= 1.0));
        if (r.tp > 0) {
            const double p = double(r.tp) / double(r.tp + r.fp), rc = double(r.tp) / double(r.tp + r.fn);
            CHECK(r.f1 == doctest::Approx(2 * p * rc / (p + rc)));
        }
    }
}

TEST_CASE("minibatch layouts by method and feature mode") {
    CHECK(layout_for(MethodTag::normal, FeatureMode::reduced) == BatchLayout::balanced);
    CHECK(layout_for(MethodTag::normal, FeatureMode::full) == BatchLayout::balanced);
    CHECK(layout_for(MethodTag::ccygan, FeatureMode::reduced) == BatchLayout::split_malware);
    CHECK(layout_for(MethodTag::upper_bound, FeatureMode::reduced) == BatchLayout::split_malware);
    CHECK(layout_for(MethodTag::adv_fgsm, FeatureMode::reduced) == BatchLayout::split_malware);
    CHECK(layout_for(MethodTag::adv_fgsm, FeatureMode::full) == BatchLayout::duplicated_clean);
    CHECK(layout_for(MethodTag::adv_pgd, FeatureMode::full) == BatchLayout::duplicated_clean);
}

TEST_CASE("minibatch composition counts") {
    Rng rng(3);
    const Matrix clean = Matrix::Constant(40, 2, -1.0);
    Matrix malware = Matrix::Constant(40, 2, 1.0);
    malware.col(1).setLinSpaced(40, 1.0, 40.0);
    const AuxSource aux = [](std::size_t n, Rng&) { return Matrix::Constant(static_cast<Eigen::Index>(n), 2, 9.0); };
    auto count = [](const LabeledBatch& b, double marker) {
        int c = 0;
        for (Eigen::Index i = 0; i < b.x.rows(); ++i) c += b.x(i, 0) == marker;
        return c;
    };

    const LabeledBatch normal = build_minibatch(BatchLayout::balanced, clean, malware, {}, 512, rng);
    CHECK(normal.x.rows() == 512);
    CHECK(count(normal, -1.0) == 256);
    CHECK(count(normal, 1.0) == 256);
    CHECK(std::count(normal.y.begin(), normal.y.end(), kMalwareClass) == 256);

    const LabeledBatch gan = build_minibatch(BatchLayout::split_malware, clean, malware, aux, 512, rng);
    CHECK(count(gan, -1.0) == 256);
    CHECK(count(gan, 1.0) == 192);
    CHECK(count(gan, 9.0) == 64);
    for (Eigen::Index i = 0; i < 512; ++i) CHECK(gan.y[static_cast<std::size_t>(i)] == (gan.x(i, 0) < 0 ? 0 : 1));

    Matrix distinct_clean(40, 2);
    distinct_clean.col(0).setConstant(-1.0);
    distinct_clean.col(1).setLinSpaced(40, -40.0, -1.0);
    const LabeledBatch adv = build_minibatch(BatchLayout::duplicated_clean, distinct_clean, malware, aux, 128, rng);
    CHECK(adv.x.rows() == 128);
    CHECK(count(adv, -1.0) == 64);
    CHECK(count(adv, 1.0) == 32);
    CHECK(count(adv, 9.0) == 32);
    CHECK(adv.x.topRows(32) == adv.x.middleRows(32, 32));

    CHECK_THROWS_AS(build_minibatch(BatchLayout::split_malware, clean, malware, {}, 64, rng), DataError);
    CHECK_THROWS_AS(build_minibatch(BatchLayout::balanced, Matrix(0, 2), malware, {}, 64, rng), DataError);
    const AuxSource wrong = [](std::size_t, Rng&) { return Matrix::Zero(1, 2); };
    CHECK_THROWS_AS(build_minibatch(BatchLayout::split_malware, clean, malware, wrong, 64, rng), DataError);
}

TEST_CASE("training method payload validation") {
    CHECK_NOTHROW(TrainingMethod::normal().validate());
    CHECK_NOTHROW(TrainingMethod::adversarial({}).validate());
    TrainingMethod bad = TrainingMethod::normal();
    bad.tag = MethodTag::adv_pgd;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = TrainingMethod::normal();
    bad.tag = MethodTag::ccygan;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    CHECK(method_from_string("adv_fgsm") == MethodTag::adv_fgsm);
    CHECK(to_string(MethodTag::upper_bound) == "upper_bound");
    CHECK_THROWS_AS(method_from_string("magic"), UsageError);
    ExperimentConfig c;
    c.fpr_targets = {0.0};
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = {};
    c.seeds.clear();
    CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("train_classifier: separable data, determinism, three checkpoints, threshold contract") {
    const CellData data = separable_cell(4, 600);
    ExperimentConfig cfg;
    cfg.classifier.hidden = {16, 16};
    cfg.max_epochs = 4;
    cfg.minibatch_size = 64;
    cfg.fpr_targets = {0.1, 0.01, 0.001};
    const TrainResult a = train_classifier(TrainingMethod::normal(), data, cfg, 7);
    REQUIRE(a.selected.size() == 3);
    CHECK(a.history.size() == 4);
    CHECK(a.selected[1].val_tpr >= 0.99);
    for (std::size_t t = 0; t < 3; ++t) {
        const SelectedModel& s = a.selected[t];
        CHECK(s.fpr_target == cfg.fpr_targets[t]);
        CHECK(s.val_fpr <= s.fpr_target);
        CHECK(s.model.mode() == nn::Mode::eval);
        double best = -1;
        std::size_t best_epoch = 0;
        for (const EpochRecord& e : a.history) {
            if (e.val_tpr[t] > best) {
                best = e.val_tpr[t];
                best_epoch = e.epoch;
            }
        }
        CHECK(s.epoch == best_epoch);
        CHECK(s.val_tpr == best);
        CHECK(s.threshold == a.history[best_epoch - 1].thresholds[t]);
    }
    const TrainResult b = train_classifier(TrainingMethod::normal(), data, cfg, 7);
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].train_loss == b.history[e].train_loss);
        CHECK(a.history[e].val_tpr == b.history[e].val_tpr);
    }
    CHECK(a.selected[0].model == b.selected[0].model);

    CellData no_val = data;
    no_val.val.y.assign(no_val.val.y.size(), kBenignClass);
    CHECK_THROWS_AS(train_classifier(TrainingMethod::normal(), no_val, cfg, 7), DataError);
    CHECK_THROWS_AS(train_classifier(TrainingMethod::upper_bound(), data, cfg, 7), DataError);
}

TEST_CASE("train_classifier: adversarial training runs in both layouts") {
    const CellData data = separable_cell(5, 200);
    ExperimentConfig cfg;
    cfg.classifier.hidden = {8};
    cfg.max_epochs = 2;
    cfg.minibatch_size = 32;
    cfg.fpr_targets = {0.1};
    const TrainingMethod adv = TrainingMethod::adversarial({attacks::AttackMethod::fgsm, 0.1, 1});
    for (FeatureMode mode : {FeatureMode::reduced, FeatureMode::full}) {
        cfg.feature_mode = mode;
        const TrainResult r = train_classifier(adv, data, cfg, 3);
        CHECK(r.history.size() == 2);
        CHECK(std::isfinite(r.history.back().train_loss));
    }
}

TEST_CASE("robustness_eval: self comparison and null attack") {
    const CellData data = separable_cell(6, 300);
    ExperimentConfig cfg;
    cfg.classifier.hidden = {8};
    cfg.max_epochs = 2;
    cfg.minibatch_size = 64;
    cfg.fpr_targets = {0.01};
    const TrainResult r = train_classifier(TrainingMethod::normal(), data, cfg, 2);
    const SelectedModel& s = r.selected[0];
    const attacks::AttackConfig fgsm{attacks::AttackMethod::fgsm, 0.5, 1};
    const RobustnessPair self = robustness_eval(s.model, s.threshold, s.model, s.threshold, fgsm, data.malware, data.box);
    CHECK(self.normal_tpr == self.adversarial_tpr);

    const attacks::AttackConfig null{attacks::AttackMethod::fgsm, 0.0, 1};
    const RobustnessPair p = robustness_eval(s.model, s.threshold, s.model, s.threshold, null, data.malware, data.box);
    LabeledBatch clean_malware{data.malware, std::vector<int>(static_cast<std::size_t>(data.malware.rows()), 1), {}};
    CHECK(p.normal_tpr == evaluate(s.model, s.threshold, clean_malware).tpr);
    CHECK_THROWS_AS(robustness_eval(s.model, 0, s.model, 0, fgsm, Matrix(0, 4), data.box), DataError);
}

TEST_CASE("results CSV: header, round trip, NaN as empty field") {
    MetricsRecord r;
    r.split_k = 4;
    r.method = "upper_bound";
    r.fpr_target = 0.01;
    r.seed = 18446744073709551615ull;
    r.test_period = 6;
    r.threshold = 0.1 + 0.2;
    r.tpr = 1.0 / 3.0;
    r.fpr = std::numeric_limits<double>::quiet_NaN();
    r.f1 = 5e-324;
    r.accuracy = 0.5;
    r.tp = 1;
    r.fp = 0;
    r.tn = 0;
    r.fn = 2;
    const std::string row = to_csv_row(r);
    CHECK(row == "4,upper_bound,0.01,18446744073709551615,6,0.30000000000000004,0.33333333333333331,,4.9406564584124654e-324,0.5,1,0,0,2");
    const MetricsRecord back = parse_csv_row(row);
    CHECK(back.threshold == r.threshold);
    CHECK(back.tpr == r.tpr);
    CHECK(std::isnan(back.fpr));
    CHECK(back.f1 == r.f1);
    CHECK(back.seed == r.seed);
    CHECK(to_csv_row(back) == row);

    std::stringstream buf;
    const std::vector<MetricsRecord> rows{r, r};
    write_results_csv(buf, rows);
    std::string header;
    std::getline(buf, header);
    CHECK(header == kResultsHeader);
    buf.seekg(0);
    CHECK(read_results_csv(buf).size() == 2);
    CHECK_THROWS_AS(parse_csv_row("1,2,3"), DataError);
    std::istringstream bad_header("split_k,method\n");
    CHECK_THROWS_AS(read_results_csv(bad_header), DataError);
}

TEST_CASE("run_experiment: record counts and identical test pools for both baselines") {
    const auto data = synth_generate(small_synth());
    ExperimentConfig cfg = small_experiment();
    cfg.splits = {4};
    cfg.seeds = {1, 2, 3};
    const RunSummary s = run_experiment(cfg, data);
    CHECK(s.records.size() == 6);
    CHECK(s.skipped.empty());
    std::map<std::pair<std::uint64_t, int>, std::set<std::string>> pools;
    for (const MetricsRecord& r : s.records) {
        CHECK(r.split_k == 4);
        CHECK(r.test_period == 4);
        CHECK(r.fpr_target == 0.1);
        pools[{r.seed, r.test_period}].insert(std::to_string(r.tp + r.fn) + "/" + std::to_string(r.fp + r.tn));
    }
    CHECK(pools.size() == 3);
    for (const auto& [key, sizes] : pools) CHECK(sizes.size() == 1);
}

TEST_CASE("run_experiment: no sample from the testing window reaches normal training") {
    const auto data = synth_generate(small_synth());
    ExperimentConfig cfg = small_experiment();
    cfg.splits = {4};
    const RunSummary base = run_experiment(cfg, data);

    // Roles do not depend on features, so perturbing the non-test samples of
    // T_4 and T_5 leaves the test pool and every normal input untouched.
    const PeriodPartition part = partition_by_time(data, cfg.period_seconds);
    PeriodPartition with_roles = part;
    with_roles.roles = assign_roles(part, cfg.roles, derive_seed(1, {0x201e5}));
    std::vector<Sample> changed = data;
    for (std::size_t i = 0; i < changed.size(); ++i) {
        if (part.period_of[i] >= 4 && with_roles.roles[i] != Role::test) {
            for (double& v : changed[i].features) v = -v * 3.0 + 7.0;
        }
    }
    const RunSummary after = run_experiment(cfg, changed);
    REQUIRE(base.records.size() == after.records.size());
    bool upper_changed = false;
    for (std::size_t i = 0; i < base.records.size(); ++i) {
        const MetricsRecord& a = base.records[i];
        const MetricsRecord& b = after.records[i];
        if (a.method == "normal") {
            CHECK(to_csv_row(a) == to_csv_row(b));
        } else {
            upper_changed = upper_changed || to_csv_row(a) != to_csv_row(b);
        }
    }
    CHECK(upper_changed);
}

TEST_CASE("run_experiment: deterministic file output and resume after interruption") {
    const auto data = synth_generate(small_synth());
    ExperimentConfig cfg = small_experiment();
    cfg.seeds = {1, 2};
    cfg.methods = {MethodTag::normal, MethodTag::ccygan};
    const auto full = temp_file("full.csv");
    const RunSummary whole = run_experiment(cfg, data, {full, false, 0, {}});
    const auto again = temp_file("again.csv");
    run_experiment(cfg, data, {again, false, 0, {}});
    CHECK(slurp(full) == slurp(again));

    // ccygan at k = 3 has no predictor to draw from and must be skipped, not fatal.
    REQUIRE_FALSE(whole.skipped.empty());
    for (const SkippedCell& s : whole.skipped) {
        CHECK(s.method == "ccygan");
        CHECK(s.split_k == 3);
    }
    CHECK(std::filesystem::exists(std::filesystem::path(full.string() + ".skipped")));

    for (std::size_t stop : {1, 2, 5}) {
        const auto part = temp_file("part.csv");
        run_experiment(cfg, data, {part, false, stop, {}});
        const RunSummary resumed = run_experiment(cfg, data, {part, true, 0, {}});
        CHECK(resumed.cells_resumed == stop);
        CHECK(slurp(part) == slurp(full));
        CHECK(slurp(std::filesystem::path(part.string() + ".skipped")) ==
              slurp(std::filesystem::path(full.string() + ".skipped")));
        CHECK(resumed.records.size() == whole.records.size());
    }

    // A torn final row is discarded and its cell rerun.
    const auto torn = temp_file("torn.csv");
    std::filesystem::copy_file(full, torn);
    std::filesystem::copy_file(std::filesystem::path(full.string() + ".skipped"),
                               std::filesystem::path(torn.string() + ".skipped"));
    std::string text = slurp(full);
    text.resize(text.size() - 15);
    std::ofstream(torn, std::ios::binary | std::ios::trunc) << text;
    const RunSummary fixed = run_experiment(cfg, data, {torn, true, 0, {}});
    CHECK(fixed.cells_run >= 1);
    CHECK(slurp(torn) == slurp(full));

    std::ofstream(torn, std::ios::trunc) << "not,a,header\n";
    CHECK_THROWS_AS(run_experiment(cfg, data, {torn, true, 0, {}}), DataError);
}

TEST_CASE("degradation study and matrix occupancy") {
    const auto data = synth_generate(small_synth());
    ExperimentConfig cfg = small_experiment();
    cfg.study = Study::degradation;
    const RunSummary s = run_experiment(cfg, data);
    // Splits k = 3, 4, 5 test on every later period: 3 + 2 + 1 rows.
    CHECK(s.records.size() == 6);
    for (const MetricsRecord& r : s.records) {
        CHECK(r.method == "normal");
        CHECK(r.test_period >= r.split_k);
    }
    const auto m = degradation_matrix(s.records, 0.1, 5);
    REQUIRE(m.size() == 3);
    for (std::size_t w = 0; w < 3; ++w) {
        REQUIRE(m[w].size() == 5);
        for (int p = 1; p <= 5; ++p) CHECK(m[w][p - 1].has_value() == (p >= static_cast<int>(w) + 3));
    }
}

TEST_CASE("robustness study emits paired rows") {
    const auto data = synth_generate(small_synth());
    ExperimentConfig cfg = small_experiment();
    cfg.study = Study::robustness;
    cfg.splits = {5};
    cfg.attack = {attacks::AttackMethod::fgsm, 0.25, 1};
    const RunSummary s = run_experiment(cfg, data);
    REQUIRE(s.records.size() == 2);
    CHECK(s.records[0].method == "normal_vs_fgsm");
    CHECK(s.records[1].method == "adv_fgsm_vs_fgsm");
}

TEST_CASE("prepare_data: reduced mode selects features and filters families") {
    SynthConfig sc = small_synth();
    sc.dim = 12;
    sc.n_families = 6;
    const auto data = synth_generate(sc);
    ExperimentConfig cfg = small_experiment();
    cfg.feature_mode = FeatureMode::reduced;
    cfg.feature_count = 5;
    cfg.top_families = 3;
    const PreparedData p = prepare_data(cfg, data);
    CHECK(p.selected_features.size() == 5);
    CHECK(feature_dimension(p.samples) == 5);
    CHECK(p.vocabulary.size() == 3);
    CHECK(std::is_sorted(p.vocabulary.begin(), p.vocabulary.end()));
    for (const Sample& s : p.samples) {
        if (s.label == Label::malware) {
            CHECK(std::find(p.vocabulary.begin(), p.vocabulary.end(), *s.family) != p.vocabulary.end());
        }
    }
    CHECK(p.partition.count() == 5);
    CHECK(p.splits.size() == 3);

    cfg.splits = {9};
    CHECK_THROWS_AS(prepare_data(cfg, data), UsageError);
    cfg = small_experiment();
    cfg.w1 = 5;
    CHECK_THROWS_AS(prepare_data(cfg, data), DataError);
}
