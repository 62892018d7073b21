#include "doctest.h"

#include "support.hpp"

#include "driftforge/error.hpp"
#include "driftforge/gan.hpp"
#include "driftforge/synth.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace driftforge;
using namespace driftforge::gan;

namespace {

// Dense [x | one-hot] -> x that copies x.
nn::MlpModel identity_generator(std::size_t dim, std::size_t conditions) {
    nn::MlpModel m({nn::LayerSpec::dense(dim + conditions, dim)}, 1);
    nn::Layer& l = m.mutable_layer(0);
    l.weight.setZero();
    l.weight.leftCols(static_cast<Eigen::Index>(dim)).setIdentity();
    l.bias.setZero();
    m.set_mode(nn::Mode::eval);
    return m;
}

Normalizer identity_normalizer(std::size_t dim) {
    const auto d = static_cast<Eigen::Index>(dim);
    return {RowVector::Constant(d, -1e300), RowVector::Constant(d, 1e300), RowVector::Zero(d), RowVector::Ones(d)};
}

double log_sigmoid_oracle(double x) {
    return -std::log1p(std::exp(-x));
}

GanTrainConfig tiny_config(std::size_t steps) {
    GanTrainConfig cfg;
    cfg.total_steps = steps;
    cfg.minibatch = 32;
    cfg.alternation_period = 5;
    cfg.learning_rate = 1e-3;
    cfg.arch.generator_hidden = {8};
    cfg.arch.discriminator_hidden = {8};
    return cfg;
}

struct TinyData {
    SynthConfig cfg;
    std::vector<Sample> samples;
    PeriodPartition partition;
    std::vector<std::string> vocabulary;
};

TinyData tiny_data() {
    TinyData t;
    t.cfg.n_periods = 5;
    t.cfg.dim = 4;
    t.cfg.n_families = 3;
    t.cfg.samples_per_period_per_class = 60;
    t.samples = synth_generate(t.cfg);
    t.partition = partition_by_time(t.samples, t.cfg.period_seconds);
    t.partition.roles = assign_roles(t.partition, {}, 1);
    t.vocabulary = {synth_family_name(0), synth_family_name(2)};
    return t;
}

} // namespace

TEST_CASE("one-hot conditioning is exact") {
    const std::vector<int> c{2, 0, 1, 2};
    const Matrix h = one_hot(c, 3);
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        CHECK(h.row(i).sum() == 1.0);
        CHECK(h(i, c[static_cast<std::size_t>(i)]) == 1.0);
        CHECK(h.row(i).cwiseAbs().maxCoeff() == 1.0);
    }
    const Matrix x = Matrix::Constant(4, 2, 7.0);
    const Matrix xc = conditioned(x, c, 3);
    CHECK(xc.cols() == 5);
    CHECK(xc.leftCols(2) == x);
    CHECK(xc.rightCols(3) == h);
    CHECK_THROWS_AS(one_hot(std::vector<int>{3}, 3), UsageError);
    CHECK_THROWS_AS(one_hot(std::vector<int>{-1}, 3), UsageError);
}

TEST_CASE("gan losses: uninformative, perfect and random discriminators") {
    const Matrix zero = Matrix::Zero(4, 1);
    CHECK(gan_losses(zero, zero).discriminator == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
    CHECK(gan_losses(zero, zero).generator == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    double last = 1e9;
    for (double t : {5.0, 20.0, 100.0, 800.0}) {
        const double l = gan_losses(Matrix::Constant(3, 1, t), Matrix::Constant(3, 1, -t)).discriminator;
        CHECK(std::isfinite(l));
        CHECK(l < last);
        last = l;
    }
    CHECK(last < 1e-300);

    Rng rng(2);
    for (int trial = 0; trial < 25; ++trial) {
        const Matrix real = testing::random_matrix(rng, 7, 1, 4.0);
        const Matrix fake = testing::random_matrix(rng, 5, 1, 4.0);
        double er = 0.0, ef = 0.0, eg = 0.0;
        for (Eigen::Index i = 0; i < real.rows(); ++i) er += log_sigmoid_oracle(real(i, 0));
        for (Eigen::Index i = 0; i < fake.rows(); ++i) {
            ef += log_sigmoid_oracle(-fake(i, 0));
            eg += log_sigmoid_oracle(fake(i, 0));
        }
        const GanLosses l = gan_losses(real, fake);
        CHECK(l.discriminator == doctest::Approx(-(er / 7.0 + ef / 5.0)).epsilon(1e-12));
        CHECK(l.generator == doctest::Approx(-eg / 5.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(gan_losses(Matrix::Zero(2, 2), zero), UsageError);
}

TEST_CASE("cycle loss: identity generators, l1 arithmetic, lambda decomposition") {
    CycleGanPair pair = make_cycle_gan(2, 3, GanArch{{4}, {4}, 0.2}, 1.0, 5);
    pair.d.set_mode(nn::Mode::eval);
    pair.d_b.set_mode(nn::Mode::eval);
    pair.g = identity_generator(2, 3);
    pair.g_b = identity_generator(2, 3);
    Rng rng(3);
    const Matrix x = testing::random_matrix(rng, 6, 2);
    const Matrix z = testing::random_matrix(rng, 4, 2);
    const std::vector<int> cx{0, 1, 2, 0, 1, 2}, cz{2, 2, 1, 0};
    const CycleLoss id = cycle_loss(pair, x, cx, z, cz);
    CHECK(id.reconstruction_x == 0.0);
    CHECK(id.reconstruction_z == 0.0);
    CHECK(id.total == doctest::Approx(id.adversarial_forward + id.adversarial_backward));

    // G(G_b(x)) = 0 for every x: the reconstruction of [1, 2] costs 3.
    pair.g.mutable_layer(0).weight.setZero();
    Matrix one(1, 2);
    one << 1.0, 2.0;
    const std::vector<int> c0{0};
    CHECK(cycle_loss(pair, one, c0, one, c0).reconstruction_x == 3.0);

    pair.g = make_cycle_gan(2, 3, GanArch{{4}, {4}, 0.2}, 1.0, 6).g;
    pair.g.set_mode(nn::Mode::eval);
    pair.lambda_cyc = 0.0;
    const CycleLoss l0 = cycle_loss(pair, x, cx, z, cz);
    CHECK(l0.reconstruction_x > 0.0);
    CHECK(l0.total == l0.adversarial_forward + l0.adversarial_backward);
    pair.lambda_cyc = 2.5;
    const CycleLoss l2 = cycle_loss(pair, x, cx, z, cz);
    CHECK(l2.total == doctest::Approx(l2.adversarial_forward + l2.adversarial_backward +
                                      2.5 * (l2.reconstruction_x + l2.reconstruction_z)));
    CHECK_THROWS(cycle_loss(pair, Matrix::Zero(2, 3), std::vector<int>{0, 0}, z, cz));
    CHECK_THROWS(cycle_loss(pair, x, std::vector<int>{0}, z, cz));
}

TEST_CASE("network shapes follow the architecture") {
    const CycleGanPair p = make_cycle_gan(100, 21, GanArch{}, 1.0, 1);
    CHECK(p.g.in_dim() == 121);
    CHECK(p.g.out_dim() == 100);
    CHECK(p.g_b.out_dim() == 100);
    CHECK(p.d.out_dim() == 1);
    CHECK(p.d_b.in_dim() == 121);
    for (const auto& l : p.g.layers()) {
        CHECK(l.spec.kind != nn::LayerKind::batchnorm);
        CHECK(l.spec.kind != nn::LayerKind::dropout);
    }
    int dropouts = 0;
    for (const auto& l : p.d.layers()) {
        if (l.spec.kind == nn::LayerKind::dropout) {
            ++dropouts;
            CHECK(l.spec.dropout_rate == 0.2);
        }
    }
    CHECK(dropouts == 2);
    CHECK_THROWS_AS(make_cycle_gan(0, 1, GanArch{}, 1.0, 1), UsageError);
}

TEST_CASE("train_ccygan: reconstruction falls on a shared distribution, schedule alternates") {
    Rng rng(4);
    const Matrix a = testing::random_matrix(rng, 200, 3);
    const Matrix b = testing::random_matrix(rng, 200, 3);
    std::vector<int> ca(200), cb(200);
    for (int i = 0; i < 200; ++i) {
        ca[i] = i % 2;
        cb[i] = (i + 1) % 2;
    }
    const TrainedCycleGan t = train_ccygan({a, ca}, {b, cb}, 2, tiny_config(200), 9);
    REQUIRE(t.history.size() == 200);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 10; ++i) {
        early += t.history[i].reconstruction;
        late += t.history[190 + i].reconstruction;
    }
    CHECK(late < early);
    for (const StepRecord& r : t.history) {
        CHECK(r.discriminators_updated == ((r.step / 5) % 2 == 0));
        CHECK(std::isnan(r.discriminator_loss) == !r.discriminators_updated);
    }
    CHECK(t.warnings.empty());
    CHECK(t.pair.g.mode() == nn::Mode::eval);

    const TrainedCycleGan again = train_ccygan({a, ca}, {b, cb}, 2, tiny_config(200), 9);
    CHECK(again.pair.g == t.pair.g);
    CHECK(again.pair.d_b == t.pair.d_b);
}

TEST_CASE("train_ccygan: empty family buckets warn, bad pools throw") {
    Rng rng(5);
    const Matrix a = testing::random_matrix(rng, 20, 2);
    const std::vector<int> c(20, 0);
    const TrainedCycleGan t = train_ccygan({a, c}, {a, c}, 3, tiny_config(3), 1);
    CHECK(t.warnings.size() == 2);
    CHECK_THROWS_AS(train_ccygan({Matrix(0, 2), {}}, {a, c}, 1, tiny_config(3), 1), DataError);
    CHECK_THROWS_AS(train_ccygan({a, std::vector<int>(3, 0)}, {a, c}, 1, tiny_config(3), 1), DataError);
    GanTrainConfig bad = tiny_config(0);
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = tiny_config(3);
    bad.lambda_cyc = -1.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("train_ccygan: translation toy moves the generated mean toward the target") {
    int wins = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        Rng rng = make_rng(seed, {77});
        Matrix src = testing::random_matrix(rng, 1000, 2);
        Matrix tgt = testing::random_matrix(rng, 1000, 2);
        tgt.col(0).array() += 2.0;
        tgt.col(1).array() += 1.0;
        const std::vector<int> c(1000, 0);
        GanTrainConfig cfg;
        cfg.total_steps = 1500;
        cfg.minibatch = 128;
        cfg.learning_rate = 1e-3;
        cfg.arch.generator_hidden = {32, 32};
        cfg.arch.discriminator_hidden = {32, 16};
        const TrainedCycleGan t = train_ccygan({src, c}, {tgt, c}, 1, cfg, seed);
        const Matrix g = nn::predict(t.pair.g, conditioned(src, c, 1));
        const RowVector target_mean = tgt.colwise().mean();
        if ((g.colwise().mean() - target_mean).norm() < (src.colwise().mean() - target_mean).norm()) ++wins;
    }
    CHECK(wins >= 2);
}

TEST_CASE("bank indices") {
    CHECK(bank_indices(2, 1).empty());
    CHECK(bank_indices(5, 3) == std::vector<int>{4});
    for (int k = 2; k <= 12; ++k) {
        for (int w1 = 1; w1 < k; ++w1) {
            std::vector<int> oracle;
            for (int kp = 1; kp < k; ++kp) {
                if (kp > w1) oracle.push_back(kp);
            }
            CHECK(bank_indices(k, w1) == oracle);
        }
    }
}

TEST_CASE("predict_samples: empty bank, quota 0, identity generator, quota 64") {
    PredictorBank bank;
    bank.vocabulary = {"a", "b"};
    bank.dim = 3;
    Rng rng(6);
    const Matrix x = testing::random_matrix(rng, 10, 3);
    CHECK_THROWS_AS(predict_samples(bank, x, 4, rng), MethodUnavailable);

    bank.entries[4] = BankEntry{4, identity_generator(3, 2), identity_normalizer(3)};
    CHECK(predict_samples(bank, x, 0, rng).rows() == 0);
    const Matrix out = predict_samples(bank, x, 64, rng);
    REQUIRE(out.rows() == 64);
    CHECK(all_finite(out));
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        bool found = false;
        for (Eigen::Index j = 0; j < x.rows(); ++j) found = found || out.row(i).isApprox(x.row(j), 1e-15);
        CHECK(found);
    }
    CHECK_THROWS_AS(predict_samples(bank, Matrix::Zero(2, 4), 3, rng), UsageError);
}

TEST_CASE("predictor bank: indices, determinism, serialisation") {
    const TinyData d = tiny_data();
    BankOptions opt;
    opt.w1 = 2;
    opt.gan = tiny_config(20);
    opt.seed = 11;
    std::vector<std::string> warnings;
    const PredictorBank bank = build_predictor_bank(d.samples, d.partition, 5, d.vocabulary, opt, nullptr, &warnings);
    std::vector<int> keys;
    for (const auto& [k, e] : bank.entries) keys.push_back(k);
    CHECK(keys == bank_indices(5, 2));
    CHECK(bank.dim == 4);
    CHECK(bank.vocabulary == d.vocabulary);

    BankCache cache;
    const PredictorBank again = build_predictor_bank(d.samples, d.partition, 5, d.vocabulary, opt, &cache);
    for (const auto& [k, e] : bank.entries) CHECK(again.entries.at(k).generator == e.generator);
    CHECK(cache.size() == bank.size());
    const PredictorBank smaller = build_predictor_bank(d.samples, d.partition, 4, d.vocabulary, opt, &cache);
    CHECK(smaller.size() == 1);
    CHECK(smaller.entries.at(3).generator == bank.entries.at(3).generator);

    const auto dir = std::filesystem::temp_directory_path() / "driftforge_bank_test";
    std::filesystem::remove_all(dir);
    save_bank(bank, dir);
    const PredictorBank loaded = load_bank(dir);
    CHECK(loaded.vocabulary == bank.vocabulary);
    CHECK(loaded.dim == bank.dim);
    REQUIRE(loaded.size() == bank.size());
    for (const auto& [k, e] : bank.entries) {
        const BankEntry& l = loaded.entries.at(k);
        CHECK(l.generator.flat_parameters() == e.generator.flat_parameters());
        CHECK(l.normalizer.mean == e.normalizer.mean);
        CHECK(l.normalizer.q99 == e.normalizer.q99);
    }
    Rng r1(3), r2(3);
    const Matrix x = gather_features(d.samples, d.partition.period(5));
    CHECK(predict_samples(bank, x, 16, r1) == predict_samples(loaded, x, 16, r2));
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_bank(dir), DataError);

    const PredictorBank none = build_predictor_bank(d.samples, d.partition, 3, d.vocabulary, opt);
    CHECK(none.empty());
    Rng r3(1);
    CHECK_THROWS_AS(predict_samples(none, x, 4, r3), MethodUnavailable);
}

TEST_CASE("bank entries use only train-role malware of their own window") {
    TinyData d = tiny_data();
    BankOptions opt;
    opt.w1 = 2;
    opt.gan = tiny_config(10);
    const auto entry = train_bank_entry(d.samples, d.partition, 4, d.vocabulary, opt);
    REQUIRE(entry.has_value());

    // Corrupting anything outside the window's train-role pool leaves the entry unchanged.
    std::vector<Sample> changed = d.samples;
    for (std::size_t i = 0; i < changed.size(); ++i) {
        const int p = d.partition.period_of[i];
        const bool in_window = p >= 2 && p <= 3 && d.partition.roles[i] == Role::train;
        if (!in_window) {
            for (double& v : changed[i].features) v += 1000.0;
        }
    }
    const auto same = train_bank_entry(changed, d.partition, 4, d.vocabulary, opt);
    REQUIRE(same.has_value());
    CHECK(same->generator == entry->generator);
    CHECK(same->normalizer.mean == entry->normalizer.mean);

    opt.min_pool = 10'000;
    std::vector<std::string> warnings;
    CHECK_FALSE(train_bank_entry(d.samples, d.partition, 4, d.vocabulary, opt, &warnings).has_value());
    CHECK(warnings.size() == 1);
    CHECK_THROWS_AS(train_bank_entry(d.samples, d.partition, 2, d.vocabulary, opt), UsageError);
}

TEST_CASE("residual generators start as the identity and keep it through the cycle") {
    Rng rng(31);
    GanArch arch;
    arch.generator_hidden = {8, 8};
    arch.residual_generator = true;
    CycleGanPair p = make_cycle_gan(3, 2, arch, 1.0, 5);
    for (nn::MlpModel* m : {&p.g, &p.g_b, &p.d, &p.d_b}) m->set_mode(nn::Mode::eval);
    const Matrix x = testing::random_matrix(rng, 10, 3);
    const std::vector<int> c{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
    CHECK(translate(p.g, true, conditioned(x, c, 2)) == x);
    CHECK(translate(p.g_b, true, conditioned(x, c, 2)) == x);
    const CycleLoss loss = cycle_loss(p, x, c, x, c);
    CHECK(loss.reconstruction_x == 0.0);
    CHECK(loss.reconstruction_z == 0.0);

    arch.residual_generator = false;
    CHECK_FALSE(make_cycle_gan(3, 2, arch, 1.0, 5).residual);
}

TEST_CASE("residual generators learn a pure shift") {
    Rng rng = make_rng(4, {77});
    Matrix src = testing::random_matrix(rng, 800, 3);
    Matrix tgt = testing::random_matrix(rng, 800, 3);
    tgt.col(0).array() += 1.5;
    const std::vector<int> c(800, 0);
    GanTrainConfig cfg = tiny_config(400);
    cfg.minibatch = 128;
    cfg.arch.generator_hidden = {16, 16};
    cfg.arch.discriminator_hidden = {16, 8};
    cfg.arch.residual_generator = true;
    const TrainedCycleGan t = train_ccygan({src, c}, {tgt, c}, 1, cfg, 4);
    CHECK(t.pair.residual);
    const Matrix g = translate(t.pair.g, true, conditioned(src, c, 1));
    const RowVector target_mean = tgt.colwise().mean();
    CHECK((g.colwise().mean() - target_mean).norm() < 0.5 * (src.colwise().mean() - target_mean).norm());
}

TEST_CASE("residual predictor banks round-trip through disk") {
    const TinyData d = tiny_data();
    BankOptions opt;
    opt.w1 = 2;
    opt.gan = tiny_config(20);
    opt.gan.arch.residual_generator = true;
    opt.seed = 12;
    const PredictorBank bank = build_predictor_bank(d.samples, d.partition, 5, d.vocabulary, opt);
    REQUIRE_FALSE(bank.empty());
    for (const auto& [k, e] : bank.entries) CHECK(e.residual);
    const auto dir = std::filesystem::temp_directory_path() / "driftforge_residual_bank_test";
    std::filesystem::remove_all(dir);
    save_bank(bank, dir);
    const PredictorBank loaded = load_bank(dir);
    for (const auto& [k, e] : loaded.entries) CHECK(e.residual);
    Rng r1(3), r2(3);
    const Matrix x = gather_features(d.samples, d.partition.period(5));
    CHECK(predict_samples(bank, x, 16, r1) == predict_samples(loaded, x, 16, r2));
    std::filesystem::remove_all(dir);
}
