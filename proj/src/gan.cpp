#include "driftforge/gan.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace driftforge::gan {

using nlohmann::json;

void GanTrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("GAN learning rate must be positive");
    if (total_steps < 1 || minibatch < 1 || alternation_period < 1) {
        throw UsageError("GAN steps, minibatch and alternation period must be positive");
    }
    if (lambda_cyc < 0.0) throw UsageError("cycle weight must be non-negative");
}

namespace {

std::vector<nn::LayerSpec> generator_layers(std::size_t dim, std::size_t n_conditions, const GanArch& arch) {
    nn::MlpArch a;
    a.hidden = arch.generator_hidden;
    a.batchnorm = false;
    a.dropout = 0.0;
    a.out = dim;
    return nn::build_layers(dim + n_conditions, a);
}

std::vector<nn::LayerSpec> discriminator_layers(std::size_t dim, std::size_t n_conditions, const GanArch& arch) {
    nn::MlpArch a;
    a.hidden = arch.discriminator_hidden;
    a.batchnorm = false;
    a.dropout = arch.discriminator_dropout;
    a.out = 1;
    return nn::build_layers(dim + n_conditions, a);
}

} // namespace

CycleGanPair make_cycle_gan(std::size_t dim, std::size_t n_conditions, const GanArch& arch,
                            double lambda_cyc, std::uint64_t seed) {
    if (dim < 1 || n_conditions < 1) throw UsageError("CycleGAN needs positive dimension and vocabulary");
    CycleGanPair p;
    p.g = nn::MlpModel(generator_layers(dim, n_conditions, arch), derive_seed(seed, {1}));
    p.g_b = nn::MlpModel(generator_layers(dim, n_conditions, arch), derive_seed(seed, {2}));
    p.d = nn::MlpModel(discriminator_layers(dim, n_conditions, arch), derive_seed(seed, {3}));
    p.d_b = nn::MlpModel(discriminator_layers(dim, n_conditions, arch), derive_seed(seed, {4}));
    p.lambda_cyc = lambda_cyc;
    p.dim = dim;
    p.n_conditions = n_conditions;
    p.residual = arch.residual_generator;
    if (p.residual) {
        for (nn::MlpModel* g : {&p.g, &p.g_b}) {
            nn::Layer& out = g->mutable_layer(g->layers().size() - 1);
            out.weight.setZero();
            out.bias.setZero();
        }
    }
    return p;
}

Matrix translate(const nn::MlpModel& generator, bool residual, const Matrix& conditioned_x) {
    Matrix out = nn::predict(generator, conditioned_x);
    if (residual) out += conditioned_x.leftCols(out.cols());
    return out;
}

Matrix one_hot(std::span<const int> conditions, std::size_t n_conditions) {
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(conditions.size()), static_cast<Eigen::Index>(n_conditions));
    for (std::size_t i = 0; i < conditions.size(); ++i) {
        const int c = conditions[i];
        if (c < 0 || static_cast<std::size_t>(c) >= n_conditions) {
            throw UsageError("condition " + std::to_string(c) + " outside vocabulary of size " +
                             std::to_string(n_conditions));
        }
        out(static_cast<Eigen::Index>(i), c) = 1.0;
    }
    return out;
}

Matrix conditioned(const Matrix& x, std::span<const int> conditions, std::size_t n_conditions) {
    if (static_cast<std::size_t>(x.rows()) != conditions.size()) {
        throw UsageError("one condition per row is required");
    }
    return hconcat(x, one_hot(conditions, n_conditions));
}

GanLosses gan_losses(const Matrix& real_logits, const Matrix& fake_logits) {
    if (real_logits.cols() != 1 || fake_logits.cols() != 1) {
        throw UsageError("discriminator outputs must be single logits");
    }
    const std::vector<double> ones_r(static_cast<std::size_t>(real_logits.rows()), 1.0);
    const std::vector<double> zeros_f(static_cast<std::size_t>(fake_logits.rows()), 0.0);
    const std::vector<double> ones_f(static_cast<std::size_t>(fake_logits.rows()), 1.0);
    const nn::LossResult real = nn::sigmoid_cross_entropy(real_logits, ones_r);
    const nn::LossResult fake = nn::sigmoid_cross_entropy(fake_logits, zeros_f);
    const nn::LossResult gen = nn::sigmoid_cross_entropy(fake_logits, ones_f);
    GanLosses out;
    out.discriminator = real.loss + fake.loss;
    out.generator = gen.loss;
    out.discriminator_grad_real = real.grad;
    out.discriminator_grad_fake = fake.grad;
    out.generator_grad_fake = gen.grad;
    return out;
}

namespace {

double mean_l1(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0) return 0.0;
    return (a - b).cwiseAbs().rowwise().sum().mean();
}

void check_domain(const CycleGanPair& pair, const Matrix& m, std::span<const int> cond) {
    if (static_cast<std::size_t>(m.cols()) != pair.dim || static_cast<std::size_t>(m.rows()) != cond.size()) {
        throw UsageError("batch does not match CycleGAN dimension or condition count");
    }
}

} // namespace

CycleLoss cycle_loss(const CycleGanPair& pair, const Matrix& x, std::span<const int> x_conditions,
                     const Matrix& z, std::span<const int> z_conditions) {
    check_domain(pair, x, x_conditions);
    check_domain(pair, z, z_conditions);
    const std::size_t c = pair.n_conditions;
    const Matrix xc = conditioned(x, x_conditions, c);
    const Matrix zc = conditioned(z, z_conditions, c);
    const Matrix fake_x = translate(pair.g, pair.residual, zc);
    const Matrix fake_z = translate(pair.g_b, pair.residual, xc);
    const Matrix rec_x = translate(pair.g, pair.residual, conditioned(fake_z, x_conditions, c));
    const Matrix rec_z = translate(pair.g_b, pair.residual, conditioned(fake_x, z_conditions, c));

    CycleLoss out;
    out.adversarial_forward =
        gan_losses(nn::predict(pair.d, xc), nn::predict(pair.d, conditioned(fake_x, z_conditions, c))).discriminator;
    out.adversarial_backward =
        gan_losses(nn::predict(pair.d_b, zc), nn::predict(pair.d_b, conditioned(fake_z, x_conditions, c))).discriminator;
    out.reconstruction_x = mean_l1(x, rec_x);
    out.reconstruction_z = mean_l1(z, rec_z);
    out.total = out.adversarial_forward + out.adversarial_backward +
                pair.lambda_cyc * (out.reconstruction_x + out.reconstruction_z);
    return out;
}

namespace {

struct Batch {
    Matrix x;
    std::vector<int> cond;
};

Batch draw(const DomainPool& pool, std::size_t m, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, static_cast<std::size_t>(pool.x.rows()) - 1);
    std::vector<std::size_t> idx(m);
    for (auto& i : idx) i = pick(rng);
    Batch b;
    b.x = select_rows(pool.x, idx);
    b.cond.reserve(m);
    for (std::size_t i : idx) b.cond.push_back(pool.conditions[i]);
    return b;
}

Matrix l1_grad(const Matrix& rec, const Matrix& ref, double scale) {
    return (rec - ref).unaryExpr([scale](double v) { return v > 0.0 ? scale : (v < 0.0 ? -scale : 0.0); });
}

Matrix leading_cols(const Matrix& m, Eigen::Index n) {
    return m.leftCols(n);
}

} // namespace

TrainedCycleGan train_ccygan(const DomainPool& source, const DomainPool& target, std::size_t n_conditions,
                             const GanTrainConfig& config, std::uint64_t seed) {
    config.validate();
    if (source.x.rows() == 0 || target.x.rows() == 0) {
        throw DataError("CycleGAN training needs non-empty source and target pools");
    }
    if (source.x.cols() != target.x.cols()) throw DataError("source and target dimensions differ");
    if (static_cast<std::size_t>(source.x.rows()) != source.conditions.size() ||
        static_cast<std::size_t>(target.x.rows()) != target.conditions.size()) {
        throw DataError("every pooled sample needs a family condition");
    }
    require_finite(source.x, "CycleGAN source pool");
    require_finite(target.x, "CycleGAN target pool");

    TrainedCycleGan out;
    for (std::size_t c = 0; c < n_conditions; ++c) {
        const auto ci = static_cast<int>(c);
        const bool in_src = std::find(source.conditions.begin(), source.conditions.end(), ci) != source.conditions.end();
        const bool in_tgt = std::find(target.conditions.begin(), target.conditions.end(), ci) != target.conditions.end();
        if (!in_src || !in_tgt) {
            out.warnings.push_back("family condition " + std::to_string(c) + " has an empty " +
                                   (in_src ? "target" : "source") + " bucket; it is not trained");
        }
    }

    const auto dim = static_cast<std::size_t>(source.x.cols());
    CycleGanPair pair = make_cycle_gan(dim, n_conditions, config.arch, config.lambda_cyc, seed);
    for (nn::MlpModel* m : {&pair.g, &pair.g_b, &pair.d, &pair.d_b}) m->set_mode(nn::Mode::train);
    const nn::AdamConfig adam{config.learning_rate, config.beta1, config.beta2, 1e-8};
    nn::AdamState opt_g(pair.g, adam);
    nn::AdamState opt_gb(pair.g_b, adam);
    nn::AdamState opt_d(pair.d, adam);
    nn::AdamState opt_db(pair.d_b, adam);

    Rng rng = make_rng(seed, {0xba7c});
    const std::size_t m = config.minibatch;
    const auto d_cols = static_cast<Eigen::Index>(dim);
    const double lambda = config.lambda_cyc;
    out.history.reserve(config.total_steps);

    for (std::size_t step = 0; step < config.total_steps; ++step) {
        const bool update_d = (step / config.alternation_period) % 2 == 0;
        const Batch zb = draw(source, m, rng);
        const Batch xb = draw(target, m, rng);
        const Matrix zc = conditioned(zb.x, zb.cond, n_conditions);
        const Matrix xc = conditioned(xb.x, xb.cond, n_conditions);

        // Generator update: adversarial (non-saturating) + lambda * cycle terms.
        nn::ForwardResult fwd_fake_x = nn::forward(pair.g, zc);
        nn::ForwardResult fwd_fake_z = nn::forward(pair.g_b, xc);
        if (pair.residual) {
            fwd_fake_x.output += zb.x;
            fwd_fake_z.output += xb.x;
        }
        const Matrix& fake_x = fwd_fake_x.output;
        const Matrix& fake_z = fwd_fake_z.output;
        nn::ForwardResult fwd_rec_z = nn::forward(pair.g_b, conditioned(fake_x, zb.cond, n_conditions));
        nn::ForwardResult fwd_rec_x = nn::forward(pair.g, conditioned(fake_z, xb.cond, n_conditions));
        if (pair.residual) {
            fwd_rec_z.output += fake_x;
            fwd_rec_x.output += fake_z;
        }
        nn::ForwardResult fwd_d_fake = nn::forward(pair.d, conditioned(fake_x, zb.cond, n_conditions));
        nn::ForwardResult fwd_db_fake = nn::forward(pair.d_b, conditioned(fake_z, xb.cond, n_conditions));

        const std::vector<double> ones(m, 1.0);
        const nn::LossResult adv_g = nn::sigmoid_cross_entropy(fwd_d_fake.output, ones);
        const nn::LossResult adv_gb = nn::sigmoid_cross_entropy(fwd_db_fake.output, ones);
        const double rec = mean_l1(xb.x, fwd_rec_x.output) + mean_l1(zb.x, fwd_rec_z.output);

        Matrix grad_fake_x =
            leading_cols(nn::backward(pair.d, fwd_d_fake.trace, adv_g.grad, false).input, d_cols);
        Matrix grad_fake_z =
            leading_cols(nn::backward(pair.d_b, fwd_db_fake.trace, adv_gb.grad, false).input, d_cols);

        const double rec_scale = lambda / static_cast<double>(m);
        const Matrix rec_x_grad = l1_grad(fwd_rec_x.output, xb.x, rec_scale);
        const Matrix rec_z_grad = l1_grad(fwd_rec_z.output, zb.x, rec_scale);
        nn::Gradients grads_g = nn::backward(pair.g, fwd_rec_x.trace, rec_x_grad);
        grad_fake_z += leading_cols(grads_g.input, d_cols);
        nn::Gradients grads_gb = nn::backward(pair.g_b, fwd_rec_z.trace, rec_z_grad);
        grad_fake_x += leading_cols(grads_gb.input, d_cols);
        if (pair.residual) {
            grad_fake_z += rec_x_grad;
            grad_fake_x += rec_z_grad;
        }

        nn::accumulate(grads_g, nn::backward(pair.g, fwd_fake_x.trace, grad_fake_x));
        nn::accumulate(grads_gb, nn::backward(pair.g_b, fwd_fake_z.trace, grad_fake_z));

        StepRecord rec_entry;
        rec_entry.step = step;
        rec_entry.discriminators_updated = update_d;
        rec_entry.generator_adversarial = adv_g.loss + adv_gb.loss;
        rec_entry.reconstruction = rec;

        // Discriminator update on the same fakes, detached from the generators.
        if (update_d) {
            nn::ForwardResult d_real = nn::forward(pair.d, xc);
            nn::ForwardResult d_fake = nn::forward(pair.d, conditioned(fake_x, zb.cond, n_conditions));
            const GanLosses ld = gan_losses(d_real.output, d_fake.output);
            nn::Gradients gd = nn::backward(pair.d, d_real.trace, ld.discriminator_grad_real);
            nn::accumulate(gd, nn::backward(pair.d, d_fake.trace, ld.discriminator_grad_fake));

            nn::ForwardResult db_real = nn::forward(pair.d_b, zc);
            nn::ForwardResult db_fake = nn::forward(pair.d_b, conditioned(fake_z, xb.cond, n_conditions));
            const GanLosses ldb = gan_losses(db_real.output, db_fake.output);
            nn::Gradients gdb = nn::backward(pair.d_b, db_real.trace, ldb.discriminator_grad_real);
            nn::accumulate(gdb, nn::backward(pair.d_b, db_fake.trace, ldb.discriminator_grad_fake));

            nn::adam_step(opt_d, pair.d, gd);
            nn::adam_step(opt_db, pair.d_b, gdb);
            rec_entry.discriminator_loss = ld.discriminator + ldb.discriminator;
        } else {
            rec_entry.discriminator_loss = std::numeric_limits<double>::quiet_NaN();
        }
        nn::adam_step(opt_g, pair.g, grads_g);
        nn::adam_step(opt_gb, pair.g_b, grads_gb);
        out.history.push_back(rec_entry);
    }
    for (nn::MlpModel* mdl : {&pair.g, &pair.g_b, &pair.d, &pair.d_b}) mdl->set_mode(nn::Mode::eval);
    out.pair = std::move(pair);
    return out;
}

// ---------------------------------------------------------------------------
// Predictor bank

std::vector<int> bank_indices(int k, int w1) {
    std::vector<int> out;
    for (int kp = w1 + 1; kp < k; ++kp) out.push_back(kp);
    return out;
}

std::optional<BankEntry> train_bank_entry(std::span<const Sample> samples, const PeriodPartition& partition,
                                          int k_prime, const std::vector<std::string>& vocabulary,
                                          const BankOptions& options, std::vector<std::string>* warnings) {
    if (vocabulary.empty()) throw UsageError("family vocabulary is empty");
    if (options.w1 < 1 || k_prime - options.w1 < 1 || k_prime - 1 > partition.count()) {
        throw UsageError("bank entry " + std::to_string(k_prime) + " has no complete window");
    }
    if (partition.roles.size() != samples.size()) throw UsageError("partition roles are not assigned");

    std::map<std::string, int> position;
    for (std::size_t i = 0; i < vocabulary.size(); ++i) position[vocabulary[i]] = static_cast<int>(i);

    std::vector<std::size_t> window;
    std::vector<std::size_t> source;
    std::vector<std::size_t> target;
    std::vector<int> source_cond;
    std::vector<int> target_cond;
    for (int p = k_prime - options.w1; p <= k_prime - 1; ++p) {
        for (std::size_t i : partition.period(p)) {
            if (!samples[i].labeled() || partition.roles[i] != Role::train) continue;
            window.push_back(i);
            if (samples[i].label != Label::malware || !samples[i].family) continue;
            const auto it = position.find(*samples[i].family);
            if (it == position.end()) continue;
            if (p == k_prime - 1) {
                target.push_back(i);
                target_cond.push_back(it->second);
            } else {
                source.push_back(i);
                source_cond.push_back(it->second);
            }
        }
    }
    if (source.size() < options.min_pool || target.size() < options.min_pool) {
        if (warnings) {
            warnings->push_back("predictor G_" + std::to_string(k_prime) + " skipped: source " +
                                std::to_string(source.size()) + ", target " + std::to_string(target.size()) +
                                " samples");
        }
        return std::nullopt;
    }

    BankEntry entry;
    entry.k = k_prime;
    entry.normalizer = fit_normalizer(samples, window);
    DomainPool src{entry.normalizer.applied(gather_features(samples, source)), std::move(source_cond)};
    DomainPool tgt{entry.normalizer.applied(gather_features(samples, target)), std::move(target_cond)};
    TrainedCycleGan trained = train_ccygan(src, tgt, vocabulary.size(), options.gan,
                                           derive_seed(options.seed, {0x6a, static_cast<std::uint64_t>(k_prime)}));
    if (warnings) {
        for (auto& w : trained.warnings) warnings->push_back("G_" + std::to_string(k_prime) + ": " + w);
    }
    entry.generator = std::move(trained.pair.g);
    entry.residual = trained.pair.residual;
    return entry;
}

PredictorBank build_predictor_bank(std::span<const Sample> samples, const PeriodPartition& partition, int k,
                                   const std::vector<std::string>& vocabulary, const BankOptions& options,
                                   BankCache* cache, std::vector<std::string>* warnings) {
    PredictorBank bank;
    bank.vocabulary = vocabulary;
    bank.dim = feature_dimension(samples);
    for (int kp : bank_indices(k, options.w1)) {
        std::optional<BankEntry> entry;
        if (cache != nullptr && cache->contains(kp)) {
            entry = cache->at(kp);
        } else {
            entry = train_bank_entry(samples, partition, kp, vocabulary, options, warnings);
            if (cache != nullptr) (*cache)[kp] = entry;
        }
        if (entry) bank.entries.emplace(kp, std::move(*entry));
    }
    return bank;
}

Matrix predict_samples(const PredictorBank& bank, const Matrix& x_raw, std::size_t quota, Rng& rng,
                       std::span<const int> conditions) {
    if (bank.empty()) throw MethodUnavailable("predictor bank is empty; CCyGAN unavailable for this split");
    if (static_cast<std::size_t>(x_raw.cols()) != bank.dim) {
        throw UsageError("sample dimension does not match predictor bank");
    }
    if (quota == 0) return Matrix(0, x_raw.cols());
    if (x_raw.rows() == 0) throw DataError("no malware samples to predict from");

    std::vector<int> conds(conditions.begin(), conditions.end());
    if (conds.empty()) {
        for (std::size_t i = 0; i < bank.vocabulary.size(); ++i) conds.push_back(static_cast<int>(i));
    }
    std::vector<const BankEntry*> entries;
    for (const auto& [k, e] : bank.entries) entries.push_back(&e);

    std::uniform_int_distribution<std::size_t> pick_x(0, static_cast<std::size_t>(x_raw.rows()) - 1);
    std::uniform_int_distribution<std::size_t> pick_c(0, conds.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_g(0, entries.size() - 1);
    std::vector<std::size_t> xs(quota);
    std::vector<int> cs(quota);
    std::vector<std::size_t> gs(quota);
    for (std::size_t q = 0; q < quota; ++q) {
        xs[q] = pick_x(rng);
        cs[q] = conds[pick_c(rng)];
        gs[q] = pick_g(rng);
    }

    Matrix out(static_cast<Eigen::Index>(quota), x_raw.cols());
    for (std::size_t g = 0; g < entries.size(); ++g) {
        std::vector<std::size_t> rows;
        std::vector<std::size_t> src;
        std::vector<int> cond;
        for (std::size_t q = 0; q < quota; ++q) {
            if (gs[q] != g) continue;
            rows.push_back(q);
            src.push_back(xs[q]);
            cond.push_back(cs[q]);
        }
        if (rows.empty()) continue;
        const BankEntry& e = *entries[g];
        const Matrix input = conditioned(e.normalizer.standardized(select_rows(x_raw, src)), cond, bank.vocabulary.size());
        const Matrix pred = e.normalizer.inverse(translate(e.generator, e.residual, input));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            out.row(static_cast<Eigen::Index>(rows[r])) = pred.row(static_cast<Eigen::Index>(r));
        }
    }
    require_finite(out, "predicted samples");
    return out;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

constexpr const char* kManifestFormat = "driftforge-predictor-bank-v1";

void write_f64_le(const std::filesystem::path& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (double v : values) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffU);
        out.write(reinterpret_cast<const char*>(bytes), 8);
    }
}

std::vector<double> read_f64_le(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<double> out;
    unsigned char bytes[8];
    while (in.read(reinterpret_cast<char*>(bytes), 8)) {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        out.push_back(std::bit_cast<double>(bits));
    }
    if (in.gcount() != 0) throw DataError(path.string() + " is not a whole number of float64 values");
    return out;
}

json layers_to_json(const nn::MlpModel& m) {
    json arr = json::array();
    for (const nn::Layer& l : m.layers()) {
        arr.push_back({{"kind", nn::to_string(l.spec.kind)},
                       {"in_dim", l.spec.in_dim},
                       {"out_dim", l.spec.out_dim},
                       {"dropout_rate", l.spec.dropout_rate},
                       {"bn_momentum", l.spec.bn_momentum}});
    }
    return arr;
}

std::vector<nn::LayerSpec> layers_from_json(const json& arr) {
    std::vector<nn::LayerSpec> out;
    for (const json& j : arr) {
        nn::LayerSpec s;
        s.kind = nn::layer_kind_from_string(j.at("kind").get<std::string>());
        s.in_dim = j.at("in_dim").get<std::size_t>();
        s.out_dim = j.at("out_dim").get<std::size_t>();
        s.dropout_rate = j.at("dropout_rate").get<double>();
        s.bn_momentum = j.at("bn_momentum").get<double>();
        out.push_back(s);
    }
    return out;
}

std::vector<double> normalizer_values(const Normalizer& n) {
    std::vector<double> out;
    for (const RowVector* v : {&n.q01, &n.q99, &n.mean, &n.std}) out.insert(out.end(), v->data(), v->data() + v->size());
    return out;
}

Normalizer normalizer_from_values(const std::vector<double>& v, std::size_t dim) {
    if (v.size() != 4 * dim) throw DataError("normaliser file has the wrong length");
    Normalizer n;
    RowVector* parts[] = {&n.q01, &n.q99, &n.mean, &n.std};
    for (std::size_t p = 0; p < 4; ++p) {
        parts[p]->resize(static_cast<Eigen::Index>(dim));
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(p * dim),
                  v.begin() + static_cast<std::ptrdiff_t>((p + 1) * dim), parts[p]->data());
    }
    return n;
}

} // namespace

void save_bank(const PredictorBank& bank, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = kManifestFormat;
    manifest["dim"] = bank.dim;
    manifest["vocabulary"] = bank.vocabulary;
    manifest["entries"] = json::array();
    for (const auto& [k, e] : bank.entries) {
        const std::string params = "generator_k" + std::to_string(k) + ".f64";
        const std::string norm = "normalizer_k" + std::to_string(k) + ".f64";
        const std::vector<double> flat = e.generator.flat_parameters();
        write_f64_le(dir / params, flat);
        write_f64_le(dir / norm, normalizer_values(e.normalizer));
        manifest["entries"].push_back({{"k", k},
                                       {"layers", layers_to_json(e.generator)},
                                       {"residual", e.residual},
                                       {"parameters", params},
                                       {"parameter_values", flat.size()},
                                       {"normalizer", norm}});
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw DataError("cannot write bank manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

PredictorBank load_bank(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw DataError("no manifest.json in " + dir.string());
    try {
        const json manifest = json::parse(in);
        if (manifest.at("format").get<std::string>() != kManifestFormat) {
            throw DataError("unsupported predictor bank format");
        }
        PredictorBank bank;
        bank.dim = manifest.at("dim").get<std::size_t>();
        bank.vocabulary = manifest.at("vocabulary").get<std::vector<std::string>>();
        for (const json& e : manifest.at("entries")) {
            BankEntry entry;
            entry.k = e.at("k").get<int>();
            entry.generator = nn::MlpModel(layers_from_json(e.at("layers")), 0);
            entry.generator.set_flat_parameters(read_f64_le(dir / e.at("parameters").get<std::string>()));
            entry.generator.set_mode(nn::Mode::eval);
            entry.residual = e.value("residual", false);
            entry.normalizer = normalizer_from_values(read_f64_le(dir / e.at("normalizer").get<std::string>()), bank.dim);
            bank.entries.emplace(entry.k, std::move(entry));
        }
        return bank;
    } catch (const json::exception& e) {
        throw DataError("malformed bank manifest: " + std::string(e.what()));
    }
}

} // namespace driftforge::gan
