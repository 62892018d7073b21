#include "driftforge/synth.hpp"

#include "driftforge/error.hpp"
#include "driftforge/feature_select.hpp"
#include "driftforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace driftforge {

void SynthConfig::validate() const {
    if (n_families < 1 || n_periods < 1 || dim < 1 || samples_per_period_per_class < 1 ||
        benign_modes < 1) {
        throw UsageError("synthetic config counts must be at least 1");
    }
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(adoption_rate) || !prob(unlabeled_fraction) || !prob(adoption_block) ||
        !prob(adaptation_fraction)) {
        throw UsageError("synthetic config probabilities must lie in [0, 1]");
    }
    if (drift_velocity < 0.0 || adaptation_strength < 0.0 || noise_scale < 0.0 || separation < 0.0 ||
        benign_spread < 0.0 || benign_pull < 0.0) {
        throw UsageError("synthetic config scales must be non-negative");
    }
    if (period_seconds <= 0) throw UsageError("period length must be positive");
}

std::string synth_family_name(std::size_t f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "family_%02zu", f);
    return buf;
}

namespace {

Eigen::VectorXd gaussian_vector(Rng& rng, std::size_t d, double scale) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::VectorXd v(static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = scale * n(rng);
    return v;
}

Eigen::VectorXd unit_vector(Rng& rng, std::size_t d) {
    Eigen::VectorXd v = gaussian_vector(rng, d, 1.0);
    const double norm = v.norm();
    return norm > 0.0 ? Eigen::VectorXd(v / norm) : v;
}

} // namespace

std::vector<Sample> synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.dim;
    const std::size_t families = cfg.n_families;
    Rng rng = make_rng(cfg.seed, {0x5e77});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    std::vector<Eigen::VectorXd> benign_centres;
    for (std::size_t m = 0; m < cfg.benign_modes; ++m) {
        benign_centres.push_back(gaussian_vector(rng, d, cfg.benign_spread));
    }
    Eigen::VectorXd benign_mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (const auto& c : benign_centres) benign_mean += c;
    benign_mean /= static_cast<double>(benign_centres.size());

    std::vector<Eigen::VectorXd> base(families);
    std::vector<Eigen::VectorXd> offset(families, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d)));
    std::vector<Eigen::VectorXd> velocity(families, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d)));
    std::uniform_int_distribution<std::size_t> pick_mode(0, cfg.benign_modes - 1);
    for (std::size_t f = 0; f < families; ++f) {
        const Eigen::VectorXd& anchor = benign_centres[pick_mode(rng)];
        base[f] = anchor + cfg.separation * unit_vector(rng, d);
        Eigen::VectorXd dir = unit_vector(rng, d);
        Eigen::VectorXd toward = anchor - base[f];
        if (toward.norm() > 0.0) dir += cfg.benign_pull * toward.normalized();
        if (dir.norm() > 0.0) dir.normalize();
        const double speed = 0.5 + unif(rng);
        if (f >= cfg.stationary_families) velocity[f] = cfg.drift_velocity * speed * dir;
    }

    const std::int64_t start =
        (cfg.start_timestamp / cfg.period_seconds) * cfg.period_seconds;
    const std::size_t n = cfg.samples_per_period_per_class;
    const auto block = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(cfg.adoption_block * static_cast<double>(d))));
    const auto adapted = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(cfg.adaptation_fraction * static_cast<double>(d))));
    std::uniform_int_distribution<std::int64_t> offset_in_period(0, cfg.period_seconds - 1);

    std::vector<Sample> out;
    out.reserve(cfg.n_periods * n * 2);
    for (std::size_t t = 0; t < cfg.n_periods; ++t) {
        const std::size_t first = out.size();
        auto emit = [&](Label label, std::optional<std::string> family, const Eigen::VectorXd& mean) {
            Sample s;
            char id[48];
            std::snprintf(id, sizeof id, "p%02zu-%06zu", t, out.size() - first);
            s.id = id;
            s.timestamp = start + static_cast<std::int64_t>(t) * cfg.period_seconds + offset_in_period(rng);
            s.label = label;
            s.family = std::move(family);
            s.features.resize(d);
            for (std::size_t j = 0; j < d; ++j) {
                s.features[j] = mean(static_cast<Eigen::Index>(j)) + cfg.noise_scale * normal(rng);
            }
            if (cfg.unlabeled_fraction > 0.0 && unif(rng) < cfg.unlabeled_fraction) {
                s.label = Label::unlabeled;
            }
            out.push_back(std::move(s));
        };
        for (std::size_t i = 0; i < n; ++i) emit(Label::benign, std::nullopt, benign_centres[pick_mode(rng)]);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t f = i % families;
            emit(Label::malware, synth_family_name(f), Eigen::VectorXd(base[f] + offset[f]));
        }
        if (t + 1 == cfg.n_periods) break;

        // Evolve the drifting families for the next period.
        for (std::size_t f = cfg.stationary_families; f < families; ++f) offset[f] += velocity[f];

        if (cfg.adoption_rate > 0.0 && families > 1) {
            std::uniform_int_distribution<std::size_t> pick_family(0, families - 1);
            std::uniform_int_distribution<std::size_t> pick_start(0, d - block);
            for (std::size_t f = cfg.stationary_families; f < families; ++f) {
                if (unif(rng) >= cfg.adoption_rate) continue;
                std::size_t donor = pick_family(rng);
                if (donor == f) donor = (donor + 1) % families;
                const std::size_t s0 = pick_start(rng);
                offset[f].segment(static_cast<Eigen::Index>(s0), static_cast<Eigen::Index>(block)) =
                    offset[donor].segment(static_cast<Eigen::Index>(s0), static_cast<Eigen::Index>(block));
            }
        }

        if (cfg.adaptation_strength > 0.0 && families > cfg.stationary_families) {
            std::vector<std::size_t> rows(out.size() - first);
            std::iota(rows.begin(), rows.end(), first);
            LabeledBatch period = gather(out, rows);
            if (period.x.rows() > 0 &&
                std::count(period.y.begin(), period.y.end(), kMalwareClass) > 0 &&
                std::count(period.y.begin(), period.y.end(), kBenignClass) > 0) {
                const nn::LogisticFit probe = nn::fit_l1_logistic(period.x, period.y, 0.0, 100);
                std::vector<std::size_t> coords(d);
                std::iota(coords.begin(), coords.end(), std::size_t{0});
                std::stable_sort(coords.begin(), coords.end(), [&](std::size_t a, std::size_t b) {
                    return std::abs(probe.weights(static_cast<Eigen::Index>(a))) >
                           std::abs(probe.weights(static_cast<Eigen::Index>(b)));
                });
                coords.resize(adapted);
                for (std::size_t f = cfg.stationary_families; f < families; ++f) {
                    for (std::size_t c : coords) {
                        const auto j = static_cast<Eigen::Index>(c);
                        offset[f](j) += cfg.adaptation_strength * (benign_mean(j) - (base[f](j) + offset[f](j)));
                    }
                }
            }
        }
    }
    return out;
}

} // namespace driftforge
