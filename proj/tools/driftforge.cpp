#include "driftforge/config.hpp"
#include "driftforge/dataset.hpp"
#include "driftforge/error.hpp"
#include "driftforge/feature_select.hpp"
#include "driftforge/gan.hpp"
#include "driftforge/harness.hpp"
#include "driftforge/mmd.hpp"
#include "driftforge/report.hpp"
#include "driftforge/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace driftforge;

namespace {

struct Common {
    std::optional<std::uint64_t> seed;
    fs::path out_dir;
    fs::path out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
    cmd->add_option("--seed", c.seed, "Seed overriding the configured one");
    cmd->add_option("--out-dir", c.out_dir, "Directory against which relative outputs are resolved");
    cmd->add_option("--out", c.out, out_help);
}

fs::path resolve_out(const Common& c, const fs::path& fallback) {
    fs::path p = c.out.empty() ? fallback : c.out;
    if (!c.out_dir.empty() && p.is_relative()) p = c.out_dir / p;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
}

void log(const std::string& msg) { std::cerr << "driftforge: " << msg << '\n'; }

std::vector<TimeSplitSpec> splits_or_throw(int n, int w1, int w2) {
    auto s = enumerate_splits(n, w1, w2);
    if (s.empty()) throw DataError("dataset has too few periods for w1 = " + std::to_string(w1));
    return s;
}

std::vector<std::size_t> earliest_window(const std::vector<Sample>& samples, const PeriodPartition& part, int w1) {
    std::vector<std::size_t> out;
    for (int p = 1; p <= std::min(w1, part.count()); ++p) {
        for (std::size_t i : part.period(p)) {
            if (samples[i].labeled()) out.push_back(i);
        }
    }
    return out;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"driftforge: time-split malware drift experiments"};
    app.require_subcommand(1);

    // synth
    Common synth_c;
    fs::path synth_config;
    auto* synth = app.add_subcommand("synth", "Generate the synthetic drifting benchmark as JSONL");
    synth->add_option("--config", synth_config, "Config file with a [synth] section");
    add_common(synth, synth_c, "Output JSONL path");

    // ingest
    Common ingest_c;
    fs::path ingest_data;
    std::int64_t ingest_days = 7;
    auto* ingest = app.add_subcommand("ingest", "Validate a JSONL dataset and summarise it");
    ingest->add_option("--data", ingest_data, "Input JSONL")->required();
    ingest->add_option("--period-days", ingest_days, "Period length in days");
    add_common(ingest, ingest_c, "Optional canonical JSONL copy");

    // split
    Common split_c;
    fs::path split_data;
    std::int64_t split_days = 7;
    int split_w1 = 3;
    int split_w2 = 0;
    auto* split = app.add_subcommand("split", "Partition into periods, assign roles and list time splits");
    split->add_option("--data", split_data, "Input JSONL")->required();
    split->add_option("--period-days", split_days, "Period length in days");
    split->add_option("--w1", split_w1, "Training window in periods");
    split->add_option("--w2", split_w2, "Additional testing periods");
    add_common(split, split_c, "Output JSON path");

    // select-features
    Common sel_c;
    fs::path sel_data;
    std::size_t sel_k = 100;
    double sel_l1 = 1e-3;
    std::int64_t sel_days = 7;
    int sel_w1 = 3;
    auto* sel = app.add_subcommand("select-features", "L1 logistic feature ranking on the earliest training window");
    sel->add_option("--data", sel_data, "Input JSONL")->required();
    sel->add_option("--k", sel_k, "Number of features to keep");
    sel->add_option("--l1", sel_l1, "L1 penalty strength");
    sel->add_option("--period-days", sel_days, "Period length in days");
    sel->add_option("--w1", sel_w1, "Training window in periods");
    add_common(sel, sel_c, "Output JSON path");

    // rank-families
    Common rank_c;
    fs::path rank_data;
    std::size_t rank_top = 21;
    std::size_t rank_min = 10;
    std::int64_t rank_days = 7;
    int rank_w1 = 3;
    int rank_w2 = 0;
    auto* rank = app.add_subcommand("rank-families", "Rank malware families by summed MMD drift");
    rank->add_option("--data", rank_data, "Input JSONL")->required();
    rank->add_option("--top", rank_top, "Number of families kept");
    rank->add_option("--min-count", rank_min, "Minimum samples per side for a split to count");
    rank->add_option("--period-days", rank_days, "Period length in days");
    rank->add_option("--w1", rank_w1, "Training window in periods");
    rank->add_option("--w2", rank_w2, "Additional testing periods");
    add_common(rank, rank_c, "Output CSV path");

    // train-gan
    Common gan_c;
    fs::path gan_data;
    fs::path gan_config;
    int gan_k = 0;
    auto* train_gan = app.add_subcommand("train-gan", "Train the predictor bank usable at split k");
    train_gan->add_option("--data", gan_data, "Input JSONL")->required();
    train_gan->add_option("--split-k", gan_k, "First testing period of the split")->required();
    train_gan->add_option("--config", gan_config, "Config file supplying [experiment] and [gan] settings");
    add_common(train_gan, gan_c, "Output bank directory");

    // run
    Common run_c;
    fs::path run_config;
    bool run_resume = false;
    auto* run = app.add_subcommand("run", "Run the configured experiment and write the results CSV");
    run->add_option("--config", run_config, "Experiment config")->required();
    run->add_flag("--resume", run_resume, "Continue an interrupted run, keeping completed cells");
    add_common(run, run_c, "Results CSV path");

    // report
    Common rep_c;
    fs::path rep_results;
    std::string rep_kind = "tpr";
    double rep_target = 0.01;
    std::vector<std::string> rep_expected;
    auto* rep = app.add_subcommand("report", "Aggregate results over seeds and emit CSV + SVG");
    rep->add_option("--results", rep_results, "Results CSV")->required();
    rep->add_option("--kind", rep_kind, "tpr, f1, fpr, degradation or robustness");
    rep->add_option("--fpr-target", rep_target, "FPR target drawn in the chart");
    rep->add_option("--expect", rep_expected, "Series expected in the chart");
    add_common(rep, rep_c, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    if (*synth) {
        SynthConfig cfg;
        if (!synth_config.empty()) {
            const config::RunConfig rc = config::load_config_file(synth_config);
            if (rc.synth) cfg = *rc.synth;
        }
        if (synth_c.seed) cfg.seed = *synth_c.seed;
        const auto samples = synth_generate(cfg);
        const fs::path out = resolve_out(synth_c, "synth.jsonl");
        write_jsonl(out, samples);
        log("wrote " + std::to_string(samples.size()) + " samples to " + out.string());
    } else if (*ingest) {
        const auto samples = ingest_jsonl(ingest_data);
        const auto part = partition_by_time(samples, ingest_days * kSecondsPerDay);
        std::size_t mal = 0;
        std::size_t ben = 0;
        for (const auto& s : samples) {
            mal += s.label == Label::malware;
            ben += s.label == Label::benign;
        }
        std::cout << "samples " << samples.size() << "\nbenign " << ben << "\nmalware " << mal << "\nunlabeled "
                  << samples.size() - mal - ben << "\ndim " << feature_dimension(samples) << "\nperiods "
                  << part.count() << '\n';
        if (!ingest_c.out.empty()) write_jsonl(resolve_out(ingest_c, ""), samples);
    } else if (*split) {
        const auto samples = ingest_jsonl(split_data);
        PeriodPartition part = partition_by_time(samples, split_days * kSecondsPerDay);
        part.roles = assign_roles(part, {}, derive_seed(split_c.seed.value_or(1), {0x201e5}));
        nlohmann::ordered_json j;
        j["period_seconds"] = part.period_length;
        j["origin"] = part.origin;
        j["periods"] = nlohmann::ordered_json::array();
        for (int p = 1; p <= part.count(); ++p) {
            std::size_t counts[3] = {0, 0, 0};
            for (std::size_t i : part.period(p)) counts[static_cast<int>(part.roles[i])] += 1;
            j["periods"].push_back({{"period", p},
                                    {"start", part.period_start(p)},
                                    {"samples", part.period(p).size()},
                                    {"train", counts[0]},
                                    {"val", counts[1]},
                                    {"test", counts[2]}});
        }
        j["splits"] = nlohmann::ordered_json::array();
        for (const auto& s : enumerate_splits(part.count(), split_w1, split_w2)) {
            j["splits"].push_back({{"k", s.k}, {"w1", s.w1}, {"w2", s.w2}});
        }
        nlohmann::ordered_json roles = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < samples.size(); ++i) roles[samples[i].id] = to_string(part.roles[i]);
        j["roles"] = roles;
        const fs::path out = resolve_out(split_c, "splits.json");
        std::ofstream(out) << j.dump(2) << '\n';
        log("wrote " + out.string());
    } else if (*sel) {
        const auto samples = ingest_jsonl(sel_data);
        const auto part = partition_by_time(samples, sel_days * kSecondsPerDay);
        LabeledBatch b = gather(samples, earliest_window(samples, part, sel_w1));
        fit_normalizer(b.x).apply(b.x);
        const auto feats = nn::l1_logistic_select(b.x, b.y, sel_l1, sel_k);
        nlohmann::ordered_json j;
        j["k"] = sel_k;
        j["l1"] = sel_l1;
        j["features"] = feats;
        const fs::path out = resolve_out(sel_c, "features.json");
        std::ofstream(out) << j.dump(2) << '\n';
        log("wrote " + out.string());
    } else if (*rank) {
        const auto samples = ingest_jsonl(rank_data);
        const auto part = partition_by_time(samples, rank_days * kSecondsPerDay);
        drift::RankOptions opts;
        opts.top_m = rank_top;
        opts.min_count = rank_min;
        opts.seed = rank_c.seed.value_or(0);
        const auto report = drift::rank_families(samples, part, splits_or_throw(part.count(), rank_w1, rank_w2), opts);
        const fs::path out = resolve_out(rank_c, "families.csv");
        std::ofstream f(out);
        drift::write_csv(f, report);
        log("wrote " + out.string());
    } else if (*train_gan) {
        harness::ExperimentConfig cfg;
        if (!gan_config.empty()) cfg = config::load_config_file(gan_config).experiment;
        const std::uint64_t seed = gan_c.seed.value_or(cfg.seeds.front());
        cfg.seeds = {seed};
        if (std::find(cfg.methods.begin(), cfg.methods.end(), harness::MethodTag::ccygan) == cfg.methods.end()) {
            cfg.methods.push_back(harness::MethodTag::ccygan);
        }
        const auto dataset = ingest_jsonl(gan_data);
        harness::PreparedData prep = harness::prepare_data(cfg, dataset);
        prep.partition.roles = assign_roles(prep.partition, cfg.roles, derive_seed(seed, {0x201e5}));
        gan::BankOptions bo;
        bo.w1 = cfg.w1;
        bo.gan = cfg.gan;
        bo.seed = derive_seed(seed, {0xba4c});
        std::vector<std::string> warnings;
        const auto bank = gan::build_predictor_bank(prep.samples, prep.partition, gan_k, prep.vocabulary, bo, nullptr,
                                                    &warnings);
        for (const auto& w : warnings) log("warning: " + w);
        if (bank.empty()) throw gan::MethodUnavailable("no predictor can be trained before period " + std::to_string(gan_k));
        const fs::path out = resolve_out(gan_c, "bank");
        gan::save_bank(bank, out);
        log("wrote " + std::to_string(bank.size()) + " predictors to " + out.string());
    } else if (*run) {
        config::RunConfig rc = config::load_config_file(run_config);
        if (run_c.seed) rc.experiment.seeds = {*run_c.seed};
        std::vector<Sample> dataset;
        if (rc.data) {
            dataset = ingest_jsonl(*rc.data);
        } else if (rc.synth) {
            dataset = synth_generate(*rc.synth);
        } else {
            throw UsageError("config names neither `data` nor a [synth] section");
        }
        harness::RunOptions opts;
        opts.out = resolve_out(run_c, "results.csv");
        opts.resume = run_resume;
        opts.log = log;
        const auto summary = harness::run_experiment(rc.experiment, dataset, opts);
        log("wrote " + std::to_string(summary.records.size()) + " records to " + opts.out.string() + " (" +
            std::to_string(summary.skipped.size()) + " cells skipped)");
    } else if (*rep) {
        const auto kind = report::report_kind_from_string(rep_kind);
        const auto records = harness::read_results_csv(rep_results);
        const auto rows = report::aggregate(records, kind);
        report::ChartOptions co;
        co.fpr_target = rep_target;
        co.expected_series = rep_expected;
        const auto emitted = report::emit_report(rows, kind, resolve_out(rep_c, "report"), co);
        for (const auto& w : emitted.warnings) log("warning: " + w);
        log("wrote " + emitted.csv.string() + " and " + emitted.svg.string());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    try {
        return run_cli(argc, argv);
    } catch (const Error& e) {
        log(std::string("error: ") + e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        log(std::string("internal error: ") + e.what());
        return static_cast<int>(ExitCode::numerical);
    }
}
