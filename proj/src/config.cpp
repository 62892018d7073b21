#include "driftforge/config.hpp"

#include "driftforge/error.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace driftforge::config {

namespace {

class Parser {
public:
    Parser(const std::string& line, std::size_t lineno) : s_(line), line_(lineno) {}

    [[noreturn]] void fail(const std::string& msg) const {
        throw UsageError("config line " + std::to_string(line_) + ": " + msg);
    }

    void skip_ws() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }

    bool at_end() {
        skip_ws();
        return pos_ >= s_.size() || s_[pos_] == '#';
    }

    bool consume(char c) {
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    std::string key() {
        skip_ws();
        const std::size_t start = pos_;
        while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '-')) ++pos_;
        if (start == pos_) fail("expected a key");
        return s_.substr(start, pos_ - start);
    }

    Value value() {
        skip_ws();
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '"') return {string()};
        if (c == '[') {
            ++pos_;
            Array arr;
            if (consume(']')) return {arr};
            while (true) {
                Value v = value();
                if (std::holds_alternative<Array>(v.data)) fail("nested arrays are not supported");
                arr.push_back(std::move(v));
                if (consume(']')) break;
                if (!consume(',')) fail("expected ',' or ']' in array");
                if (consume(']')) break;
            }
            return {arr};
        }
        const std::size_t start = pos_;
        while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != '#' && s_[pos_] != ' ' &&
               s_[pos_] != '\t') {
            ++pos_;
        }
        std::string tok = s_.substr(start, pos_ - start);
        if (tok == "true") return {true};
        if (tok == "false") return {false};
        std::erase(tok, '_');
        const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
        if (!is_float) {
            std::int64_t v = 0;
            const char* first = tok.data() + (tok.starts_with('+') ? 1 : 0);
            const auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
            if (ec == std::errc() && ptr == tok.data() + tok.size()) return {v};
            fail("invalid value '" + tok + "'");
        }
        try {
            std::size_t used = 0;
            const double v = std::stod(tok, &used);
            if (used != tok.size()) fail("invalid number '" + tok + "'");
            return {v};
        } catch (const std::logic_error&) {
            fail("invalid number '" + tok + "'");
        }
    }

private:
    std::string string() {
        ++pos_;
        std::string out;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            char c = s_[pos_++];
            if (c == '\\') {
                if (pos_ >= s_.size()) fail("unterminated escape");
                const char e = s_[pos_++];
                switch (e) {
                case 'n': c = '\n'; break;
                case 't': c = '\t'; break;
                case '"': c = '"'; break;
                case '\\': c = '\\'; break;
                default: fail(std::string("unsupported escape \\") + e);
                }
            }
            out += c;
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return out;
    }

    const std::string& s_;
    std::size_t pos_ = 0;
    std::size_t line_;
};

} // namespace

Document parse_toml(const std::string& text) {
    Document doc;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        Parser p(line, lineno);
        if (p.at_end()) continue;
        if (p.consume('[')) {
            section = p.key();
            if (!p.consume(']')) p.fail("expected ']' after section name");
            if (!p.at_end()) p.fail("trailing characters after section header");
            continue;
        }
        const std::string key = p.key();
        if (!p.consume('=')) p.fail("expected '=' after key '" + key + "'");
        Value v = p.value();
        if (!p.at_end()) p.fail("trailing characters after value");
        const std::string full = section.empty() ? key : section + "." + key;
        if (!doc.emplace(full, std::move(v)).second) p.fail("duplicate key '" + full + "'");
    }
    return doc;
}

Document parse_toml_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_toml(ss.str());
}

namespace {

[[noreturn]] void type_error(const std::string& key, const char* expected) {
    throw UsageError("config key '" + key + "' must be " + expected);
}

double as_double(const std::string& key, const Value& v) {
    if (const auto* i = std::get_if<std::int64_t>(&v.data)) return static_cast<double>(*i);
    if (const auto* d = std::get_if<double>(&v.data)) return *d;
    type_error(key, "a number");
}

std::int64_t as_int(const std::string& key, const Value& v) {
    if (const auto* i = std::get_if<std::int64_t>(&v.data)) return *i;
    type_error(key, "an integer");
}

std::size_t as_count(const std::string& key, const Value& v) {
    const std::int64_t i = as_int(key, v);
    if (i < 0) type_error(key, "a non-negative integer");
    return static_cast<std::size_t>(i);
}

bool as_bool(const std::string& key, const Value& v) {
    if (const auto* b = std::get_if<bool>(&v.data)) return *b;
    type_error(key, "a boolean");
}

std::string as_string(const std::string& key, const Value& v) {
    if (const auto* s = std::get_if<std::string>(&v.data)) return *s;
    type_error(key, "a string");
}

template <typename T, typename F>
std::vector<T> as_array(const std::string& key, const Value& v, F element) {
    const auto* a = std::get_if<Array>(&v.data);
    if (a == nullptr) type_error(key, "an array");
    std::vector<T> out;
    for (const Value& e : *a) out.push_back(element(key, e));
    return out;
}

using Setter = std::function<void(const std::string&, const Value&)>;

} // namespace

RunConfig load_config(const Document& doc, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    harness::ExperimentConfig& e = cfg.experiment;
    gan::GanTrainConfig& g = e.gan;
    SynthConfig synth;
    bool have_synth = false;
    bool classifier_set = false;
    bool minibatch_set = false;

    const std::map<std::string, Setter> setters = {
        {"data", [&](auto& k, auto& v) {
             std::filesystem::path p = as_string(k, v);
             cfg.data = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
         }},
        {"experiment.study", [&](auto& k, auto& v) { e.study = harness::study_from_string(as_string(k, v)); }},
        {"experiment.w1", [&](auto& k, auto& v) { e.w1 = static_cast<int>(as_int(k, v)); }},
        {"experiment.w2", [&](auto& k, auto& v) { e.w2 = static_cast<int>(as_int(k, v)); }},
        {"experiment.period_days", [&](auto& k, auto& v) { e.period_seconds = as_int(k, v) * kSecondsPerDay; }},
        {"experiment.period_seconds", [&](auto& k, auto& v) { e.period_seconds = as_int(k, v); }},
        {"experiment.splits", [&](auto& k, auto& v) {
             e.splits = as_array<int>(k, v, [](auto& kk, auto& vv) { return static_cast<int>(as_int(kk, vv)); });
         }},
        {"experiment.methods", [&](auto& k, auto& v) {
             e.methods = as_array<harness::MethodTag>(
                 k, v, [](auto& kk, auto& vv) { return harness::method_from_string(as_string(kk, vv)); });
         }},
        {"experiment.fpr_targets", [&](auto& k, auto& v) { e.fpr_targets = as_array<double>(k, v, as_double); }},
        {"experiment.seeds", [&](auto& k, auto& v) {
             e.seeds = as_array<std::uint64_t>(k, v, [](auto& kk, auto& vv) { return static_cast<std::uint64_t>(as_count(kk, vv)); });
         }},
        {"experiment.max_epochs", [&](auto& k, auto& v) { e.max_epochs = as_count(k, v); }},
        {"experiment.minibatch_size", [&](auto& k, auto& v) {
             e.minibatch_size = as_count(k, v);
             minibatch_set = true;
         }},
        {"experiment.batches_per_epoch", [&](auto& k, auto& v) { e.batches_per_epoch = as_count(k, v); }},
        {"experiment.learning_rate", [&](auto& k, auto& v) { e.learning_rate = as_double(k, v); }},
        {"experiment.feature_mode", [&](auto& k, auto& v) { e.feature_mode = harness::feature_mode_from_string(as_string(k, v)); }},
        {"experiment.feature_count", [&](auto& k, auto& v) { e.feature_count = as_count(k, v); }},
        {"experiment.feature_l1", [&](auto& k, auto& v) { e.feature_l1 = as_double(k, v); }},
        {"experiment.top_families", [&](auto& k, auto& v) { e.top_families = as_count(k, v); }},
        {"experiment.classifier_hidden", [&](auto& k, auto& v) {
             e.classifier.hidden = as_array<std::size_t>(k, v, as_count);
             classifier_set = true;
         }},
        {"experiment.classifier_batchnorm", [&](auto& k, auto& v) { e.classifier.batchnorm = as_bool(k, v); }},
        {"experiment.classifier_dropout", [&](auto& k, auto& v) { e.classifier.dropout = as_double(k, v); }},
        {"experiment.role_train", [&](auto& k, auto& v) { e.roles.train = as_double(k, v); }},
        {"experiment.role_val", [&](auto& k, auto& v) { e.roles.val = as_double(k, v); }},
        {"experiment.role_test", [&](auto& k, auto& v) { e.roles.test = as_double(k, v); }},
        {"experiment.attack_method", [&](auto& k, auto& v) { e.attack.method = attacks::attack_method_from_string(as_string(k, v)); }},
        {"experiment.attack_epsilon", [&](auto& k, auto& v) { e.attack.epsilon = as_double(k, v); }},
        {"experiment.attack_steps", [&](auto& k, auto& v) { e.attack.steps = static_cast<int>(as_int(k, v)); }},

        {"gan.learning_rate", [&](auto& k, auto& v) { g.learning_rate = as_double(k, v); }},
        {"gan.total_steps", [&](auto& k, auto& v) { g.total_steps = as_count(k, v); }},
        {"gan.minibatch", [&](auto& k, auto& v) { g.minibatch = as_count(k, v); }},
        {"gan.alternation_period", [&](auto& k, auto& v) { g.alternation_period = as_count(k, v); }},
        {"gan.lambda_cyc", [&](auto& k, auto& v) { g.lambda_cyc = as_double(k, v); }},
        {"gan.beta1", [&](auto& k, auto& v) { g.beta1 = as_double(k, v); }},
        {"gan.beta2", [&](auto& k, auto& v) { g.beta2 = as_double(k, v); }},
        {"gan.generator_hidden", [&](auto& k, auto& v) { g.arch.generator_hidden = as_array<std::size_t>(k, v, as_count); }},
        {"gan.discriminator_hidden", [&](auto& k, auto& v) { g.arch.discriminator_hidden = as_array<std::size_t>(k, v, as_count); }},
        {"gan.residual_generator", [&](auto& k, auto& v) { g.arch.residual_generator = as_bool(k, v); }},
        {"gan.discriminator_dropout", [&](auto& k, auto& v) { g.arch.discriminator_dropout = as_double(k, v); }},

        {"synth.n_families", [&](auto& k, auto& v) { synth.n_families = as_count(k, v); }},
        {"synth.n_periods", [&](auto& k, auto& v) { synth.n_periods = as_count(k, v); }},
        {"synth.dim", [&](auto& k, auto& v) { synth.dim = as_count(k, v); }},
        {"synth.samples_per_period_per_class", [&](auto& k, auto& v) { synth.samples_per_period_per_class = as_count(k, v); }},
        {"synth.drift_velocity", [&](auto& k, auto& v) { synth.drift_velocity = as_double(k, v); }},
        {"synth.adoption_rate", [&](auto& k, auto& v) { synth.adoption_rate = as_double(k, v); }},
        {"synth.adaptation_strength", [&](auto& k, auto& v) { synth.adaptation_strength = as_double(k, v); }},
        {"synth.noise_scale", [&](auto& k, auto& v) { synth.noise_scale = as_double(k, v); }},
        {"synth.seed", [&](auto& k, auto& v) { synth.seed = static_cast<std::uint64_t>(as_count(k, v)); }},
        {"synth.stationary_families", [&](auto& k, auto& v) { synth.stationary_families = as_count(k, v); }},
        {"synth.benign_modes", [&](auto& k, auto& v) { synth.benign_modes = as_count(k, v); }},
        {"synth.benign_spread", [&](auto& k, auto& v) { synth.benign_spread = as_double(k, v); }},
        {"synth.separation", [&](auto& k, auto& v) { synth.separation = as_double(k, v); }},
        {"synth.benign_pull", [&](auto& k, auto& v) { synth.benign_pull = as_double(k, v); }},
        {"synth.adoption_block", [&](auto& k, auto& v) { synth.adoption_block = as_double(k, v); }},
        {"synth.adaptation_fraction", [&](auto& k, auto& v) { synth.adaptation_fraction = as_double(k, v); }},
        {"synth.unlabeled_fraction", [&](auto& k, auto& v) { synth.unlabeled_fraction = as_double(k, v); }},
        {"synth.period_days", [&](auto& k, auto& v) { synth.period_seconds = as_int(k, v) * kSecondsPerDay; }},
        {"synth.start_timestamp", [&](auto& k, auto& v) { synth.start_timestamp = as_int(k, v); }},
    };

    for (const auto& [key, value] : doc) {
        const auto it = setters.find(key);
        if (it == setters.end()) throw UsageError("unknown config key '" + key + "'");
        if (key.starts_with("synth.")) have_synth = true;
        it->second(key, value);
    }
    if (e.feature_mode == harness::FeatureMode::full) {
        if (!classifier_set) e.classifier.hidden = nn::full_feature_classifier().hidden;
        if (!minibatch_set) e.minibatch_size = 128;
    }
    e.validate();
    if (have_synth) {
        synth.validate();
        cfg.synth = synth;
    }
    return cfg;
}

RunConfig load_config_file(const std::filesystem::path& path) {
    return load_config(parse_toml_file(path), path.parent_path());
}

} // namespace driftforge::config
