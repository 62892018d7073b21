#include "driftforge/report.hpp"

#include "driftforge/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

namespace driftforge::report {

namespace {

constexpr std::pair<ReportKind, const char*> kKinds[] = {
    {ReportKind::tpr, "tpr"},
    {ReportKind::f1, "f1"},
    {ReportKind::fpr, "fpr"},
    {ReportKind::degradation, "degradation"},
    {ReportKind::robustness, "robustness"},
};

bool is_robustness_method(const std::string& m) { return m.find("_vs_") != std::string::npos; }

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string coord(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

std::string to_string(ReportKind kind) {
    for (const auto& [k, s] : kKinds) {
        if (k == kind) return s;
    }
    return "?";
}

ReportKind report_kind_from_string(const std::string& name) {
    for (const auto& [k, s] : kKinds) {
        if (name == s) return k;
    }
    throw UsageError("unknown report kind '" + name + "'");
}

std::vector<AggregateRow> aggregate(std::span<const harness::MetricsRecord> records, ReportKind kind) {
    if (records.empty()) throw DataError("no records to aggregate");
    std::map<std::tuple<std::string, double, int>, std::vector<double>> groups;
    for (const auto& r : records) {
        const bool robust = is_robustness_method(r.method);
        if ((kind == ReportKind::robustness) != robust) continue;
        std::string series = r.method;
        double value = r.tpr;
        switch (kind) {
        case ReportKind::f1: value = r.f1; break;
        case ReportKind::fpr: value = r.fpr; break;
        case ReportKind::degradation: {
            char buf[32];
            std::snprintf(buf, sizeof buf, "window_k%02d", r.split_k);
            series = buf;
            break;
        }
        default: break;
        }
        auto& bucket = groups[{series, r.fpr_target, r.test_period}];
        if (!std::isnan(value)) bucket.push_back(value);
    }
    std::vector<AggregateRow> out;
    for (auto& [key, values] : groups) {
        if (values.empty()) continue;
        std::sort(values.begin(), values.end());
        const auto n = static_cast<double>(values.size());
        double sum = 0.0;
        for (double v : values) sum += v;
        const double mean = sum / n;
        double sem = 0.0;
        if (values.size() > 1) {
            double ss = 0.0;
            for (double v : values) ss += (v - mean) * (v - mean);
            sem = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
        }
        out.push_back({std::get<0>(key), std::get<2>(key), std::get<1>(key), mean, sem, values.size()});
    }
    if (out.empty()) throw DataError("no records of kind '" + to_string(kind) + "' to aggregate");
    return out;
}

void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows) {
    out << kAggregateHeader << '\n';
    for (const auto& r : rows) {
        out << r.series << ',' << r.test_period << ',' << num(r.fpr_target) << ',' << num(r.mean) << ',' << num(r.sem)
            << ',' << r.n_seeds << '\n';
    }
}

std::vector<AggregateRow> read_aggregate_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kAggregateHeader) throw DataError("aggregate CSV has an unexpected header");
    std::vector<AggregateRow> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string f[6];
        for (auto& field : f) {
            if (!std::getline(ls, field, ',')) throw DataError("aggregate row has too few fields: " + line);
        }
        try {
            out.push_back({f[0], std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                           static_cast<std::size_t>(std::stoull(f[5]))});
        } catch (const std::logic_error&) {
            throw DataError("malformed aggregate row: " + line);
        }
    }
    return out;
}

std::string render_svg(std::span<const AggregateRow> rows, ReportKind kind, const ChartOptions& options,
                       std::vector<std::string>* warnings) {
    auto warn = [&](const std::string& w) {
        if (warnings) warnings->push_back(w);
    };
    std::set<double> targets;
    for (const auto& r : rows) targets.insert(r.fpr_target);
    if (targets.empty()) throw DataError("nothing to chart");
    double target = options.fpr_target;
    if (!targets.contains(target)) {
        target = *targets.begin();
        warn("FPR target " + num(options.fpr_target) + " absent; charting " + num(target));
    }

    std::map<std::string, std::vector<const AggregateRow*>> series;
    int pmin = 0;
    int pmax = 0;
    double ylo = 0.0;
    double yhi = 1.0;
    bool first = true;
    for (const auto& r : rows) {
        if (r.fpr_target != target) continue;
        series[r.series].push_back(&r);
        if (first) {
            pmin = pmax = r.test_period;
            first = false;
        }
        pmin = std::min(pmin, r.test_period);
        pmax = std::max(pmax, r.test_period);
        ylo = std::min(ylo, r.mean - r.sem);
        yhi = std::max(yhi, r.mean + r.sem);
    }
    for (auto& [name, pts] : series) {
        std::sort(pts.begin(), pts.end(), [](auto* a, auto* b) { return a->test_period < b->test_period; });
    }
    std::vector<std::string> missing;
    for (const auto& s : options.expected_series) {
        if (!series.contains(s)) missing.push_back(s);
    }
    if (!missing.empty()) {
        std::string msg = "missing series:";
        for (const auto& m : missing) msg += " " + m;
        warn(msg);
    }

    constexpr double width = 760.0;
    constexpr double height = 440.0;
    constexpr double left = 70.0;
    constexpr double right = 190.0;
    constexpr double top = 40.0;
    constexpr double bottom = 60.0;
    const double pw = width - left - right;
    const double ph = height - top - bottom;
    auto xpos = [&](int p) {
        if (pmax == pmin) return left + pw / 2.0;
        return left + pw * static_cast<double>(p - pmin) / static_cast<double>(pmax - pmin);
    };
    auto ypos = [&](double v) { return top + ph * (yhi - v) / (yhi - ylo); };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    const std::string metric = kind == ReportKind::fpr ? "FPR" : kind == ReportKind::f1 ? "F1" : "TPR";

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << ' ' << height << "\" data-kind=\"" << to_string(kind)
        << "\" data-fpr-target=\"" << num(target) << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << coord(left) << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << metric
        << " per test period (" << to_string(kind) << ", FPR target " << num(target) << ")</text>\n";

    svg << "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
    svg << "<line x1=\"" << coord(left) << "\" y1=\"" << coord(top + ph) << "\" x2=\"" << coord(left + pw) << "\" y2=\""
        << coord(top + ph) << "\"/>\n";
    svg << "<line x1=\"" << coord(left) << "\" y1=\"" << coord(top) << "\" x2=\"" << coord(left) << "\" y2=\""
        << coord(top + ph) << "\"/>\n";
    svg << "</g>\n<g class=\"ticks\" font-family=\"sans-serif\" font-size=\"11\">\n";
    const int step = std::max(1, (pmax - pmin) / 12 + 1);
    for (int p = pmin; p <= pmax; p += step) {
        svg << "<text x=\"" << coord(xpos(p)) << "\" y=\"" << coord(top + ph + 16) << "\" text-anchor=\"middle\">" << p
            << "</text>\n";
    }
    for (int i = 0; i <= 5; ++i) {
        const double v = ylo + (yhi - ylo) * i / 5.0;
        svg << "<text x=\"" << coord(left - 6) << "\" y=\"" << coord(ypos(v) + 4) << "\" text-anchor=\"end\">"
            << coord(v) << "</text>\n";
    }
    svg << "<text x=\"" << coord(left + pw / 2) << "\" y=\"" << coord(height - 16)
        << "\" text-anchor=\"middle\">test period</text>\n";
    svg << "</g>\n";

    std::size_t idx = 0;
    for (const auto& [name, pts] : series) {
        const char* color = palette[idx % std::size(palette)];
        const std::string esc = xml_escape(name);
        svg << "<g class=\"series\" data-series=\"" << esc << "\">\n";
        svg << "<polygon class=\"band\" fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
        for (const auto* r : pts) svg << coord(xpos(r->test_period)) << ',' << coord(ypos(r->mean + r->sem)) << ' ';
        for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
            svg << coord(xpos((*it)->test_period)) << ',' << coord(ypos((*it)->mean - (*it)->sem))
                << (std::next(it) == pts.rend() ? "" : " ");
        }
        svg << "\"/>\n";
        svg << "<polyline class=\"line\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i) {
            svg << (i ? " " : "") << coord(xpos(pts[i]->test_period)) << ',' << coord(ypos(pts[i]->mean));
        }
        svg << "\"/>\n";
        for (const auto* r : pts) {
            svg << "<circle class=\"point\" cx=\"" << coord(xpos(r->test_period)) << "\" cy=\"" << coord(ypos(r->mean))
                << "\" r=\"3\" fill=\"" << color << "\" data-period=\"" << r->test_period << "\" data-value=\""
                << num(r->mean) << "\" data-sem=\"" << num(r->sem) << "\" data-n=\"" << r->n_seeds << "\"/>\n";
        }
        svg << "</g>\n";
        ++idx;
    }

    svg << "<g class=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
    idx = 0;
    for (const auto& [name, pts] : series) {
        const double y = top + 10 + 20.0 * static_cast<double>(idx);
        svg << "<rect class=\"legend-entry\" x=\"" << coord(width - right + 15) << "\" y=\"" << coord(y - 9)
            << "\" width=\"14\" height=\"10\" fill=\"" << palette[idx % std::size(palette)] << "\"/>\n";
        svg << "<text x=\"" << coord(width - right + 35) << "\" y=\"" << coord(y) << "\">" << xml_escape(name)
            << "</text>\n";
        ++idx;
    }
    svg << "</g>\n</svg>\n";
    return svg.str();
}

EmittedReport emit_report(std::span<const AggregateRow> rows, ReportKind kind, const std::filesystem::path& out_dir,
                          const ChartOptions& options) {
    if (rows.empty()) throw DataError("no aggregate rows for report kind '" + to_string(kind) + "'");
    std::filesystem::create_directories(out_dir);
    EmittedReport out;
    out.csv = out_dir / (to_string(kind) + ".csv");
    out.svg = out_dir / (to_string(kind) + ".svg");
    {
        std::ofstream f(out.csv, std::ios::binary);
        if (!f) throw DataError("cannot write " + out.csv.string());
        write_aggregate_csv(f, rows);
    }
    const std::string svg = render_svg(rows, kind, options, &out.warnings);
    std::ofstream f(out.svg, std::ios::binary);
    if (!f) throw DataError("cannot write " + out.svg.string());
    f << svg;
    return out;
}

} // namespace driftforge::report
