// Copyright 2026 The pirate-sim Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pirate/experiment.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace pirate;
using namespace pirate::experiment;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kLiveness = 3;

json read_json(const fs::path &p) {
    std::ifstream in(p);
    if (!in) throw ConfigError(p.string() + ": cannot open");
    try {
        return json::parse(in);
    } catch (const json::parse_error &e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

int cmd_run(const std::string &config, const std::string &out_dir, std::optional<std::uint64_t> seed) {
    json doc = read_json(config);
    if (doc.contains("config") && doc.contains("version")) doc = doc.at("config");
    if (seed) doc["seed"] = *seed;
    const auto cfg = parse_config(doc);
    const auto out = run(cfg);
    write_outputs(out_dir, cfg, out);
    std::printf("%s: %zu iterations, mean iteration time %.4f s, final loss %.6g, fingerprint %s\n",
                to_string(cfg.framework).c_str(), out.rows.size(), mean_of(out.iteration_times),
                out.rows.empty() ? 0.0 : out.rows.back().global_loss, to_hex(out.fingerprint).substr(0, 16).c_str());
    if (out.failure) {
        std::fprintf(stderr, "liveness failure: %s\n", out.failure->c_str());
        return kLiveness;
    }
    return kOk;
}

int cmd_sweep(const std::string &config, const std::string &out_dir, const std::vector<std::string> &vary,
              std::optional<std::uint64_t> seed) {
    json base = read_json(config);
    if (base.contains("config") && base.contains("version")) base = base.at("config");
    if (seed) base["seed"] = *seed;
    std::vector<SweepAxis> axes;
    for (const auto &v : vary) axes.push_back(parse_axis(v));
    if (axes.empty()) throw ConfigError("sweep: at least one --vary is required");
    const auto points = expand(base, axes);
    fs::create_directories(out_dir);

    std::ostringstream summary;
    summary << "point,label,framework,n,payload_bytes,status,mean_iteration_time_s,final_storage_bytes\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto &p = points[i];
        std::string status = "ok", framework = "?";
        std::string n = "", payload = "";
        double mean = 0.0;
        std::uint64_t storage = 0;
        try {
            const auto cfg = parse_config(p.document);
            framework = to_string(cfg.framework);
            n = std::to_string(cfg.n);
            payload = std::to_string(cfg.payload_bytes);
            const auto out = run(cfg);
            write_outputs(fs::path(out_dir) / p.label, cfg, out);
            mean = mean_of(out.iteration_times);
            storage = out.rows.empty() ? 0 : out.rows.back().per_node_storage_bytes;
            if (out.failure) status = "liveness-failure";
        } catch (const ConfigError &e) {
            status = std::string("config-error: ") + e.what();
            std::replace(status.begin(), status.end(), ',', ';');
        }
        summary << i << "," << p.label << "," << framework << "," << n << "," << payload << "," << status << ","
                << format_real(mean) << "," << storage << "\n";
        std::printf("[%zu/%zu] %s: %s\n", i + 1, points.size(), p.label.c_str(), status.c_str());
    }
    write_text(fs::path(out_dir) / "summary.csv", summary.str());
    return kOk;
}

struct Series {
    std::string name;
    std::vector<MetricsRow> rows;
    std::optional<json> manifest;
};

double mean_interval(const std::vector<MetricsRow> &rows) {
    if (rows.empty()) return 0.0;
    return rows.back().simulated_time_s / static_cast<double>(rows.size());
}

std::string svg_plot(const std::string &title, const std::string &xlabel, const std::string &ylabel,
                     const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> &lines) {
    double x0 = 1e300, x1 = -1e300, y0 = 0.0, y1 = -1e300;
    for (const auto &[_, pts] : lines)
        for (auto [x, y] : pts) {
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    if (!(x1 > x0)) x1 = x0 + 1;
    if (!(y1 > y0)) y1 = y0 + 1;
    const double W = 640, H = 400, L = 70, R = 160, T = 40, B = 50;
    auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    static const char *colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << xlabel << "</text>\n";
    os << "<text x=\"14\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14," << H / 2
       << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
    char buf[64];
    for (int k = 0; k <= 4; ++k) {
        const double yv = y0 + (y1 - y0) * k / 4.0, xv = x0 + (x1 - x0) * k / 4.0;
        std::snprintf(buf, sizeof buf, "%.3g", yv);
        os << "<text x=\"" << L - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << buf
           << "</text>\n";
        std::snprintf(buf, sizeof buf, "%.3g", xv);
        os << "<text x=\"" << sx(xv) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
           << buf << "</text>\n";
    }
    std::size_t i = 0;
    for (const auto &[name, pts] : lines) {
        const char *col = colors[i % 6];
        os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
        for (auto [x, y] : pts) os << sx(x) << "," << sy(y) << " ";
        os << "\"/>\n";
        os << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 14 * (i + 1) << "\" font-size=\"11\" fill=\"" << col
           << "\">" << name << "</text>\n";
        ++i;
    }
    os << "</svg>\n";
    return os.str();
}

int cmd_report(const std::vector<std::string> &files, const std::string &out_dir, bool plots) {
    std::vector<Series> series;
    for (const auto &f : files) {
        Series s;
        s.name = f;
        try {
            s.rows = read_metrics(f);
        } catch (const std::exception &e) {
            std::fprintf(stderr, "skipping %s\n", e.what());
            continue;
        }
        if (s.rows.empty()) {
            std::fprintf(stderr, "skipping %s: no rows\n", f.c_str());
            continue;
        }
        const auto man = fs::path(f).parent_path() / "manifest.json";
        if (fs::exists(man)) {
            try {
                s.manifest = read_json(man);
            } catch (const ConfigError &) {
            }
        }
        series.push_back(std::move(s));
    }
    if (series.empty()) {
        std::fprintf(stderr, "report: no usable metrics files\n");
        return kConfigError;
    }
    std::printf("%-40s %-13s %6s %6s %16s %16s %14s %12s\n", "file", "framework", "n", "rows", "storage_first",
                "storage_last", "growth/iter", "iter_time_s");
    for (const auto &s : series) {
        std::string fw = "?", n = "?";
        if (s.manifest) {
            fw = s.manifest->at("config").value("framework", "?");
            n = std::to_string(s.manifest->at("config").value("n", 0));
        }
        const auto first = s.rows.front().per_node_storage_bytes, last = s.rows.back().per_node_storage_bytes;
        const double growth =
            s.rows.size() > 1 ? (static_cast<double>(last) - static_cast<double>(first)) / (s.rows.size() - 1) : 0.0;
        std::string name = s.name.size() > 40 ? "..." + s.name.substr(s.name.size() - 37) : s.name;
        std::printf("%-40s %-13s %6s %6zu %16llu %16llu %14.0f %12.4f\n", name.c_str(), fw.c_str(), n.c_str(),
                    s.rows.size(), static_cast<unsigned long long>(first), static_cast<unsigned long long>(last),
                    growth, mean_interval(s.rows));
    }
    if (!plots) return kOk;
    fs::create_directories(out_dir);
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> storage;
    std::map<std::string, std::vector<std::pair<double, double>>> by_framework;
    for (const auto &s : series) {
        std::vector<std::pair<double, double>> pts;
        for (const auto &r : s.rows) pts.emplace_back(static_cast<double>(r.iteration + 1), r.per_node_storage_bytes / 1e6);
        std::string label = fs::path(s.name).parent_path().filename().string();
        if (label.empty()) label = s.name;
        storage.emplace_back(label, std::move(pts));
        if (s.manifest) {
            const auto &c = s.manifest->at("config");
            const std::string key = c.value("framework", "?") + " " +
                                    format_real(c.value("payload_bytes", 0.0) / 1e6) + "MB";
            by_framework[key].emplace_back(c.value("n", 0.0), mean_interval(s.rows));
        }
    }
    write_text(fs::path(out_dir) / "storage_vs_iteration.svg",
               svg_plot("Per-node gradient storage", "iteration", "storage (MB)", storage));
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> times;
    for (auto &[k, v] : by_framework) {
        std::sort(v.begin(), v.end());
        times.emplace_back(k, v);
    }
    if (!times.empty())
        write_text(fs::path(out_dir) / "iteration_time_vs_n.svg",
                   svg_plot("Iteration time", "number of nodes", "seconds per iteration", times));
    std::printf("plots written to %s\n", out_dir.c_str());
    return kOk;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Discrete-event simulator for sharded blockchain-protected D-SGD"};
    app.require_subcommand(1);

    std::string config, out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::vector<std::string> vary, files;
    bool plots = false;

    auto *run_cmd = app.add_subcommand("run", "run one experiment");
    run_cmd->add_option("--config", config, "experiment config or run manifest (JSON)")->required();
    run_cmd->add_option("--out", out_dir, "output directory");
    run_cmd->add_option("--seed", seed, "override the config seed");

    auto *sweep_cmd = app.add_subcommand("sweep", "run the cross product of --vary axes");
    sweep_cmd->add_option("--config", config, "base config (JSON)")->required();
    sweep_cmd->add_option("--out", out_dir, "output directory");
    sweep_cmd->add_option("--seed", seed, "override the config seed");
    sweep_cmd->add_option("--vary", vary, "field=v1,v2,... (repeatable)")->required();

    auto *report_cmd = app.add_subcommand("report", "tabulate metrics files");
    report_cmd->add_option("files", files, "metrics.csv files")->required();
    report_cmd->add_option("--out", out_dir, "plot directory");
    report_cmd->add_flag("--plots", plots, "write SVG plots");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kConfigError;
    }

    try {
        if (*run_cmd) return cmd_run(config, out_dir, seed);
        if (*sweep_cmd) return cmd_sweep(config, out_dir, vary, seed);
        if (*report_cmd) return cmd_report(files, out_dir, plots);
    } catch (const ConfigError &e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfigError;
    } catch (const PreconditionError &e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfigError;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kOk;
}
