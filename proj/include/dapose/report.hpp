#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <string>
#include <vector>

#include "dapose/common.hpp"
#include "dapose/image.hpp"
#include "dapose/metrics.hpp"

namespace dapose::report {

/// Renders one series as a PNG line plot (light background, framed axes,
/// dark polyline). Series identity lives in the file name and the markdown
/// caption, so the image itself carries no text.
inline void plot_series(const std::vector<double>& xs, const std::vector<double>& ys,
                        const std::filesystem::path& path) {
    check_arg(xs.size() == ys.size(), "plot_series: x/y size mismatch");
    const int64_t w = 480, h = 300, ml = 40, mr = 12, mt = 12, mb = 28;
    img::Image im = img::make_image(h, w);
    im.fill(0.97f);

    // Frame.
    img::fill_rect(im, ml, h - mb, w - ml - mr, 1, 0.25f, 0.25f, 0.25f);
    img::fill_rect(im, ml, mt, 1, h - mt - mb, 0.25f, 0.25f, 0.25f);

    if (!xs.empty()) {
        double x_lo = xs.front(), x_hi = xs.front(), y_lo = ys.front(), y_hi = ys.front();
        for (size_t i = 1; i < xs.size(); ++i) {
            x_lo = std::min(x_lo, xs[i]);
            x_hi = std::max(x_hi, xs[i]);
            y_lo = std::min(y_lo, ys[i]);
            y_hi = std::max(y_hi, ys[i]);
        }
        if (x_hi == x_lo) x_hi = x_lo + 1.0;
        if (y_hi == y_lo) {
            y_hi += 0.5;
            y_lo -= 0.5;
        }
        auto px = [&](double x) {
            return static_cast<double>(ml) +
                   (x - x_lo) / (x_hi - x_lo) * static_cast<double>(w - ml - mr - 1);
        };
        auto py = [&](double y) {
            return static_cast<double>(h - mb) -
                   (y - y_lo) / (y_hi - y_lo) * static_cast<double>(h - mt - mb - 1);
        };
        // Horizontal gridlines at quarters.
        for (int g = 1; g <= 3; ++g) {
            const int64_t gy = static_cast<int64_t>(py(y_lo + (y_hi - y_lo) * g / 4.0));
            img::fill_rect(im, ml + 1, gy, w - ml - mr - 1, 1, 0.85f, 0.85f, 0.85f);
        }
        if (xs.size() == 1) {
            img::draw_disk(im, px(xs[0]), py(ys[0]), 2.5, 0.10f, 0.25f, 0.55f);
        } else {
            for (size_t i = 0; i + 1 < xs.size(); ++i)
                img::draw_capsule(im, px(xs[i]), py(ys[i]), px(xs[i + 1]), py(ys[i + 1]), 1.0,
                                  0.10f, 0.25f, 0.55f);
        }
    }
    img::save_png(im, path.string());
}

inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

/// Writes `<run_dir>/report.md` plus the plot images under
/// `<run_dir>/report/`. Tolerates missing or partial metrics: every section
/// that lacks data states so explicitly instead of failing.
inline void write_report(const std::filesystem::path& run_dir) {
    const auto metrics_path = run_dir / "metrics.jsonl";
    std::vector<metrics::MetricsLine> lines;
    if (std::filesystem::exists(metrics_path)) lines = metrics::read_metrics(metrics_path);

    std::string hash = "(unknown)";
    const auto cfg_path = run_dir / "config.resolved.json";
    if (std::filesystem::exists(cfg_path)) {
        std::ifstream is(cfg_path);
        nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
        if (!j.is_discarded() && j.contains("config_hash"))
            hash = j.at("config_hash").get<std::string>();
    }
    if (hash == "(unknown)" && !lines.empty() && !lines.front().config_hash.empty())
        hash = lines.front().config_hash;

    const auto plot_dir = run_dir / "report";
    std::filesystem::create_directories(plot_dir);

    std::ofstream md(run_dir / "report.md");
    check_data(md.good(), detail::cat("cannot write report.md under '", run_dir.string(), "'"));
    md << "# Training report\n\n";
    md << "- config hash: `" << hash << "`\n";
    md << "- steps recorded: " << lines.size() << "\n\n";

    md << "## Final evaluation\n\n";
    std::vector<std::pair<int64_t, double>> evals;
    for (const auto& m : lines)
        if (m.has_pck) evals.emplace_back(m.iteration, m.teacher_pck);
    if (evals.empty()) {
        md << "No evaluation data.\n\n";
    } else {
        md << "| iteration | teacher PCK@0.05 |\n|---:|---:|\n";
        for (const auto& [it, p] : evals) md << "| " << it << " | " << fmt6(p) << " |\n";
        md << "\nFinal teacher PCK@0.05: **" << fmt6(evals.back().second) << "** at iteration "
           << evals.back().first << ".\n\n";
    }

    md << "## Last recorded losses\n\n";
    if (lines.empty()) {
        md << "No loss data.\n\n";
    } else {
        const auto& b = lines.back().breakdown;
        md << "| term | value |\n|---|---:|\n";
        md << "| l_sup | " << fmt6(b.l_sup) << " |\n";
        md << "| l_img | " << fmt6(b.l_img) << " |\n";
        md << "| l_fea | " << fmt6(b.l_fea) << " |\n";
        md << "| l_pose | " << fmt6(b.l_pose) << " |\n";
        md << "| l_enth | " << fmt6(b.l_enth) << " |\n";
        md << "| l_entw | " << fmt6(b.l_entw) << " |\n";
        md << "| l_div | " << fmt6(b.l_div) << " |\n";
        md << "| total | " << fmt6(b.total) << " |\n";
        md << "| masked_keypoint_fraction | " << fmt6(b.masked_keypoint_fraction) << " |\n\n";
    }

    md << "## Loss curves\n\n";
    if (lines.empty()) {
        md << "No loss data.\n";
    } else {
        std::vector<double> xs;
        xs.reserve(lines.size());
        for (const auto& m : lines) xs.push_back(static_cast<double>(m.iteration));
        const std::vector<std::pair<std::string, std::function<double(const LossBreakdown&)>>>
            series = {
                {"l_sup", [](const LossBreakdown& b) { return b.l_sup; }},
                {"l_img", [](const LossBreakdown& b) { return b.l_img; }},
                {"l_fea", [](const LossBreakdown& b) { return b.l_fea; }},
                {"l_pose", [](const LossBreakdown& b) { return b.l_pose; }},
                {"l_enth", [](const LossBreakdown& b) { return b.l_enth; }},
                {"l_entw", [](const LossBreakdown& b) { return b.l_entw; }},
                {"l_div", [](const LossBreakdown& b) { return b.l_div; }},
                {"total", [](const LossBreakdown& b) { return b.total; }},
            };
        for (const auto& [name, get] : series) {
            std::vector<double> ys;
            ys.reserve(lines.size());
            for (const auto& m : lines) ys.push_back(get(m.breakdown));
            plot_series(xs, ys, plot_dir / (name + ".png"));
            md << "### " << name << "\n\n![" << name << "](report/" << name << ".png)\n\n";
        }
        if (!evals.empty()) {
            std::vector<double> ex, ey;
            for (const auto& [it, p] : evals) {
                ex.push_back(static_cast<double>(it));
                ey.push_back(p);
            }
            plot_series(ex, ey, plot_dir / "teacher_pck.png");
            md << "### teacher_pck\n\n![teacher_pck](report/teacher_pck.png)\n\n";
        }
    }
}

} // namespace dapose::report
