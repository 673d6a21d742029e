#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/common.hpp"
#include "dapose/losses.hpp"

namespace dapose::metrics {

/// Append-only metrics.jsonl writer: one JSON object per line, one line per
/// training step. Every line embeds the config hash.
class MetricsWriter {
  public:
    MetricsWriter(const std::filesystem::path& path, const std::string& config_hash,
                  bool append)
        : hash_(config_hash) {
        std::filesystem::create_directories(path.parent_path().empty() ? "."
                                                                       : path.parent_path());
        os_.open(path, append ? std::ios::app : std::ios::trunc);
        check_data(os_.good(), detail::cat("cannot open metrics file '", path.string(), "'"));
    }

    void write(nlohmann::json line) {
        line["config_hash"] = hash_;
        os_ << line.dump() << "\n";
        os_.flush();
    }

  private:
    std::ofstream os_;
    std::string hash_;
};

struct MetricsLine {
    int64_t iteration = 0;
    double lr = 0.0;
    LossBreakdown breakdown;
    bool has_pck = false;
    double teacher_pck = 0.0;
    std::string config_hash;
};

/// Reads a metrics.jsonl file, skipping blank lines. Malformed lines reject
/// the file; a missing file is the caller's concern.
inline std::vector<MetricsLine> read_metrics(const std::filesystem::path& path) {
    std::ifstream is(path);
    check_data(is.good(), detail::cat("cannot open metrics file '", path.string(), "'"));
    std::vector<MetricsLine> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        check_data(!j.is_discarded(),
                   detail::cat("metrics file '", path.string(), "' line ", lineno,
                               " is not valid JSON"));
        MetricsLine m;
        try {
            m.breakdown = LossBreakdown::from_json(j);
            m.iteration = j.at("iteration").get<int64_t>();
            m.lr = j.at("lr").get<double>();
            if (j.contains("teacher_pck")) {
                m.has_pck = true;
                m.teacher_pck = j.at("teacher_pck").get<double>();
            }
            if (j.contains("config_hash")) m.config_hash = j.at("config_hash").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(detail::cat("metrics file '", path.string(), "' line ", lineno,
                                        ": ", e.what()));
        }
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace dapose::metrics
