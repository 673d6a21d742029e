#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dapose/config.hpp"
#include "dapose/datasets.hpp"
#include "dapose/metrics.hpp"
#include "dapose/report.hpp"
#include "dapose/trainer.hpp"

namespace dapose::run {

namespace fs = std::filesystem;

/// Default scalar type for command execution.
using S = double;

// ---------------------------------------------------------------------------
// Shared helpers.
// ---------------------------------------------------------------------------

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    check_data(os.good(), detail::cat("cannot write '", path.string(), "'"));
    os << j.dump(2) << "\n";
}

/// Loads the three generated splits from `rc.data_dir`. Target-train labels
/// are stripped unconditionally: adaptation must never see them.
inline ToyDatasets load_domains(const cfg::RunConfig& rc) {
    const fs::path root = rc.data_dir;
    auto src = load_annotated_dataset(root / "source", "source", rc.dataset.image_size,
                                      Domain::source);
    auto tt = load_annotated_dataset(root / "target_train", "target_train",
                                     rc.dataset.image_size, Domain::target);
    auto te = load_annotated_dataset(root / "target_eval", "target_eval", rc.dataset.image_size,
                                     Domain::target);
    check_data(src.keypoint_names == tt.keypoint_names && src.keypoint_names == te.keypoint_names,
               "dataset splits disagree on keypoint names");
    check_data(static_cast<int64_t>(src.keypoint_names.size()) == rc.dataset.k,
               detail::cat("dataset has ", src.keypoint_names.size(),
                           " keypoints but config expects ", rc.dataset.k));
    ToyDatasets data;
    data.source = std::move(src.samples);
    data.target_train = strip_labels(std::move(tt.samples));
    data.target_eval = std::move(te.samples);
    data.keypoint_names = std::move(src.keypoint_names);
    return data;
}

inline std::vector<img::Image> images_of(const std::vector<Sample>& samples) {
    std::vector<img::Image> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image);
    return out;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Materializes the toy domain pair under `rc.data_dir` using the annotation
/// schema (one directory per split). The generation seed is the run seed.
inline std::string cmd_generate(const cfg::RunConfig& rc, bool force) {
    rc.validate();
    const fs::path root = rc.data_dir;
    if (fs::exists(root) && !fs::is_empty(root)) {
        check_data(force, detail::cat("output directory '", root.string(),
                                      "' exists and is not empty; pass --force to overwrite"));
        fs::remove_all(root);
    }
    fs::create_directories(root);

    ToyDomainConfig dc = rc.dataset;
    dc.seed = rc.seed;
    const ToyDatasets data = generate_toy_domains(dc);
    save_dataset(root / "source", "source", data.source, data.keypoint_names);
    save_dataset(root / "target_train", "target_train", data.target_train, data.keypoint_names);
    save_dataset(root / "target_eval", "target_eval", data.target_eval, data.keypoint_names);
    return cfg::write_resolved(rc, root);
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

/// Pretrains the style autoencoder (when enabled) and the pose network on
/// labeled source data, then freezes both into `<out>/pretrain.ckpt` at
/// iteration 0 with student == teacher. Returns the summary JSON.
inline nlohmann::json cmd_pretrain(const cfg::RunConfig& rc) {
    rc.validate();
    const std::string hash = cfg::write_resolved(rc, rc.out_dir);
    const ToyDatasets data = load_domains(rc);

    StyleNet<S> style = [&] {
        if (!rc.style.enabled) {
            RngStream boot(mix_seed(rc.seed, train::kSaltInit));
            return StyleNet<S>(boot);
        }
        return pretrain_style<S>(images_of(data.source), images_of(data.target_train),
                                 rc.style.pretrain_steps, mix_seed(rc.seed, train::kSaltStyle),
                                 rc.style.batch, rc.style.lr);
    }();
    const auto pre =
        train::pretrain_source<S>(data.source, rc, rc.trainer.pretrain_steps, rc.seed);
    const train::TrainState<S> st = train::init_state(rc, pre.net, style);

    const fs::path ckpt = fs::path(rc.out_dir) / "pretrain.ckpt";
    train::save_checkpoint(st, ckpt, hash);

    const auto groups = keypoint_group_map(data.keypoint_names);
    const double src_only_pck =
        train::evaluate_pose(pre.net, data.target_eval, 0.05, groups).overall;
    nlohmann::json summary = {{"config_hash", hash},
                              {"checkpoint", ckpt.string()},
                              {"pretrain_steps", rc.trainer.pretrain_steps},
                              {"final_loss", pre.final_loss},
                              {"source_val_pck", pre.val_pck},
                              {"source_only_target_pck", src_only_pck},
                              {"style_recon_psnr", style.meta.recon_psnr}};
    write_json_file(fs::path(rc.out_dir) / "pretrain.json", summary);
    return summary;
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

/// Runs adaptation from a checkpoint (default `<out>/pretrain.ckpt`) to the
/// configured total iterations, streaming per-step metrics to
/// `<out>/metrics.jsonl` (appending when resuming mid-run). Returns the
/// summary JSON with both final evaluations.
inline nlohmann::json cmd_adapt(const cfg::RunConfig& rc, fs::path from = {}) {
    rc.validate();
    const std::string hash = cfg::write_resolved(rc, rc.out_dir);
    if (from.empty()) from = fs::path(rc.out_dir) / "pretrain.ckpt";
    check_data(fs::exists(from),
               detail::cat("checkpoint not found: '", from.string(), "'"));

    const ToyDatasets data = load_domains(rc);
    train::TrainState<S> st = train::load_checkpoint<S>(from, rc);
    check_config(hash == ckpt::Container::load(from).manifest.at("config_hash") ||
                     st.iteration == 0,
                 "resuming a run whose checkpoint was written under a different config");

    metrics::MetricsWriter writer(fs::path(rc.out_dir) / "metrics.jsonl", hash,
                                  /*append=*/st.iteration > 0);
    const LossWeights w{rc.loss.alpha, rc.loss.beta, rc.loss.gamma};
    const auto result = train::train_adapt(st, data, w, rc, rc.out_dir,
                                           [&](const nlohmann::json& line) { writer.write(line); },
                                           hash);

    nlohmann::json summary = {{"config_hash", hash},
                              {"iterations", st.iteration},
                              {"final_teacher", to_json(result.final_teacher)},
                              {"final_student", to_json(result.final_student)}};
    write_json_file(fs::path(rc.out_dir) / "adapt.json", summary);
    return summary;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Evaluates one network from a checkpoint on a labeled split. The teacher is
/// the default inference model.
inline nlohmann::json cmd_eval(const cfg::RunConfig& rc, fs::path checkpoint,
                               const std::string& model = "teacher",
                               const std::string& split = "target_eval") {
    rc.validate();
    check_config(model == "teacher" || model == "student",
                 detail::cat("--model must be 'teacher' or 'student', got '", model, "'"));
    check_config(split == "target_eval" || split == "source",
                 detail::cat("--split must be 'target_eval' or 'source' (labeled splits), got '",
                             split, "'"));
    const std::string hash = cfg::write_resolved(rc, rc.out_dir);
    if (checkpoint.empty()) checkpoint = fs::path(rc.out_dir) / "checkpoint.ckpt";
    check_data(fs::exists(checkpoint),
               detail::cat("checkpoint not found: '", checkpoint.string(), "'"));

    const auto loaded = load_annotated_dataset(
        fs::path(rc.data_dir) / split, split, rc.dataset.image_size,
        split == "source" ? Domain::source : Domain::target);
    const train::TrainState<S> st = train::load_checkpoint<S>(checkpoint, rc);
    const auto& net = model == "teacher" ? st.teacher : st.student;
    const auto groups = keypoint_group_map(loaded.keypoint_names);
    const PCKResult pck = train::evaluate_pose(net, loaded.samples, 0.05, groups);

    nlohmann::json out = to_json(pck);
    out["config_hash"] = hash;
    out["model"] = model;
    out["split"] = split;
    out["checkpoint"] = checkpoint.string();
    out["iteration"] = st.iteration;
    write_json_file(fs::path(rc.out_dir) / "eval.json", out);
    return out;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    LossWeights weights;
    bool stylize = true; // MT-only switches consistency inputs off entirely
};

inline const std::vector<AblationVariant>& ablation_variants() {
    static const std::vector<AblationVariant> v = {
        {"mt_only", {0.0, 0.0, 0.0}, false},
        {"l_img", {1.0, 0.0, 0.0}, true},
        {"l_img_fea", {1.0, 0.1, 0.0}, true},
        {"l_img_pose", {1.0, 0.0, 0.3}, true},
        {"full", {1.0, 0.1, 0.3}, true},
    };
    return v;
}

struct AblationCell {
    std::string variant;
    uint64_t seed = 0;
    PCKResult pck;
};

inline std::string pct(double fraction) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", fraction * 100.0);
    return buf;
}

/// Writes the ablation CSV: a comment line with the config hash, the header
/// `variant,seed,<groups...>,All`, one row per (variant, seed) in percent
/// PCK@0.05, and mean/sd rows per variant (seed column "mean"/"sd").
inline void write_ablation_csv(const fs::path& path, const std::string& hash,
                               const std::vector<std::string>& group_names,
                               const std::vector<AblationCell>& cells) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    check_data(os.good(), detail::cat("cannot write '", path.string(), "'"));
    os << "# config_hash=" << hash << "\n";
    os << "variant,seed";
    for (const auto& g : group_names) os << "," << g;
    os << ",All\n";

    auto row_values = [&](const PCKResult& p) {
        std::vector<double> vals;
        for (const auto& g : group_names) {
            const auto it = p.per_group_accuracy.find(g);
            vals.push_back(it == p.per_group_accuracy.end() ? 0.0 : it->second);
        }
        vals.push_back(p.overall);
        return vals;
    };

    for (const auto& v : ablation_variants()) {
        std::vector<std::vector<double>> rows;
        for (const auto& c : cells) {
            if (c.variant != v.name) continue;
            rows.push_back(row_values(c.pck));
            os << v.name << "," << c.seed;
            for (double x : rows.back()) os << "," << pct(x);
            os << "\n";
        }
        if (rows.empty()) continue;
        const size_t cols = rows[0].size();
        std::vector<double> mean(cols, 0.0), sd(cols, 0.0);
        for (const auto& r : rows)
            for (size_t j = 0; j < cols; ++j) mean[j] += r[j];
        for (size_t j = 0; j < cols; ++j) mean[j] /= static_cast<double>(rows.size());
        if (rows.size() > 1) {
            for (const auto& r : rows)
                for (size_t j = 0; j < cols; ++j) sd[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
            for (size_t j = 0; j < cols; ++j)
                sd[j] = std::sqrt(sd[j] / static_cast<double>(rows.size() - 1));
        }
        os << v.name << ",mean";
        for (double x : mean) os << "," << pct(x);
        os << "\n" << v.name << ",sd";
        for (double x : sd) os << "," << pct(x);
        os << "\n";
    }
}

/// Runs one adaptation for (variant, seed) on preloaded data, reusing the
/// seed's pretrained pose and style networks. Run artifacts land under
/// `<out>/ablate/<variant>/seed_<seed>/`.
inline AblationCell run_ablation_cell(const cfg::RunConfig& base, const AblationVariant& v,
                                      uint64_t seed, const ToyDatasets& data,
                                      const PoseNetwork<S>& pretrained, const StyleNet<S>& style) {
    cfg::RunConfig rc = base;
    rc.seed = seed;
    rc.style.enabled = base.style.enabled && v.stylize;
    rc.loss.alpha = v.weights.alpha;
    rc.loss.beta = v.weights.beta;
    rc.loss.gamma = v.weights.gamma;
    rc.out_dir = (fs::path(base.out_dir) / "ablate" / v.name /
                  ("seed_" + std::to_string(seed)))
                     .string();
    const std::string hash = cfg::write_resolved(rc, rc.out_dir);

    train::TrainState<S> st = train::init_state(rc, pretrained, style);
    metrics::MetricsWriter writer(fs::path(rc.out_dir) / "metrics.jsonl", hash, false);
    const auto result = train::train_adapt(st, data, v.weights, rc, rc.out_dir,
                                           [&](const nlohmann::json& line) { writer.write(line); },
                                           hash);
    return {v.name, seed, result.final_teacher};
}

/// Full ablation sweep: for each seed, pretrain once, then run every variant
/// from that shared initialization. Emits `<out>/ablation.csv` plus a JSON
/// summary with the per-seed source-only baselines.
inline fs::path cmd_ablate(const cfg::RunConfig& rc) {
    rc.validate();
    check_config(!rc.ablate_seeds.empty(), "ablate: at least one seed is required");
    const std::string hash = cfg::write_resolved(rc, rc.out_dir);
    const ToyDatasets data = load_domains(rc);
    const auto groups = keypoint_group_map(data.keypoint_names);
    std::vector<std::string> group_names;
    for (const auto& [name, idx] : groups) group_names.push_back(name);

    std::vector<AblationCell> cells;
    nlohmann::json baselines = nlohmann::json::array();
    for (uint64_t seed : rc.ablate_seeds) {
        cfg::RunConfig rs = rc;
        rs.seed = seed;
        StyleNet<S> style = [&] {
            if (!rs.style.enabled) {
                RngStream boot(mix_seed(seed, train::kSaltInit));
                return StyleNet<S>(boot);
            }
            return pretrain_style<S>(images_of(data.source), images_of(data.target_train),
                                     rs.style.pretrain_steps, mix_seed(seed, train::kSaltStyle),
                                     rs.style.batch, rs.style.lr);
        }();
        const auto pre =
            train::pretrain_source<S>(data.source, rs, rs.trainer.pretrain_steps, seed);
        const double src_only =
            train::evaluate_pose(pre.net, data.target_eval, 0.05, groups).overall;
        baselines.push_back({{"seed", seed},
                             {"source_val_pck", pre.val_pck},
                             {"source_only_target_pck", src_only}});

        for (const auto& v : ablation_variants())
            cells.push_back(run_ablation_cell(rc, v, seed, data, pre.net, style));
    }

    const fs::path csv = fs::path(rc.out_dir) / "ablation.csv";
    write_ablation_csv(csv, hash, group_names, cells);

    nlohmann::json summary = {{"config_hash", hash}, {"baselines", baselines}};
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cells)
        rows.push_back({{"variant", c.variant}, {"seed", c.seed}, {"pck", to_json(c.pck)}});
    summary["runs"] = rows;
    write_json_file(fs::path(rc.out_dir) / "ablation.json", summary);
    return csv;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Renders `<run_dir>/report.md` (+ plots) from a run directory produced by
/// cmd_adapt. Missing or partial metrics yield explicit "no data" sections.
inline fs::path cmd_report(const fs::path& run_dir) {
    check_data(fs::exists(run_dir),
               detail::cat("run directory not found: '", run_dir.string(), "'"));
    report::write_report(run_dir);
    return run_dir / "report.md";
}

} // namespace dapose::run
