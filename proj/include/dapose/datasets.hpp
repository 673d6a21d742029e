#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/geometry.hpp"
#include "dapose/image.hpp"
#include "dapose/rng.hpp"

namespace dapose {

enum class Domain { source, target };

/// One dataset element. Target training samples never carry keypoints;
/// source and evaluation samples always do.
struct Sample {
    img::Image image;
    std::optional<KeypointSet> keypoints;
    Domain domain_tag = Domain::source;
    std::string sample_id;
};

/// Photometric/background shift applied to the target domain only. The
/// identity setting makes both domains draw from one distribution.
struct ShiftSpec {
    bool palette_swap = true;
    std::string background = "noise"; // "flat" | "noise"
    double blur_radius = 1.0;
    double contrast_lo = 0.75;
    double contrast_hi = 1.25;

    bool is_identity() const {
        return !palette_swap && background == "flat" && blur_radius == 0.0 &&
               contrast_lo == 1.0 && contrast_hi == 1.0;
    }

    static ShiftSpec identity() { return {false, "flat", 0.0, 1.0, 1.0}; }
};

struct ToyDomainConfig {
    int64_t n_source = 2000;
    int64_t n_target_train = 2000;
    int64_t n_target_eval = 200;
    int64_t image_size = 64;
    int64_t k = 5;
    ShiftSpec shift;
    uint64_t seed = 1;

    void validate() const {
        check_config(n_source > 0 && n_target_train > 0 && n_target_eval > 0,
                     "toy config: sample counts must be positive");
        check_config(image_size >= 32, "toy config: image_size too small to fit a figure");
        check_config(k >= 2 && k <= 5, "toy config: k must be in [2, 5]");
        check_config(shift.background == "flat" || shift.background == "noise",
                     "toy config: background must be 'flat' or 'noise'");
        check_config(shift.contrast_lo > 0 && shift.contrast_hi >= shift.contrast_lo,
                     "toy config: bad contrast range");
        check_config(shift.blur_radius >= 0, "toy config: blur_radius must be nonnegative");
    }
};

inline nlohmann::json to_json(const ShiftSpec& s) {
    return nlohmann::json{{"palette_swap", s.palette_swap},
                          {"background", s.background},
                          {"blur_radius", s.blur_radius},
                          {"contrast_lo", s.contrast_lo},
                          {"contrast_hi", s.contrast_hi}};
}

inline ShiftSpec shift_from_json(const nlohmann::json& j) {
    ShiftSpec s;
    s.palette_swap = j.at("palette_swap").get<bool>();
    s.background = j.at("background").get<std::string>();
    s.blur_radius = j.at("blur_radius").get<double>();
    s.contrast_lo = j.at("contrast_lo").get<double>();
    s.contrast_hi = j.at("contrast_hi").get<double>();
    return s;
}

inline const std::vector<std::string>& toy_keypoint_names_full() {
    static const std::vector<std::string> names = {"head", "left_hand", "right_hand", "left_foot",
                                                   "right_foot"};
    return names;
}

inline std::vector<std::string> toy_keypoint_names(int64_t k) {
    const auto& full = toy_keypoint_names_full();
    return {full.begin(), full.begin() + k};
}

/// Named keypoint groups derived from keypoint names (head / hands / feet).
inline KeypointGroups keypoint_group_map(const std::vector<std::string>& names) {
    KeypointGroups g;
    for (size_t i = 0; i < names.size(); ++i) {
        const auto& n = names[i];
        std::string key = "other";
        if (n.find("head") != std::string::npos) key = "head";
        else if (n.find("hand") != std::string::npos) key = "hands";
        else if (n.find("foot") != std::string::npos) key = "feet";
        g[key].push_back(static_cast<int>(i));
    }
    return g;
}

namespace toy {

inline std::array<double, 2> dir(double deg) {
    const double a = deg * std::numbers::pi / 180.0;
    return {std::cos(a), std::sin(a)}; // y-down frame
}

struct FigurePose {
    // Keypoints, in toy_keypoint_names_full order.
    std::array<std::array<double, 2>, 5> kp;
    // Internal joints for drawing.
    std::array<double, 2> hip, neck, head_c, lelbow, relbow, lknee, rknee;
    double head_r, torso_r, limb_r;
};

/// Draws a fixed number of random values so parallel streams stay aligned.
inline FigurePose sample_pose(RngStream& rng, int64_t size) {
    const double s = static_cast<double>(size);
    FigurePose p;
    p.hip = {s * rng.uniform(0.35, 0.65), s * rng.uniform(0.45, 0.60)};
    const double torso_len = s * rng.uniform(0.18, 0.26);
    const double torso_deg = rng.uniform(-15.0, 15.0);
    const auto tdir = dir(torso_deg - 90.0); // near-vertical, pointing up
    p.neck = {p.hip[0] + torso_len * tdir[0], p.hip[1] + torso_len * tdir[1]};
    p.head_r = s * rng.uniform(0.05, 0.07);
    p.head_c = {p.neck[0] + (p.head_r + 0.01 * s) * tdir[0],
                p.neck[1] + (p.head_r + 0.01 * s) * tdir[1]};
    p.kp[0] = p.head_c;

    auto limb = [&](const std::array<double, 2>& base, double lo_deg, double hi_deg,
                    double len_lo, double len_hi, double bend_range,
                    std::array<double, 2>& joint) {
        const double l1 = s * rng.uniform(len_lo, len_hi);
        const double l2 = s * rng.uniform(len_lo, len_hi);
        const double a1 = rng.uniform(lo_deg, hi_deg);
        const double bend = rng.uniform(-bend_range, bend_range);
        const auto d1 = dir(a1);
        joint = {base[0] + l1 * d1[0], base[1] + l1 * d1[1]};
        const auto d2 = dir(a1 + bend);
        return std::array<double, 2>{joint[0] + l2 * d2[0], joint[1] + l2 * d2[1]};
    };
    p.kp[1] = limb(p.neck, 100.0, 170.0, 0.09, 0.13, 60.0, p.lelbow); // left hand
    p.kp[2] = limb(p.neck, 10.0, 80.0, 0.09, 0.13, 60.0, p.relbow);   // right hand
    p.kp[3] = limb(p.hip, 95.0, 150.0, 0.10, 0.15, 40.0, p.lknee);    // left foot
    p.kp[4] = limb(p.hip, 30.0, 85.0, 0.10, 0.15, 40.0, p.rknee);     // right foot

    p.torso_r = std::max(1.6, 0.025 * s);
    p.limb_r = std::max(1.2, 0.015 * s);
    return p;
}

struct Palette {
    std::array<std::array<float, 3>, 4> colors;
};

inline Palette cool_palette() {
    Palette p;
    p.colors[0] = {0.20f, 0.40f, 0.90f};
    p.colors[1] = {0.10f, 0.70f, 0.80f};
    p.colors[2] = {0.20f, 0.80f, 0.40f};
    p.colors[3] = {0.50f, 0.30f, 0.90f};
    return p;
}

inline Palette warm_palette() {
    Palette p;
    p.colors[0] = {0.90f, 0.30f, 0.20f};
    p.colors[1] = {0.90f, 0.60f, 0.10f};
    p.colors[2] = {0.80f, 0.20f, 0.50f};
    p.colors[3] = {0.95f, 0.80f, 0.20f};
    return p;
}

inline void draw_figure(img::Image& im, const FigurePose& p, const std::array<float, 3>& c) {
    img::draw_capsule(im, p.hip[0], p.hip[1], p.neck[0], p.neck[1], p.torso_r, c[0], c[1], c[2]);
    img::draw_disk(im, p.head_c[0], p.head_c[1], p.head_r, c[0], c[1], c[2]);
    auto limb = [&](const std::array<double, 2>& a, const std::array<double, 2>& j,
                    const std::array<double, 2>& b) {
        img::draw_capsule(im, a[0], a[1], j[0], j[1], p.limb_r, c[0], c[1], c[2]);
        img::draw_capsule(im, j[0], j[1], b[0], b[1], p.limb_r, c[0], c[1], c[2]);
    };
    limb(p.neck, p.lelbow, p.kp[1]);
    limb(p.neck, p.relbow, p.kp[2]);
    limb(p.hip, p.lknee, p.kp[3]);
    limb(p.hip, p.rknee, p.kp[4]);
}

inline img::Image flat_background(RngStream& rng, int64_t size) {
    const float base = static_cast<float>(rng.uniform(0.75, 0.90));
    std::array<float, 3> tint;
    for (auto& t : tint) t = static_cast<float>(rng.uniform(-0.03, 0.03));
    img::Image im({3, size, size});
    const int64_t hw = size * size;
    for (int64_t ch = 0; ch < 3; ++ch) {
        const float v = std::min(1.0f, std::max(0.0f, base + tint[static_cast<size_t>(ch)]));
        for (int64_t i = 0; i < hw; ++i) im[ch * hw + i] = v;
    }
    return im;
}

/// Warm-tinted value noise: a coarse random grid upsampled bilinearly.
inline img::Image noise_background(RngStream& rng, int64_t size) {
    constexpr int64_t grid = 8;
    const std::array<float, 3> base = {0.55f, 0.42f, 0.30f};
    std::array<float, 3> offset;
    for (auto& o : offset) o = static_cast<float>(rng.uniform(-0.05, 0.05));
    img::Image coarse({3, grid, grid});
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t i = 0; i < grid * grid; ++i)
            coarse[ch * grid * grid + i] = std::min(
                1.0f, std::max(0.0f, base[static_cast<size_t>(ch)] +
                                         offset[static_cast<size_t>(ch)] +
                                         static_cast<float>(rng.uniform(-0.18, 0.18))));
    return img::resize_bilinear(coarse, size, size);
}

} // namespace toy

struct ToyDatasets {
    std::vector<Sample> source;       // labeled
    std::vector<Sample> target_train; // unlabeled
    std::vector<Sample> target_eval;  // labeled, evaluation only
    std::vector<std::string> keypoint_names;
};

namespace detail {

inline Sample make_toy_sample(RngStream& rng, const ToyDomainConfig& cfg, bool target_style,
                              bool with_labels, const std::string& id, Domain tag) {
    const int64_t s = cfg.image_size;
    const bool shifted = target_style && !cfg.shift.is_identity();
    const toy::FigurePose pose = toy::sample_pose(rng, s);

    img::Image im = (shifted && cfg.shift.background == "noise") ? toy::noise_background(rng, s)
                                                                 : toy::flat_background(rng, s);
    const toy::Palette pal =
        (shifted && cfg.shift.palette_swap) ? toy::warm_palette() : toy::cool_palette();
    const int64_t pick = rng.uniform_int(static_cast<int64_t>(pal.colors.size()));
    std::array<float, 3> color = pal.colors[static_cast<size_t>(pick)];
    for (auto& c : color)
        c = std::min(1.0f, std::max(0.0f, c + static_cast<float>(rng.uniform(-0.05, 0.05))));
    toy::draw_figure(im, pose, color);

    if (shifted) {
        if (cfg.shift.blur_radius > 0) im = img::gaussian_blur(im, cfg.shift.blur_radius);
        const float gain =
            static_cast<float>(rng.uniform(cfg.shift.contrast_lo, cfg.shift.contrast_hi));
        for (int64_t i = 0; i < im.numel(); ++i) im[i] = (im[i] - 0.5f) * gain + 0.5f;
        img::clamp01(im);
    }

    Sample sample;
    sample.image = std::move(im);
    sample.domain_tag = tag;
    sample.sample_id = id;
    if (with_labels) {
        KeypointSet kps(cfg.k);
        for (int64_t k = 0; k < cfg.k; ++k)
            kps.coords[static_cast<size_t>(k)] = pose.kp[static_cast<size_t>(k)];
        sample.keypoints = std::move(kps);
    }
    return sample;
}

} // namespace detail

/// Deterministic toy source/target pair. Geometry distribution is shared;
/// the target split differs only through ShiftSpec, so the domain gap is
/// photometric and the adaptation task is well-posed.
inline ToyDatasets generate_toy_domains(const ToyDomainConfig& cfg) {
    cfg.validate();
    ToyDatasets out;
    out.keypoint_names = toy_keypoint_names(cfg.k);

    auto make_split = [&](int64_t n, uint64_t salt, bool target_style, bool with_labels,
                          const std::string& prefix, Domain tag) {
        std::vector<Sample> split;
        split.reserve(static_cast<size_t>(n));
        RngStream rng(mix_seed(cfg.seed, salt));
        for (int64_t i = 0; i < n; ++i) {
            char id[64];
            std::snprintf(id, sizeof(id), "%s_%06lld", prefix.c_str(),
                          static_cast<long long>(i));
            split.push_back(
                detail::make_toy_sample(rng, cfg, target_style, with_labels, id, tag));
        }
        return split;
    };

    out.source = make_split(cfg.n_source, 1, false, true, "src", Domain::source);
    out.target_train = make_split(cfg.n_target_train, 2, true, false, "tgt_train", Domain::target);
    out.target_eval = make_split(cfg.n_target_eval, 3, true, true, "tgt_eval", Domain::target);
    return out;
}

// ---------------------------------------------------------------------------
// Annotated-dataset directory schema.
// ---------------------------------------------------------------------------

/// Writes `<root>/images/<id>.png` plus `<root>/annotations_<split>.json`.
/// Unlabeled samples serialize keypoints as zeros with visibility 0.
inline void save_dataset(const std::filesystem::path& root, const std::string& split,
                         const std::vector<Sample>& samples,
                         const std::vector<std::string>& keypoint_names) {
    std::filesystem::create_directories(root / "images");
    nlohmann::json ann;
    ann["keypoint_names"] = keypoint_names;
    ann["samples"] = nlohmann::json::array();
    const int64_t k = static_cast<int64_t>(keypoint_names.size());
    for (const auto& s : samples) {
        const std::string file = "images/" + s.sample_id + ".png";
        img::save_png(s.image, (root / file).string());
        nlohmann::json kj = nlohmann::json::array();
        for (int64_t i = 0; i < k; ++i) {
            if (s.keypoints.has_value()) {
                const auto& kp = *s.keypoints;
                check_arg(kp.k() == k, "save_dataset: keypoint count mismatch");
                kj.push_back({kp.coords[static_cast<size_t>(i)][0],
                              kp.coords[static_cast<size_t>(i)][1],
                              static_cast<int>(kp.visible[static_cast<size_t>(i)])});
            } else {
                kj.push_back({0.0, 0.0, 0});
            }
        }
        ann["samples"].push_back({{"id", s.sample_id},
                                  {"file", file},
                                  {"width", s.image.dim(2)},
                                  {"height", s.image.dim(1)},
                                  {"keypoints", kj}});
    }
    std::ofstream os(root / ("annotations_" + split + ".json"));
    check_data(os.good(), "cannot write annotations for split " + split);
    os << ann.dump(2) << "\n";
}

struct LoadedDataset {
    std::vector<Sample> samples;
    std::vector<std::string> keypoint_names;
    int64_t out_of_bounds_warnings = 0;
};

inline int dataset_num_workers() {
    const char* env = std::getenv("DAPOSE_NUM_WORKERS");
    if (env == nullptr) return 1;
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

/// Parses the annotation schema, validates keypoint-count consistency and
/// coordinate bounds (out-of-bounds visible keypoints become invisible and
/// are tallied), loads images, and rescales everything to image_size.
/// DAPOSE_NUM_WORKERS parallelizes the PNG decoding.
inline LoadedDataset load_annotated_dataset(const std::filesystem::path& root,
                                            const std::string& split, int64_t image_size,
                                            Domain tag) {
    const auto ann_path = root / ("annotations_" + split + ".json");
    std::ifstream is(ann_path);
    check_data(is.good(), "missing annotation file: " + ann_path.string());
    nlohmann::json ann;
    try {
        is >> ann;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed annotation JSON in " + ann_path.string() + ": " + e.what());
    }

    LoadedDataset out;
    try {
        out.keypoint_names = ann.at("keypoint_names").get<std::vector<std::string>>();
        const int64_t k = static_cast<int64_t>(out.keypoint_names.size());
        check_data(k > 0, "annotation schema: empty keypoint_names");
        const auto& recs = ann.at("samples");
        out.samples.resize(recs.size());
        std::vector<int64_t> warnings(recs.size(), 0);

        auto load_one = [&](size_t i) {
            const auto& r = recs.at(i);
            const std::string id = r.at("id").get<std::string>();
            const auto& kj = r.at("keypoints");
            if (static_cast<int64_t>(kj.size()) != k)
                throw DataError(detail::cat("annotation schema: sample '", id, "' has ",
                                            kj.size(), " keypoints, expected ", k));
            const int64_t width = r.at("width").get<int64_t>();
            const int64_t height = r.at("height").get<int64_t>();
            check_data(width > 0 && height > 0,
                       detail::cat("annotation schema: sample '", id, "' has bad size"));

            img::Image raw = img::load_png((root / r.at("file").get<std::string>()).string());
            check_data(raw.dim(1) == height && raw.dim(2) == width,
                       detail::cat("image size mismatch for sample '", id, "'"));

            const double sx = static_cast<double>(image_size) / static_cast<double>(width);
            const double sy = static_cast<double>(image_size) / static_cast<double>(height);
            KeypointSet kps(k);
            bool any_visible = false;
            for (int64_t j = 0; j < k; ++j) {
                const auto& row = kj.at(static_cast<size_t>(j));
                const double x = row.at(0).get<double>();
                const double y = row.at(1).get<double>();
                int v = row.at(2).get<int>();
                check_data(v == 0 || v == 1,
                           detail::cat("annotation schema: sample '", id, "' visibility not 0/1"));
                if (v == 1 && (x < 0 || y < 0 || x > static_cast<double>(width) ||
                               y > static_cast<double>(height))) {
                    v = 0;
                    ++warnings[i];
                }
                kps.coords[static_cast<size_t>(j)] = {x * sx, y * sy};
                kps.visible[static_cast<size_t>(j)] = static_cast<uint8_t>(v);
                any_visible = any_visible || v == 1;
            }
            Sample s;
            s.image = (raw.dim(1) == image_size && raw.dim(2) == image_size)
                          ? std::move(raw)
                          : img::resize_bilinear(raw, image_size, image_size);
            s.sample_id = id;
            s.domain_tag = tag;
            if (any_visible) s.keypoints = std::move(kps);
            out.samples[i] = std::move(s);
        };

        const int workers = dataset_num_workers();
        if (workers <= 1 || recs.size() < 2) {
            for (size_t i = 0; i < recs.size(); ++i) load_one(i);
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
            for (int t = 0; t < workers; ++t)
                pool.emplace_back([&, t] {
                    try {
                        for (size_t i = static_cast<size_t>(t); i < recs.size();
                             i += static_cast<size_t>(workers))
                            load_one(i);
                    } catch (...) {
                        errors[static_cast<size_t>(t)] = std::current_exception();
                    }
                });
            for (auto& th : pool) th.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
        }
        for (int64_t w : warnings) out.out_of_bounds_warnings += w;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("annotation schema error in " + ann_path.string() + ": " + e.what());
    }
    return out;
}

/// Drops labels; training code paths receive target batches through this so
/// evaluation labels can never leak into adaptation.
inline std::vector<Sample> strip_labels(std::vector<Sample> samples) {
    for (auto& s : samples) s.keypoints.reset();
    return samples;
}

} // namespace dapose
