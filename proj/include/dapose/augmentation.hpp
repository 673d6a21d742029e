#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/geometry.hpp"
#include "dapose/image.hpp"
#include "dapose/rng.hpp"
#include "dapose/warp.hpp"

namespace dapose {

enum class AugPolicy { normal, strong, weak };

inline std::string to_string(AugPolicy p) {
    switch (p) {
        case AugPolicy::normal: return "normal";
        case AugPolicy::strong: return "strong";
        case AugPolicy::weak: return "weak";
    }
    return "?";
}

/// Parameter ranges per policy. The weak policy is purely geometric and
/// never flips nor occludes; flips are excluded from every policy so heatmap
/// inversion needs no left/right keypoint swapping.
struct PolicyRanges {
    double rot_deg;
    double scale_lo, scale_hi;
    double brightness;              // additive, symmetric around 0
    double contrast_lo, contrast_hi; // multiplicative around 0.5-pivot
    double jitter;                  // per-channel additive, symmetric
};

inline PolicyRanges policy_ranges(AugPolicy p) {
    switch (p) {
        case AugPolicy::normal: return {15.0, 0.9, 1.1, 0.1, 1.0, 1.0, 0.0};
        case AugPolicy::strong: return {30.0, 0.75, 1.25, 0.3, 0.6, 1.4, 0.1};
        case AugPolicy::weak: return {5.0, 0.95, 1.05, 0.0, 1.0, 1.0, 0.0};
    }
    return {};
}

struct Photometric {
    double brightness = 0.0;
    double contrast = 1.0;
    std::array<double, 3> jitter{0.0, 0.0, 0.0};

    bool is_identity() const {
        return brightness == 0.0 && contrast == 1.0 && jitter[0] == 0.0 && jitter[1] == 0.0 &&
               jitter[2] == 0.0;
    }
};

struct OcclusionBox {
    int64_t x = 0, y = 0, w = 0, h = 0;
};

/// Fully determines one augmentation: affine (forward map in input-image
/// pixel space), photometric parameters, occlusion boxes, and the seed that
/// drives the box gray fills. Applying the same record twice is bit-identical.
struct AugmentationRecord {
    Affine2 affine;
    Photometric photometric;
    std::vector<OcclusionBox> occlusion_boxes;
    uint64_t seed = 0;
};

inline nlohmann::json to_json(const AugmentationRecord& rec) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : rec.occlusion_boxes) boxes.push_back({b.x, b.y, b.w, b.h});
    return nlohmann::json{
        {"affine", rec.affine.m},
        {"photometric",
         {{"brightness", rec.photometric.brightness},
          {"contrast", rec.photometric.contrast},
          {"jitter", rec.photometric.jitter}}},
        {"occlusion_boxes", boxes},
        {"seed", rec.seed}};
}

inline AugmentationRecord record_from_json(const nlohmann::json& j) {
    AugmentationRecord rec;
    const auto& a = j.at("affine");
    for (size_t i = 0; i < 6; ++i) rec.affine.m[i] = a.at(i).get<double>();
    rec.photometric.brightness = j.at("photometric").at("brightness").get<double>();
    rec.photometric.contrast = j.at("photometric").at("contrast").get<double>();
    for (size_t i = 0; i < 3; ++i)
        rec.photometric.jitter[i] = j.at("photometric").at("jitter").at(i).get<double>();
    for (const auto& b : j.at("occlusion_boxes"))
        rec.occlusion_boxes.push_back(
            {b.at(0).get<int64_t>(), b.at(1).get<int64_t>(), b.at(2).get<int64_t>(),
             b.at(3).get<int64_t>()});
    rec.seed = j.at("seed").get<uint64_t>();
    return rec;
}

namespace detail {
inline constexpr uint64_t kOccBoxSalt = 0x5bd1e995u;
inline constexpr uint64_t kOccFillSalt = 0xc2b2ae35u;
} // namespace detail

/// Draw transform parameters for explicit ranges. Rotation and scale act
/// about the image center. Draw order is fixed (angle, scale, brightness,
/// contrast, jitter) so records are reproducible from (ranges, seed) alone.
inline AugmentationRecord sample_policy(const PolicyRanges& pr, uint64_t seed,
                                        int64_t image_size) {
    check_arg(image_size > 0, "sample_policy: positive image size required");
    RngStream rng(seed);
    AugmentationRecord rec;
    rec.seed = seed;
    const double angle =
        rng.uniform(-pr.rot_deg, pr.rot_deg) * std::numbers::pi / 180.0;
    const double scale = rng.uniform(pr.scale_lo, pr.scale_hi);
    const double c = static_cast<double>(image_size) / 2.0;
    rec.affine = Affine2::rot_scale_about(angle, scale, c, c);
    if (pr.brightness > 0) rec.photometric.brightness = rng.uniform(-pr.brightness, pr.brightness);
    if (pr.contrast_lo != 1.0 || pr.contrast_hi != 1.0)
        rec.photometric.contrast = rng.uniform(pr.contrast_lo, pr.contrast_hi);
    if (pr.jitter > 0)
        for (auto& jv : rec.photometric.jitter) jv = rng.uniform(-pr.jitter, pr.jitter);
    return rec;
}

inline AugmentationRecord sample_policy(AugPolicy policy, uint64_t seed, int64_t image_size) {
    return sample_policy(policy_ranges(policy), seed, image_size);
}

namespace detail {

inline void fill_occlusions(img::Image& im, const AugmentationRecord& rec) {
    if (rec.occlusion_boxes.empty()) return;
    RngStream fill(rec.seed ^ kOccFillSalt);
    for (const auto& b : rec.occlusion_boxes) {
        const float g = static_cast<float>(fill.uniform());
        img::fill_rect(im, b.x, b.y, b.w, b.h, g, g, g);
    }
}

} // namespace detail

/// Affine warp (bilinear, zero border), then photometric ops, then occlusion
/// fills, then clamp to [0, 1]. An identity record returns the input
/// bit-exactly.
inline img::Image apply_to_image(const img::Image& im, const AugmentationRecord& rec) {
    check_arg(rec.affine.invertible(), "apply_to_image: record affine is not invertible");
    img::Image out({3, im.dim(1), im.dim(2)});
    const bool identity_affine = rec.affine.m == Affine2::identity().m;
    if (identity_affine) {
        out = im;
    } else {
        const Affine2 pull = rec.affine.inverse();
        warp::pull_planes(im.data(), out.data(), 3, im.dim(1), im.dim(2), pull);
    }
    const auto& ph = rec.photometric;
    if (ph.brightness != 0.0)
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] += static_cast<float>(ph.brightness);
    if (ph.contrast != 1.0)
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = (out[i] - 0.5f) * static_cast<float>(ph.contrast) + 0.5f;
    const int64_t hw = im.dim(1) * im.dim(2);
    for (int64_t ch = 0; ch < 3; ++ch) {
        if (ph.jitter[static_cast<size_t>(ch)] == 0.0) continue;
        const float d = static_cast<float>(ph.jitter[static_cast<size_t>(ch)]);
        for (int64_t i = 0; i < hw; ++i) out[ch * hw + i] += d;
    }
    detail::fill_occlusions(out, rec);
    img::clamp01(out);
    return out;
}

/// Forward transform of keypoints under the record's affine (photometric and
/// occlusion components do not move keypoints).
inline KeypointSet transform_keypoints(const KeypointSet& kps, const AugmentationRecord& rec) {
    KeypointSet out = kps;
    for (int64_t k = 0; k < kps.k(); ++k) {
        if (!kps.visible[static_cast<size_t>(k)]) continue;
        rec.affine.apply(kps.coords[static_cast<size_t>(k)][0],
                         kps.coords[static_cast<size_t>(k)][1],
                         out.coords[static_cast<size_t>(k)][0],
                         out.coords[static_cast<size_t>(k)][1]);
    }
    return out;
}

/// Sample up to two occlusion boxes (side 10-25% of the image), append them
/// to the record, and apply the fills. Boxes center on a randomly chosen
/// visible keypoint estimate (with jitter) when one is supplied, else fall
/// uniformly. `forced_n` pins the box count for tests; -1 draws it.
inline std::pair<img::Image, AugmentationRecord> occlude(const img::Image& im,
                                                         const KeypointSet* kps_estimate,
                                                         AugmentationRecord rec,
                                                         int forced_n = -1) {
    const int64_t size = im.dim(1);
    RngStream rng(rec.seed ^ detail::kOccBoxSalt);
    const int64_t n = forced_n >= 0 ? forced_n : rng.uniform_int(3);
    std::vector<int> visible_idx;
    if (kps_estimate != nullptr)
        for (int64_t k = 0; k < kps_estimate->k(); ++k)
            if (kps_estimate->visible[static_cast<size_t>(k)])
                visible_idx.push_back(static_cast<int>(k));
    for (int64_t i = 0; i < n; ++i) {
        const double side = rng.uniform(0.10, 0.25) * static_cast<double>(size);
        double cx, cy;
        if (!visible_idx.empty()) {
            const int pick = visible_idx[static_cast<size_t>(
                rng.uniform_int(static_cast<int64_t>(visible_idx.size())))];
            cx = kps_estimate->coords[static_cast<size_t>(pick)][0] +
                 rng.uniform(-side / 4.0, side / 4.0);
            cy = kps_estimate->coords[static_cast<size_t>(pick)][1] +
                 rng.uniform(-side / 4.0, side / 4.0);
        } else {
            cx = rng.uniform(0.0, static_cast<double>(size));
            cy = rng.uniform(0.0, static_cast<double>(size));
        }
        OcclusionBox b;
        b.w = b.h = std::max<int64_t>(1, static_cast<int64_t>(std::lround(side)));
        b.x = static_cast<int64_t>(std::lround(cx - side / 2.0));
        b.y = static_cast<int64_t>(std::lround(cy - side / 2.0));
        rec.occlusion_boxes.push_back(b);
    }
    img::Image out = im;
    detail::fill_occlusions(out, rec);
    img::clamp01(out);
    return {std::move(out), std::move(rec)};
}

/// Undo the record's spatial component on a heatmap: pulls every channel by
/// the record affine conjugated into heatmap space, so a peak at A(k)/stride
/// moves back to k/stride. Photometric and occlusion parts have no spatial
/// inverse and are ignored. Output is clamped to be nonnegative.
template <typename S>
HeatmapT<S> invert_on_heatmap(const HeatmapT<S>& hm, const AugmentationRecord& rec) {
    check_arg(rec.affine.invertible(), "invert_on_heatmap: record affine is not invertible");
    const Affine2 pull = rec.affine.to_stride_space(static_cast<double>(hm.stride));
    HeatmapT<S> out(hm.k(), hm.h(), hm.w(), hm.stride);
    warp::pull_planes(hm.values.data(), out.values.data(), hm.k(), hm.h(), hm.w(), pull);
    for (int64_t i = 0; i < out.values.numel(); ++i)
        out.values[i] = std::max(S(0), out.values[i]);
    return out;
}

/// Forward-transform a heatmap under the record's affine (inverse of
/// invert_on_heatmap's spatial action); used by round-trip checks.
template <typename S>
HeatmapT<S> apply_to_heatmap(const HeatmapT<S>& hm, const AugmentationRecord& rec) {
    check_arg(rec.affine.invertible(), "apply_to_heatmap: record affine is not invertible");
    const Affine2 pull =
        rec.affine.to_stride_space(static_cast<double>(hm.stride)).inverse();
    HeatmapT<S> out(hm.k(), hm.h(), hm.w(), hm.stride);
    warp::pull_planes(hm.values.data(), out.values.data(), hm.k(), hm.h(), hm.w(), pull);
    for (int64_t i = 0; i < out.values.numel(); ++i)
        out.values[i] = std::max(S(0), out.values[i]);
    return out;
}

inline constexpr double kTauLo = 0.5;
inline constexpr double kTauHi = 1.0;

/// Per-keypoint random acceptance thresholds for teacher pseudo-labels.
struct ConfidenceMask {
    std::vector<uint8_t> mask;
    std::vector<double> tau_i;

    double accepted_fraction() const {
        if (mask.empty()) return 0.0;
        double n = 0;
        for (uint8_t m : mask) n += m;
        return n / static_cast<double>(mask.size());
    }
};

/// Draws tau_i[k] ~ Uniform[tau_lo, tau_hi) per keypoint from the supplied
/// stream; mask[k] holds iff the channel-k peak reaches its threshold. The
/// input heatmap must already be calibrated to [0, 1] peaks.
template <typename S>
ConfidenceMask confidence_mask(const HeatmapT<S>& hm, RngStream& rng, double tau_lo = kTauLo,
                               double tau_hi = kTauHi) {
    check_arg(tau_lo <= tau_hi, "confidence_mask: tau_lo must not exceed tau_hi");
    ConfidenceMask cm;
    const auto peaks = channel_peaks(hm);
    cm.mask.resize(peaks.size());
    cm.tau_i.resize(peaks.size());
    for (size_t k = 0; k < peaks.size(); ++k) {
        check_arg(peaks[k] <= 1.0 + 1e-6, "confidence_mask: peaks must lie in [0, 1]");
        cm.tau_i[k] = rng.uniform(tau_lo, tau_hi);
        cm.mask[k] = peaks[k] >= cm.tau_i[k] ? 1 : 0;
    }
    return cm;
}

template <typename S>
ConfidenceMask confidence_mask_seeded(const HeatmapT<S>& hm, uint64_t seed,
                                      double tau_lo = kTauLo, double tau_hi = kTauHi) {
    RngStream rng(seed);
    return confidence_mask(hm, rng, tau_lo, tau_hi);
}

} // namespace dapose
