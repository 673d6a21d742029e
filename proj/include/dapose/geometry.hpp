#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/common.hpp"
#include "dapose/tensor.hpp"

namespace dapose {

inline constexpr double kEpsNorm = 1e-12;
inline constexpr double kDefaultSigmaG = 2.0; // heatmap cells

/// K keypoints in input-image pixel coordinates (x = column, y = row).
/// Invisible keypoints carry no coordinate contract.
struct KeypointSet {
    std::vector<std::array<double, 2>> coords;
    std::vector<uint8_t> visible;

    KeypointSet() = default;
    explicit KeypointSet(int64_t k)
        : coords(static_cast<size_t>(k), {0.0, 0.0}), visible(static_cast<size_t>(k), 1) {}

    int64_t k() const { return static_cast<int64_t>(coords.size()); }

    void require_valid() const {
        check_arg(coords.size() == visible.size(), "keypoints: coords/visibility size mismatch");
        for (size_t i = 0; i < coords.size(); ++i)
            if (visible[i])
                check_arg(is_finite(coords[i][0]) && is_finite(coords[i][1]),
                          "keypoints: non-finite coordinate on a visible keypoint");
    }
};

/// (K, H', W') nonnegative activation grid at 1/stride of input resolution.
/// Cell (r, c) covers image pixels [c*stride, (c+1)*stride) x [r*stride, ...);
/// its center sits at ((c+0.5)*stride, (r+0.5)*stride) in image space.
template <typename S>
struct HeatmapT {
    Tensor<S> values;
    int64_t stride = 4;

    HeatmapT() = default;
    HeatmapT(int64_t k, int64_t h, int64_t w, int64_t stride_) : values({k, h, w}), stride(stride_) {}
    HeatmapT(Tensor<S> v, int64_t stride_) : values(std::move(v)), stride(stride_) {
        check_arg(values.rank() == 3, "heatmap: (K,H',W') tensor expected");
    }

    int64_t k() const { return values.dim(0); }
    int64_t h() const { return values.dim(1); }
    int64_t w() const { return values.dim(2); }

    void require_valid() const {
        check_arg(values.rank() == 3 && values.dim(1) > 0 && values.dim(2) > 0 && stride > 0,
                  "heatmap: bad geometry");
        for (int64_t i = 0; i < values.numel(); ++i)
            check_arg(is_finite(values[i]) && values[i] >= S(0),
                      "heatmap: entries must be finite and nonnegative");
    }
};

using Heatmap = HeatmapT<float>;

/// Gaussian rendering of keypoints onto the heatmap grid. Distances and
/// sigma_g are measured in heatmap cells; invisible keypoints produce all-zero
/// channels.
template <typename S>
HeatmapT<S> render_heatmaps(const KeypointSet& kps, int64_t h, int64_t w, int64_t stride,
                            double sigma_g = kDefaultSigmaG) {
    check_arg(sigma_g > 0, "render_heatmaps: sigma_g must be positive");
    check_arg(h > 0 && w > 0 && stride > 0, "render_heatmaps: positive grid required");
    kps.require_valid();
    HeatmapT<S> out(kps.k(), h, w, stride);
    const double inv2s2 = 1.0 / (2.0 * sigma_g * sigma_g);
    for (int64_t k = 0; k < kps.k(); ++k) {
        if (!kps.visible[static_cast<size_t>(k)]) continue;
        const double hx = kps.coords[static_cast<size_t>(k)][0] / static_cast<double>(stride);
        const double hy = kps.coords[static_cast<size_t>(k)][1] / static_cast<double>(stride);
        for (int64_t r = 0; r < h; ++r) {
            const double dy = (static_cast<double>(r) + 0.5) - hy;
            for (int64_t c = 0; c < w; ++c) {
                const double dx = (static_cast<double>(c) + 0.5) - hx;
                out.values.at(k, r, c) =
                    static_cast<S>(std::exp(-(dx * dx + dy * dy) * inv2s2));
            }
        }
    }
    return out;
}

struct DecodedKeypoints {
    KeypointSet keypoints;
    std::vector<uint8_t> degenerate; // channel was constant; tie-broken to smallest index
};

/// Argmax decoding with a quarter-cell offset toward the larger 4-neighbor
/// per axis (no offset on ties or at the grid border).
template <typename S>
DecodedKeypoints decode_heatmaps(const HeatmapT<S>& hm) {
    const int64_t k = hm.k(), h = hm.h(), w = hm.w();
    check_arg(k > 0 && h > 0 && w > 0, "decode_heatmaps: empty heatmap");
    DecodedKeypoints out;
    out.keypoints = KeypointSet(k);
    out.degenerate.assign(static_cast<size_t>(k), 0);
    for (int64_t ch = 0; ch < k; ++ch) {
        const S* plane = hm.values.data() + ch * h * w;
        int64_t best = 0;
        S mx = plane[0], mn = plane[0];
        for (int64_t i = 1; i < h * w; ++i) {
            if (plane[i] > mx) {
                mx = plane[i];
                best = i;
            }
            if (plane[i] < mn) mn = plane[i];
        }
        if (mx == mn) out.degenerate[static_cast<size_t>(ch)] = 1;
        const int64_t r = best / w, c = best % w;
        double dx = 0.0, dy = 0.0;
        if (c > 0 && c < w - 1) {
            const S right = plane[r * w + c + 1], left = plane[r * w + c - 1];
            if (right > left) dx = 0.25;
            else if (left > right) dx = -0.25;
        }
        if (r > 0 && r < h - 1) {
            const S down = plane[(r + 1) * w + c], up = plane[(r - 1) * w + c];
            if (down > up) dy = 0.25;
            else if (up > down) dy = -0.25;
        }
        out.keypoints.coords[static_cast<size_t>(ch)] = {
            (static_cast<double>(c) + 0.5 + dx) * static_cast<double>(hm.stride),
            (static_cast<double>(r) + 0.5 + dy) * static_cast<double>(hm.stride)};
        out.keypoints.visible[static_cast<size_t>(ch)] = 1;
    }
    return out;
}

/// Divide each channel by its max when the max exceeds kEpsNorm; degenerate
/// channels come back as zeros. Output entries lie in [0, 1].
template <typename S>
HeatmapT<S> normalize_heatmap(const HeatmapT<S>& hm) {
    HeatmapT<S> out(hm.k(), hm.h(), hm.w(), hm.stride);
    const int64_t hw = hm.h() * hm.w();
    for (int64_t ch = 0; ch < hm.k(); ++ch) {
        const S* src = hm.values.data() + ch * hw;
        S* dst = out.values.data() + ch * hw;
        S mx = src[0];
        for (int64_t i = 1; i < hw; ++i) mx = std::max(mx, src[i]);
        if (static_cast<double>(mx) <= kEpsNorm) continue;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] / mx;
    }
    return out;
}

/// Peak (max) of each channel.
template <typename S>
std::vector<double> channel_peaks(const HeatmapT<S>& hm) {
    std::vector<double> peaks(static_cast<size_t>(hm.k()), 0.0);
    const int64_t hw = hm.h() * hm.w();
    for (int64_t ch = 0; ch < hm.k(); ++ch) {
        const S* src = hm.values.data() + ch * hw;
        S mx = src[0];
        for (int64_t i = 1; i < hw; ++i) mx = std::max(mx, src[i]);
        peaks[static_cast<size_t>(ch)] = static_cast<double>(mx);
    }
    return peaks;
}

using KeypointGroups = std::map<std::string, std::vector<int>>;

struct PCKResult {
    std::vector<double> per_keypoint_accuracy;
    std::map<std::string, double> per_group_accuracy;
    double overall = 0.0;
    double threshold_fraction = 0.0;
    int64_t counted = 0; // keypoints within threshold (numerator of overall)
};

inline nlohmann::json to_json(const PCKResult& r) {
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [name, acc] : r.per_group_accuracy) groups[name] = acc;
    return nlohmann::json{{"overall", r.overall},
                          {"threshold_fraction", r.threshold_fraction},
                          {"per_keypoint", r.per_keypoint_accuracy},
                          {"groups", groups},
                          {"counted", r.counted}};
}

/// Streaming PCK over (pred, gt) pairs. A keypoint counts iff the ground
/// truth is visible and the L2 error is <= threshold_fraction*reference_size
/// (inclusive). Invisible ground-truth keypoints are excluded entirely.
class PckAccumulator {
  public:
    PckAccumulator(double threshold_fraction, double reference_size)
        : thr_(threshold_fraction), ref_(reference_size) {
        check_arg(reference_size > 0, "pck: reference_size must be positive");
    }

    void add(const KeypointSet& pred, const KeypointSet& gt) {
        check_arg(pred.k() == gt.k(), "pck: keypoint count mismatch");
        if (correct_.empty()) {
            correct_.assign(static_cast<size_t>(gt.k()), 0);
            visible_.assign(static_cast<size_t>(gt.k()), 0);
        }
        check_arg(static_cast<int64_t>(correct_.size()) == gt.k(),
                  "pck: keypoint count changed between samples");
        const double limit = thr_ * ref_;
        for (int64_t k = 0; k < gt.k(); ++k) {
            if (!gt.visible[static_cast<size_t>(k)]) continue;
            ++visible_[static_cast<size_t>(k)];
            const double dx = pred.coords[static_cast<size_t>(k)][0] -
                              gt.coords[static_cast<size_t>(k)][0];
            const double dy = pred.coords[static_cast<size_t>(k)][1] -
                              gt.coords[static_cast<size_t>(k)][1];
            if (std::sqrt(dx * dx + dy * dy) <= limit) ++correct_[static_cast<size_t>(k)];
        }
    }

    PCKResult result(const KeypointGroups& groups = {}) const {
        PCKResult r;
        r.threshold_fraction = thr_;
        int64_t num = 0, den = 0;
        r.per_keypoint_accuracy.resize(correct_.size(), 0.0);
        for (size_t k = 0; k < correct_.size(); ++k) {
            num += correct_[k];
            den += visible_[k];
            r.per_keypoint_accuracy[k] =
                visible_[k] > 0 ? static_cast<double>(correct_[k]) / visible_[k] : 0.0;
        }
        r.counted = num;
        r.overall = den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
        for (const auto& [name, idxs] : groups) {
            int64_t gn = 0, gd = 0;
            for (int idx : idxs) {
                check_arg(idx >= 0 && idx < static_cast<int>(correct_.size()),
                          "pck: group index out of range");
                gn += correct_[static_cast<size_t>(idx)];
                gd += visible_[static_cast<size_t>(idx)];
            }
            r.per_group_accuracy[name] = gd > 0 ? static_cast<double>(gn) / gd : 0.0;
        }
        return r;
    }

  private:
    double thr_, ref_;
    std::vector<int64_t> correct_, visible_;
};

inline PCKResult pck(const KeypointSet& pred, const KeypointSet& gt, double threshold_fraction,
                     double reference_size, const KeypointGroups& groups = {}) {
    PckAccumulator acc(threshold_fraction, reference_size);
    acc.add(pred, gt);
    return acc.result(groups);
}

} // namespace dapose
