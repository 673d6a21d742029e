#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/augmentation.hpp"
#include "dapose/models.hpp"

namespace dapose {

inline constexpr double kEpsLog = 1e-12;
inline constexpr double kTauPose = 0.5;

struct LossWeights {
    double alpha = 1.0;
    double beta = 0.1;
    double gamma = 0.3;

    void validate() const {
        check_config(std::isfinite(alpha) && alpha >= 0.0, "alpha must be finite and >= 0");
        check_config(std::isfinite(beta) && beta >= 0.0, "beta must be finite and >= 0");
        check_config(std::isfinite(gamma) && gamma >= 0.0, "gamma must be finite and >= 0");
    }
};

struct LossBreakdown {
    double l_sup = 0.0;
    double l_img = 0.0;
    double l_fea = 0.0;
    double l_pose = 0.0;
    double l_enth = 0.0;
    double l_entw = 0.0;
    double l_div = 0.0;
    double total = 0.0;
    double masked_keypoint_fraction = 0.0;

    nlohmann::json to_json() const {
        return {{"l_sup", l_sup},   {"l_img", l_img},
                {"l_fea", l_fea},   {"l_pose", l_pose},
                {"l_enth", l_enth}, {"l_entw", l_entw},
                {"l_div", l_div},   {"total", total},
                {"masked_keypoint_fraction", masked_keypoint_fraction}};
    }

    static LossBreakdown from_json(const nlohmann::json& j) {
        LossBreakdown b;
        b.l_sup = j.at("l_sup").get<double>();
        b.l_img = j.at("l_img").get<double>();
        b.l_fea = j.at("l_fea").get<double>();
        b.l_pose = j.at("l_pose").get<double>();
        b.l_enth = j.at("l_enth").get<double>();
        b.l_entw = j.at("l_entw").get<double>();
        b.l_div = j.at("l_div").get<double>();
        b.total = j.at("total").get<double>();
        b.masked_keypoint_fraction = j.at("masked_keypoint_fraction").get<double>();
        return b;
    }
};

/// Supervised heatmap loss: mean squared error over every entry of the
/// batch, which equals the per-sample MSE averaged over the batch.
template <typename S>
Var<S> loss_sup(const Var<S>& pred, const Tensor<S>& gt) {
    check_arg(pred.val().same_shape(gt), "loss_sup: shape mismatch");
    auto d = ag::sub(pred, ag::constant(gt));
    return ag::mean_all(ag::mul(d, d));
}

/// Scalar binary cross-entropy with label convention d=0 source, d=1 target.
inline double loss_dis(double prob, int d) {
    check_arg(d == 0 || d == 1, "loss_dis: label must be 0 or 1");
    check_arg(prob > 0.0 && prob < 1.0, "loss_dis: prob must lie in (0, 1)");
    return d == 1 ? -std::log(prob) : -std::log(1.0 - prob);
}

/// Batched binary cross-entropy, mean over samples. Probabilities must
/// already be clamped away from {0, 1} (the discriminator guarantees it).
template <typename S>
Var<S> loss_dis(const Var<S>& probs, const Tensor<S>& labels) {
    check_arg(probs.val().numel() == labels.numel() && probs.val().numel() > 0,
              "loss_dis: probs/labels size mismatch");
    const int64_t n = probs.val().numel();
    auto p = ag::reshape(probs, {n});
    auto log_p = ag::log_eps(p, S(0));
    auto log_q = ag::log_eps(ag::affine(p, S(-1), S(1)), S(0));
    Tensor<S> w_pos({n}), w_neg({n});
    for (int64_t i = 0; i < n; ++i) {
        check_arg(labels[i] == S(0) || labels[i] == S(1), "loss_dis: labels must be 0 or 1");
        w_pos[i] = -labels[i] / static_cast<S>(n);
        w_neg[i] = -(S(1) - labels[i]) / static_cast<S>(n);
    }
    return ag::add(ag::dot_const(log_p, std::move(w_pos)),
                   ag::dot_const(log_q, std::move(w_neg)));
}

/// Domain labels for a concatenated [source; target] feature batch.
template <typename S>
Tensor<S> domain_labels(int64_t n_source, int64_t n_target) {
    check_arg(n_source > 0 && n_target > 0, "domain_labels: both batches must be non-empty");
    Tensor<S> d({n_source + n_target});
    for (int64_t i = 0; i < n_source; ++i) d[i] = S(0);
    for (int64_t i = 0; i < n_target; ++i) d[n_source + i] = S(1);
    return d;
}

/// Feature-level adversarial loss. Minimizing it trains D and f_e to
/// separate the domains while the reversal layer scales the gradient into
/// the pose encoder by -lambda, making the encoder confuse them.
template <typename S>
Var<S> loss_fea(const Discriminator<S>& d, const FeatureEnhancer<S>& fe,
                const Var<S>& source_feats, const Var<S>& target_feats, double lambda) {
    check_arg(source_feats.val().rank() == 2 && target_feats.val().rank() == 2 &&
                  source_feats.val().dim(1) == target_feats.val().dim(1),
              "loss_fea: rank-2 feature batches with equal width expected");
    auto feats = ag::concat_rows(source_feats, target_feats);
    auto probs = discriminate(d, fe, feats, lambda);
    return loss_dis(probs, domain_labels<S>(source_feats.val().dim(0),
                                            target_feats.val().dim(0)));
}

/// Raw axis projections of a single channel; sums, not softmax.
template <typename S>
std::vector<S> project_h(const Tensor<S>& channel) {
    check_arg(channel.rank() == 2, "project_h: (H, W) channel expected");
    const int64_t h = channel.dim(0), w = channel.dim(1);
    std::vector<S> out(static_cast<size_t>(h), S(0));
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) out[static_cast<size_t>(r)] += channel.at(r, c);
    return out;
}

template <typename S>
std::vector<S> project_w(const Tensor<S>& channel) {
    check_arg(channel.rank() == 2, "project_w: (H, W) channel expected");
    const int64_t h = channel.dim(0), w = channel.dim(1);
    std::vector<S> out(static_cast<size_t>(w), S(0));
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) out[static_cast<size_t>(c)] += channel.at(r, c);
    return out;
}

namespace pose_ops {

/// (N, K, H, W) -> (N*K, H) softmax of row-projection logits.
template <typename S>
Var<S> project_h_softmax(const Var<S>& x) {
    const auto& s = x.val().shape();
    auto sums = ag::sum_rows(ag::reshape(x, {s[0] * s[1] * s[2], s[3]}));
    return ag::softmax_rows(ag::reshape(sums, {s[0] * s[1], s[2]}));
}

/// (N, K, H, W) -> (N*K, W) softmax of column-projection logits.
template <typename S>
Var<S> project_w_softmax(const Var<S>& x) {
    const auto& s = x.val().shape();
    auto sums = ag::sum_mid(ag::reshape(x, {s[0] * s[1], s[2], s[3]}));
    return ag::softmax_rows(sums);
}

/// Per-row sum of p*log(p): the negative entropy of each distribution row.
/// The floored log keeps one-hot rows at exactly zero.
template <typename S>
Var<S> neg_entropy_rows(const Var<S>& p) {
    return ag::sum_rows(ag::mul(p, ag::log_floor(p, static_cast<S>(kEpsLog))));
}

} // namespace pose_ops

template <typename S>
struct PoseLossResult {
    Var<S> pose, enth, entw, div;
    std::vector<uint8_t> participation; // N*K flags, row-major over (n, k)
    double participating_fraction = 0.0;
};

/// Information-maximization loss on target-domain heatmaps.
/// Entropy terms sharpen each participating channel's axis marginals;
/// the diversity term spreads the batch-mean distribution. A channel
/// participates when its peak reaches tau_p on the [0, 1] activation scale.
template <typename S>
PoseLossResult<S> loss_pose(const Var<S>& heatmaps, double tau_p = kTauPose,
                            bool per_sample_div = false) {
    const auto& shape = heatmaps.val().shape();
    check_arg(shape.size() == 4, "loss_pose: (N, K, H, W) heatmaps expected");
    check_arg(heatmaps.val().all_finite(), "loss_pose: heatmaps must be finite");
    const int64_t n = shape[0], k = shape[1], h = shape[2], w = shape[3];
    const int64_t rows = n * k, plane = h * w;

    PoseLossResult<S> out;
    out.participation.assign(static_cast<size_t>(rows), 0);
    int64_t count = 0;
    for (int64_t r = 0; r < rows; ++r) {
        S peak = heatmaps.val()[r * plane];
        for (int64_t i = 1; i < plane; ++i)
            peak = std::max(peak, heatmaps.val()[r * plane + i]);
        if (static_cast<double>(peak) >= tau_p) {
            out.participation[static_cast<size_t>(r)] = 1;
            ++count;
        }
    }
    out.participating_fraction = static_cast<double>(count) / static_cast<double>(rows);

    if (count > 0) {
        Tensor<S> sel({rows});
        const S scale = S(-1) / static_cast<S>(count);
        for (int64_t r = 0; r < rows; ++r)
            sel[r] = out.participation[static_cast<size_t>(r)] ? scale : S(0);
        auto p_h = pose_ops::project_h_softmax(heatmaps);
        auto p_w = pose_ops::project_w_softmax(heatmaps);
        out.enth = ag::dot_const(pose_ops::neg_entropy_rows(p_h), sel);
        out.entw = ag::dot_const(pose_ops::neg_entropy_rows(p_w), std::move(sel));
    } else {
        out.enth = ag::constant(Tensor<S>::scalar(S(0)));
        out.entw = ag::constant(Tensor<S>::scalar(S(0)));
    }

    if (per_sample_div) {
        auto q = ag::softmax_rows(ag::reshape(heatmaps, {rows, plane}));
        out.div = ag::dot_const(pose_ops::neg_entropy_rows(q),
                                Tensor<S>::full({rows}, S(1) / static_cast<S>(rows)));
    } else {
        auto mean_hm = ag::mean_over_batch(heatmaps); // (K, H, W)
        auto q = ag::softmax_rows(ag::reshape(mean_hm, {k, plane}));
        out.div = ag::dot_const(pose_ops::neg_entropy_rows(q),
                                Tensor<S>::full({k}, S(1) / static_cast<S>(k)));
    }

    out.pose = ag::add(ag::add(out.enth, out.entw), out.div);
    return out;
}

/// Image-level consistency loss on a batch. Both branches are unwarped back
/// to the shared frame by pulling with each record's forward affine in
/// heatmap space; channels the confidence mask rejected contribute nothing.
/// The teacher tensor enters as a constant, so no gradient reaches it.
template <typename S>
Var<S> loss_img_batch(const Var<S>& student_h, const Tensor<S>& teacher_h_norm,
                      const std::vector<AugmentationRecord>& student_recs,
                      const std::vector<AugmentationRecord>& teacher_recs,
                      const std::vector<ConfidenceMask>& masks, int64_t stride) {
    const auto& shape = student_h.val().shape();
    check_arg(shape.size() == 4 && student_h.val().same_shape(teacher_h_norm),
              "loss_img: matching (N, K, H, W) heatmap batches expected");
    const int64_t n = shape[0], k = shape[1], h = shape[2], w = shape[3];
    check_arg(static_cast<int64_t>(student_recs.size()) == n &&
                  static_cast<int64_t>(teacher_recs.size()) == n &&
                  static_cast<int64_t>(masks.size()) == n,
              "loss_img: one record and mask per sample required");

    std::vector<Affine2> student_pulls;
    student_pulls.reserve(static_cast<size_t>(n));
    for (const auto& rec : student_recs) {
        check_arg(rec.affine.invertible(), "loss_img: student record not invertible");
        student_pulls.push_back(rec.affine.to_stride_space(stride));
    }
    auto warped_student = nn::warp_channels(student_h, std::move(student_pulls));

    Tensor<S> warped_teacher(teacher_h_norm.shape());
    for (int64_t i = 0; i < n; ++i) {
        check_arg(teacher_recs[static_cast<size_t>(i)].affine.invertible(),
                  "loss_img: teacher record not invertible");
        HeatmapT<S> hm;
        hm.values = Tensor<S>({k, h, w});
        hm.stride = stride;
        std::copy(teacher_h_norm.data() + i * k * h * w,
                  teacher_h_norm.data() + (i + 1) * k * h * w, hm.values.data());
        auto undone = invert_on_heatmap(hm, teacher_recs[static_cast<size_t>(i)]);
        std::copy(undone.values.data(), undone.values.data() + k * h * w,
                  warped_teacher.data() + i * k * h * w);
    }

    Tensor<S> weight(student_h.val().shape());
    const S per_cell = S(1) / static_cast<S>(h * w * n);
    for (int64_t i = 0; i < n; ++i) {
        check_arg(static_cast<int64_t>(masks[static_cast<size_t>(i)].mask.size()) == k,
                  "loss_img: mask width mismatch");
        for (int64_t c = 0; c < k; ++c) {
            if (!masks[static_cast<size_t>(i)].mask[static_cast<size_t>(c)]) continue;
            S* dst = weight.data() + (i * k + c) * h * w;
            for (int64_t j = 0; j < h * w; ++j) dst[j] = per_cell;
        }
    }

    auto d = ag::sub(warped_student, ag::constant(std::move(warped_teacher)));
    return ag::sum_all(ag::mul_const(ag::mul(d, d), std::move(weight)));
}

/// Single-sample form of the consistency loss.
template <typename S>
Var<S> loss_img(const Var<S>& student_h, const HeatmapT<S>& teacher_h_norm,
                const AugmentationRecord& student_rec, const AugmentationRecord& teacher_rec,
                const ConfidenceMask& mask) {
    const auto& s = student_h.val().shape();
    check_arg(s.size() == 3, "loss_img: (K, H, W) student heatmap expected");
    auto batched = ag::reshape(student_h, {int64_t(1), s[0], s[1], s[2]});
    Tensor<S> teacher4 = teacher_h_norm.values.reshaped({int64_t(1), s[0], s[1], s[2]});
    return loss_img_batch(batched, teacher4, {student_rec}, {teacher_rec}, {mask},
                          teacher_h_norm.stride);
}

struct LossParts {
    double l_sup = 0.0, l_img = 0.0, l_fea = 0.0;
    double l_pose = 0.0, l_enth = 0.0, l_entw = 0.0, l_div = 0.0;
    double masked_keypoint_fraction = 0.0;
};

/// Weighted total with a fixed summation order so the logged breakdown
/// re-sums bit-exactly. Non-finite parts abort with the term's name.
inline LossBreakdown total_loss(const LossParts& p, const LossWeights& w) {
    w.validate();
    auto require_finite = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw NumericError(detail::cat("non-finite loss term: ", name));
    };
    require_finite(p.l_sup, "l_sup");
    require_finite(p.l_img, "l_img");
    require_finite(p.l_fea, "l_fea");
    require_finite(p.l_pose, "l_pose");
    require_finite(p.l_enth, "l_enth");
    require_finite(p.l_entw, "l_entw");
    require_finite(p.l_div, "l_div");

    LossBreakdown b;
    b.l_sup = p.l_sup;
    b.l_img = p.l_img;
    b.l_fea = p.l_fea;
    b.l_pose = p.l_pose;
    b.l_enth = p.l_enth;
    b.l_entw = p.l_entw;
    b.l_div = p.l_div;
    b.masked_keypoint_fraction = p.masked_keypoint_fraction;
    b.total = b.l_sup + w.alpha * b.l_img + w.beta * b.l_fea + w.gamma * b.l_pose;
    return b;
}

/// Differentiable counterpart of total_loss for the backward pass.
template <typename S>
Var<S> combine_losses(const Var<S>& sup, const Var<S>& img, const Var<S>& fea,
                      const Var<S>& pose, const LossWeights& w) {
    auto total = ag::add(sup, ag::affine(img, static_cast<S>(w.alpha), S(0)));
    total = ag::add(total, ag::affine(fea, static_cast<S>(w.beta), S(0)));
    return ag::add(total, ag::affine(pose, static_cast<S>(w.gamma), S(0)));
}

} // namespace dapose
