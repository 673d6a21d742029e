#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/augmentation.hpp"
#include "dapose/checkpoint.hpp"
#include "dapose/common.hpp"
#include "dapose/config.hpp"
#include "dapose/datasets.hpp"
#include "dapose/losses.hpp"
#include "dapose/models.hpp"
#include "dapose/style.hpp"

namespace dapose::train {

// Salts deriving the named rng streams from the run seed. Each stream owns
// one kind of randomness so draws in one never shift the others.
inline constexpr uint64_t kSaltData = 0xd47au;
inline constexpr uint64_t kSaltAug = 0xa46au;
inline constexpr uint64_t kSaltStyle = 0x57b1u;
inline constexpr uint64_t kSaltInit = 0x1217u;
inline constexpr uint64_t kSaltPretrain = 0x9e37u;
inline constexpr uint64_t kSaltStyleEpoch = 0xe90cu;

// ---------------------------------------------------------------------------
// Learning-rate schedule.
// ---------------------------------------------------------------------------

struct Schedule {
    double base_lr = 1e-4;
    std::vector<std::pair<int64_t, double>> milestones; // (iteration, lr)
    int64_t total_iterations = 3000;
    double ema_mu = 0.999;

    void validate() const {
        check_config(base_lr > 0, "schedule: base_lr must be positive");
        check_config(total_iterations > 0, "schedule: total_iterations must be positive");
        check_config(ema_mu >= 0.0 && ema_mu <= 1.0, "schedule: ema_mu must be in [0, 1]");
        int64_t prev_it = 0;
        double prev_lr = base_lr;
        for (const auto& [it, lr] : milestones) {
            check_config(it > prev_it, "schedule: milestones must be strictly increasing");
            check_config(lr > 0 && lr < prev_lr, "schedule: milestone lrs must strictly decrease");
            prev_it = it;
            prev_lr = lr;
        }
    }
};

/// Milestones sit at round(fraction * total_iterations) with lr scaled by the
/// matching factor. With total=30000, fractions {0.75, 1} and factors
/// {0.1, 0.01} this is 1e-4 -> 1e-5 at 22500 -> 1e-6 at 30000.
inline Schedule make_schedule(const cfg::TrainerConfig& tc) {
    Schedule s;
    s.base_lr = tc.base_lr;
    s.total_iterations = tc.total_iterations;
    s.ema_mu = tc.ema_mu;
    for (size_t i = 0; i < tc.milestone_fractions.size(); ++i) {
        const auto it = static_cast<int64_t>(
            std::llround(tc.milestone_fractions[i] * static_cast<double>(tc.total_iterations)));
        s.milestones.emplace_back(it, tc.milestone_lrs[i]);
    }
    s.validate();
    return s;
}

/// Piecewise-constant: base before the first milestone, then the lr of the
/// last milestone whose iteration has been reached.
inline double lr_at(const Schedule& s, int64_t iteration) {
    check_arg(iteration >= 0, "lr_at: iteration must be nonnegative");
    double lr = s.base_lr;
    for (const auto& [it, v] : s.milestones) {
        if (iteration < it) break;
        lr = v;
    }
    return lr;
}

// ---------------------------------------------------------------------------
// Parameter plumbing.
// ---------------------------------------------------------------------------

template <typename S>
void require_same_structure(const nn::ParamSet<S>& a, const nn::ParamSet<S>& b,
                            const char* what) {
    check_arg(a.items.size() == b.items.size(),
              detail::cat(what, ": parameter structure mismatch (count)"));
    for (size_t i = 0; i < a.items.size(); ++i) {
        check_arg(a.items[i].first == b.items[i].first &&
                      a.items[i].second.val().same_shape(b.items[i].second.val()),
                  detail::cat(what, ": parameter structure mismatch at ", a.items[i].first));
    }
}

/// Copies every parameter tensor of src into dst (structures must match).
template <typename S>
void copy_params(nn::ParamSet<S> dst, const nn::ParamSet<S>& src) {
    require_same_structure(dst, src, "copy_params");
    for (size_t i = 0; i < dst.items.size(); ++i)
        dst.items[i].second.node()->value = src.items[i].second.val();
}

/// theta_t <- mu * theta_t + (1 - mu) * theta_s, element-wise over every
/// tensor. mu=1 leaves the teacher untouched; mu=0 copies the student.
template <typename S>
void ema_update(nn::ParamSet<S> teacher, const nn::ParamSet<S>& student, double mu) {
    check_arg(mu >= 0.0 && mu <= 1.0, "ema_update: mu must be in [0, 1]");
    require_same_structure(teacher, student, "ema_update");
    const S a = static_cast<S>(mu);
    const S b = static_cast<S>(1.0 - mu);
    for (size_t i = 0; i < teacher.items.size(); ++i) {
        auto& t = teacher.items[i].second.val();
        const auto& s = student.items[i].second.val();
        for (int64_t j = 0; j < t.numel(); ++j) t[j] = a * t[j] + b * s[j];
    }
}

// ---------------------------------------------------------------------------
// Image/batch helpers.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> batch_images(const std::vector<img::Image>& imgs) {
    check_arg(!imgs.empty(), "batch_images: empty batch");
    const int64_t h = imgs[0].dim(1), w = imgs[0].dim(2);
    Tensor<S> out({static_cast<int64_t>(imgs.size()), 3, h, w});
    for (size_t i = 0; i < imgs.size(); ++i) {
        check_arg(imgs[i].dim(1) == h && imgs[i].dim(2) == w,
                  "batch_images: mixed image sizes");
        for (int64_t j = 0; j < 3 * h * w; ++j)
            out[static_cast<int64_t>(i) * 3 * h * w + j] = static_cast<S>(imgs[i][j]);
    }
    return out;
}

template <typename S>
img::Image nth_image(const Tensor<S>& batch, int64_t n) {
    check_arg(batch.rank() == 4 && n >= 0 && n < batch.dim(0), "nth_image: bad index");
    const int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    img::Image out({c, h, w});
    const S* src = batch.data() + n * c * h * w;
    for (int64_t j = 0; j < c * h * w; ++j) out[j] = static_cast<float>(src[j]);
    return out;
}

// ---------------------------------------------------------------------------
// Training state.
// ---------------------------------------------------------------------------

template <typename S>
struct TrainState {
    PoseNetwork<S> student;
    PoseNetwork<S> teacher; // updated only by ema_update, never by the optimizer
    Discriminator<S> d;
    FeatureEnhancer<S> fe;
    StyleNet<S> style; // frozen during adaptation
    nn::Adam<S> opt;   // over student + d + fe
    Schedule schedule;
    int64_t iteration = 0;
    RngStream rng_data, rng_aug, rng_style, rng_init;

    /// The optimizer's parameters in their canonical order and naming.
    nn::ParamSet<S> optimized_params() const {
        nn::ParamSet<S> ps;
        ps.merge(student.params(), "student");
        ps.merge(d.params(), "d");
        ps.merge(fe.params(), "fe");
        return ps;
    }
};

/// Deep copy of a pose network: fresh parameter storage, same values.
template <typename S>
PoseNetwork<S> clone_pose(const PoseNetwork<S>& src) {
    RngStream throwaway(0);
    PoseNetwork<S> dst(src.num_keypoints, throwaway);
    copy_params(dst.params(), src.params());
    return dst;
}

/// Builds the adaptation state: student and teacher both start from the
/// pretrained network, discriminator and enhancer are freshly initialized
/// from the model-init stream, and the optimizer covers student + D + f_e.
template <typename S>
TrainState<S> init_state(const cfg::RunConfig& rc, const PoseNetwork<S>& pretrained,
                         const StyleNet<S>& style) {
    TrainState<S> st;
    st.rng_data = RngStream(mix_seed(rc.seed, kSaltData));
    st.rng_aug = RngStream(mix_seed(rc.seed, kSaltAug));
    st.rng_style = RngStream(mix_seed(rc.seed, kSaltStyle));
    st.rng_init = RngStream(mix_seed(rc.seed, kSaltInit));
    st.student = clone_pose(pretrained);
    st.teacher = clone_pose(pretrained);
    st.d = Discriminator<S>(st.rng_init, PoseNetwork<S>::kFeatureDim);
    st.fe = FeatureEnhancer<S>(st.rng_init, PoseNetwork<S>::kFeatureDim);
    st.style = style;
    st.schedule = make_schedule(rc.trainer);
    st.opt = nn::Adam<S>(st.optimized_params().vars());
    st.iteration = 0;
    return st;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

template <typename S>
PCKResult evaluate_pose(const PoseNetwork<S>& net, const std::vector<Sample>& eval_set,
                        double threshold_fraction, const KeypointGroups& groups) {
    check_arg(!eval_set.empty(), "evaluate_pose: empty evaluation set");
    const int64_t image_size = eval_set[0].image.dim(1);
    PckAccumulator acc(threshold_fraction, static_cast<double>(image_size));
    const int64_t chunk = 32;
    for (size_t base = 0; base < eval_set.size(); base += chunk) {
        const size_t n = std::min<size_t>(chunk, eval_set.size() - base);
        std::vector<img::Image> imgs;
        imgs.reserve(n);
        for (size_t i = 0; i < n; ++i) imgs.push_back(eval_set[base + i].image);
        const auto out = forward_pose(net, batch_images<S>(imgs));
        for (size_t i = 0; i < n; ++i) {
            const auto& gt = eval_set[base + i].keypoints;
            check_data(gt.has_value(), "evaluate_pose: evaluation sample lacks keypoints");
            const auto hm = extract_heatmap(out.heatmaps, static_cast<int64_t>(i),
                                            PoseNetwork<S>::kStride);
            acc.add(decode_heatmaps(hm).keypoints, *gt);
        }
    }
    return acc.result(groups);
}

// ---------------------------------------------------------------------------
// Source pretraining.
// ---------------------------------------------------------------------------

template <typename S>
struct PretrainResult {
    PoseNetwork<S> net;
    double final_loss = 0.0;
    double val_pck = 0.0; // PCK@0.05 on the held-out source slice
};

/// Supervised pretraining with the normal augmentation policy and loss_sup
/// only. The last tenth of the source split is held out for validation.
template <typename S>
PretrainResult<S> pretrain_source(const std::vector<Sample>& source, const cfg::RunConfig& rc,
                                  int64_t steps, uint64_t seed) {
    check_config(steps > 0, "pretrain_source: steps must be positive");
    check_arg(!source.empty(), "pretrain_source: empty source data");
    const int64_t n = static_cast<int64_t>(source.size());
    const int64_t n_val = std::max<int64_t>(1, n / 10);
    const int64_t n_train = n - n_val;
    check_arg(n_train > 0, "pretrain_source: too few source samples");

    const int64_t image_size = rc.dataset.image_size;
    const int64_t hm_side = image_size / PoseNetwork<S>::kStride;
    RngStream rng_init(mix_seed(seed, kSaltInit));
    RngStream rng_data(mix_seed(seed, mix_seed(kSaltPretrain, kSaltData)));
    RngStream rng_aug(mix_seed(seed, mix_seed(kSaltPretrain, kSaltAug)));

    PretrainResult<S> out;
    out.net = PoseNetwork<S>(rc.dataset.k, rng_init);
    nn::Adam<S> opt(out.net.params().vars());

    const int64_t batch = rc.trainer.batch_source;
    for (int64_t step = 0; step < steps; ++step) {
        std::vector<img::Image> imgs;
        imgs.reserve(static_cast<size_t>(batch));
        Tensor<S> gt({batch, rc.dataset.k, hm_side, hm_side});
        for (int64_t b = 0; b < batch; ++b) {
            const auto& s = source[static_cast<size_t>(rng_data.uniform_int(n_train))];
            check_data(s.keypoints.has_value(), "pretrain_source: unlabeled source sample");
            const auto rec = sample_policy(rc.augmentation.normal, rng_aug.next_u64(),
                                           image_size);
            imgs.push_back(apply_to_image(s.image, rec));
            const auto hm = render_heatmaps<S>(transform_keypoints(*s.keypoints, rec), hm_side,
                                               hm_side, PoseNetwork<S>::kStride);
            std::copy(hm.values.data(), hm.values.data() + hm.values.numel(),
                      gt.data() + b * hm.values.numel());
        }
        auto fwd = out.net.forward(Var<S>::leaf(batch_images<S>(imgs)));
        auto l = loss_sup(fwd.heatmaps, gt);
        out.final_loss = static_cast<double>(l.item());
        if (!is_finite(out.final_loss))
            throw NumericError(detail::cat("pretrain_source: non-finite loss at step ", step));
        opt.zero_grad();
        l.backward();
        opt.step(static_cast<S>(rc.trainer.pretrain_lr));
    }

    std::vector<Sample> val(source.begin() + n_train, source.end());
    out.val_pck = evaluate_pose(out.net, val, 0.05, {}).overall;
    return out;
}

// ---------------------------------------------------------------------------
// One adaptation step.
// ---------------------------------------------------------------------------

/// Precomputed stylization cache: stylized[i] pairs with source index i.
template <typename S>
struct StylizedCache {
    std::vector<Tensor<S>> images; // each (3, H, W)
};

/// Stylizes every source image against one target partner drawn from `rng`.
template <typename S>
StylizedCache<S> stylize_all(const std::vector<Sample>& source,
                             const std::vector<Sample>& target, const StyleNet<S>& net,
                             double eta, RngStream& rng) {
    check_arg(!source.empty() && !target.empty(), "stylize_all: empty domain");
    StylizedCache<S> cache;
    cache.images.reserve(source.size());
    const int64_t chunk = 16;
    for (size_t base = 0; base < source.size(); base += chunk) {
        const size_t nb = std::min<size_t>(chunk, source.size() - base);
        std::vector<img::Image> xs, xt;
        xs.reserve(nb);
        xt.reserve(nb);
        for (size_t i = 0; i < nb; ++i) {
            xs.push_back(source[base + i].image);
            xt.push_back(
                target[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(target.size())))]
                    .image);
        }
        Tensor<S> st = stylize(batch_images<S>(xs), batch_images<S>(xt), eta, net);
        const int64_t plane = st.dim(1) * st.dim(2) * st.dim(3);
        for (size_t i = 0; i < nb; ++i) {
            Tensor<S> one({3, st.dim(2), st.dim(3)});
            std::copy(st.data() + static_cast<int64_t>(i) * plane,
                      st.data() + static_cast<int64_t>(i + 1) * plane, one.data());
            cache.images.push_back(std::move(one));
        }
    }
    return cache;
}

/// One mean-teacher adaptation step over a 1:1 source/target batch pair.
///
/// Order: stylize source; student supervised pass on the normally-augmented
/// stylized source; teacher no-grad pass on weakly-augmented targets (raw
/// peaks gate the confidence mask, per-channel max-normalized values feed the
/// consistency term); student pass on strongly-augmented + occluded targets;
/// feature alignment on the two student feature batches; information
/// maximization on the student target heatmaps; one optimizer step over
/// student + D + f_e; EMA teacher update.
///
/// `stylized_source` (when given) supplies precomputed stylized images
/// aligned with `source`; otherwise partners are drawn from the style stream.
template <typename S>
LossBreakdown train_step(TrainState<S>& st, const std::vector<const Sample*>& source,
                         const std::vector<const Sample*>& target, const LossWeights& w,
                         const cfg::RunConfig& rc,
                         const std::vector<const Tensor<S>*>* stylized_source = nullptr) {
    w.validate();
    check_arg(!source.empty() && !target.empty(), "train_step: batches must be non-empty");
    const int64_t ns = static_cast<int64_t>(source.size());
    const int64_t nt = static_cast<int64_t>(target.size());
    const int64_t image_size = rc.dataset.image_size;
    const int64_t k = rc.dataset.k;
    const int64_t hm_side = image_size / PoseNetwork<S>::kStride;
    const int64_t stride = PoseNetwork<S>::kStride;

    // (1) Stylize the source batch (or pass it through when stylization is
    // disabled, e.g. the mean-teacher-only ablation).
    Tensor<S> x_st;
    if (stylized_source != nullptr) {
        check_arg(static_cast<int64_t>(stylized_source->size()) == ns,
                  "train_step: stylized batch size mismatch");
        x_st = Tensor<S>({ns, 3, image_size, image_size});
        for (int64_t i = 0; i < ns; ++i) {
            const Tensor<S>& one = *(*stylized_source)[static_cast<size_t>(i)];
            std::copy(one.data(), one.data() + one.numel(), x_st.data() + i * one.numel());
        }
    } else if (!rc.style.enabled) {
        std::vector<img::Image> xs;
        xs.reserve(static_cast<size_t>(ns));
        for (int64_t i = 0; i < ns; ++i) xs.push_back(source[static_cast<size_t>(i)]->image);
        x_st = batch_images<S>(xs);
    } else {
        std::vector<img::Image> xs, xt;
        xs.reserve(static_cast<size_t>(ns));
        xt.reserve(static_cast<size_t>(ns));
        for (int64_t i = 0; i < ns; ++i) {
            xs.push_back(source[static_cast<size_t>(i)]->image);
            xt.push_back(target[static_cast<size_t>(st.rng_style.uniform_int(nt))]->image);
        }
        x_st = stylize(batch_images<S>(xs), batch_images<S>(xt), rc.style.eta, st.style);
    }

    // Augmentation seeds, in a fixed draw order.
    std::vector<uint64_t> seeds_a1(static_cast<size_t>(ns));
    for (auto& v : seeds_a1) v = st.rng_aug.next_u64();
    std::vector<uint64_t> seeds_a2(static_cast<size_t>(nt)), seeds_a3(static_cast<size_t>(nt)),
        seeds_mask(static_cast<size_t>(nt));
    for (int64_t j = 0; j < nt; ++j) {
        seeds_a2[static_cast<size_t>(j)] = st.rng_aug.next_u64();
        seeds_a3[static_cast<size_t>(j)] = st.rng_aug.next_u64();
        seeds_mask[static_cast<size_t>(j)] = st.rng_aug.next_u64();
    }

    // (2) Student supervised pass on A1(stylized source).
    std::vector<img::Image> sup_imgs;
    sup_imgs.reserve(static_cast<size_t>(ns));
    Tensor<S> gt({ns, k, hm_side, hm_side});
    for (int64_t i = 0; i < ns; ++i) {
        const Sample& s = *source[static_cast<size_t>(i)];
        check_data(s.keypoints.has_value(), "train_step: unlabeled source sample");
        const auto rec =
            sample_policy(rc.augmentation.normal, seeds_a1[static_cast<size_t>(i)], image_size);
        sup_imgs.push_back(apply_to_image(nth_image(x_st, i), rec));
        const auto hm = render_heatmaps<S>(transform_keypoints(*s.keypoints, rec), hm_side,
                                           hm_side, stride);
        std::copy(hm.values.data(), hm.values.data() + hm.values.numel(),
                  gt.data() + i * hm.values.numel());
    }
    // Numeric aborts carry whatever part of the breakdown exists so far (NaN
    // parts serialize as null), so a diverged run leaves a usable trace.
    LossParts parts;
    double mask_accept_sum = 0.0;
    auto numeric_abort = [&](const std::string& what) -> void {
        const nlohmann::json snapshot = {
            {"iteration", st.iteration}, {"l_sup", parts.l_sup},   {"l_img", parts.l_img},
            {"l_fea", parts.l_fea},      {"l_pose", parts.l_pose}, {"l_enth", parts.l_enth},
            {"l_entw", parts.l_entw},    {"l_div", parts.l_div},
            {"mask_accept_mean", nt > 0 ? mask_accept_sum / static_cast<double>(nt) : 0.0}};
        throw NumericError(detail::cat("train_step: non-finite ", what, " at iteration ",
                                       st.iteration, "; breakdown snapshot: ", snapshot.dump()));
    };
    auto take = [&](double& slot, const Var<S>& v, const char* name) {
        slot = static_cast<double>(v.item());
        if (!is_finite(slot)) numeric_abort(name);
    };
    auto require_finite_tensor = [&](const Tensor<S>& t, const char* what) {
        for (int64_t i = 0; i < t.numel(); ++i)
            if (!is_finite(t[i])) numeric_abort(what);
    };

    auto fwd_src = st.student.forward(Var<S>::leaf(batch_images<S>(sup_imgs)));
    auto l_sup = loss_sup(fwd_src.heatmaps, gt);
    take(parts.l_sup, l_sup, "l_sup");

    // (3) Teacher pass on A3(target), no gradient; confidence masks come from
    // raw peaks, the consistency target from max-normalized values. Student
    // pass on occluded A2(target).
    std::vector<AugmentationRecord> recs_a2, recs_a3;
    recs_a2.reserve(static_cast<size_t>(nt));
    recs_a3.reserve(static_cast<size_t>(nt));
    std::vector<img::Image> teacher_imgs;
    teacher_imgs.reserve(static_cast<size_t>(nt));
    for (int64_t j = 0; j < nt; ++j) {
        const Sample& t = *target[static_cast<size_t>(j)];
        const auto rec3 =
            sample_policy(rc.augmentation.weak, seeds_a3[static_cast<size_t>(j)], image_size);
        teacher_imgs.push_back(apply_to_image(t.image, rec3));
        recs_a3.push_back(rec3);
    }
    const auto teacher_out = forward_pose(st.teacher, batch_images<S>(teacher_imgs));

    Tensor<S> teacher_norm({nt, k, hm_side, hm_side});
    std::vector<ConfidenceMask> masks;
    masks.reserve(static_cast<size_t>(nt));
    double mask_accept_sum = 0.0;
    std::vector<img::Image> student_imgs;
    student_imgs.reserve(static_cast<size_t>(nt));
    for (int64_t j = 0; j < nt; ++j) {
        const auto raw = extract_heatmap(teacher_out.heatmaps, j, stride);
        auto mask = confidence_mask_seeded(raw, seeds_mask[static_cast<size_t>(j)],
                                           rc.augmentation.tau_lo, rc.augmentation.tau_hi);
        mask_accept_sum += mask.accepted_fraction();
        masks.push_back(std::move(mask));
        const auto norm = normalize_heatmap(raw);
        std::copy(norm.values.data(), norm.values.data() + norm.values.numel(),
                  teacher_norm.data() + j * norm.values.numel());

        // Occlusion boxes center near the teacher's keypoint estimate mapped
        // into the student's frame (A2 after undoing A3).
        const Sample& t = *target[static_cast<size_t>(j)];
        auto rec2 =
            sample_policy(rc.augmentation.strong, seeds_a2[static_cast<size_t>(j)], image_size);
        const auto est_teacher = decode_heatmaps(raw).keypoints;
        AugmentationRecord to_student;
        to_student.affine = rec2.affine.compose(recs_a3[static_cast<size_t>(j)].affine.inverse());
        const auto est_student = transform_keypoints(est_teacher, to_student);
        auto [occluded, rec2b] =
            occlude(apply_to_image(t.image, rec2), &est_student, std::move(rec2));
        student_imgs.push_back(std::move(occluded));
        recs_a2.push_back(std::move(rec2b));
    }
    auto fwd_tgt = st.student.forward(Var<S>::leaf(batch_images<S>(student_imgs)));
    auto l_img = loss_img_batch(fwd_tgt.heatmaps, teacher_norm, recs_a2, recs_a3, masks, stride);

    // (4) Feature-level alignment on the two pooled student feature batches.
    const double progress = st.schedule.total_iterations > 0
                                ? static_cast<double>(st.iteration) /
                                      static_cast<double>(st.schedule.total_iterations)
                                : 0.0;
    const double lambda = rc.loss.lambda_mode == "constant"
                              ? rc.loss.lambda_value
                              : rc.loss.lambda_value * lambda_warmup(progress);
    auto l_fea = loss_fea(st.d, st.fe, fwd_src.features, fwd_tgt.features, lambda);

    // (5) Information maximization on the student's target heatmaps.
    auto pose_res = loss_pose(fwd_tgt.heatmaps, rc.loss.tau_p, rc.loss.div_per_sample);

    // (6) Total, with the breakdown snapshot attached to any numeric abort.
    LossParts parts;
    parts.l_sup = static_cast<double>(l_sup.item());
    parts.l_img = static_cast<double>(l_img.item());
    parts.l_fea = static_cast<double>(l_fea.item());
    parts.l_pose = static_cast<double>(pose_res.pose.item());
    parts.l_enth = static_cast<double>(pose_res.enth.item());
    parts.l_entw = static_cast<double>(pose_res.entw.item());
    parts.l_div = static_cast<double>(pose_res.div.item());
    parts.masked_keypoint_fraction = pose_res.participating_fraction;
    LossBreakdown breakdown;
    try {
        breakdown = total_loss(parts, w);
    } catch (const NumericError& e) {
        const nlohmann::json snapshot = {
            {"iteration", st.iteration}, {"l_sup", parts.l_sup},   {"l_img", parts.l_img},
            {"l_fea", parts.l_fea},      {"l_pose", parts.l_pose}, {"l_enth", parts.l_enth},
            {"l_entw", parts.l_entw},    {"l_div", parts.l_div},
            {"mask_accept_mean", mask_accept_sum / static_cast<double>(nt)}};
        throw NumericError(detail::cat(e.what(), "; breakdown snapshot: ", snapshot.dump()));
    }

    auto total = combine_losses(l_sup, l_img, l_fea, pose_res.pose, w);
    st.opt.zero_grad();
    total.backward();
    st.opt.step(static_cast<S>(lr_at(st.schedule, st.iteration)));

    // (7) Teacher EMA update.
    ema_update(st.teacher.params(), st.student.params(), st.schedule.ema_mu);
    st.iteration += 1;
    return breakdown;
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const TrainState<S>& st, const std::filesystem::path& path,
                     const std::string& config_hash) {
    ckpt::Container c;
    const auto& meta = st.style.meta;
    c.manifest = {{"format_version", kFormatVersion},
                  {"config_hash", config_hash},
                  {"iteration", st.iteration},
                  {"style_meta",
                   {{"iterations", meta.iterations},
                    {"final_pixel_loss", meta.final_pixel_loss},
                    {"final_content_loss", meta.final_content_loss},
                    {"final_style_loss", meta.final_style_loss},
                    {"initial_style_loss", meta.initial_style_loss},
                    {"recon_psnr", meta.recon_psnr}}}};
    c.add_params("student", st.student.params());
    c.add_params("teacher", st.teacher.params());
    c.add_params("d", st.d.params());
    c.add_params("fe", st.fe.params());
    c.add_params("style", st.style.params());
    // Adam moments, keyed by the optimizer's canonical parameter names.
    const auto op = st.optimized_params();
    check_arg(op.items.size() == st.opt.first_moments().size(),
              "save_checkpoint: optimizer/parameter count mismatch");
    for (size_t i = 0; i < op.items.size(); ++i) {
        c.add_tensor("adam_m/" + op.items[i].first, st.opt.first_moments()[i]);
        c.add_tensor("adam_v/" + op.items[i].first, st.opt.second_moments()[i]);
    }
    c.add_u64s("adam_t", {static_cast<uint64_t>(st.opt.steps())});
    c.add_rng("rng/data", st.rng_data);
    c.add_rng("rng/aug", st.rng_aug);
    c.add_rng("rng/style", st.rng_style);
    c.add_rng("rng/init", st.rng_init);
    c.save(path);
}

template <typename S>
TrainState<S> load_checkpoint(const std::filesystem::path& path, const cfg::RunConfig& rc) {
    const ckpt::Container c = ckpt::Container::load(path);
    TrainState<S> st;
    RngStream boot(0);
    st.student = PoseNetwork<S>(rc.dataset.k, boot);
    st.teacher = PoseNetwork<S>(rc.dataset.k, boot);
    st.d = Discriminator<S>(boot, PoseNetwork<S>::kFeatureDim);
    st.fe = FeatureEnhancer<S>(boot, PoseNetwork<S>::kFeatureDim);
    st.style = StyleNet<S>(boot);
    auto sp = st.student.params();
    c.load_params("student", sp);
    auto tp = st.teacher.params();
    c.load_params("teacher", tp);
    auto dp = st.d.params();
    c.load_params("d", dp);
    auto fp = st.fe.params();
    c.load_params("fe", fp);
    auto yp = st.style.params();
    c.load_params("style", yp);
    if (c.manifest.contains("style_meta")) {
        const auto& m = c.manifest.at("style_meta");
        st.style.meta.iterations = m.at("iterations").get<int64_t>();
        st.style.meta.final_pixel_loss = m.at("final_pixel_loss").get<double>();
        st.style.meta.final_content_loss = m.at("final_content_loss").get<double>();
        st.style.meta.final_style_loss = m.at("final_style_loss").get<double>();
        st.style.meta.initial_style_loss = m.at("initial_style_loss").get<double>();
        st.style.meta.recon_psnr = m.at("recon_psnr").get<double>();
    }
    st.schedule = make_schedule(rc.trainer);
    const auto op = st.optimized_params();
    st.opt = nn::Adam<S>(op.vars());
    for (size_t i = 0; i < op.items.size(); ++i) {
        st.opt.first_moments()[i] = c.tensor<S>("adam_m/" + op.items[i].first);
        st.opt.second_moments()[i] = c.tensor<S>("adam_v/" + op.items[i].first);
    }
    st.opt.set_steps(static_cast<int64_t>(c.u64s("adam_t").at(0)));
    st.iteration = c.manifest.at("iteration").get<int64_t>();
    st.rng_data = c.rng("rng/data");
    st.rng_aug = c.rng("rng/aug");
    st.rng_style = c.rng("rng/style");
    st.rng_init = c.rng("rng/init");
    return st;
}

// ---------------------------------------------------------------------------
// Adaptation loop.
// ---------------------------------------------------------------------------

struct EvalPoint {
    int64_t iteration = 0;
    double teacher_pck = 0.0;
};

struct AdaptResult {
    std::vector<LossBreakdown> history;
    std::vector<EvalPoint> evals;
    PCKResult final_teacher;
    PCKResult final_student;
};

/// Runs train_step from the state's current iteration to the schedule's end.
/// Evaluates the teacher on target_eval every eval_every iterations, saves a
/// rolling checkpoint every checkpoint_every, and reports per-step metrics
/// through `on_metrics` (one JSON object per step, PCK attached on eval
/// steps). The teacher is the final model.
template <typename S>
AdaptResult train_adapt(TrainState<S>& st, const ToyDatasets& data, const LossWeights& w,
                        const cfg::RunConfig& rc, const std::filesystem::path& out_dir,
                        const std::function<void(const nlohmann::json&)>& on_metrics = {},
                        const std::string& config_hash = "") {
    check_arg(!data.source.empty() && !data.target_train.empty() && !data.target_eval.empty(),
              "train_adapt: all three splits are required");
    const auto groups = keypoint_group_map(data.keypoint_names);
    const int64_t total = st.schedule.total_iterations;
    const int64_t ns = static_cast<int64_t>(data.source.size());
    const int64_t nt = static_cast<int64_t>(data.target_train.size());
    const int64_t steps_per_epoch =
        std::max<int64_t>(1, (ns + rc.trainer.batch_source - 1) / rc.trainer.batch_source);

    AdaptResult result;
    StylizedCache<S> cache;
    int64_t cache_epoch = -1;

    for (int64_t it = st.iteration; it < total; ++it) {
        // Per-epoch stylization precompute (keyed by a stateless per-epoch
        // stream so a resumed run rebuilds the identical cache).
        if (rc.style.precompute_per_epoch && rc.style.enabled) {
            const int64_t epoch = it / steps_per_epoch;
            if (epoch != cache_epoch) {
                RngStream epoch_rng(mix_seed(mix_seed(rc.seed, kSaltStyleEpoch),
                                             static_cast<uint64_t>(epoch)));
                cache = stylize_all(data.source, data.target_train, st.style, rc.style.eta,
                                    epoch_rng);
                cache_epoch = epoch;
            }
        }

        std::vector<const Sample*> src_batch, tgt_batch;
        std::vector<const Tensor<S>*> stylized;
        src_batch.reserve(static_cast<size_t>(rc.trainer.batch_source));
        tgt_batch.reserve(static_cast<size_t>(rc.trainer.batch_target));
        const bool use_cache = rc.style.precompute_per_epoch && rc.style.enabled;
        for (int64_t b = 0; b < rc.trainer.batch_source; ++b) {
            const int64_t idx = st.rng_data.uniform_int(ns);
            src_batch.push_back(&data.source[static_cast<size_t>(idx)]);
            if (use_cache) stylized.push_back(&cache.images[static_cast<size_t>(idx)]);
        }
        for (int64_t b = 0; b < rc.trainer.batch_target; ++b)
            tgt_batch.push_back(
                &data.target_train[static_cast<size_t>(st.rng_data.uniform_int(nt))]);

        const LossBreakdown breakdown =
            train_step(st, src_batch, tgt_batch, w, rc, use_cache ? &stylized : nullptr);
        result.history.push_back(breakdown);

        nlohmann::json line = breakdown.to_json();
        line["iteration"] = st.iteration;
        line["lr"] = lr_at(st.schedule, it);

        const bool eval_now = (st.iteration % rc.trainer.eval_every == 0) || st.iteration == total;
        if (eval_now) {
            const double pck_t =
                evaluate_pose(st.teacher, data.target_eval, 0.05, groups).overall;
            result.evals.push_back({st.iteration, pck_t});
            line["teacher_pck"] = pck_t;
        }
        if (on_metrics) on_metrics(line);

        if (st.iteration % rc.trainer.checkpoint_every == 0 || st.iteration == total)
            save_checkpoint(st, out_dir / "checkpoint.ckpt", config_hash);
    }

    result.final_teacher = evaluate_pose(st.teacher, data.target_eval, 0.05, groups);
    result.final_student = evaluate_pose(st.student, data.target_eval, 0.05, groups);
    return result;
}

} // namespace dapose::train
