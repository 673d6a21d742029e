#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "dapose/image.hpp"
#include "dapose/nn.hpp"

namespace dapose {

inline constexpr double kEpsAdain = 1e-5;
inline constexpr double kDefaultEta = 0.5;

enum class Provenance { content, style, mixed };

template <typename S>
struct FeatureMap {
    Tensor<S> values; // (C_f, H_f, W_f)
    Provenance provenance = Provenance::content;
};

namespace style_ops {

/// Per-(sample, channel) spatial standard deviation with the AdaIN epsilon
/// folded into the square root, so degenerate channels stay differentiable
/// and self-statistics cancel almost exactly.
template <typename S>
Var<S> channel_std(const Var<S>& x, const Var<S>& mean) {
    auto centered = nn::shift_planes(x, ag::affine(mean, S(-1), S(0)));
    auto var = nn::spatial_mean(ag::mul(centered, centered));
    return ag::sqrt_eps(var, static_cast<S>(kEpsAdain * kEpsAdain));
}

/// AdaIN: rescale content features so their per-channel spatial statistics
/// match the style features'. Inputs are (N, C, H, W).
template <typename S>
Var<S> adain(const Var<S>& content, const Var<S>& style) {
    check_arg(content.val().rank() == 4 && style.val().rank() == 4 &&
                  content.val().dim(1) == style.val().dim(1),
              "adain: channel mismatch");
    auto mu_c = nn::spatial_mean(content);
    auto mu_s = nn::spatial_mean(style);
    auto sd_c = channel_std(content, mu_c);
    auto sd_s = channel_std(style, mu_s);
    auto centered = nn::shift_planes(content, ag::affine(mu_c, S(-1), S(0)));
    auto normalized = nn::scale_planes(centered, ag::reciprocal(sd_c));
    return nn::shift_planes(nn::scale_planes(normalized, sd_s), mu_s);
}

} // namespace style_ops

/// Non-differentiating AdaIN on single feature maps.
template <typename S>
FeatureMap<S> adain(const FeatureMap<S>& content, const FeatureMap<S>& style) {
    check_arg(content.values.rank() == 3 && style.values.rank() == 3 &&
                  content.values.dim(0) == style.values.dim(0),
              "adain: channel mismatch");
    ag::NoGrad guard;
    auto cs = content.values.shape();
    auto c4 = Var<S>::leaf(content.values.reshaped({1, cs[0], cs[1], cs[2]}));
    auto ss = style.values.shape();
    auto s4 = Var<S>::leaf(style.values.reshaped({1, ss[0], ss[1], ss[2]}));
    auto out = style_ops::adain(c4, s4);
    return {out.val().reshaped({cs[0], cs[1], cs[2]}), Provenance::mixed};
}

struct StyleTrainingMeta {
    int64_t iterations = 0;
    double final_pixel_loss = 0.0;
    double final_content_loss = 0.0;
    double final_style_loss = 0.0;
    double initial_style_loss = 0.0;
    double recon_psnr = 0.0; // eta=0 reconstruction bound on held-out source
};

/// Content encoder f_v (3 strided conv blocks, 64->8 spatial) and decoder g
/// (mirror transposed convs ending in a sigmoid). Small enough to pretrain
/// on CPU in about a minute.
template <typename S>
struct StyleNet {
    nn::Conv2dLayer<S> enc1, enc2, enc3;
    nn::ConvT2dLayer<S> dec1, dec2, dec3;
    StyleTrainingMeta meta;

    StyleNet() = default;
    explicit StyleNet(RngStream& rng)
        : enc1(3, 12, 3, 2, 1, rng),
          enc2(12, 24, 3, 2, 1, rng),
          enc3(24, 48, 3, 2, 1, rng),
          dec1(48, 24, 4, 2, 1, rng),
          dec2(24, 12, 4, 2, 1, rng),
          dec3(12, 3, 4, 2, 1, rng) {}

    Var<S> encode(const Var<S>& x) const {
        return ag::relu(enc3(ag::relu(enc2(ag::relu(enc1(x))))));
    }

    Var<S> decode(const Var<S>& f) const {
        return ag::sigmoid(dec3(ag::relu(dec2(ag::relu(dec1(f))))));
    }

    nn::ParamSet<S> params() const {
        nn::ParamSet<S> ps;
        enc1.collect(ps, "enc1");
        enc2.collect(ps, "enc2");
        enc3.collect(ps, "enc3");
        dec1.collect(ps, "dec1");
        dec2.collect(ps, "dec2");
        dec3.collect(ps, "dec3");
        return ps;
    }
};

/// T(x_s, x_t, eta) = g(eta * AdaIN(f_v(x_s), f_v(x_t)) + (1 - eta) * f_v(x_s)).
/// Batched (N, 3, H, W) in, same shape out, clamped to [0, 1].
template <typename S>
Tensor<S> stylize(const Tensor<S>& x_s, const Tensor<S>& x_t, double eta,
                  const StyleNet<S>& net) {
    check_arg(eta >= 0.0 && eta <= 1.0, "stylize: eta must lie in [0, 1]");
    check_arg(x_s.rank() == 4 && x_t.rank() == 4 && x_s.dim(0) == x_t.dim(0),
              "stylize: batched images with matching batch size expected");
    ag::NoGrad guard;
    auto vs = Var<S>::leaf(x_s);
    auto vt = Var<S>::leaf(x_t);
    auto fs = net.encode(vs);
    auto ft = net.encode(vt);
    auto t = style_ops::adain(fs, ft);
    auto mixed = ag::add(ag::affine(t, static_cast<S>(eta), S(0)),
                         ag::affine(fs, static_cast<S>(1.0 - eta), S(0)));
    Tensor<S> out = net.decode(mixed).val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(S(1), std::max(S(0), out[i]));
    return out;
}

namespace detail {

template <typename S>
Tensor<S> gather_batch(const std::vector<img::Image>& imgs, const std::vector<int64_t>& idx) {
    const int64_t h = imgs[0].dim(1), w = imgs[0].dim(2);
    Tensor<S> out({static_cast<int64_t>(idx.size()), 3, h, w});
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& im = imgs[static_cast<size_t>(idx[i])];
        for (int64_t j = 0; j < 3 * h * w; ++j)
            out[static_cast<int64_t>(i) * 3 * h * w + j] = static_cast<S>(im[j]);
    }
    return out;
}

} // namespace detail

/// Trains the style encoder/decoder on unlabeled images from both domains.
/// Objective: pixel reconstruction (anchors the encoder and gives the eta=0
/// reconstruction bound), content loss (re-encoded stylization matches the
/// AdaIN target), and style loss (re-encoded statistics match the style
/// image's). Deterministic under seed.
template <typename S>
StyleNet<S> pretrain_style(const std::vector<img::Image>& source_imgs,
                           const std::vector<img::Image>& target_imgs, int64_t steps,
                           uint64_t seed, int64_t batch = 8, double lr = 1e-3) {
    check_config(steps > 0, "pretrain_style: steps must be positive");
    check_arg(!source_imgs.empty() && !target_imgs.empty(),
              "pretrain_style: both image lists must be non-empty");

    RngStream init_rng(mix_seed(seed, 0x51));
    StyleNet<S> net(init_rng);
    nn::Adam<S> opt(net.params().vars());
    RngStream data_rng(mix_seed(seed, 0x52));

    // Hold out a small slice of source images for the reconstruction bound.
    const int64_t n_hold = std::max<int64_t>(1, static_cast<int64_t>(source_imgs.size()) / 20);
    const int64_t n_train = static_cast<int64_t>(source_imgs.size()) - n_hold;
    check_arg(n_train > 0, "pretrain_style: too few source images");

    const S w_pixel = S(1), w_content = S(0.25), w_style = S(0.25);
    double last_pixel = 0, last_content = 0, last_style = 0;

    for (int64_t step = 0; step < steps; ++step) {
        std::vector<int64_t> ci(static_cast<size_t>(batch)), si(static_cast<size_t>(batch));
        for (auto& v : ci) v = data_rng.uniform_int(n_train);
        for (auto& v : si)
            v = data_rng.uniform_int(static_cast<int64_t>(target_imgs.size()));
        auto content = ag::constant(detail::gather_batch<S>(source_imgs, ci));
        auto style = ag::constant(detail::gather_batch<S>(target_imgs, si));

        auto fc = net.encode(content);
        auto ft = net.encode(style);
        auto t = style_ops::adain(fc, ft);

        auto recon = net.decode(fc);
        auto dr = ag::sub(recon, content);
        auto l_pixel = ag::mean_all(ag::mul(dr, dr));

        auto stylized = net.decode(t);
        auto fo = net.encode(stylized);
        auto dc = ag::sub(fo, ag::detach(t));
        auto l_content = ag::mean_all(ag::mul(dc, dc));

        auto mu_o = nn::spatial_mean(fo);
        auto sd_o = style_ops::channel_std(fo, mu_o);
        auto mu_t_live = nn::spatial_mean(ft);
        auto mu_t = ag::detach(mu_t_live);
        auto sd_t = ag::detach(style_ops::channel_std(ft, mu_t_live));
        auto dmu = ag::sub(mu_o, mu_t);
        auto dsd = ag::sub(sd_o, sd_t);
        auto l_style = ag::add(ag::mean_all(ag::mul(dmu, dmu)), ag::mean_all(ag::mul(dsd, dsd)));

        // diagnostic scale: second moment of the target statistics, so the
        // recorded style metric stays comparable while feature magnitudes drift
        const double stats_scale =
            static_cast<double>(ag::mean_all(ag::add(ag::mul(mu_t, mu_t),
                                                     ag::mul(sd_t, sd_t)))
                                    .item());

        auto total = ag::add(ag::affine(l_pixel, w_pixel, S(0)),
                             ag::add(ag::affine(l_content, w_content, S(0)),
                                     ag::affine(l_style, w_style, S(0))));
        opt.zero_grad();
        total.backward();
        opt.step(static_cast<S>(lr));

        last_pixel = static_cast<double>(l_pixel.item());
        last_content = static_cast<double>(l_content.item());
        last_style = static_cast<double>(l_style.item()) / (stats_scale + 1e-12);
        if (step == 0) net.meta.initial_style_loss = last_style;
    }

    net.meta.iterations = steps;
    net.meta.final_pixel_loss = last_pixel;
    net.meta.final_content_loss = last_content;
    net.meta.final_style_loss = last_style;

    // eta=0 reconstruction bound on the held-out slice.
    double psnr_sum = 0;
    for (int64_t i = n_train; i < static_cast<int64_t>(source_imgs.size()); ++i) {
        Tensor<S> one({1, 3, source_imgs[0].dim(1), source_imgs[0].dim(2)});
        for (int64_t j = 0; j < one.numel(); ++j)
            one[j] = static_cast<S>(source_imgs[static_cast<size_t>(i)][j]);
        Tensor<S> rec = stylize(one, one, 0.0, net);
        img::Image a({3, source_imgs[0].dim(1), source_imgs[0].dim(2)});
        img::Image b = a;
        for (int64_t j = 0; j < a.numel(); ++j) {
            a[j] = static_cast<float>(one[j]);
            b[j] = static_cast<float>(rec[j]);
        }
        psnr_sum += img::psnr(a, b);
    }
    net.meta.recon_psnr = psnr_sum / static_cast<double>(n_hold);
    return net;
}

} // namespace dapose
