#pragma once

#include <cmath>
#include <cstdint>

#include "dapose/geometry.hpp"
#include "dapose/nn.hpp"

namespace dapose {

inline constexpr double kEpsBce = 1e-7;

template <typename S>
struct PoseForward {
    Var<S> features; // (N, feature_dim) pooled encoder output
    Var<S> heatmaps; // (N, K, H/stride, W/stride) in (0, 1)
};

/// Heatmap pose estimator F: four stride-2 conv blocks down to 1/16
/// resolution, then two transposed convs back up to 1/4, ending in a
/// sigmoid. The pooled bottleneck doubles as the domain-alignment feature.
template <typename S>
struct PoseNetwork {
    nn::Conv2dLayer<S> enc1, enc2, enc3, enc4;
    nn::ConvT2dLayer<S> head1, head2;
    int64_t num_keypoints = 0;

    static constexpr int64_t kStride = 4;
    static constexpr int64_t kFeatureDim = 48;

    PoseNetwork() = default;
    PoseNetwork(int64_t k, RngStream& rng)
        : enc1(3, 12, 3, 2, 1, rng),
          enc2(12, 24, 3, 2, 1, rng),
          enc3(24, 36, 3, 2, 1, rng),
          enc4(36, 48, 3, 2, 1, rng),
          head1(48, 24, 4, 2, 1, rng),
          head2(24, k, 4, 2, 1, rng),
          num_keypoints(k) {
        check_arg(k > 0, "PoseNetwork: keypoint count must be positive");
    }

    PoseForward<S> forward(const Var<S>& images) const {
        check_arg(images.val().rank() == 4 && images.val().dim(1) == 3,
                  "PoseNetwork: (N, 3, H, W) images expected");
        check_arg(images.val().dim(2) % 16 == 0 && images.val().dim(3) % 16 == 0,
                  "PoseNetwork: image sides must be multiples of 16");
        auto h = ag::relu(enc1(images));
        h = ag::relu(enc2(h));
        h = ag::relu(enc3(h));
        h = ag::relu(enc4(h));
        auto features = nn::global_avg_pool(h);
        auto heatmaps = ag::sigmoid(head2(ag::relu(head1(h))));
        return {features, heatmaps};
    }

    nn::ParamSet<S> params() const {
        nn::ParamSet<S> ps;
        enc1.collect(ps, "enc1");
        enc2.collect(ps, "enc2");
        enc3.collect(ps, "enc3");
        enc4.collect(ps, "enc4");
        head1.collect(ps, "head1");
        head2.collect(ps, "head2");
        return ps;
    }
};

/// The teacher must mirror the student parameter-for-parameter before any
/// averaging happens.
template <typename S>
void require_same_architecture(const PoseNetwork<S>& a, const PoseNetwork<S>& b) {
    check_arg(a.num_keypoints == b.num_keypoints,
              "pose networks differ in keypoint count");
    auto pa = a.params().items;
    auto pb = b.params().items;
    check_arg(pa.size() == pb.size(), "pose networks differ in parameter count");
    for (size_t i = 0; i < pa.size(); ++i) {
        check_arg(pa[i].first == pb[i].first &&
                      pa[i].second.val().same_shape(pb[i].second.val()),
                  detail::cat("pose networks differ at parameter ", pa[i].first));
    }
}

/// Domain discriminator D on pooled features. Outputs P(target), clamped
/// away from {0, 1} so binary cross-entropy stays finite.
template <typename S>
struct Discriminator {
    nn::LinearLayer<S> fc1, fc2;

    Discriminator() = default;
    explicit Discriminator(RngStream& rng, int64_t feature_dim = 48, int64_t width = 64)
        : fc1(feature_dim, width, rng), fc2(width, 1, rng) {}

    Var<S> forward(const Var<S>& features) const {
        auto p = ag::sigmoid(fc2(ag::relu(fc1(features))));
        return ag::clamp(p, static_cast<S>(kEpsBce), static_cast<S>(1.0 - kEpsBce));
    }

    nn::ParamSet<S> params() const {
        nn::ParamSet<S> ps;
        fc1.collect(ps, "fc1");
        fc2.collect(ps, "fc2");
        return ps;
    }
};

/// Residual feature enhancer f_e between the gradient reversal point and the
/// discriminator: x + MLP(x).
template <typename S>
struct FeatureEnhancer {
    nn::LinearLayer<S> fc1, fc2;

    FeatureEnhancer() = default;
    explicit FeatureEnhancer(RngStream& rng, int64_t feature_dim = 48, int64_t width = 48)
        : fc1(feature_dim, width, rng), fc2(width, feature_dim, rng) {}

    Var<S> forward(const Var<S>& x) const {
        return ag::add(x, fc2(ag::relu(fc1(x))));
    }

    nn::ParamSet<S> params() const {
        nn::ParamSet<S> ps;
        fc1.collect(ps, "fc1");
        fc2.collect(ps, "fc2");
        return ps;
    }
};

/// Adversarial branch: D(f_e(GRL(features, lambda))). Gradient reversal sits
/// between the pose encoder and the enhancer, so D and f_e receive ordinary
/// gradients while the encoder receives them scaled by -lambda.
template <typename S>
Var<S> discriminate(const Discriminator<S>& d, const FeatureEnhancer<S>& fe,
                    const Var<S>& features, double lambda) {
    return d.forward(fe.forward(ag::grad_reverse(features, static_cast<S>(lambda))));
}

/// Adversarial weight warm-up on training progress p in [0, 1]:
/// lambda(p) = 2 / (1 + exp(-10 p)) - 1, rising from 0 toward 1.
inline double lambda_warmup(double p) {
    check_arg(std::isfinite(p), "lambda_warmup: progress must be finite");
    p = std::min(1.0, std::max(0.0, p));
    return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

template <typename S>
struct PoseInference {
    Tensor<S> features; // (N, feature_dim)
    Tensor<S> heatmaps; // (N, K, H', W')
};

/// Inference forward with no graph construction.
template <typename S>
PoseInference<S> forward_pose(const PoseNetwork<S>& net, const Tensor<S>& images) {
    ag::NoGrad guard;
    auto out = net.forward(Var<S>::leaf(images));
    return {out.features.val(), out.heatmaps.val()};
}

/// Pulls sample n of a batched heatmap tensor out as a standalone heatmap.
template <typename S>
HeatmapT<S> extract_heatmap(const Tensor<S>& batch, int64_t n, int64_t stride = 4) {
    check_arg(batch.rank() == 4 && n >= 0 && n < batch.dim(0),
              "extract_heatmap: bad batch index");
    const int64_t k = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    HeatmapT<S> hm;
    hm.values = Tensor<S>({k, h, w});
    hm.stride = stride;
    const S* src = batch.data() + n * k * h * w;
    std::copy(src, src + k * h * w, hm.values.data());
    return hm;
}

} // namespace dapose
