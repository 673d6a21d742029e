#pragma once

#include <array>
#include <cmath>

#include "dapose/common.hpp"
#include "dapose/tensor.hpp"

namespace dapose {

/// 2x3 affine map on continuous 2-D coordinates, row-major:
///   x' = m[0]*x + m[1]*y + m[2]
///   y' = m[3]*x + m[4]*y + m[5]
/// Coordinates follow the cell-center convention: cell (row r, col c) sits at
/// (c + 0.5, r + 0.5) in its own grid units.
struct Affine2 {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    static Affine2 identity() { return {}; }

    static Affine2 translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty}}; }

    /// Rotation (radians, y-down image frame) and isotropic scale about a center point.
    static Affine2 rot_scale_about(double angle, double scale, double cx, double cy) {
        const double c = std::cos(angle) * scale;
        const double s = std::sin(angle) * scale;
        Affine2 a;
        a.m = {c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy};
        return a;
    }

    void apply(double x, double y, double& ox, double& oy) const {
        ox = m[0] * x + m[1] * y + m[2];
        oy = m[3] * x + m[4] * y + m[5];
    }

    double det() const { return m[0] * m[4] - m[1] * m[3]; }

    bool invertible(double tol = 1e-6) const { return std::abs(det()) > tol; }

    Affine2 inverse() const {
        check_arg(invertible(), "affine is not invertible");
        const double d = det();
        Affine2 r;
        r.m[0] = m[4] / d;
        r.m[1] = -m[1] / d;
        r.m[3] = -m[3] / d;
        r.m[4] = m[0] / d;
        r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
        r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
        return r;
    }

    /// this ∘ other (apply other first).
    Affine2 compose(const Affine2& o) const {
        Affine2 r;
        r.m[0] = m[0] * o.m[0] + m[1] * o.m[3];
        r.m[1] = m[0] * o.m[1] + m[1] * o.m[4];
        r.m[2] = m[0] * o.m[2] + m[1] * o.m[5] + m[2];
        r.m[3] = m[3] * o.m[0] + m[4] * o.m[3];
        r.m[4] = m[3] * o.m[1] + m[4] * o.m[4];
        r.m[5] = m[3] * o.m[2] + m[4] * o.m[5] + m[5];
        return r;
    }

    /// Conjugate an image-space map into a grid downscaled by `stride`:
    /// linear part unchanged, translation divided by stride.
    Affine2 to_stride_space(double stride) const {
        Affine2 r = *this;
        r.m[2] /= stride;
        r.m[5] /= stride;
        return r;
    }
};

namespace warp {

/// Bilinear sample of one plane at continuous coords (x, y); zero outside.
template <typename S>
S sample_plane(const S* plane, int64_t h, int64_t w, double x, double y) {
    const double xi = x - 0.5, yi = y - 0.5;
    const int64_t j0 = static_cast<int64_t>(std::floor(xi));
    const int64_t i0 = static_cast<int64_t>(std::floor(yi));
    const double fx = xi - static_cast<double>(j0);
    const double fy = yi - static_cast<double>(i0);
    auto tap = [&](int64_t i, int64_t j) -> double {
        if (i < 0 || i >= h || j < 0 || j >= w) return 0.0;
        return static_cast<double>(plane[i * w + j]);
    };
    const double v = (1 - fy) * ((1 - fx) * tap(i0, j0) + fx * tap(i0, j0 + 1)) +
                     fy * ((1 - fx) * tap(i0 + 1, j0) + fx * tap(i0 + 1, j0 + 1));
    return static_cast<S>(v);
}

/// out(r, c) = in(pull · center(r, c)) for every channel of a (C, H, W) tensor.
template <typename S>
void pull_planes(const S* in, S* out, int64_t c, int64_t h, int64_t w, const Affine2& pull) {
    for (int64_t ch = 0; ch < c; ++ch) {
        const S* src = in + ch * h * w;
        S* dst = out + ch * h * w;
        for (int64_t r = 0; r < h; ++r)
            for (int64_t cc = 0; cc < w; ++cc) {
                double sx, sy;
                pull.apply(static_cast<double>(cc) + 0.5, static_cast<double>(r) + 0.5, sx, sy);
                dst[r * w + cc] = sample_plane(src, h, w, sx, sy);
            }
    }
}

/// Adjoint of pull_planes: scatters dOut back onto dIn (accumulating).
template <typename S>
void pull_planes_adjoint(S* d_in, const S* d_out, int64_t c, int64_t h, int64_t w,
                         const Affine2& pull) {
    for (int64_t ch = 0; ch < c; ++ch) {
        S* dst = d_in + ch * h * w;
        const S* src = d_out + ch * h * w;
        for (int64_t r = 0; r < h; ++r)
            for (int64_t cc = 0; cc < w; ++cc) {
                const S g = src[r * w + cc];
                if (g == S(0)) continue;
                double sx, sy;
                pull.apply(static_cast<double>(cc) + 0.5, static_cast<double>(r) + 0.5, sx, sy);
                const double xi = sx - 0.5, yi = sy - 0.5;
                const int64_t j0 = static_cast<int64_t>(std::floor(xi));
                const int64_t i0 = static_cast<int64_t>(std::floor(yi));
                const double fx = xi - static_cast<double>(j0);
                const double fy = yi - static_cast<double>(i0);
                auto put = [&](int64_t i, int64_t j, double wgt) {
                    if (i < 0 || i >= h || j < 0 || j >= w) return;
                    dst[i * w + j] += static_cast<S>(wgt) * g;
                };
                put(i0, j0, (1 - fy) * (1 - fx));
                put(i0, j0 + 1, (1 - fy) * fx);
                put(i0 + 1, j0, fy * (1 - fx));
                put(i0 + 1, j0 + 1, fy * fx);
            }
    }
}

/// Convenience: warp a (C, H, W) tensor by a pull map.
template <typename S>
Tensor<S> pull_tensor(const Tensor<S>& in, const Affine2& pull) {
    check_arg(in.rank() == 3, "pull_tensor: (C,H,W) expected");
    Tensor<S> out(in.shape());
    pull_planes(in.data(), out.data(), in.dim(0), in.dim(1), in.dim(2), pull);
    return out;
}

} // namespace warp
} // namespace dapose
