#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "dapose/autograd.hpp"
#include "dapose/rng.hpp"
#include "dapose/warp.hpp"

namespace dapose {
namespace nn {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<EMat<S>>;
template <typename S>
using CMapM = Eigen::Map<const EMat<S>>;

struct ConvDims {
    int64_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

namespace detail {

template <typename S>
void im2col(const S* src, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
            S* dst, int64_t ho, int64_t wo) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                S* row = dst + ((ch * k + ki) * k + kj) * ho * wo;
                for (int64_t i = 0; i < ho; ++i) {
                    const int64_t hi = i * stride - pad + ki;
                    if (hi < 0 || hi >= h) {
                        for (int64_t j = 0; j < wo; ++j) row[i * wo + j] = S(0);
                        continue;
                    }
                    const S* srow = src + (ch * h + hi) * w;
                    for (int64_t j = 0; j < wo; ++j) {
                        const int64_t wi = j * stride - pad + kj;
                        row[i * wo + j] = (wi < 0 || wi >= w) ? S(0) : srow[wi];
                    }
                }
            }
}

// Adjoint of im2col; accumulates into dst.
template <typename S>
void col2im(const S* cols, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
            S* dst, int64_t ho, int64_t wo) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                const S* row = cols + ((ch * k + ki) * k + kj) * ho * wo;
                for (int64_t i = 0; i < ho; ++i) {
                    const int64_t hi = i * stride - pad + ki;
                    if (hi < 0 || hi >= h) continue;
                    S* drow = dst + (ch * h + hi) * w;
                    for (int64_t j = 0; j < wo; ++j) {
                        const int64_t wi = j * stride - pad + kj;
                        if (wi >= 0 && wi < w) drow[wi] += row[i * wo + j];
                    }
                }
            }
}

} // namespace detail

/// 2-D convolution, NCHW input, (Cout, Cin, k, k) weight.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int64_t stride, int64_t pad) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    check_arg(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1], "conv2d: bad shapes");
    ConvDims d;
    d.n = xs[0];
    d.cin = xs[1];
    d.h = xs[2];
    d.w = xs[3];
    d.cout = ws[0];
    d.k = ws[2];
    d.stride = stride;
    d.pad = pad;
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
    const int64_t ckk = d.cin * d.k * d.k;
    const int64_t owo = d.ho * d.wo;

    auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(d.n * ckk * owo));
    Tensor<S> out({d.n, d.cout, d.ho, d.wo});
    CMapM<S> wm(w.val().data(), d.cout, ckk);
    for (int64_t i = 0; i < d.n; ++i) {
        S* ci = cols->data() + i * ckk * owo;
        detail::im2col(x.val().data() + i * d.cin * d.h * d.w, d.cin, d.h, d.w, d.k, stride, pad,
                       ci, d.ho, d.wo);
        MapM<S> yo(out.data() + i * d.cout * owo, d.cout, owo);
        yo.noalias() = wm * CMapM<S>(ci, ckk, owo);
        for (int64_t co = 0; co < d.cout; ++co) yo.row(co).array() += b.val()[co];
    }

    auto px = x.node(), pw = w.node(), pb = b.node();
    return ag::make_op<S>(std::move(out), {px, pw, pb}, [px, pw, pb, cols, d, ckk, owo](Node<S>& self) {
        if (pw->requires_grad) {
            MapM<S> dw(pw->grad_buf().data(), d.cout, ckk);
            for (int64_t i = 0; i < d.n; ++i)
                dw.noalias() += CMapM<S>(self.grad.data() + i * d.cout * owo, d.cout, owo) *
                                CMapM<S>(cols->data() + i * ckk * owo, ckk, owo).transpose();
        }
        if (pb->requires_grad) {
            auto& db = pb->grad_buf();
            for (int64_t i = 0; i < d.n; ++i)
                for (int64_t co = 0; co < d.cout; ++co) {
                    const S* g = self.grad.data() + (i * d.cout + co) * owo;
                    S acc = 0;
                    for (int64_t p = 0; p < owo; ++p) acc += g[p];
                    db[co] += acc;
                }
        }
        if (px->requires_grad) {
            std::vector<S> dcols(static_cast<size_t>(ckk * owo));
            CMapM<S> wm2(pw->value.data(), d.cout, ckk);
            auto& dx = px->grad_buf();
            for (int64_t i = 0; i < d.n; ++i) {
                MapM<S> dc(dcols.data(), ckk, owo);
                dc.noalias() = wm2.transpose() *
                               CMapM<S>(self.grad.data() + i * d.cout * owo, d.cout, owo);
                detail::col2im(dcols.data(), d.cin, d.h, d.w, d.k, d.stride, d.pad,
                               dx.data() + i * d.cin * d.h * d.w, d.ho, d.wo);
            }
        }
    });
}

/// Transposed 2-D convolution, (Cin, Cout, k, k) weight. Output size
/// (Hin-1)*stride - 2*pad + k.
template <typename S>
Var<S> conv_transpose2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int64_t stride,
                        int64_t pad) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    check_arg(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[0], "conv_transpose2d: bad shapes");
    ConvDims d;
    d.n = xs[0];
    d.cin = xs[1];
    d.h = xs[2]; // input spatial
    d.w = xs[3];
    d.cout = ws[1];
    d.k = ws[2];
    d.stride = stride;
    d.pad = pad;
    d.ho = (d.h - 1) * stride - 2 * pad + d.k;
    d.wo = (d.w - 1) * stride - 2 * pad + d.k;
    const int64_t ckk = d.cout * d.k * d.k;
    const int64_t ihw = d.h * d.w;

    Tensor<S> out({d.n, d.cout, d.ho, d.wo});
    std::vector<S> cols(static_cast<size_t>(ckk * ihw));
    CMapM<S> wm(w.val().data(), d.cin, ckk);
    for (int64_t i = 0; i < d.n; ++i) {
        MapM<S> cm(cols.data(), ckk, ihw);
        cm.noalias() = wm.transpose() * CMapM<S>(x.val().data() + i * d.cin * ihw, d.cin, ihw);
        detail::col2im(cols.data(), d.cout, d.ho, d.wo, d.k, stride, pad,
                       out.data() + i * d.cout * d.ho * d.wo, d.h, d.w);
        for (int64_t co = 0; co < d.cout; ++co) {
            S* o = out.data() + (i * d.cout + co) * d.ho * d.wo;
            for (int64_t p = 0; p < d.ho * d.wo; ++p) o[p] += b.val()[co];
        }
    }

    auto px = x.node(), pw = w.node(), pb = b.node();
    return ag::make_op<S>(std::move(out), {px, pw, pb}, [px, pw, pb, d, ckk, ihw](Node<S>& self) {
        std::vector<S> dcols(static_cast<size_t>(ckk * ihw));
        const bool need_x = px->requires_grad, need_w = pw->requires_grad;
        for (int64_t i = 0; i < d.n && (need_x || need_w); ++i) {
            detail::im2col(self.grad.data() + i * d.cout * d.ho * d.wo, d.cout, d.ho, d.wo, d.k,
                           d.stride, d.pad, dcols.data(), d.h, d.w);
            CMapM<S> dc(dcols.data(), ckk, ihw);
            if (need_x) {
                CMapM<S> wm2(pw->value.data(), d.cin, ckk);
                MapM<S> dx(px->grad_buf().data() + i * d.cin * ihw, d.cin, ihw);
                dx.noalias() += wm2 * dc;
            }
            if (need_w) {
                MapM<S> dw(pw->grad_buf().data(), d.cin, ckk);
                dw.noalias() += CMapM<S>(px->value.data() + i * d.cin * ihw, d.cin, ihw) *
                                dc.transpose();
            }
        }
        if (pb->requires_grad) {
            auto& db = pb->grad_buf();
            for (int64_t i = 0; i < d.n; ++i)
                for (int64_t co = 0; co < d.cout; ++co) {
                    const S* g = self.grad.data() + (i * d.cout + co) * d.ho * d.wo;
                    S acc = 0;
                    for (int64_t p = 0; p < d.ho * d.wo; ++p) acc += g[p];
                    db[co] += acc;
                }
        }
    });
}

/// Fully connected: (N, Din) x (Dout, Din)^T + b.
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    const int64_t n = x.val().dim(0), din = x.val().dim(1), dout = w.val().dim(0);
    check_arg(w.val().dim(1) == din && b.val().numel() == dout, "linear: bad shapes");
    Tensor<S> out({n, dout});
    CMapM<S> xm(x.val().data(), n, din), wm(w.val().data(), dout, din);
    MapM<S> ym(out.data(), n, dout);
    ym.noalias() = xm * wm.transpose();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < dout; ++j) out.at(i, j) += b.val()[j];

    auto px = x.node(), pw = w.node(), pb = b.node();
    return ag::make_op<S>(std::move(out), {px, pw, pb}, [px, pw, pb, n, din, dout](Node<S>& self) {
        CMapM<S> gm(self.grad.data(), n, dout);
        if (px->requires_grad) {
            MapM<S> dx(px->grad_buf().data(), n, din);
            dx.noalias() += gm * CMapM<S>(pw->value.data(), dout, din);
        }
        if (pw->requires_grad) {
            MapM<S> dw(pw->grad_buf().data(), dout, din);
            dw.noalias() += gm.transpose() * CMapM<S>(px->value.data(), n, din);
        }
        if (pb->requires_grad) {
            auto& db = pb->grad_buf();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < dout; ++j) db[j] += self.grad.at(i, j);
        }
    });
}

/// Spatial mean per (sample, channel): (N, C, H, W) -> (N, C).
template <typename S>
Var<S> spatial_mean(const Var<S>& x) {
    const auto& s = x.val().shape();
    check_arg(s.size() == 4, "spatial_mean: NCHW expected");
    const int64_t n = s[0], c = s[1], hw = s[2] * s[3];
    Tensor<S> out({n, c});
    const S inv = S(1) / static_cast<S>(hw);
    for (int64_t i = 0; i < n * c; ++i) {
        const S* p = x.val().data() + i * hw;
        S acc = 0;
        for (int64_t j = 0; j < hw; ++j) acc += p[j];
        out[i] = acc * inv;
    }
    auto px = x.node();
    return ag::make_op<S>(std::move(out), {px}, [px, n, c, hw, inv](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < n * c; ++i) {
            const S go = self.grad[i] * inv;
            S* p = g.data() + i * hw;
            for (int64_t j = 0; j < hw; ++j) p[j] += go;
        }
    });
}

/// Multiply each (n, c) plane by scale[n, c].
template <typename S>
Var<S> scale_planes(const Var<S>& x, const Var<S>& scale) {
    const auto& s = x.val().shape();
    check_arg(s.size() == 4 && scale.val().dim(0) == s[0] && scale.val().dim(1) == s[1],
              "scale_planes: bad shapes");
    const int64_t nc = s[0] * s[1], hw = s[2] * s[3];
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < nc; ++i) {
        const S sc = scale.val()[i];
        const S* p = x.val().data() + i * hw;
        S* o = out.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) o[j] = p[j] * sc;
    }
    auto px = x.node(), ps = scale.node();
    return ag::make_op<S>(std::move(out), {px, ps}, [px, ps, nc, hw](Node<S>& self) {
        if (px->requires_grad) {
            auto& g = px->grad_buf();
            for (int64_t i = 0; i < nc; ++i) {
                const S sc = ps->value[i];
                S* gp = g.data() + i * hw;
                const S* so = self.grad.data() + i * hw;
                for (int64_t j = 0; j < hw; ++j) gp[j] += so[j] * sc;
            }
        }
        if (ps->requires_grad) {
            auto& g = ps->grad_buf();
            for (int64_t i = 0; i < nc; ++i) {
                const S* xp = px->value.data() + i * hw;
                const S* so = self.grad.data() + i * hw;
                S acc = 0;
                for (int64_t j = 0; j < hw; ++j) acc += so[j] * xp[j];
                g[i] += acc;
            }
        }
    });
}

/// Add shift[n, c] to each (n, c) plane.
template <typename S>
Var<S> shift_planes(const Var<S>& x, const Var<S>& shift) {
    const auto& s = x.val().shape();
    check_arg(s.size() == 4 && shift.val().dim(0) == s[0] && shift.val().dim(1) == s[1],
              "shift_planes: bad shapes");
    const int64_t nc = s[0] * s[1], hw = s[2] * s[3];
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < nc; ++i) {
        const S sh = shift.val()[i];
        const S* p = x.val().data() + i * hw;
        S* o = out.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) o[j] = p[j] + sh;
    }
    auto px = x.node(), ps = shift.node();
    return ag::make_op<S>(std::move(out), {px, ps}, [px, ps, nc, hw](Node<S>& self) {
        if (px->requires_grad) axpy(S(1), self.grad, px->grad_buf());
        if (ps->requires_grad) {
            auto& g = ps->grad_buf();
            for (int64_t i = 0; i < nc; ++i) {
                const S* so = self.grad.data() + i * hw;
                S acc = 0;
                for (int64_t j = 0; j < hw; ++j) acc += so[j];
                g[i] += acc;
            }
        }
    });
}

/// Global average pooling (N, C, H, W) -> (N, C); the pose feature vector.
template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
    return spatial_mean(x);
}

/// Per-sample inverse-warp of heatmap channels (pull maps in heatmap cells).
template <typename S>
Var<S> warp_channels(const Var<S>& x, std::vector<Affine2> pulls) {
    const auto& s = x.val().shape();
    check_arg(s.size() == 4 && static_cast<int64_t>(pulls.size()) == s[0],
              "warp_channels: one pull map per sample required");
    const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
    Tensor<S> out(x.val().shape());
    for (int64_t i = 0; i < n; ++i)
        warp::pull_planes(x.val().data() + i * c * h * w, out.data() + i * c * h * w, c, h, w,
                          pulls[i]);
    auto px = x.node();
    auto mats = std::make_shared<std::vector<Affine2>>(std::move(pulls));
    return ag::make_op<S>(std::move(out), {px}, [px, mats, n, c, h, w](Node<S>& self) {
        auto& g = px->grad_buf();
        for (int64_t i = 0; i < n; ++i)
            warp::pull_planes_adjoint(g.data() + i * c * h * w,
                                      self.grad.data() + i * c * h * w, c, h, w, (*mats)[i]);
    });
}

// ---------------------------------------------------------------------------
// Layers: parameter-holding closures over the functional ops.
// ---------------------------------------------------------------------------

template <typename S>
struct ParamSet {
    std::vector<std::pair<std::string, Var<S>>> items;

    void add(const std::string& name, const Var<S>& v) { items.emplace_back(name, v); }

    void merge(const ParamSet& o) {
        items.insert(items.end(), o.items.begin(), o.items.end());
    }

    void merge(const ParamSet& o, const std::string& prefix) {
        for (const auto& [name, v] : o.items) items.emplace_back(prefix + "." + name, v);
    }

    std::vector<Var<S>> vars() const {
        std::vector<Var<S>> v;
        v.reserve(items.size());
        for (const auto& [_, p] : items) v.push_back(p);
        return v;
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [_, p] : items) n += p.val().numel();
        return n;
    }
};

template <typename S>
Tensor<S> trunc_normal_init(std::vector<int64_t> shape, RngStream& rng, double stddev = 0.02) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.truncated_normal(stddev));
    return t;
}

/// He-scaled truncated-normal init for relu stacks; fan_in is everything but
/// the leading output dimension.
template <typename S>
Tensor<S> kaiming_init(std::vector<int64_t> shape, RngStream& rng) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<int64_t>(1, fan_in)));
    return trunc_normal_init<S>(std::move(shape), rng, stddev);
}

template <typename S>
struct Conv2dLayer {
    Var<S> w, b;
    int64_t stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, RngStream& rng)
        : w(Var<S>::leaf(kaiming_init<S>({cout, cin, k, k}, rng), true)),
          b(Var<S>::leaf(Tensor<S>({cout}), true)),
          stride(stride),
          pad(pad) {}

    Var<S> operator()(const Var<S>& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(ParamSet<S>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

template <typename S>
struct ConvT2dLayer {
    Var<S> w, b;
    int64_t stride = 2, pad = 1;

    ConvT2dLayer() = default;
    ConvT2dLayer(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, RngStream& rng)
        : w(Var<S>::leaf(kaiming_init<S>({cin, cout, k, k}, rng), true)),
          b(Var<S>::leaf(Tensor<S>({cout}), true)),
          stride(stride),
          pad(pad) {}

    Var<S> operator()(const Var<S>& x) const { return conv_transpose2d(x, w, b, stride, pad); }

    void collect(ParamSet<S>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

template <typename S>
struct LinearLayer {
    Var<S> w, b;

    LinearLayer() = default;
    LinearLayer(int64_t din, int64_t dout, RngStream& rng)
        : w(Var<S>::leaf(kaiming_init<S>({dout, din}, rng), true)),
          b(Var<S>::leaf(Tensor<S>({dout}), true)) {}

    Var<S> operator()(const Var<S>& x) const { return linear(x, w, b); }

    void collect(ParamSet<S>& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

/// Adam with bias correction; the only optimizer in the project.
template <typename S>
class Adam {
  public:
    Adam() = default;
    explicit Adam(std::vector<Var<S>> params, S beta1 = S(0.9), S beta2 = S(0.999),
                  S eps = S(1e-8))
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.val().shape());
            v_.emplace_back(p.val().shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step(S lr) {
        ++t_;
        const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].val();
            const auto& g = params_[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (int64_t j = 0; j < p.numel(); ++j) {
                m[j] = beta1_ * m[j] + (S(1) - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (S(1) - beta2_) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

    int64_t steps() const { return t_; }
    void set_steps(int64_t t) { t_ = t; }
    std::vector<Tensor<S>>& first_moments() { return m_; }
    std::vector<Tensor<S>>& second_moments() { return v_; }
    const std::vector<Tensor<S>>& first_moments() const { return m_; }
    const std::vector<Tensor<S>>& second_moments() const { return v_; }
    const std::vector<Var<S>>& params() const { return params_; }

  private:
    std::vector<Var<S>> params_;
    std::vector<Tensor<S>> m_, v_;
    S beta1_ = S(0.9), beta2_ = S(0.999), eps_ = S(1e-8);
    int64_t t_ = 0;
};

} // namespace nn
} // namespace dapose
