#pragma once

#include "phasealign/ops.hpp"

namespace phasealign {

/// Deformable convolution with stride 1 and per-channel-group offset fields.
///
/// Input channels are split into `offset_groups` contiguous blocks; block b samples at
/// p0 + pn + offsets[b, n](p0) for every kernel tap n. Offsets have layout
/// [N, 2*K*offset_groups, Ho, Wo] with (dy, dx) for block b and tap n at channels
/// 2*(b*K + n) and 2*(b*K + n) + 1, K = kh*kw in row-major tap order.
/// `groups` partitions the weights exactly as in conv2d.
struct DeformConvOptions {
    int groups = 1;
    int offset_groups = 1;
    int padding = 1;
};

namespace detail {

struct DeformGeometry {
    std::int64_t N, C, H, W, F, Cg, Fg, kh, kw, K, Ho, Wo, Og, Cpo;
    int groups, pad;
};

template <typename T>
void deform_im2col(const T* img, const T* off, const DeformGeometry& g, std::int64_t group, T* cols) {
    const std::int64_t HWo = g.Ho * g.Wo;
    for (std::int64_t ci = 0; ci < g.Cg; ++ci) {
        const std::int64_t c = group * g.Cg + ci;
        const std::int64_t ob = c / g.Cpo;
        const T* plane = img + c * g.H * g.W;
        for (std::int64_t t = 0; t < g.K; ++t) {
            const std::int64_t ky = t / g.kw, kx = t % g.kw;
            const T* dy = off + (2 * (ob * g.K + t)) * HWo;
            const T* dx = dy + HWo;
            T* row = cols + (ci * g.K + t) * HWo;
            for (std::int64_t oy = 0; oy < g.Ho; ++oy)
                for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
                    const std::int64_t p = oy * g.Wo + ox;
                    const auto pt = BilinearPoint<T>::at(static_cast<T>(oy - g.pad + ky) + dy[p],
                                                         static_cast<T>(ox - g.pad + kx) + dx[p]);
                    row[p] = pt.sample(plane, g.H, g.W);
                }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& offsets, const Tensor<T>& w, const Tensor<T>& bias = {},
                        DeformConvOptions opt = {}) {
    detail::require_rank(x.shape(), 4, "deform_conv2d input");
    detail::require_rank(offsets.shape(), 4, "deform_conv2d offsets");
    detail::require_rank(w.shape(), 4, "deform_conv2d weight");
    detail::DeformGeometry g{};
    g.N = x.dim(0), g.C = x.dim(1), g.H = x.dim(2), g.W = x.dim(3);
    g.F = w.dim(0), g.kh = w.dim(2), g.kw = w.dim(3), g.K = g.kh * g.kw;
    g.groups = opt.groups, g.pad = opt.padding, g.Og = opt.offset_groups;
    detail::require(g.groups >= 1 && g.Og >= 1, "deform_conv2d: groups and offset_groups must be positive");
    detail::require(g.C % g.groups == 0, "deform_conv2d: input channels (dim 1 = " + std::to_string(g.C) +
                                             ") not divisible by groups = " + std::to_string(g.groups));
    detail::require(g.C % g.Og == 0, "deform_conv2d: input channels (dim 1 = " + std::to_string(g.C) +
                                         ") not divisible by offset groups = " + std::to_string(g.Og));
    detail::require(g.F % g.groups == 0, "deform_conv2d: output channels (weight dim 0 = " + std::to_string(g.F) +
                                             ") not divisible by groups = " + std::to_string(g.groups));
    g.Cg = g.C / g.groups, g.Fg = g.F / g.groups, g.Cpo = g.C / g.Og;
    detail::require(w.dim(1) == g.Cg, "deform_conv2d: weight dim 1 is " + std::to_string(w.dim(1)) +
                                          " but input channels / groups = " + std::to_string(g.Cg));
    g.Ho = g.H + 2 * g.pad - g.kh + 1;
    g.Wo = g.W + 2 * g.pad - g.kw + 1;
    detail::require(g.Ho > 0 && g.Wo > 0, "deform_conv2d: kernel larger than padded input");
    const Shape want{g.N, 2 * g.K * g.Og, g.Ho, g.Wo};
    detail::require(offsets.shape() == want, "deform_conv2d: offsets shape " + to_string(offsets.shape()) +
                                                 " expected " + to_string(want));
    if (bias.defined())
        detail::require(bias.numel() == g.F, "deform_conv2d: bias length does not match output channels");

    const std::int64_t KK = g.Cg * g.K, HWo = g.Ho * g.Wo;
    const std::int64_t off_stride = 2 * g.K * g.Og * HWo;
    std::vector<T> out(static_cast<std::size_t>(g.N * g.F * HWo));
    std::vector<T> cols(static_cast<std::size_t>(KK * HWo));
    for (std::int64_t n = 0; n < g.N; ++n)
        for (std::int64_t gi = 0; gi < g.groups; ++gi) {
            detail::deform_im2col(x.vec().data() + n * g.C * g.H * g.W, offsets.vec().data() + n * off_stride, g, gi,
                                  cols.data());
            MatMap<T> o(out.data() + (n * g.F + gi * g.Fg) * HWo, g.Fg, HWo);
            o.noalias() = ConstMatMap<T>(w.vec().data() + gi * g.Fg * KK, g.Fg, KK) * ConstMatMap<T>(cols.data(), KK, HWo);
            if (bias.defined())
                for (std::int64_t f = 0; f < g.Fg; ++f) o.row(f).array() += bias.vec()[gi * g.Fg + f];
        }

    return Tensor<T>::make_result({g.N, g.F, g.Ho, g.Wo}, std::move(out), "deform_conv2d", {x, offsets, w, bias},
                                  [g, KK, HWo, off_stride](detail::Node<T>& nd) {
        auto* xin = detail::grad_target(nd, 0);
        auto* oin = detail::grad_target(nd, 1);
        auto* win = detail::grad_target(nd, 2);
        auto* bin = detail::grad_target(nd, 3);
        const T* xd = nd.inputs[0]->data.data();
        const T* od = nd.inputs[1]->data.data();
        const T* wd = nd.inputs[2]->data.data();
        std::vector<T> cols(static_cast<std::size_t>(KK * HWo));
        std::vector<T> dcols(static_cast<std::size_t>(KK * HWo));
        for (std::int64_t n = 0; n < g.N; ++n) {
            const T* img = xd + n * g.C * g.H * g.W;
            const T* off = od + n * off_stride;
            for (std::int64_t gi = 0; gi < g.groups; ++gi) {
                ConstMatMap<T> dout(nd.grad.data() + (n * g.F + gi * g.Fg) * HWo, g.Fg, HWo);
                if (win) {
                    detail::deform_im2col(img, off, g, gi, cols.data());
                    MatMap<T>(win->ensure_grad().data() + gi * g.Fg * KK, g.Fg, KK).noalias() +=
                        dout * ConstMatMap<T>(cols.data(), KK, HWo).transpose();
                }
                if (bin) {
                    auto& bg = bin->ensure_grad();
                    for (std::int64_t f = 0; f < g.Fg; ++f) bg[gi * g.Fg + f] += detail::ordered_sum(dout.row(f).data(), HWo);
                }
                if (!xin && !oin) continue;
                MatMap<T>(dcols.data(), KK, HWo).noalias() =
                    ConstMatMap<T>(wd + gi * g.Fg * KK, g.Fg, KK).transpose() * dout;
                T* dimg = xin ? xin->ensure_grad().data() + n * g.C * g.H * g.W : nullptr;
                T* doff = oin ? oin->ensure_grad().data() + n * off_stride : nullptr;
                for (std::int64_t ci = 0; ci < g.Cg; ++ci) {
                    const std::int64_t c = gi * g.Cg + ci;
                    const std::int64_t ob = c / g.Cpo;
                    const T* plane = img + c * g.H * g.W;
                    for (std::int64_t t = 0; t < g.K; ++t) {
                        const std::int64_t ky = t / g.kw, kx = t % g.kw;
                        const std::int64_t dyc = 2 * (ob * g.K + t);
                        const T* dy = off + dyc * HWo;
                        const T* dx = dy + HWo;
                        const T* drow = dcols.data() + (ci * g.K + t) * HWo;
                        for (std::int64_t oy = 0; oy < g.Ho; ++oy)
                            for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
                                const std::int64_t p = oy * g.Wo + ox;
                                const T gv = drow[p];
                                const auto pt = detail::BilinearPoint<T>::at(static_cast<T>(oy - g.pad + ky) + dy[p],
                                                                             static_cast<T>(ox - g.pad + kx) + dx[p]);
                                if (dimg) pt.scatter(dimg + c * g.H * g.W, g.H, g.W, gv);
                                if (doff) {
                                    auto [gy, gx] = pt.coord_grad(plane, g.H, g.W);
                                    doff[dyc * HWo + p] += gv * gy;
                                    doff[(dyc + 1) * HWo + p] += gv * gx;
                                }
                            }
                    }
                }
            }
        }
    });
}

}  // namespace phasealign
