#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <limits>

#include "phasealign/tensor.hpp"

namespace phasealign {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

/// Sequential sum. Eigen's vectorised reduction peels by address, so its rounding would
/// depend on where the allocator placed the buffer.
template <typename T>
T ordered_sum(const T* p, std::int64_t n) {
    T s = T(0);
    for (std::int64_t i = 0; i < n; ++i) s += p[i];
    return s;
}

inline void require_rank(const Shape& s, std::size_t rank, const char* who) {
    require(s.size() == rank, std::string(who) + ": expected rank " + std::to_string(rank) + " input, got " +
                                  to_string(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.vec());
    const auto& bv = b.vec();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), "add", {a, b}, [](detail::Node<T>& n) {
        for (std::size_t k = 0; k < 2; ++k)
            if (auto* in = detail::grad_target(n, k)) {
                auto& g = in->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.vec());
    const auto& bv = b.vec();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node<T>& n) {
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (auto* in = detail::grad_target(n, 1)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    std::vector<T> out(a.vec());
    const auto& bv = b.vec();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node<T>& n) {
        const auto& av = n.inputs[0]->data;
        const auto& bv = n.inputs[1]->data;
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (auto* in = detail::grad_target(n, 1)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

/// x scaled by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v *= c;
    return Tensor<T>::make_result(x.shape(), std::move(out), "scale", {x}, [c](detail::Node<T>& n) {
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
        }
    });
}

/// c * x + d elementwise.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T c, T d) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v = c * v + d;
    return Tensor<T>::make_result(x.shape(), std::move(out), "affine", {x}, [c](detail::Node<T>& n) {
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
        }
    });
}

/// x * s where s is a one-element tensor (a learned gate).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
    detail::require(s.numel() == 1, "scale_by: gate must have one element, got " + to_string(s.shape()));
    const T sv = s.vec()[0];
    std::vector<T> out(x.vec());
    for (auto& v : out) v *= sv;
    return Tensor<T>::make_result(x.shape(), std::move(out), "scale_by", {x, s}, [](detail::Node<T>& n) {
        const auto& xv = n.inputs[0]->data;
        const T sv = n.inputs[1]->data[0];
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * n.grad[i];
        }
        if (auto* in = detail::grad_target(n, 1)) {
            T acc = 0;
            for (std::size_t i = 0; i < xv.size(); ++i) acc += n.grad[i] * xv[i];
            in->ensure_grad()[0] += acc;
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return Tensor<T>::make_result(x.shape(), std::move(out), "relu", {x}, [](detail::Node<T>& n) {
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (in->data[i] > T(0)) g[i] += n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (auto v : x.vec()) acc += v;
    return Tensor<T>::make_result({1}, {acc}, "sum", {x}, [](detail::Node<T>& n) {
        if (auto* in = detail::grad_target(n, 0)) {
            const T g0 = n.grad[0];
            for (auto& g : in->ensure_grad()) g += g0;
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    detail::require(x.numel() > 0, "mean: empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::require(numel(shape) == x.numel(),
                    "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    return Tensor<T>::make_result(std::move(shape), x.vec(), "reshape", {x}, [](detail::Node<T>& n) {
        if (auto* in = detail::grad_target(n, 0)) {
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

namespace detail {

// Views a shape as (outer, axis, inner) around `axis`.
inline std::array<std::int64_t, 3> split_at_axis(const Shape& s, std::size_t axis) {
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
}

}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    detail::require(!parts.empty(), "concat: no inputs");
    Shape out_shape = parts[0].shape();
    detail::require(axis < out_shape.size(), "concat: axis out of range");
    std::int64_t total = 0;
    for (const auto& p : parts) {
        detail::require(p.rank() == out_shape.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < out_shape.size(); ++d)
            if (d != axis)
                detail::require(p.dim(d) == out_shape[d], "concat: extent mismatch in dimension " + std::to_string(d) +
                                                               ": " + to_string(p.shape()) + " vs " +
                                                               to_string(out_shape));
        total += p.dim(axis);
    }
    out_shape[axis] = total;
    const auto [outer, _, inner] = detail::split_at_axis(out_shape, axis);
    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    std::vector<std::int64_t> extents;
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t e = p.dim(axis);
        extents.push_back(e);
        const auto& pv = p.vec();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(pv.begin() + o * e * inner, e * inner, out.begin() + (o * total + offset) * inner);
        offset += e;
    }
    return Tensor<T>::make_result(out_shape, std::move(out), "concat", parts,
                                  [extents, outer = outer, inner = inner, total](detail::Node<T>& n) {
                                      std::int64_t offset = 0;
                                      for (std::size_t k = 0; k < extents.size(); ++k) {
                                          const std::int64_t e = extents[k];
                                          if (auto* in = detail::grad_target(n, k)) {
                                              auto& g = in->ensure_grad();
                                              for (std::int64_t o = 0; o < outer; ++o)
                                                  for (std::int64_t i = 0; i < e * inner; ++i)
                                                      g[o * e * inner + i] += n.grad[(o * total + offset) * inner + i];
                                          }
                                          offset += e;
                                      }
                                  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t length) {
    detail::require(axis < x.rank(), "slice: axis out of range");
    detail::require(start >= 0 && length >= 0 && start + length <= x.dim(axis),
                    "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                        ") exceeds extent " + std::to_string(x.dim(axis)) + " of dimension " + std::to_string(axis));
    const auto [outer, extent, inner] = detail::split_at_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    const auto& xv = x.vec();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(xv.begin() + (o * extent + start) * inner, length * inner, out.begin() + o * length * inner);
    return Tensor<T>::make_result(out_shape, std::move(out), "slice", {x},
                                  [outer = outer, extent = extent, inner = inner, start, length](detail::Node<T>& n) {
                                      if (auto* in = detail::grad_target(n, 0)) {
                                          auto& g = in->ensure_grad();
                                          for (std::int64_t o = 0; o < outer; ++o)
                                              for (std::int64_t i = 0; i < length * inner; ++i)
                                                  g[(o * extent + start) * inner + i] += n.grad[o * length * inner + i];
                                      }
                                  });
}

/// Detection-head layout change: [N, A*k, H, W] -> [N, H*W*A, k], anchor-major per cell.
template <typename T>
Tensor<T> flatten_head(const Tensor<T>& x, std::int64_t k) {
    detail::require_rank(x.shape(), 4, "flatten_head");
    const std::int64_t N = x.dim(0), AK = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(k > 0 && AK % k == 0, "flatten_head: channel count " + std::to_string(AK) +
                                              " is not a multiple of " + std::to_string(k));
    const std::int64_t A = AK / k, HW = H * W;
    auto index = [=](std::int64_t n, std::int64_t a, std::int64_t j, std::int64_t p) {
        return std::pair{((n * AK) + a * k + j) * HW + p, ((n * HW + p) * A + a) * k + j};
    };
    std::vector<T> out(x.vec().size());
    const auto& xv = x.vec();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t a = 0; a < A; ++a)
            for (std::int64_t j = 0; j < k; ++j)
                for (std::int64_t p = 0; p < HW; ++p) {
                    auto [src, dst] = index(n, a, j, p);
                    out[dst] = xv[src];
                }
    return Tensor<T>::make_result({N, HW * A, k}, std::move(out), "flatten_head", {x},
                                  [=](detail::Node<T>& nd) {
                                      if (auto* in = detail::grad_target(nd, 0)) {
                                          auto& g = in->ensure_grad();
                                          for (std::int64_t n = 0; n < N; ++n)
                                              for (std::int64_t a = 0; a < A; ++a)
                                                  for (std::int64_t j = 0; j < k; ++j)
                                                      for (std::int64_t p = 0; p < HW; ++p) {
                                                          auto [src, dst] = index(n, a, j, p);
                                                          g[src] += nd.grad[dst];
                                                      }
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

namespace detail {

struct ConvGeometry {
    std::int64_t N, C, H, W, F, Cg, Fg, kh, kw, Ho, Wo;
    int stride, pad, dil, groups;
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
    const std::int64_t HWo = g.Ho * g.Wo;
    for (std::int64_t c = 0; c < g.Cg; ++c)
        for (std::int64_t ky = 0; ky < g.kh; ++ky)
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((c * g.kh + ky) * g.kw + kx) * HWo;
                const T* plane = img + c * g.H * g.W;
                for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky * g.dil;
                    T* dst = row + oy * g.Wo;
                    if (iy < 0 || iy >= g.H) {
                        std::fill_n(dst, g.Wo, T(0));
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx * g.dil;
                        dst[ox] = (ix < 0 || ix >= g.W) ? T(0) : plane[iy * g.W + ix];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
    const std::int64_t HWo = g.Ho * g.Wo;
    for (std::int64_t c = 0; c < g.Cg; ++c)
        for (std::int64_t ky = 0; ky < g.kh; ++ky)
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * HWo;
                T* plane = img + c * g.H * g.W;
                for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky * g.dil;
                    if (iy < 0 || iy >= g.H) continue;
                    for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx * g.dil;
                        if (ix >= 0 && ix < g.W) plane[iy * g.W + ix] += row[oy * g.Wo + ox];
                    }
                }
            }
}

inline bool is_pointwise(const ConvGeometry& g) {
    return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

/// 2-D cross-correlation over NCHW input with grouped channels.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}, Conv2dOptions opt = {}) {
    detail::require_rank(x.shape(), 4, "conv2d input");
    detail::require_rank(w.shape(), 4, "conv2d weight");
    detail::require(opt.groups >= 1 && opt.stride >= 1 && opt.dilation >= 1 && opt.padding >= 0,
                    "conv2d: groups, stride and dilation must be positive");
    detail::ConvGeometry g{};
    g.N = x.dim(0), g.C = x.dim(1), g.H = x.dim(2), g.W = x.dim(3);
    g.F = w.dim(0), g.kh = w.dim(2), g.kw = w.dim(3);
    g.stride = opt.stride, g.pad = opt.padding, g.dil = opt.dilation, g.groups = opt.groups;
    detail::require(g.C % g.groups == 0, "conv2d: input channels (dim 1 = " + std::to_string(g.C) +
                                             ") not divisible by groups = " + std::to_string(g.groups));
    detail::require(g.F % g.groups == 0, "conv2d: output channels (weight dim 0 = " + std::to_string(g.F) +
                                             ") not divisible by groups = " + std::to_string(g.groups));
    g.Cg = g.C / g.groups, g.Fg = g.F / g.groups;
    detail::require(w.dim(1) == g.Cg, "conv2d: weight dim 1 is " + std::to_string(w.dim(1)) + " but input channels / groups = " +
                                          std::to_string(g.Cg));
    if (bias.defined())
        detail::require(bias.numel() == g.F, "conv2d: bias length " + std::to_string(bias.numel()) +
                                                 " does not match output channels " + std::to_string(g.F));
    g.Ho = (g.H + 2 * g.pad - g.dil * (g.kh - 1) - 1) / g.stride + 1;
    g.Wo = (g.W + 2 * g.pad - g.dil * (g.kw - 1) - 1) / g.stride + 1;
    detail::require(g.Ho > 0 && g.Wo > 0, "conv2d: kernel larger than padded input " + to_string(x.shape()));

    const std::int64_t K = g.Cg * g.kh * g.kw, HWo = g.Ho * g.Wo;
    std::vector<T> out(static_cast<std::size_t>(g.N * g.F * HWo));
    std::vector<T> cols(detail::is_pointwise(g) ? 0 : static_cast<std::size_t>(K * HWo));
    const T* xd = x.vec().data();
    const T* wd = w.vec().data();
    for (std::int64_t n = 0; n < g.N; ++n)
        for (std::int64_t gi = 0; gi < g.groups; ++gi) {
            const T* img = xd + (n * g.C + gi * g.Cg) * g.H * g.W;
            const T* colp = img;
            if (!detail::is_pointwise(g)) {
                detail::im2col(img, g, cols.data());
                colp = cols.data();
            }
            MatMap<T> o(out.data() + (n * g.F + gi * g.Fg) * HWo, g.Fg, HWo);
            o.noalias() = ConstMatMap<T>(wd + gi * g.Fg * K, g.Fg, K) * ConstMatMap<T>(colp, K, HWo);
            if (bias.defined())
                for (std::int64_t f = 0; f < g.Fg; ++f) o.row(f).array() += bias.vec()[gi * g.Fg + f];
        }

    return Tensor<T>::make_result({g.N, g.F, g.Ho, g.Wo}, std::move(out), "conv2d", {x, w, bias},
                                  [g, K, HWo](detail::Node<T>& n) {
        auto* xin = detail::grad_target(n, 0);
        auto* win = detail::grad_target(n, 1);
        auto* bin = detail::grad_target(n, 2);
        const T* xd = n.inputs[0]->data.data();
        const T* wd = n.inputs[1]->data.data();
        const T* gd = n.grad.data();
        std::vector<T> cols(detail::is_pointwise(g) ? 0 : static_cast<std::size_t>(K * HWo));
        std::vector<T> dcols(static_cast<std::size_t>(K * HWo));
        for (std::int64_t b = 0; b < g.N; ++b)
            for (std::int64_t gi = 0; gi < g.groups; ++gi) {
                ConstMatMap<T> dout(gd + (b * g.F + gi * g.Fg) * HWo, g.Fg, HWo);
                if (win) {
                    const T* img = xd + (b * g.C + gi * g.Cg) * g.H * g.W;
                    const T* colp = img;
                    if (!detail::is_pointwise(g)) {
                        detail::im2col(img, g, cols.data());
                        colp = cols.data();
                    }
                    MatMap<T>(win->ensure_grad().data() + gi * g.Fg * K, g.Fg, K).noalias() +=
                        dout * ConstMatMap<T>(colp, K, HWo).transpose();
                }
                if (xin) {
                    T* dimg = xin->ensure_grad().data() + (b * g.C + gi * g.Cg) * g.H * g.W;
                    if (detail::is_pointwise(g)) {
                        MatMap<T>(dimg, K, HWo).noalias() += ConstMatMap<T>(wd + gi * g.Fg * K, g.Fg, K).transpose() * dout;
                    } else {
                        MatMap<T>(dcols.data(), K, HWo).noalias() =
                            ConstMatMap<T>(wd + gi * g.Fg * K, g.Fg, K).transpose() * dout;
                        detail::col2im_add(dcols.data(), g, dimg);
                    }
                }
                if (bin) {
                    auto& bg = bin->ensure_grad();
                    for (std::int64_t f = 0; f < g.Fg; ++f) bg[gi * g.Fg + f] += detail::ordered_sum(dout.row(f).data(), HWo);
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a.shape(), 2, "matmul lhs");
    detail::require_rank(b.shape(), 2, "matmul rhs");
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    detail::require(b.dim(0) == K, "matmul: inner dimensions differ (" + std::to_string(K) + " vs " +
                                       std::to_string(b.dim(0)) + ")");
    std::vector<T> out(static_cast<std::size_t>(M * N));
    MatMap<T>(out.data(), M, N).noalias() = ConstMatMap<T>(a.vec().data(), M, K) * ConstMatMap<T>(b.vec().data(), K, N);
    return Tensor<T>::make_result({M, N}, std::move(out), "matmul", {a, b}, [M, K, N](detail::Node<T>& n) {
        ConstMatMap<T> g(n.grad.data(), M, N);
        if (auto* in = detail::grad_target(n, 0))
            MatMap<T>(in->ensure_grad().data(), M, K).noalias() +=
                g * ConstMatMap<T>(n.inputs[1]->data.data(), K, N).transpose();
        if (auto* in = detail::grad_target(n, 1))
            MatMap<T>(in->ensure_grad().data(), K, N).noalias() +=
                ConstMatMap<T>(n.inputs[0]->data.data(), M, K).transpose() * g;
    });
}

/// Batched product over the leading dimension, with optional transposition of either operand.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
    detail::require_rank(a.shape(), 3, "bmm lhs");
    detail::require_rank(b.shape(), 3, "bmm rhs");
    detail::require(a.dim(0) == b.dim(0), "bmm: batch extents differ");
    const std::int64_t B = a.dim(0);
    const std::int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
    const std::int64_t M = trans_a ? ac : ar, K = trans_a ? ar : ac;
    const std::int64_t Kb = trans_b ? bc : br, N = trans_b ? br : bc;
    detail::require(K == Kb, "bmm: inner dimensions differ (" + std::to_string(K) + " vs " + std::to_string(Kb) + ")");
    std::vector<T> out(static_cast<std::size_t>(B * M * N));
    for (std::int64_t i = 0; i < B; ++i) {
        ConstMatMap<T> A(a.vec().data() + i * ar * ac, ar, ac);
        ConstMatMap<T> Bm(b.vec().data() + i * br * bc, br, bc);
        MatMap<T> C(out.data() + i * M * N, M, N);
        if (!trans_a && !trans_b) C.noalias() = A * Bm;
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * Bm;
        else if (!trans_a && trans_b) C.noalias() = A * Bm.transpose();
        else C.noalias() = A.transpose() * Bm.transpose();
    }
    return Tensor<T>::make_result({B, M, N}, std::move(out), "bmm", {a, b},
                                  [=](detail::Node<T>& n) {
        auto* ain = detail::grad_target(n, 0);
        auto* bin = detail::grad_target(n, 1);
        for (std::int64_t i = 0; i < B; ++i) {
            ConstMatMap<T> G(n.grad.data() + i * M * N, M, N);
            ConstMatMap<T> A(n.inputs[0]->data.data() + i * ar * ac, ar, ac);
            ConstMatMap<T> Bm(n.inputs[1]->data.data() + i * br * bc, br, bc);
            if (ain) {
                MatMap<T> dA(ain->ensure_grad().data() + i * ar * ac, ar, ac);
                // op(A) = M x K; d op(A) = G op(B)^T.
                if (!trans_a && !trans_b) dA.noalias() += G * Bm.transpose();
                else if (!trans_a && trans_b) dA.noalias() += G * Bm;
                else if (trans_a && !trans_b) dA.noalias() += Bm * G.transpose();
                else dA.noalias() += Bm.transpose() * G.transpose();
            }
            if (bin) {
                MatMap<T> dB(bin->ensure_grad().data() + i * br * bc, br, bc);
                if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
                else if (trans_a && !trans_b) dB.noalias() += A * G;
                else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
                else dB.noalias() += G.transpose() * A.transpose();
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax and pooling
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    detail::require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
    const auto [outer, extent, inner] = detail::split_at_axis(x.shape(), axis);
    std::vector<T> out(x.vec().size());
    const auto& xv = x.vec();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * extent * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t e = 0; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
            T total = 0;
            for (std::int64_t e = 0; e < extent; ++e) {
                const T v = std::exp(xv[base + e * inner] - mx);
                out[base + e * inner] = v;
                total += v;
            }
            const T inv = T(1) / total;
            for (std::int64_t e = 0; e < extent; ++e) out[base + e * inner] *= inv;
        }
    return Tensor<T>::make_result(x.shape(), std::move(out), "softmax", {x},
                                  [outer = outer, extent = extent, inner = inner](detail::Node<T>& n) {
        auto* in = detail::grad_target(n, 0);
        if (!in) return;
        auto& g = in->ensure_grad();
        const auto& y = n.data;
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t base = o * extent * inner + i;
                T dot = 0;
                for (std::int64_t e = 0; e < extent; ++e) dot += n.grad[base + e * inner] * y[base + e * inner];
                for (std::int64_t e = 0; e < extent; ++e) {
                    const std::int64_t k = base + e * inner;
                    g[k] += y[k] * (n.grad[k] - dot);
                }
            }
    });
}

/// Mean over non-overlapping D x D windows. Extents that are not multiples of D are
/// zero-padded at the bottom/right, so every output divides by D*D.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int D) {
    detail::require_rank(x.shape(), 4, "avg_pool2d");
    detail::require(D >= 1, "avg_pool2d: downsample factor must be >= 1, got " + std::to_string(D));
    if (D == 1) return reshape(x, x.shape());
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = (H + D - 1) / D, Wo = (W + D - 1) / D;
    const T inv = T(1) / static_cast<T>(D * D);
    std::vector<T> out(static_cast<std::size_t>(N * C * Ho * Wo), T(0));
    const auto& xv = x.vec();
    for (std::int64_t p = 0; p < N * C; ++p)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t xx = 0; xx < W; ++xx) out[(p * Ho + y / D) * Wo + xx / D] += xv[(p * H + y) * W + xx];
    for (auto& v : out) v *= inv;
    return Tensor<T>::make_result({N, C, Ho, Wo}, std::move(out), "avg_pool2d", {x},
                                  [=](detail::Node<T>& n) {
        auto* in = detail::grad_target(n, 0);
        if (!in) return;
        auto& g = in->ensure_grad();
        for (std::int64_t p = 0; p < N * C; ++p)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t xx = 0; xx < W; ++xx)
                    g[(p * H + y) * W + xx] += inv * n.grad[(p * Ho + y / D) * Wo + xx / D];
    });
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

namespace detail {

/// Four-neighbour interpolation weights at a fractional position. Corners outside the
/// plane read as zero.
template <typename T>
struct BilinearPoint {
    std::int64_t y0, x0;
    T ly, lx;

    static BilinearPoint at(T y, T x) {
        const T fy = std::floor(y), fx = std::floor(x);
        return {static_cast<std::int64_t>(fy), static_cast<std::int64_t>(fx), y - fy, x - fx};
    }

    static T fetch(const T* plane, std::int64_t H, std::int64_t W, std::int64_t y, std::int64_t x) {
        return (y < 0 || y >= H || x < 0 || x >= W) ? T(0) : plane[y * W + x];
    }

    T sample(const T* plane, std::int64_t H, std::int64_t W) const {
        const T hy = T(1) - ly, hx = T(1) - lx;
        return hy * hx * fetch(plane, H, W, y0, x0) + hy * lx * fetch(plane, H, W, y0, x0 + 1) +
               ly * hx * fetch(plane, H, W, y0 + 1, x0) + ly * lx * fetch(plane, H, W, y0 + 1, x0 + 1);
    }

    /// d sample / d y and d sample / d x.
    std::pair<T, T> coord_grad(const T* plane, std::int64_t H, std::int64_t W) const {
        const T v00 = fetch(plane, H, W, y0, x0), v01 = fetch(plane, H, W, y0, x0 + 1);
        const T v10 = fetch(plane, H, W, y0 + 1, x0), v11 = fetch(plane, H, W, y0 + 1, x0 + 1);
        const T hy = T(1) - ly, hx = T(1) - lx;
        return {hx * (v10 - v00) + lx * (v11 - v01), hy * (v01 - v00) + ly * (v11 - v10)};
    }

    void scatter(T* plane, std::int64_t H, std::int64_t W, T g) const {
        const T hy = T(1) - ly, hx = T(1) - lx;
        auto put = [&](std::int64_t y, std::int64_t x, T wgt) {
            if (y >= 0 && y < H && x >= 0 && x < W) plane[y * W + x] += wgt * g;
        };
        put(y0, x0, hy * hx);
        put(y0, x0 + 1, hy * lx);
        put(y0 + 1, x0, ly * hx);
        put(y0 + 1, x0 + 1, ly * lx);
    }
};

}  // namespace detail

/// Samples feature [C,H,W] at coords [L,2] (each row (y, x)), giving [C,L]. Differentiable
/// with respect to both the feature values and the coordinates.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feature, const Tensor<T>& coords) {
    detail::require_rank(feature.shape(), 3, "bilinear_sample feature");
    detail::require(coords.rank() == 2 && coords.dim(1) == 2,
                    "bilinear_sample: coords must be [L,2], got " + to_string(coords.shape()));
    const std::int64_t C = feature.dim(0), H = feature.dim(1), W = feature.dim(2), L = coords.dim(0);
    std::vector<T> out(static_cast<std::size_t>(C * L));
    const auto& cv = coords.vec();
    const T* fd = feature.vec().data();
    for (std::int64_t l = 0; l < L; ++l) {
        const auto pt = detail::BilinearPoint<T>::at(cv[2 * l], cv[2 * l + 1]);
        for (std::int64_t c = 0; c < C; ++c) out[c * L + l] = pt.sample(fd + c * H * W, H, W);
    }
    return Tensor<T>::make_result({C, L}, std::move(out), "bilinear_sample", {feature, coords},
                                  [=](detail::Node<T>& n) {
        auto* fin = detail::grad_target(n, 0);
        auto* cin = detail::grad_target(n, 1);
        const auto& cv = n.inputs[1]->data;
        const T* fd = n.inputs[0]->data.data();
        for (std::int64_t l = 0; l < L; ++l) {
            const auto pt = detail::BilinearPoint<T>::at(cv[2 * l], cv[2 * l + 1]);
            for (std::int64_t c = 0; c < C; ++c) {
                const T g = n.grad[c * L + l];
                if (fin) pt.scatter(fin->ensure_grad().data() + c * H * W, H, W, g);
                if (cin) {
                    auto [gy, gx] = pt.coord_grad(fd + c * H * W, H, W);
                    auto& cg = cin->ensure_grad();
                    cg[2 * l] += g * gy;
                    cg[2 * l + 1] += g * gx;
                }
            }
        }
    });
}

}  // namespace phasealign
