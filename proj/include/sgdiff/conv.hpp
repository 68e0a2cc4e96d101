#pragma once

#include "sgdiff/ops.hpp"

// conv2d / conv_transpose2d as unfold + GEMM. Cross-correlation convention
// (no kernel flip). The unfold buffer is recomputed in backward instead of
// being kept alive on the tape.

namespace sgdiff {

struct ConvGeom {
    int64_t chans, in_h, in_w, kh, kw, stride, pad;
    int64_t out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
    int64_t out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
    int64_t patch() const { return chans * kh * kw; }
    int64_t cols() const { return out_h() * out_w(); }
};

namespace detail {

// x plane [C, H, W] -> col [C*kh*kw, OH*OW]; out-of-bounds taps read zero.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    int64_t oh = g.out_h(), ow = g.out_w();
    for (int64_t c = 0; c < g.chans; c++) {
        for (int64_t ky = 0; ky < g.kh; ky++) {
            for (int64_t kx = 0; kx < g.kw; kx++) {
                T* row = col + ((c * g.kh + ky) * g.kw + kx) * oh * ow;
                for (int64_t oy = 0; oy < oh; oy++) {
                    int64_t iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(row + oy * ow, row + (oy + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.in_h + iy) * g.in_w;
                    for (int64_t ox = 0; ox < ow; ox++) {
                        int64_t ix = ox * g.stride + kx - g.pad;
                        row[oy * ow + ox] = (ix < 0 || ix >= g.in_w) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

// Scatter-add of col [C*kh*kw, OH*OW] back onto an [C, H, W] plane.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
    int64_t oh = g.out_h(), ow = g.out_w();
    std::fill(x, x + g.chans * g.in_h * g.in_w, T(0));
    for (int64_t c = 0; c < g.chans; c++) {
        for (int64_t ky = 0; ky < g.kh; ky++) {
            for (int64_t kx = 0; kx < g.kw; kx++) {
                const T* row = col + ((c * g.kh + ky) * g.kw + kx) * oh * ow;
                for (int64_t oy = 0; oy < oh; oy++) {
                    int64_t iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.in_h) continue;
                    T* dst = x + (c * g.in_h + iy) * g.in_w;
                    for (int64_t ox = 0; ox < ow; ox++) {
                        int64_t ix = ox * g.stride + kx - g.pad;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x [N,Cin,H,W] * w [Cout,Cin,kh,kw] (+ b [Cout]) -> [N,Cout,OH,OW].
template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b, int64_t stride, int64_t pad) {
    SGDIFF_CHECK(x.shape().size() == 4 && w.shape().size() == 4,
                 "conv2d wants [N,C,H,W] input and [O,C,kh,kw] weight, got ",
                 shape_str(x.shape()), " and ", shape_str(w.shape()));
    int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    int64_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    SGDIFF_CHECK(w.shape()[1] == cin, "conv2d channel mismatch: input ", cin, " vs weight ",
                 w.shape()[1]);
    SGDIFF_CHECK(stride >= 1 && pad >= 0, "bad conv stride/pad");
    ConvGeom g{cin, h, wd, kh, kw, stride, pad};
    int64_t oh = g.out_h(), ow = g.out_w(), p = g.patch(), q = g.cols();
    SGDIFF_CHECK(oh > 0 && ow > 0, "conv2d output collapsed for input ", shape_str(x.shape()));
    if (b.defined())
        SGDIFF_CHECK(b.shape() == Shape({cout}), "conv2d bias must be [", cout, "]");

    TensorT<T> out({n, cout, oh, ow});
    std::vector<T> col(p * q);
    for (int64_t i = 0; i < n; i++) {
        detail::im2col(x.value().ptr() + i * cin * h * wd, g, col.data());
        gemm_nn<T>(cout, q, p, w.value().ptr(), col.data(), out.ptr() + i * cout * q);
        if (b.defined()) {
            T* dst = out.ptr() + i * cout * q;
            for (int64_t o = 0; o < cout; o++) {
                T bias = b.value().ptr()[o];
                for (int64_t s = 0; s < q; s++) dst[o * q + s] += bias;
            }
        }
    }
    std::vector<VarT<T>> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_op_node<T>(out, parents, [g, n, cin, cout, h, wd, p, q](NodeT<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        const T* dy = nd.grad.ptr();
        std::vector<T> col(p * q);
        TensorT<T> dx, dw;
        if (px.requires_grad) dx = TensorT<T>(px.value.shape());
        if (pw.requires_grad) dw = TensorT<T>::zeros(pw.value.shape());
        for (int64_t i = 0; i < n; i++) {
            const T* gy = dy + i * cout * q;
            if (pw.requires_grad) {
                detail::im2col(px.value.ptr() + i * cin * h * wd, g, col.data());
                gemm_nt<T>(cout, p, q, gy, col.data(), dw.ptr(), T(1));
            }
            if (px.requires_grad) {
                gemm_tn<T>(p, q, cout, pw.value.ptr(), gy, col.data());
                detail::col2im(col.data(), g, dx.ptr() + i * cin * h * wd);
            }
        }
        if (px.requires_grad) px.accumulate(dx);
        if (pw.requires_grad) pw.accumulate(dw);
        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
            TensorT<T> db = TensorT<T>::zeros({cout});
            for (int64_t i = 0; i < n; i++)
                for (int64_t o = 0; o < cout; o++) {
                    T acc = T(0);
                    const T* gy = dy + (i * cout + o) * q;
                    for (int64_t s = 0; s < q; s++) acc += gy[s];
                    db.ptr()[o] += acc;
                }
            nd.parents[2]->accumulate(db);
        }
    });
}

// x [N,Cin,H,W] * w [Cin,Cout,kh,kw] (+ b [Cout]) -> [N,Cout,OH,OW] where
// OH = (H-1)*stride - 2*pad + kh. Spatial inverse of conv2d with the same
// stride/pad (it is conv2d's input-gradient with learnable weights).
template <typename T>
VarT<T> conv_transpose2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b, int64_t stride,
                         int64_t pad) {
    SGDIFF_CHECK(x.shape().size() == 4 && w.shape().size() == 4,
                 "conv_transpose2d wants [N,C,H,W] input and [C,O,kh,kw] weight");
    int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    int64_t cout = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    SGDIFF_CHECK(w.shape()[0] == cin, "conv_transpose2d channel mismatch");
    int64_t oh = (h - 1) * stride - 2 * pad + kh;
    int64_t ow = (wd - 1) * stride - 2 * pad + kw;
    SGDIFF_CHECK(oh > 0 && ow > 0, "conv_transpose2d output collapsed");
    if (b.defined())
        SGDIFF_CHECK(b.shape() == Shape({cout}), "conv_transpose2d bias must be [", cout, "]");
    // Geometry of the forward conv (OH,OW) -> (H,W) whose input-grad we compute.
    ConvGeom g{cout, oh, ow, kh, kw, stride, pad};
    SGDIFF_CHECK(g.out_h() == h && g.out_w() == wd, "conv_transpose2d geometry mismatch");
    int64_t p = g.patch(), q = g.cols();  // q == h*wd

    TensorT<T> out({n, cout, oh, ow});
    std::vector<T> col(p * q);
    for (int64_t i = 0; i < n; i++) {
        // cols = W^T [Cout*k*k, Cin] x x_flat [Cin, H*W]
        gemm_tn<T>(p, q, cin, w.value().ptr(), x.value().ptr() + i * cin * q, col.data());
        detail::col2im(col.data(), g, out.ptr() + i * cout * oh * ow);
        if (b.defined()) {
            T* dst = out.ptr() + i * cout * oh * ow;
            for (int64_t o = 0; o < cout; o++) {
                T bias = b.value().ptr()[o];
                for (int64_t s = 0; s < oh * ow; s++) dst[o * oh * ow + s] += bias;
            }
        }
    }
    std::vector<VarT<T>> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_op_node<T>(out, parents, [g, n, cin, cout, oh, ow, p, q](NodeT<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        const T* dy = nd.grad.ptr();
        std::vector<T> col(p * q);
        TensorT<T> dx, dw;
        if (px.requires_grad) dx = TensorT<T>(px.value.shape());
        if (pw.requires_grad) dw = TensorT<T>::zeros(pw.value.shape());
        for (int64_t i = 0; i < n; i++) {
            detail::im2col(dy + i * cout * oh * ow, g, col.data());
            if (px.requires_grad)
                gemm_nn<T>(cin, q, p, pw.value.ptr(), col.data(), dx.ptr() + i * cin * q);
            if (pw.requires_grad)
                gemm_nt<T>(cin, p, q, px.value.ptr() + i * cin * q, col.data(), dw.ptr(), T(1));
        }
        if (px.requires_grad) px.accumulate(dx);
        if (pw.requires_grad) pw.accumulate(dw);
        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
            TensorT<T> db = TensorT<T>::zeros({cout});
            for (int64_t i = 0; i < n; i++)
                for (int64_t o = 0; o < cout; o++) {
                    T acc = T(0);
                    const T* gy = dy + (i * cout + o) * oh * ow;
                    for (int64_t s = 0; s < oh * ow; s++) acc += gy[s];
                    db.ptr()[o] += acc;
                }
            nd.parents[2]->accumulate(db);
        }
    });
}

// Nearest-neighbour 2x upsample of [N,C,H,W].
template <typename T>
VarT<T> upsample_nearest2x(const VarT<T>& x) {
    SGDIFF_CHECK(x.shape().size() == 4, "upsample_nearest2x wants [N,C,H,W]");
    int64_t nc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    TensorT<T> out({x.shape()[0], x.shape()[1], 2 * h, 2 * w});
    const T* xp = x.value().ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < nc; i++) {
        const T* plane = xp + i * h * w;
        T* dst = op + i * 4 * h * w;
        for (int64_t y = 0; y < h; y++)
            for (int64_t xx = 0; xx < w; xx++) {
                T v = plane[y * w + xx];
                dst[(2 * y) * 2 * w + 2 * xx] = v;
                dst[(2 * y) * 2 * w + 2 * xx + 1] = v;
                dst[(2 * y + 1) * 2 * w + 2 * xx] = v;
                dst[(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
            }
    }
    return make_op_node<T>(out, {x}, [nc, h, w](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx(p.value.shape());
        const T* g = n.grad.ptr();
        for (int64_t i = 0; i < nc; i++) {
            const T* src = g + i * 4 * h * w;
            T* dst = dx.ptr() + i * h * w;
            for (int64_t y = 0; y < h; y++)
                for (int64_t xx = 0; xx < w; xx++)
                    dst[y * w + xx] = src[(2 * y) * 2 * w + 2 * xx] +
                                      src[(2 * y) * 2 * w + 2 * xx + 1] +
                                      src[(2 * y + 1) * 2 * w + 2 * xx] +
                                      src[(2 * y + 1) * 2 * w + 2 * xx + 1];
        }
        p.accumulate(dx);
    });
}

// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
VarT<T> global_avg_pool(const VarT<T>& x) {
    SGDIFF_CHECK(x.shape().size() == 4, "global_avg_pool wants [N,C,H,W]");
    int64_t nc = x.shape()[0] * x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    TensorT<T> out({x.shape()[0], x.shape()[1]});
    const T* xp = x.value().ptr();
    for (int64_t i = 0; i < nc; i++) {
        double acc = 0;
        for (int64_t s = 0; s < hw; s++) acc += xp[i * hw + s];
        out.ptr()[i] = T(acc / double(hw));
    }
    return make_op_node<T>(out, {x}, [nc, hw](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx(p.value.shape());
        const T* g = n.grad.ptr();
        for (int64_t i = 0; i < nc; i++) {
            T v = g[i] / T(hw);
            for (int64_t s = 0; s < hw; s++) dx.ptr()[i * hw + s] = v;
        }
        p.accumulate(dx);
    });
}

}  // namespace sgdiff
