#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <vector>

#include "sgdiff/autodiff.hpp"

// Differentiable tensor ops. Each op builds a fresh node; backward closures
// read n.value / n.parents[i]->value instead of capturing big buffers, and
// conv-style ops recompute their unfold in backward rather than caching it.

namespace sgdiff {

// ---------------------------------------------------------------------------
// BLAS
// ---------------------------------------------------------------------------

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha, const T* a,
          int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
    auto ta = trans_a ? CblasTrans : CblasNoTrans;
    auto tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, (int)m, (int)n, (int)k, alpha, a, (int)lda, b, (int)ldb,
                    beta, c, (int)ldc);
    } else {
        cblas_dgemm(CblasRowMajor, ta, tb, (int)m, (int)n, (int)k, alpha, a, (int)lda, b, (int)ldb,
                    beta, c, (int)ldc);
    }
}

// C[m,n] (+)= A·B with optional transposes; lda/ldb derived from operand shapes.
template <typename T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, T beta = T(0)) {
    gemm<T>(false, false, m, n, k, T(1), a, k, b, n, beta, c, n);
}
template <typename T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, T beta = T(0)) {
    gemm<T>(false, true, m, n, k, T(1), a, k, b, k, beta, c, n);
}
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c, T beta = T(0)) {
    gemm<T>(true, false, m, n, k, T(1), a, m, b, n, beta, c, n);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

// fwd: T -> T on each element; bwd: (x, y, dy) -> dx contribution.
template <typename T, typename Fwd, typename Bwd>
VarT<T> unary_op(const VarT<T>& x, Fwd fwd, Bwd bwd) {
    TensorT<T> out(x.shape());
    const T* xp = x.value().ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) op[i] = fwd(xp[i]);
    return make_op_node<T>(out, {x}, [bwd](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx(p.value.shape());
        const T* xp = p.value.ptr();
        const T* yp = n.value.ptr();
        const T* gp = n.grad.ptr();
        T* dp = dx.ptr();
        for (int64_t i = 0; i < dx.numel(); i++) dp[i] = bwd(xp[i], yp[i], gp[i]);
        p.accumulate(dx);
    });
}

template <typename T>
VarT<T> neg(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return -v; }, [](T, T, T g) { return -g; });
}

template <typename T>
VarT<T> scale(const VarT<T>& x, T c) {
    return unary_op(
        x, [c](T v) { return c * v; }, [c](T, T, T g) { return c * g; });
}

template <typename T>
VarT<T> add_const(const VarT<T>& x, T c) {
    return unary_op(
        x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

template <typename T>
VarT<T> relu(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
VarT<T> silu(const VarT<T>& x) {
    return unary_op(
        x,
        [](T v) {
            T s = T(1) / (T(1) + std::exp(-v));
            return v * s;
        },
        [](T v, T, T g) {
            T s = T(1) / (T(1) + std::exp(-v));
            return g * s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
VarT<T> sigmoid(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
VarT<T> tanh_op(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return std::tanh(v); }, [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <typename T>
VarT<T> exp_op(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
VarT<T> log_op(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <typename T>
VarT<T> sqrt_op(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return std::sqrt(v); }, [](T, T y, T g) { return g / (T(2) * y); });
}

template <typename T>
VarT<T> square(const VarT<T>& x) {
    return unary_op(
        x, [](T v) { return v * v; }, [](T v, T, T g) { return T(2) * v * g; });
}

// fwd(a,b) elementwise on equal shapes; bwd g -> (da, db).
template <typename T, typename Fwd, typename BwdA, typename BwdB>
VarT<T> binary_op(const VarT<T>& a, const VarT<T>& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    SGDIFF_CHECK(a.shape() == b.shape(), "elementwise op on mismatched shapes ",
                 shape_str(a.shape()), " vs ", shape_str(b.shape()));
    TensorT<T> out(a.shape());
    const T* ap = a.value().ptr();
    const T* bp = b.value().ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) op[i] = fwd(ap[i], bp[i]);
    return make_op_node<T>(out, {a, b}, [bwd_a, bwd_b](NodeT<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const T* ap = pa.value.ptr();
        const T* bp = pb.value.ptr();
        const T* gp = n.grad.ptr();
        if (pa.requires_grad) {
            TensorT<T> da(pa.value.shape());
            T* dp = da.ptr();
            for (int64_t i = 0; i < da.numel(); i++) dp[i] = bwd_a(ap[i], bp[i], gp[i]);
            pa.accumulate(da);
        }
        if (pb.requires_grad) {
            TensorT<T> db(pb.value.shape());
            T* dp = db.ptr();
            for (int64_t i = 0; i < db.numel(); i++) dp[i] = bwd_b(ap[i], bp[i], gp[i]);
            pb.accumulate(db);
        }
    });
}

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return g; });
}

template <typename T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return -g; });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <typename T>
VarT<T> div_op(const VarT<T>& a, const VarT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
        [](T x, T y, T g) { return -g * x / (y * y); });
}

// out = a + c*b, same shapes.
template <typename T>
VarT<T> add_scaled(const VarT<T>& a, const VarT<T>& b, T c) {
    return binary_op(
        a, b, [c](T x, T y) { return x + c * y; }, [](T, T, T g) { return g; },
        [c](T, T, T g) { return c * g; });
}

// x * s where s is a one-element var (learnable gates).
template <typename T>
VarT<T> mul_scalar_var(const VarT<T>& x, const VarT<T>& s) {
    SGDIFF_CHECK(s.numel() == 1, "mul_scalar_var needs a one-element scale, got ",
                 shape_str(s.shape()));
    T sv = s.value().ptr()[0];
    TensorT<T> out(x.shape());
    const T* xp = x.value().ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); i++) op[i] = xp[i] * sv;
    return make_op_node<T>(out, {x, s}, [](NodeT<T>& n) {
        auto& px = *n.parents[0];
        auto& ps = *n.parents[1];
        const T* xp = px.value.ptr();
        const T* gp = n.grad.ptr();
        T sv = ps.value.ptr()[0];
        if (px.requires_grad) {
            TensorT<T> dx(px.value.shape());
            T* dp = dx.ptr();
            for (int64_t i = 0; i < dx.numel(); i++) dp[i] = gp[i] * sv;
            px.accumulate(dx);
        }
        if (ps.requires_grad) {
            T acc = T(0);
            for (int64_t i = 0; i < px.value.numel(); i++) acc += gp[i] * xp[i];
            ps.accumulate(TensorT<T>::scalar(acc));
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> reshape(const VarT<T>& x, Shape shape) {
    TensorT<T> out = x.value().clone().reshaped(shape);
    return make_op_node<T>(out, {x}, [](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.accumulate(n.grad.reshaped(p.value.shape()));
    });
}

namespace detail {
inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = (int)s.size() - 2; i >= 0; i--) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
TensorT<T> permute_tensor(const TensorT<T>& x, const std::vector<int>& perm) {
    const Shape& in = x.shape();
    SGDIFF_CHECK(perm.size() == in.size(), "permute rank mismatch");
    Shape out_shape(in.size());
    for (size_t i = 0; i < perm.size(); i++) out_shape[i] = in[perm[i]];
    TensorT<T> out(out_shape);
    auto in_st = row_strides(in);
    auto out_st = row_strides(out_shape);
    const T* xp = x.ptr();
    T* op = out.ptr();
    int rank = (int)in.size();
    std::vector<int64_t> idx(rank, 0);
    for (int64_t o = 0; o < out.numel(); o++) {
        int64_t rem = o, src = 0;
        for (int d = 0; d < rank; d++) {
            int64_t c = rem / out_st[d];
            rem -= c * out_st[d];
            src += c * in_st[perm[d]];
        }
        op[o] = xp[src];
    }
    return out;
}
}  // namespace detail

template <typename T>
VarT<T> permute(const VarT<T>& x, std::vector<int> perm) {
    TensorT<T> out = detail::permute_tensor(x.value(), perm);
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); i++) inv[perm[i]] = (int)i;
    return make_op_node<T>(out, {x}, [inv](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.accumulate(detail::permute_tensor(n.grad, inv));
    });
}

template <typename T>
VarT<T> concat(const std::vector<VarT<T>>& xs, int axis) {
    SGDIFF_CHECK(!xs.empty(), "concat of nothing");
    Shape base = xs[0].shape();
    int rank = (int)base.size();
    SGDIFF_CHECK(axis >= 0 && axis < rank, "concat axis ", axis, " out of range");
    int64_t total = 0;
    for (const auto& x : xs) {
        SGDIFF_CHECK((int)x.shape().size() == rank, "concat rank mismatch");
        for (int d = 0; d < rank; d++)
            SGDIFF_CHECK(d == axis || x.shape()[d] == base[d], "concat shape mismatch on dim ", d);
        total += x.shape()[axis];
    }
    Shape out_shape = base;
    out_shape[axis] = total;
    TensorT<T> out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; d++) outer *= base[d];
    for (int d = axis + 1; d < rank; d++) inner *= base[d];

    std::vector<int64_t> widths;
    int64_t off = 0;
    for (const auto& x : xs) {
        int64_t w = x.shape()[axis] * inner;
        const T* src = x.value().ptr();
        for (int64_t r = 0; r < outer; r++)
            std::memcpy(out.ptr() + r * total * inner + off, src + r * w, sizeof(T) * w);
        widths.push_back(w);
        off += w;
    }
    return make_op_node<T>(out, xs, [widths, outer, total, inner](NodeT<T>& n) {
        int64_t off = 0;
        for (size_t i = 0; i < n.parents.size(); i++) {
            auto& p = *n.parents[i];
            int64_t w = widths[i];
            if (p.requires_grad) {
                TensorT<T> dx(p.value.shape());
                for (int64_t r = 0; r < outer; r++)
                    std::memcpy(dx.ptr() + r * w, n.grad.ptr() + r * total * inner + off,
                                sizeof(T) * w);
                p.accumulate(dx);
            }
            off += w;
        }
    });
}

// Contiguous sub-range along one axis.
template <typename T>
VarT<T> slice(const VarT<T>& x, int axis, int64_t start, int64_t len) {
    const Shape& in = x.shape();
    int rank = (int)in.size();
    SGDIFF_CHECK(axis >= 0 && axis < rank, "slice axis out of range");
    SGDIFF_CHECK(start >= 0 && len > 0 && start + len <= in[axis], "slice [", start, ",",
                 start + len, ") outside dim of extent ", in[axis]);
    Shape out_shape = in;
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; d++) outer *= in[d];
    for (int d = axis + 1; d < rank; d++) inner *= in[d];
    TensorT<T> out(out_shape);
    int64_t in_w = in[axis] * inner, out_w = len * inner, off = start * inner;
    for (int64_t r = 0; r < outer; r++)
        std::memcpy(out.ptr() + r * out_w, x.value().ptr() + r * in_w + off, sizeof(T) * out_w);
    return make_op_node<T>(out, {x}, [outer, in_w, out_w, off](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx = TensorT<T>::zeros(p.value.shape());
        for (int64_t r = 0; r < outer; r++)
            std::memcpy(dx.ptr() + r * in_w + off, n.grad.ptr() + r * out_w, sizeof(T) * out_w);
        p.accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> sum_all(const VarT<T>& x) {
    T acc = T(0);
    const T* xp = x.value().ptr();
    for (int64_t i = 0; i < x.numel(); i++) acc += xp[i];
    return make_op_node<T>(TensorT<T>::scalar(acc), {x}, [](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.accumulate(TensorT<T>::full(p.value.shape(), n.grad.ptr()[0]));
    });
}

template <typename T>
VarT<T> mean_all(const VarT<T>& x) {
    return scale(sum_all(x), T(1) / T(x.numel()));
}

template <typename T>
VarT<T> mse_loss(const VarT<T>& pred, const VarT<T>& target) {
    SGDIFF_CHECK(pred.shape() == target.shape(), "mse_loss shape mismatch");
    const T* a = pred.value().ptr();
    const T* b = target.value().ptr();
    int64_t m = pred.numel();
    double acc = 0;
    for (int64_t i = 0; i < m; i++) {
        double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return make_op_node<T>(TensorT<T>::scalar(T(acc / double(m))), {pred, target},
                           [m](NodeT<T>& n) {
                               const T* a = n.parents[0]->value.ptr();
                               const T* b = n.parents[1]->value.ptr();
                               T g = n.grad.ptr()[0] * T(2) / T(m);
                               for (int pi = 0; pi < 2; pi++) {
                                   auto& p = *n.parents[pi];
                                   if (!p.requires_grad) continue;
                                   T sgn = pi == 0 ? T(1) : T(-1);
                                   TensorT<T> d(p.value.shape());
                                   T* dp = d.ptr();
                                   for (int64_t i = 0; i < p.value.numel(); i++)
                                       dp[i] = sgn * g * (a[i] - b[i]);
                                   p.accumulate(d);
                               }
                           });
}

template <typename T>
VarT<T> l1_loss(const VarT<T>& pred, const VarT<T>& target) {
    SGDIFF_CHECK(pred.shape() == target.shape(), "l1_loss shape mismatch");
    const T* a = pred.value().ptr();
    const T* b = target.value().ptr();
    int64_t m = pred.numel();
    double acc = 0;
    for (int64_t i = 0; i < m; i++) acc += std::abs(double(a[i]) - double(b[i]));
    return make_op_node<T>(TensorT<T>::scalar(T(acc / double(m))), {pred, target},
                           [m](NodeT<T>& n) {
                               const T* a = n.parents[0]->value.ptr();
                               const T* b = n.parents[1]->value.ptr();
                               T g = n.grad.ptr()[0] / T(m);
                               for (int pi = 0; pi < 2; pi++) {
                                   auto& p = *n.parents[pi];
                                   if (!p.requires_grad) continue;
                                   T sgn = pi == 0 ? T(1) : T(-1);
                                   TensorT<T> d(p.value.shape());
                                   T* dp = d.ptr();
                                   for (int64_t i = 0; i < p.value.numel(); i++) {
                                       T diff = a[i] - b[i];
                                       T s = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
                                       dp[i] = sgn * g * s;
                                   }
                                   p.accumulate(d);
                               }
                           });
}

// Numerically stable mean binary cross-entropy on raw logits.
template <typename T>
VarT<T> bce_with_logits(const VarT<T>& logits, const VarT<T>& targets) {
    SGDIFF_CHECK(logits.shape() == targets.shape(), "bce_with_logits shape mismatch");
    const T* z = logits.value().ptr();
    const T* t = targets.value().ptr();
    int64_t m = logits.numel();
    double acc = 0;
    for (int64_t i = 0; i < m; i++) {
        double zi = z[i], ti = t[i];
        acc += std::max(zi, 0.0) - zi * ti + std::log1p(std::exp(-std::abs(zi)));
    }
    return make_op_node<T>(TensorT<T>::scalar(T(acc / double(m))), {logits, targets},
                           [m](NodeT<T>& n) {
                               auto& p = *n.parents[0];
                               if (!p.requires_grad) return;  // targets treated as labels
                               const T* z = p.value.ptr();
                               const T* t = n.parents[1]->value.ptr();
                               T g = n.grad.ptr()[0] / T(m);
                               TensorT<T> d(p.value.shape());
                               T* dp = d.ptr();
                               for (int64_t i = 0; i < m; i++) {
                                   T s = T(1) / (T(1) + std::exp(-z[i]));
                                   dp[i] = g * (s - t[i]);
                               }
                               p.accumulate(d);
                           });
}

// Mean softmax cross-entropy over [N, C] logits with integer labels.
template <typename T>
VarT<T> softmax_cross_entropy(const VarT<T>& logits, const std::vector<int64_t>& labels) {
    SGDIFF_CHECK(logits.shape().size() == 2, "softmax_cross_entropy wants [N, C] logits");
    int64_t rows = logits.shape()[0], cols = logits.shape()[1];
    SGDIFF_CHECK((int64_t)labels.size() == rows, "label count mismatch");
    const T* z = logits.value().ptr();
    double acc = 0;
    for (int64_t r = 0; r < rows; r++) {
        int64_t y = labels[r];
        SGDIFF_CHECK(y >= 0 && y < cols, "label ", y, " outside [0,", cols, ")");
        const T* row = z + r * cols;
        double mx = row[0];
        for (int64_t c = 1; c < cols; c++) mx = std::max(mx, double(row[c]));
        double lse = 0;
        for (int64_t c = 0; c < cols; c++) lse += std::exp(double(row[c]) - mx);
        acc += mx + std::log(lse) - double(row[y]);
    }
    return make_op_node<T>(
        TensorT<T>::scalar(T(acc / double(rows))), {logits}, [labels, rows, cols](NodeT<T>& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            const T* z = p.value.ptr();
            T g = n.grad.ptr()[0] / T(rows);
            TensorT<T> d(p.value.shape());
            T* dp = d.ptr();
            for (int64_t r = 0; r < rows; r++) {
                const T* row = z + r * cols;
                T mx = row[0];
                for (int64_t c = 1; c < cols; c++) mx = std::max(mx, row[c]);
                T lse = T(0);
                for (int64_t c = 0; c < cols; c++) lse += std::exp(row[c] - mx);
                for (int64_t c = 0; c < cols; c++) {
                    T soft = std::exp(row[c] - mx) / lse;
                    dp[r * cols + c] = g * (soft - (c == labels[r] ? T(1) : T(0)));
                }
            }
            p.accumulate(d);
        });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    SGDIFF_CHECK(a.shape().size() == 2 && b.shape().size() == 2, "matmul wants 2-d operands, got ",
                 shape_str(a.shape()), " x ", shape_str(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    SGDIFF_CHECK(b.shape()[0] == k, "matmul inner dims disagree: ", shape_str(a.shape()), " x ",
                 shape_str(b.shape()));
    TensorT<T> out({m, n});
    gemm_nn<T>(m, n, k, a.value().ptr(), b.value().ptr(), out.ptr());
    return make_op_node<T>(out, {a, b}, [m, n, k](NodeT<T>& n_) {
        auto& pa = *n_.parents[0];
        auto& pb = *n_.parents[1];
        const T* g = n_.grad.ptr();
        if (pa.requires_grad) {
            TensorT<T> da({m, k});
            gemm_nt<T>(m, k, n, g, pb.value.ptr(), da.ptr());
            pa.accumulate(da);
        }
        if (pb.requires_grad) {
            TensorT<T> db({k, n});
            gemm_tn<T>(k, n, m, pa.value.ptr(), g, db.ptr());
            pb.accumulate(db);
        }
    });
}

// Batched matmul [B,M,K] x [B,K,N] -> [B,M,N].
template <typename T>
VarT<T> bmm(const VarT<T>& a, const VarT<T>& b) {
    SGDIFF_CHECK(a.shape().size() == 3 && b.shape().size() == 3, "bmm wants 3-d operands");
    int64_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    SGDIFF_CHECK(b.shape()[0] == bs && b.shape()[1] == k, "bmm shapes disagree: ",
                 shape_str(a.shape()), " x ", shape_str(b.shape()));
    TensorT<T> out({bs, m, n});
    for (int64_t i = 0; i < bs; i++)
        gemm_nn<T>(m, n, k, a.value().ptr() + i * m * k, b.value().ptr() + i * k * n,
                   out.ptr() + i * m * n);
    return make_op_node<T>(out, {a, b}, [bs, m, n, k](NodeT<T>& n_) {
        auto& pa = *n_.parents[0];
        auto& pb = *n_.parents[1];
        const T* g = n_.grad.ptr();
        if (pa.requires_grad) {
            TensorT<T> da({bs, m, k});
            for (int64_t i = 0; i < bs; i++)
                gemm_nt<T>(m, k, n, g + i * m * n, pb.value.ptr() + i * k * n, da.ptr() + i * m * k);
            pa.accumulate(da);
        }
        if (pb.requires_grad) {
            TensorT<T> db({bs, k, n});
            for (int64_t i = 0; i < bs; i++)
                gemm_tn<T>(k, n, m, pa.value.ptr() + i * m * k, g + i * m * n, db.ptr() + i * k * n);
            pb.accumulate(db);
        }
    });
}

// Broadcast-add a [D] bias onto trailing dim of [..., D].
template <typename T>
VarT<T> add_bias_rows(const VarT<T>& x, const VarT<T>& b) {
    SGDIFF_CHECK(b.shape().size() == 1, "bias must be 1-d");
    int64_t d = b.shape()[0];
    SGDIFF_CHECK(x.shape().back() == d, "bias dim ", d, " vs input ", shape_str(x.shape()));
    int64_t rows = x.numel() / d;
    TensorT<T> out(x.shape());
    const T* xp = x.value().ptr();
    const T* bp = b.value().ptr();
    T* op = out.ptr();
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < d; c++) op[r * d + c] = xp[r * d + c] + bp[c];
    return make_op_node<T>(out, {x, b}, [rows, d](NodeT<T>& n) {
        auto& px = *n.parents[0];
        auto& pb = *n.parents[1];
        if (px.requires_grad) px.accumulate(n.grad);
        if (pb.requires_grad) {
            TensorT<T> db = TensorT<T>::zeros({d});
            const T* g = n.grad.ptr();
            T* dp = db.ptr();
            for (int64_t r = 0; r < rows; r++)
                for (int64_t c = 0; c < d; c++) dp[c] += g[r * d + c];
            pb.accumulate(db);
        }
    });
}

// y = x·W + b with x [..., in], W [in, out], b [out] (pass undefined Var to skip bias).
template <typename T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b = VarT<T>()) {
    int64_t in = w.shape()[0], out_dim = w.shape()[1];
    SGDIFF_CHECK(x.shape().back() == in, "linear: input ", shape_str(x.shape()),
                 " does not match weight ", shape_str(w.shape()));
    Shape flat{x.numel() / in, in};
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    VarT<T> y = matmul(reshape(x, flat), w);
    if (b.defined()) y = add_bias_rows(y, b);
    return reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Softmax and attention
// ---------------------------------------------------------------------------

// Softmax over the last axis, max-subtracted for stability.
template <typename T>
VarT<T> softmax(const VarT<T>& x) {
    int64_t cols = x.shape().back();
    int64_t rows = x.numel() / cols;
    TensorT<T> out(x.shape());
    const T* xp = x.value().ptr();
    T* op = out.ptr();
    for (int64_t r = 0; r < rows; r++) {
        const T* xr = xp + r * cols;
        T* yr = op + r * cols;
        T mx = xr[0];
        for (int64_t c = 1; c < cols; c++) mx = std::max(mx, xr[c]);
        T sum = T(0);
        for (int64_t c = 0; c < cols; c++) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        for (int64_t c = 0; c < cols; c++) yr[c] /= sum;
    }
    return make_op_node<T>(out, {x}, [rows, cols](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx(p.value.shape());
        const T* y = n.value.ptr();
        const T* g = n.grad.ptr();
        T* dp = dx.ptr();
        for (int64_t r = 0; r < rows; r++) {
            const T* yr = y + r * cols;
            const T* gr = g + r * cols;
            T dot = T(0);
            for (int64_t c = 0; c < cols; c++) dot += yr[c] * gr[c];
            for (int64_t c = 0; c < cols; c++) dp[r * cols + c] = yr[c] * (gr[c] - dot);
        }
        p.accumulate(dx);
    });
}

// Adds a constant additive mask [L,L] (or [B,L,L]) onto scores [B,L,L].
template <typename T>
VarT<T> add_attn_mask(const VarT<T>& scores, const TensorT<T>& mask) {
    SGDIFF_CHECK(scores.shape().size() == 3, "attention scores must be [B,L,L]");
    int64_t bs = scores.shape()[0], l1 = scores.shape()[1], l2 = scores.shape()[2];
    bool per_batch = mask.shape().size() == 3;
    if (per_batch)
        SGDIFF_CHECK(mask.shape() == Shape({bs, l1, l2}), "mask shape ", shape_str(mask.shape()),
                     " vs scores ", shape_str(scores.shape()));
    else
        SGDIFF_CHECK(mask.shape() == Shape({l1, l2}), "mask shape ", shape_str(mask.shape()),
                     " vs scores ", shape_str(scores.shape()));
    TensorT<T> out(scores.shape());
    const T* sp = scores.value().ptr();
    const T* mp = mask.ptr();
    T* op = out.ptr();
    int64_t plane = l1 * l2;
    for (int64_t b = 0; b < bs; b++)
        for (int64_t i = 0; i < plane; i++)
            op[b * plane + i] = sp[b * plane + i] + mp[per_batch ? b * plane + i : i];
    return make_op_node<T>(out, {scores}, [](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (p.requires_grad) p.accumulate(n.grad);
    });
}

// Scaled dot-product attention on pre-projected q/k/v [B, L, D] split into
// `heads` heads; `mask` is an optional additive penalty on the score matrix.
template <typename T>
VarT<T> multihead_attention(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v, int heads,
                            const TensorT<T>* mask = nullptr) {
    SGDIFF_CHECK(q.shape().size() == 3, "attention wants [B, L, D] inputs");
    int64_t bs = q.shape()[0], lq = q.shape()[1], d = q.shape()[2];
    int64_t lk = k.shape()[1];
    SGDIFF_CHECK(k.shape()[0] == bs && v.shape()[0] == bs, "attention batch mismatch");
    SGDIFF_CHECK(k.shape()[2] == d && v.shape()[2] == d, "attention dim mismatch");
    SGDIFF_CHECK(v.shape()[1] == lk, "k/v length mismatch");
    SGDIFF_CHECK(heads > 0 && d % heads == 0, "model dim ", d, " not divisible by ", heads,
                 " heads");
    int64_t dh = d / heads;

    // [B,L,D] -> [B*h, L, dh]
    auto split = [&](const VarT<T>& x, int64_t l) {
        return reshape(permute(reshape(x, {bs, l, (int64_t)heads, dh}), {0, 2, 1, 3}),
                       {bs * heads, l, dh});
    };
    VarT<T> qh = split(q, lq), kh = split(k, lk), vh = split(v, lk);
    VarT<T> scores = scale(bmm(qh, permute(kh, {0, 2, 1})), T(1) / std::sqrt(T(dh)));
    if (mask) {
        // Same mask for every head of a batch row.
        if (mask->shape().size() == 3) {
            TensorT<T> rep({bs * heads, lq, lk});
            int64_t plane = lq * lk;
            for (int64_t b = 0; b < bs; b++)
                for (int h = 0; h < heads; h++)
                    std::memcpy(rep.ptr() + (b * heads + h) * plane, mask->ptr() + b * plane,
                                sizeof(T) * plane);
            scores = add_attn_mask(scores, rep);
        } else {
            scores = add_attn_mask(scores, *mask);
        }
    }
    VarT<T> out = bmm(softmax(scores), vh);
    return reshape(permute(reshape(out, {bs, (int64_t)heads, lq, dh}), {0, 2, 1, 3}), {bs, lq, d});
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Normalizes [N,C,H,W] per (sample, channel group); gamma/beta are per-channel.
template <typename T>
VarT<T> group_norm(const VarT<T>& x, int groups, const VarT<T>& gamma, const VarT<T>& beta,
                   T eps = T(1e-5)) {
    SGDIFF_CHECK(x.shape().size() == 4, "group_norm wants [N,C,H,W], got ", shape_str(x.shape()));
    int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    SGDIFF_CHECK(groups > 0 && c % groups == 0, "channels ", c, " not divisible by ", groups,
                 " groups");
    SGDIFF_CHECK(gamma.shape() == Shape({c}) && beta.shape() == Shape({c}),
                 "group_norm affine params must be per-channel");
    int64_t cg = c / groups, hw = h * w, gsize = cg * hw;
    TensorT<T> out(x.shape());
    TensorT<T> mean({n, (int64_t)groups}), rstd({n, (int64_t)groups});
    const T* xp = x.value().ptr();
    const T* gp = gamma.value().ptr();
    const T* bp = beta.value().ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < n; i++) {
        for (int64_t g = 0; g < groups; g++) {
            const T* base = xp + (i * c + g * cg) * hw;
            double mu = 0;
            for (int64_t j = 0; j < gsize; j++) mu += base[j];
            mu /= double(gsize);
            double var = 0;
            for (int64_t j = 0; j < gsize; j++) {
                double d = base[j] - mu;
                var += d * d;
            }
            var /= double(gsize);
            T rs = T(1) / std::sqrt(T(var) + eps);
            mean.ptr()[i * groups + g] = T(mu);
            rstd.ptr()[i * groups + g] = rs;
            T* ob = op + (i * c + g * cg) * hw;
            for (int64_t cc = 0; cc < cg; cc++) {
                T ga = gp[g * cg + cc], be = bp[g * cg + cc];
                for (int64_t s = 0; s < hw; s++) {
                    T xh = (base[cc * hw + s] - T(mu)) * rs;
                    ob[cc * hw + s] = ga * xh + be;
                }
            }
        }
    }
    return make_op_node<T>(
        out, {x, gamma, beta}, [n, c, groups, cg, hw, gsize, mean, rstd](NodeT<T>& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            const T* xp = px.value.ptr();
            const T* gp = pg.value.ptr();
            const T* dy = nd.grad.ptr();
            TensorT<T> dgamma = TensorT<T>::zeros({c}), dbeta = TensorT<T>::zeros({c});
            TensorT<T> dx;
            if (px.requires_grad) dx = TensorT<T>(px.value.shape());
            for (int64_t i = 0; i < n; i++) {
                for (int64_t g = 0; g < groups; g++) {
                    const T* base = xp + (i * c + g * cg) * hw;
                    const T* gyb = dy + (i * c + g * cg) * hw;
                    T mu = mean.ptr()[i * groups + g];
                    T rs = rstd.ptr()[i * groups + g];
                    double sum_dyw = 0, sum_dyw_xh = 0;
                    for (int64_t cc = 0; cc < cg; cc++) {
                        T ga = gp[g * cg + cc];
                        for (int64_t s = 0; s < hw; s++) {
                            T xh = (base[cc * hw + s] - mu) * rs;
                            T gy = gyb[cc * hw + s];
                            dgamma.ptr()[g * cg + cc] += gy * xh;
                            dbeta.ptr()[g * cg + cc] += gy;
                            sum_dyw += double(gy * ga);
                            sum_dyw_xh += double(gy * ga * xh);
                        }
                    }
                    if (px.requires_grad) {
                        T m1 = T(sum_dyw / double(gsize));
                        T m2 = T(sum_dyw_xh / double(gsize));
                        T* dxb = dx.ptr() + (i * c + g * cg) * hw;
                        for (int64_t cc = 0; cc < cg; cc++) {
                            T ga = gp[g * cg + cc];
                            for (int64_t s = 0; s < hw; s++) {
                                T xh = (base[cc * hw + s] - mu) * rs;
                                dxb[cc * hw + s] = rs * (gyb[cc * hw + s] * ga - m1 - xh * m2);
                            }
                        }
                    }
                }
            }
            if (px.requires_grad) px.accumulate(dx);
            if (pg.requires_grad) pg.accumulate(dgamma);
            if (pb.requires_grad) pb.accumulate(dbeta);
        });
}

// Normalizes over the trailing dim of [..., D].
template <typename T>
VarT<T> layer_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, T eps = T(1e-5)) {
    int64_t d = x.shape().back();
    SGDIFF_CHECK(gamma.shape() == Shape({d}) && beta.shape() == Shape({d}),
                 "layer_norm affine params must match trailing dim ", d);
    int64_t rows = x.numel() / d;
    TensorT<T> out(x.shape());
    TensorT<T> mean({rows}), rstd({rows});
    const T* xp = x.value().ptr();
    const T* gp = gamma.value().ptr();
    const T* bp = beta.value().ptr();
    T* op = out.ptr();
    for (int64_t r = 0; r < rows; r++) {
        const T* xr = xp + r * d;
        double mu = 0;
        for (int64_t c = 0; c < d; c++) mu += xr[c];
        mu /= double(d);
        double var = 0;
        for (int64_t c = 0; c < d; c++) {
            double dv = xr[c] - mu;
            var += dv * dv;
        }
        var /= double(d);
        T rs = T(1) / std::sqrt(T(var) + eps);
        mean.ptr()[r] = T(mu);
        rstd.ptr()[r] = rs;
        for (int64_t c = 0; c < d; c++) op[r * d + c] = gp[c] * (xr[c] - T(mu)) * rs + bp[c];
    }
    return make_op_node<T>(out, {x, gamma, beta}, [rows, d, mean, rstd](NodeT<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const T* xp = px.value.ptr();
        const T* gp = pg.value.ptr();
        const T* dy = nd.grad.ptr();
        TensorT<T> dgamma = TensorT<T>::zeros({d}), dbeta = TensorT<T>::zeros({d});
        TensorT<T> dx;
        if (px.requires_grad) dx = TensorT<T>(px.value.shape());
        for (int64_t r = 0; r < rows; r++) {
            const T* xr = xp + r * d;
            const T* gy = dy + r * d;
            T mu = mean.ptr()[r], rs = rstd.ptr()[r];
            double s1 = 0, s2 = 0;
            for (int64_t c = 0; c < d; c++) {
                T xh = (xr[c] - mu) * rs;
                dgamma.ptr()[c] += gy[c] * xh;
                dbeta.ptr()[c] += gy[c];
                s1 += double(gy[c] * gp[c]);
                s2 += double(gy[c] * gp[c] * xh);
            }
            if (px.requires_grad) {
                T m1 = T(s1 / double(d)), m2 = T(s2 / double(d));
                for (int64_t c = 0; c < d; c++) {
                    T xh = (xr[c] - mu) * rs;
                    dx.ptr()[r * d + c] = rs * (gy[c] * gp[c] - m1 - xh * m2);
                }
            }
        }
        if (px.requires_grad) px.accumulate(dx);
        if (pg.requires_grad) pg.accumulate(dgamma);
        if (pb.requires_grad) pb.accumulate(dbeta);
    });
}

// Rows of [N, D] scaled to unit L2 norm.
template <typename T>
VarT<T> l2_normalize_rows(const VarT<T>& x, T eps = T(1e-8)) {
    SGDIFF_CHECK(x.shape().size() == 2, "l2_normalize_rows wants [N, D]");
    int64_t rows = x.shape()[0], d = x.shape()[1];
    TensorT<T> out(x.shape());
    TensorT<T> norms({rows});
    const T* xp = x.value().ptr();
    T* op = out.ptr();
    for (int64_t r = 0; r < rows; r++) {
        double s = 0;
        for (int64_t c = 0; c < d; c++) s += double(xp[r * d + c]) * double(xp[r * d + c]);
        T nrm = std::sqrt(T(s) + eps);
        norms.ptr()[r] = nrm;
        for (int64_t c = 0; c < d; c++) op[r * d + c] = xp[r * d + c] / nrm;
    }
    return make_op_node<T>(out, {x}, [rows, d, norms](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        const T* y = n.value.ptr();
        const T* g = n.grad.ptr();
        TensorT<T> dx(p.value.shape());
        for (int64_t r = 0; r < rows; r++) {
            T nrm = norms.ptr()[r];
            double dot = 0;
            for (int64_t c = 0; c < d; c++) dot += double(g[r * d + c]) * double(y[r * d + c]);
            for (int64_t c = 0; c < d; c++)
                dx.ptr()[r * d + c] = (g[r * d + c] - y[r * d + c] * T(dot)) / nrm;
        }
        p.accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

// Rows of `table` [V, D] picked by ids -> [n_ids, D]. Grad scatters back.
template <typename T>
VarT<T> embed_lookup(const VarT<T>& table, const std::vector<int64_t>& ids) {
    SGDIFF_CHECK(table.shape().size() == 2, "embedding table must be [V, D]");
    int64_t v = table.shape()[0], d = table.shape()[1];
    int64_t m = (int64_t)ids.size();
    TensorT<T> out({m, d});
    const T* tp = table.value().ptr();
    for (int64_t i = 0; i < m; i++) {
        SGDIFF_CHECK(ids[i] >= 0 && ids[i] < v, "embedding id ", ids[i], " outside table of ", v);
        std::memcpy(out.ptr() + i * d, tp + ids[i] * d, sizeof(T) * d);
    }
    return make_op_node<T>(out, {table}, [ids, d](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dt = TensorT<T>::zeros(p.value.shape());
        const T* g = n.grad.ptr();
        for (size_t i = 0; i < ids.size(); i++) {
            T* row = dt.ptr() + ids[i] * d;
            for (int64_t c = 0; c < d; c++) row[c] += g[i * d + c];
        }
        p.accumulate(dt);
    });
}

// Scatter-add rows of src [M, D] into out [n_rows, D] at `index`.
template <typename T>
VarT<T> index_add_rows(const VarT<T>& src, const std::vector<int64_t>& index, int64_t n_rows) {
    SGDIFF_CHECK(src.shape().size() == 2, "index_add_rows wants [M, D] source");
    int64_t m = src.shape()[0], d = src.shape()[1];
    SGDIFF_CHECK((int64_t)index.size() == m, "index length mismatch");
    TensorT<T> out = TensorT<T>::zeros({n_rows, d});
    const T* sp = src.value().ptr();
    for (int64_t i = 0; i < m; i++) {
        SGDIFF_CHECK(index[i] >= 0 && index[i] < n_rows, "scatter index ", index[i],
                     " outside [0,", n_rows, ")");
        T* row = out.ptr() + index[i] * d;
        for (int64_t c = 0; c < d; c++) row[c] += sp[i * d + c];
    }
    return make_op_node<T>(out, {src}, [index, d](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> ds(p.value.shape());
        const T* g = n.grad.ptr();
        for (size_t i = 0; i < index.size(); i++)
            std::memcpy(ds.ptr() + i * d, g + index[i] * d, sizeof(T) * d);
        p.accumulate(ds);
    });
}

// Per-row scale of [N, D] by a constant vector [N] (e.g. 1/in-degree).
template <typename T>
VarT<T> scale_rows(const VarT<T>& x, const std::vector<T>& s) {
    SGDIFF_CHECK(x.shape().size() == 2, "scale_rows wants [N, D]");
    int64_t rows = x.shape()[0], d = x.shape()[1];
    SGDIFF_CHECK((int64_t)s.size() == rows, "scale vector length mismatch");
    TensorT<T> out(x.shape());
    const T* xp = x.value().ptr();
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < d; c++) out.ptr()[r * d + c] = xp[r * d + c] * s[r];
    return make_op_node<T>(out, {x}, [s, rows, d](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx(p.value.shape());
        const T* g = n.grad.ptr();
        for (int64_t r = 0; r < rows; r++)
            for (int64_t c = 0; c < d; c++) dx.ptr()[r * d + c] = g[r * d + c] * s[r];
        p.accumulate(dx);
    });
}

// Mean over the token axis of [B, L, D] restricted to mask[b][l] != 0.
// Every batch row must keep at least one live token.
template <typename T>
VarT<T> masked_mean_tokens(const VarT<T>& x, const TensorT<T>& mask) {
    SGDIFF_CHECK(x.shape().size() == 3, "masked_mean_tokens wants [B, L, D]");
    int64_t bs = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
    SGDIFF_CHECK(mask.shape() == Shape({bs, l}), "mask must be [B, L]");
    TensorT<T> out = TensorT<T>::zeros({bs, d});
    TensorT<T> counts({bs});
    const T* xp = x.value().ptr();
    const T* mp = mask.ptr();
    for (int64_t b = 0; b < bs; b++) {
        T cnt = T(0);
        for (int64_t t = 0; t < l; t++) {
            if (mp[b * l + t] == T(0)) continue;
            cnt += T(1);
            const T* row = xp + (b * l + t) * d;
            for (int64_t c = 0; c < d; c++) out.ptr()[b * d + c] += row[c];
        }
        SGDIFF_CHECK(cnt > T(0), "masked mean over an all-masked row ", b);
        counts.ptr()[b] = cnt;
        for (int64_t c = 0; c < d; c++) out.ptr()[b * d + c] /= cnt;
    }
    return make_op_node<T>(out, {x}, [mask, counts, bs, l, d](NodeT<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx = TensorT<T>::zeros(p.value.shape());
        const T* g = n.grad.ptr();
        const T* mp = mask.ptr();
        for (int64_t b = 0; b < bs; b++) {
            T inv = T(1) / counts.ptr()[b];
            for (int64_t t = 0; t < l; t++) {
                if (mp[b * l + t] == T(0)) continue;
                T* row = dx.ptr() + (b * l + t) * d;
                for (int64_t c = 0; c < d; c++) row[c] = g[b * d + c] * inv;
            }
        }
        p.accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

// Bilinear resize of [N,C,H,W] with half-pixel centers, clamped at borders.
template <typename T>
VarT<T> bilinear_resize(const VarT<T>& x, int64_t out_h, int64_t out_w) {
    SGDIFF_CHECK(x.shape().size() == 4, "bilinear_resize wants [N,C,H,W]");
    SGDIFF_CHECK(out_h > 0 && out_w > 0, "bilinear_resize target must be positive");
    int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    TensorT<T> out({n, c, out_h, out_w});
    // Per output pixel: source corner index + fractional weight, shared by all n,c.
    std::vector<int64_t> y0s(out_h), x0s(out_w);
    std::vector<T> wy(out_h), wx(out_w);
    auto grid = [](int64_t out_sz, int64_t in_sz, std::vector<int64_t>& i0, std::vector<T>& fr) {
        for (int64_t i = 0; i < out_sz; i++) {
            double src = (double(i) + 0.5) * double(in_sz) / double(out_sz) - 0.5;
            src = std::max(0.0, std::min(src, double(in_sz - 1)));
            int64_t lo = std::min((int64_t)src, in_sz - 1);
            i0[i] = lo;
            fr[i] = T(src - double(lo));
        }
    };
    grid(out_h, h, y0s, wy);
    grid(out_w, w, x0s, wx);
    const T* xp = x.value().ptr();
    T* op = out.ptr();
    for (int64_t nc = 0; nc < n * c; nc++) {
        const T* plane = xp + nc * h * w;
        T* oplane = op + nc * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; oy++) {
            int64_t y0 = y0s[oy], y1 = std::min(y0 + 1, h - 1);
            T fy = wy[oy];
            for (int64_t ox = 0; ox < out_w; ox++) {
                int64_t x0 = x0s[ox], x1 = std::min(x0 + 1, w - 1);
                T fx = wx[ox];
                T v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
                T v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
                oplane[oy * out_w + ox] = v00 * (T(1) - fy) * (T(1) - fx) + v01 * (T(1) - fy) * fx +
                                          v10 * fy * (T(1) - fx) + v11 * fy * fx;
            }
        }
    }
    return make_op_node<T>(out, {x}, [n, c, h, w, out_h, out_w, y0s, x0s, wy, wx](NodeT<T>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        TensorT<T> dx = TensorT<T>::zeros(p.value.shape());
        const T* g = nd.grad.ptr();
        for (int64_t nc = 0; nc < n * c; nc++) {
            T* dplane = dx.ptr() + nc * h * w;
            const T* gplane = g + nc * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; oy++) {
                int64_t y0 = y0s[oy], y1 = std::min(y0 + 1, h - 1);
                T fy = wy[oy];
                for (int64_t ox = 0; ox < out_w; ox++) {
                    int64_t x0 = x0s[ox], x1 = std::min(x0 + 1, w - 1);
                    T fx = wx[ox];
                    T gv = gplane[oy * out_w + ox];
                    dplane[y0 * w + x0] += gv * (T(1) - fy) * (T(1) - fx);
                    dplane[y0 * w + x1] += gv * (T(1) - fy) * fx;
                    dplane[y1 * w + x0] += gv * fy * (T(1) - fx);
                    dplane[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        p.accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Timestep embedding (constant w.r.t. parameters)
// ---------------------------------------------------------------------------

// Standard sinusoidal embedding of integer steps -> [N, dim]: first half cos,
// second half sin, frequencies log-spaced down from 1 to 1/max_period.
template <typename T>
TensorT<T> timestep_embedding(const std::vector<int64_t>& steps, int64_t dim,
                              double max_period = 10000.0) {
    SGDIFF_CHECK(dim > 0 && dim % 2 == 0, "timestep embedding dim must be even, got ", dim);
    int64_t half = dim / 2;
    int64_t n = (int64_t)steps.size();
    TensorT<T> out({n, dim});
    for (int64_t i = 0; i < n; i++) {
        for (int64_t j = 0; j < half; j++) {
            double freq = std::exp(-std::log(max_period) * double(j) / double(half));
            double arg = double(steps[i]) * freq;
            out.ptr()[i * dim + j] = T(std::cos(arg));
            out.ptr()[i * dim + half + j] = T(std::sin(arg));
        }
    }
    return out;
}

}  // namespace sgdiff
