#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sgdiff/conv.hpp"
#include "support/testutil.hpp"

using namespace sgdiff;
using sgtest::fd_check;
using sgtest::rand_tensor;

static Rng fresh(uint64_t seed) { return Rng(RngState{.seed = seed, .stream = 0, .counter = 0}); }

// Direct sliding-window convolution, no unfold, no BLAS.
static TensorD conv_naive(const TensorD& x, const TensorD& w, const TensorD& b, int64_t stride,
                          int64_t pad) {
    int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    int64_t cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    int64_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
    TensorD out = TensorD::zeros({n, cout, oh, ow});
    for (int64_t i = 0; i < n; i++)
        for (int64_t o = 0; o < cout; o++)
            for (int64_t oy = 0; oy < oh; oy++)
                for (int64_t ox = 0; ox < ow; ox++) {
                    double acc = b.defined() ? b.ptr()[o] : 0.0;
                    for (int64_t c = 0; c < cin; c++)
                        for (int64_t ky = 0; ky < kh; ky++)
                            for (int64_t kx = 0; kx < kw; kx++) {
                                int64_t iy = oy * stride + ky - pad;
                                int64_t ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += x.ptr()[((i * cin + c) * h + iy) * wd + ix] *
                                       w.ptr()[((o * cin + c) * kh + ky) * kw + kx];
                            }
                    out.ptr()[((i * cout + o) * oh + oy) * ow + ox] = acc;
                }
    return out;
}

// Direct transposed convolution: every input pixel scatters a kernel patch.
static TensorD convt_naive(const TensorD& x, const TensorD& w, const TensorD& b, int64_t stride,
                           int64_t pad) {
    int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    int64_t cout = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    int64_t oh = (h - 1) * stride - 2 * pad + kh, ow = (wd - 1) * stride - 2 * pad + kw;
    TensorD out = TensorD::zeros({n, cout, oh, ow});
    for (int64_t i = 0; i < n; i++) {
        for (int64_t c = 0; c < cin; c++)
            for (int64_t y = 0; y < h; y++)
                for (int64_t xx = 0; xx < wd; xx++) {
                    double v = x.ptr()[((i * cin + c) * h + y) * wd + xx];
                    for (int64_t o = 0; o < cout; o++)
                        for (int64_t ky = 0; ky < kh; ky++)
                            for (int64_t kx = 0; kx < kw; kx++) {
                                int64_t oy = y * stride + ky - pad;
                                int64_t ox = xx * stride + kx - pad;
                                if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                                out.ptr()[((i * cout + o) * oh + oy) * ow + ox] +=
                                    v * w.ptr()[((c * cout + o) * kh + ky) * kw + kx];
                            }
                }
        if (b.defined())
            for (int64_t o = 0; o < cout; o++)
                for (int64_t s = 0; s < oh * ow; s++)
                    out.ptr()[(i * cout + o) * oh * ow + s] += b.ptr()[o];
    }
    return out;
}

TEST_CASE("conv2d matches the sliding-window reference") {
    Rng rng = fresh(61);
    struct Case {
        Shape x, w;
        int64_t stride, pad;
    };
    std::vector<Case> cases{
        {{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1},
        {{1, 2, 7, 9}, {3, 2, 3, 3}, 2, 1},   // stride 2, odd sizes
        {{2, 1, 5, 5}, {2, 1, 1, 1}, 1, 0},   // pointwise
        {{1, 2, 6, 4}, {2, 2, 2, 4}, 1, 0},   // rectangular kernel
        {{1, 3, 4, 4}, {2, 3, 4, 4}, 1, 0},   // kernel covers everything
    };
    for (const auto& c : cases) {
        TensorD x = rand_tensor(rng, c.x);
        TensorD w = rand_tensor(rng, c.w);
        TensorD b = rand_tensor(rng, {c.w[0]});
        VarD out = conv2d(VarD(x), VarD(w), VarD(b), c.stride, c.pad);
        TensorD ref = conv_naive(x, w, b, c.stride, c.pad);
        CHECK(out.shape() == ref.shape());
        CHECK(sgtest::max_abs_diff(out.value(), ref) < 1e-10);
    }
}

TEST_CASE("conv2d gradients for input, weight and bias") {
    Rng rng = fresh(62);
    double err = fd_check(
        {rand_tensor(rng, {2, 2, 5, 5}), rand_tensor(rng, {3, 2, 3, 3}), rand_tensor(rng, {3})},
        [](const std::vector<VarD>& in) {
            return mean_all(square(conv2d(in[0], in[1], in[2], 2, 1)));
        });
    CHECK(err < 1e-4);
}

TEST_CASE("conv2d without bias") {
    Rng rng = fresh(63);
    TensorD x = rand_tensor(rng, {1, 2, 4, 4});
    TensorD w = rand_tensor(rng, {2, 2, 3, 3});
    VarD out = conv2d(VarD(x), VarD(w), VarD(), 1, 1);
    TensorD ref = conv_naive(x, w, TensorD(), 1, 1);
    CHECK(sgtest::max_abs_diff(out.value(), ref) < 1e-10);
}

TEST_CASE("conv_transpose2d matches the scatter reference") {
    Rng rng = fresh(64);
    struct Case {
        Shape x, w;
        int64_t stride, pad;
    };
    std::vector<Case> cases{
        {{1, 3, 4, 4}, {3, 2, 4, 4}, 2, 1},   // the 2x upsampling shape used by mask decoding
        {{2, 2, 3, 5}, {2, 3, 3, 3}, 1, 1},
        {{1, 2, 3, 3}, {2, 2, 2, 2}, 2, 0},
    };
    for (const auto& c : cases) {
        TensorD x = rand_tensor(rng, c.x);
        TensorD w = rand_tensor(rng, c.w);
        TensorD b = rand_tensor(rng, {c.w[1]});
        VarD out = conv_transpose2d(VarD(x), VarD(w), VarD(b), c.stride, c.pad);
        TensorD ref = convt_naive(x, w, b, c.stride, c.pad);
        CHECK(out.shape() == ref.shape());
        CHECK(sgtest::max_abs_diff(out.value(), ref) < 1e-10);
    }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    // <conv(x), y> == <x, conv_transpose(y)> with shared weights. A conv
    // weight [O, C, kh, kw] reinterpreted as a transpose weight
    // [in=O, out=C, kh, kw] is the same memory, so the identity holds with
    // the tensor passed straight through. This ties the two implementations
    // together without either calling the other.
    Rng rng = fresh(65);
    // odd spatial size so the strided geometry round-trips exactly
    TensorD x = rand_tensor(rng, {1, 2, 7, 7});
    TensorD w = rand_tensor(rng, {3, 2, 3, 3});
    VarD cx = conv2d(VarD(x), VarD(w), VarD(), 2, 1);
    TensorD y = rand_tensor(rng, cx.shape());
    VarD ty = conv_transpose2d(VarD(y), VarD(w), VarD(), 2, 1);
    CHECK(ty.shape() == x.shape());
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < cx.numel(); i++) lhs += cx.value().ptr()[i] * y.ptr()[i];
    for (int64_t i = 0; i < ty.numel(); i++) rhs += x.ptr()[i] * ty.value().ptr()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("conv_transpose2d gradients") {
    Rng rng = fresh(66);
    double err = fd_check(
        {rand_tensor(rng, {1, 3, 4, 4}), rand_tensor(rng, {3, 2, 4, 4}), rand_tensor(rng, {2})},
        [](const std::vector<VarD>& in) {
            return mean_all(square(conv_transpose2d(in[0], in[1], in[2], 2, 1)));
        });
    CHECK(err < 1e-4);
}

TEST_CASE("upsample_nearest2x repeats pixels and pools gradient") {
    TensorD x({1, 1, 2, 2}, {1, 2, 3, 4});
    VarD up = upsample_nearest2x(VarD(x));
    CHECK(up.shape() == Shape({1, 1, 4, 4}));
    // rows: 1 1 2 2 / 1 1 2 2 / 3 3 4 4 / 3 3 4 4
    CHECK(up.value().ptr()[0] == 1.0);
    CHECK(up.value().ptr()[2] == 2.0);
    CHECK(up.value().ptr()[5] == 1.0);
    CHECK(up.value().ptr()[8] == 3.0);
    CHECK(up.value().ptr()[15] == 4.0);
    Rng rng = fresh(67);
    CHECK(fd_check({rand_tensor(rng, {2, 2, 3, 3})}, [](const std::vector<VarD>& in) {
              return mean_all(square(upsample_nearest2x(in[0])));
          }) < 1e-4);
}

TEST_CASE("global_avg_pool means the plane") {
    TensorD x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    VarD p = global_avg_pool(VarD(x));
    CHECK(p.value().ptr()[0] == doctest::Approx(2.5));
    CHECK(p.value().ptr()[1] == doctest::Approx(25.0));
    Rng rng = fresh(68);
    CHECK(fd_check({rand_tensor(rng, {2, 3, 4, 4})}, [](const std::vector<VarD>& in) {
              return mean_all(square(global_avg_pool(in[0])));
          }) < 1e-4);
}
