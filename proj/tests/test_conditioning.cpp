#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/conditioning.hpp"
#include "support/testutil.hpp"

using namespace sgdiff;
using sgtest::max_abs_diff;
using sgtest::max_abs_diff_t;

namespace {

// Full-size configuration for identity checks, tiny one for gradient checks.
UNetConfig desk_cfg() {
    UNetConfig cfg;
    cfg.widths = {16, 24, 32};
    return cfg;
}

UNetConfig tiny_cfg() {
    UNetConfig cfg;
    cfg.image_size = 8;
    cfg.widths = {8, 16};
    cfg.res_blocks = 1;
    cfg.temb_dim = 16;
    cfg.context_dim = 8;
    cfg.groups = 4;
    cfg.heads = 2;
    cfg.attn_size = 4;
    return cfg;
}

template <typename T>
void poke(VarT<T>& v, int64_t i, T x) {
    const_cast<T*>(v.value().ptr())[i] = x;
}

// Deterministic noisy inputs for a forward pass.
template <typename T>
struct Probe {
    VarT<T> x;
    std::vector<int64_t> t;
    VarT<T> ctx;
};

template <typename T>
Probe<T> make_probe(const UNetConfig& cfg, uint64_t seed, int64_t n = 2, int64_t n_ctx = 5) {
    Rng rng(seed);
    Probe<T> p;
    p.x = VarT<T>::leaf(rng.template gauss<T>({n, cfg.in_channels, cfg.image_size, cfg.image_size}),
                        false);
    p.t.resize(static_cast<size_t>(n));
    for (auto& ti : p.t) ti = 1 + int64_t(rng.uniform_index(200));
    p.ctx = VarT<T>::leaf(rng.template gauss<T>({n_ctx, cfg.context_dim}), false);
    return p;
}

// Same three-scale central-difference harness as the graph-side tests: probes
// where the difference quotient is not self-consistent across step sizes are
// skipped; a wrong analytic gradient disagrees with every scale.
double fd_check_store(ParamStoreT<double>& ps, const std::function<VarD()>& loss_fn,
                      const std::vector<std::string>& names, double h = 1e-5, int64_t cap = 4) {
    ps.zero_grads();
    VarD loss = loss_fn();
    backward(loss);
    double worst = 0;
    for (const auto& name : names) {
        auto& v = ps.get(name);
        TensorD grad = v.grad_or_zero();
        int64_t n = v.numel();
        int64_t stride = n <= cap ? 1 : n / cap;
        for (int64_t i = 0; i < n; i += stride) {
            double saved = v.value().ptr()[i];
            auto central = [&](double step) {
                NoGradGuard ng;
                poke(v, i, saved + step);
                double fp = loss_fn().value().ptr()[0];
                poke(v, i, saved - step);
                double fm = loss_fn().value().ptr()[0];
                poke(v, i, saved);
                return (fp - fm) / (2 * step);
            };
            double c1 = central(h), c2 = central(h / 8), c3 = central(h / 64);
            double scale = std::max({std::abs(c1), std::abs(c2), std::abs(c3), 1e-7});
            if (std::abs(c1 - c2) > 0.1 * scale || std::abs(c2 - c3) > 0.1 * scale) continue;
            double a = grad.ptr()[i];
            double e = std::min(
                {sgtest::rel_err(a, c1), sgtest::rel_err(a, c2), sgtest::rel_err(a, c3)});
            worst = std::max(worst, e);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("u-net registration, output shape, and zero output at init") {
    UNetConfig cfg = desk_cfg();
    ParamStore ps;
    Rng rng(3);
    init_unet(ps, rng, cfg);
    for (const auto& [name, v] : ps.items()) CHECK(name.rfind("unet.", 0) == 0);
    CHECK(ps.has("unet.conv_in.weight"));
    CHECK(ps.has("unet.enc.2.1.xattn.k.weight"));
    CHECK(ps.has("unet.dec.0.2.conv2.bias"));
    CHECK(ps.get("unet.conv_out.weight").shape() == Shape({3, 16, 3, 3}));

    CHECK(unet_skip_count(cfg) == 9);
    CHECK(unet_skip_channels(cfg) ==
          std::vector<int64_t>({16, 16, 16, 16, 24, 24, 24, 32, 32}));
    CHECK(unet_attn_sites(cfg) ==
          std::vector<std::string>(
              {"enc.2.0", "enc.2.1", "mid", "dec.2.0", "dec.2.1", "dec.2.2"}));

    auto p = make_probe<float>(cfg, 7);
    UNetCondT<float> cond;
    cond.context = p.ctx;
    VarT<float> out = unet_forward(ps, cfg, p.x, p.t, cond);
    CHECK(out.shape() == p.x.shape());
    // Zero-initialized output convolution: an untrained net predicts zero.
    for (int64_t i = 0; i < out.numel(); i++) CHECK(out.value().ptr()[i] == 0.0f);

    // Bad inputs are contract violations.
    UNetCondT<float> no_ctx;
    CHECK_THROWS_AS(unet_forward(ps, cfg, p.x, p.t, no_ctx), ContractViolation);
    CHECK_THROWS_AS(unet_forward(ps, cfg, p.x, {1}, cond), ContractViolation);
    VarT<float> bad = VarT<float>::leaf(TensorT<float>::zeros({1, 3, 16, 16}), false);
    CHECK_THROWS_AS(unet_forward(ps, cfg, bad, {1}, cond), ContractViolation);
}

TEST_CASE("u-net output responds to timestep and context once the head is live") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<double> ps;
    Rng rng(4);
    init_unet(ps, rng, cfg);
    // Open the zero head so differences can reach the output.
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(9).gauss_scaled<double>(w.shape(), 0.05);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);

    auto p = make_probe<double>(cfg, 11, 1);
    UNetCondT<double> cond;
    cond.context = p.ctx;
    TensorD base = unet_forward(ps, cfg, p.x, {7}, cond).value();
    TensorD late = unet_forward(ps, cfg, p.x, {190}, cond).value();
    CHECK(max_abs_diff(base, late) > 1e-6);

    UNetCondT<double> cond2;
    cond2.context = VarD::leaf(Rng(12).gauss<double>({5, cfg.context_dim}), false);
    TensorD other = unet_forward(ps, cfg, p.x, {7}, cond2).value();
    CHECK(max_abs_diff(base, other) > 1e-6);

    // Determinism: identical inputs, identical bits.
    TensorD again = unet_forward(ps, cfg, p.x, {7}, cond).value();
    CHECK(max_abs_diff(base, again) == 0.0);

    // Per-item context [N, n_ctx, D]: stacking the shared rows for every item
    // reproduces the broadcast path exactly; distinct rows per item do not.
    auto p2 = make_probe<double>(cfg, 11, 2);
    UNetCondT<double> shared;
    shared.context = p2.ctx;
    TensorD ref = unet_forward(ps, cfg, p2.x, p2.t, shared).value();
    int64_t nc = p2.ctx.shape()[0];
    VarD one = reshape(p2.ctx, {1, nc, int64_t(cfg.context_dim)});
    UNetCondT<double> stacked;
    stacked.context = concat(std::vector<VarD>{one, one}, 0);
    CHECK(max_abs_diff(ref, unet_forward(ps, cfg, p2.x, p2.t, stacked).value()) == 0.0);
    UNetCondT<double> mixed;
    mixed.context = concat(
        std::vector<VarD>{one, reshape(cond2.context, {1, nc, int64_t(cfg.context_dim)})}, 0);
    CHECK(max_abs_diff(ref, unet_forward(ps, cfg, p2.x, p2.t, mixed).value()) > 1e-9);
    UNetCondT<double> wrong;
    wrong.context = one;  // batch-size mismatch in the per-item form
    CHECK_THROWS_AS(unet_forward(ps, cfg, p2.x, p2.t, wrong), ContractViolation);
}

TEST_CASE("u-net gradients agree with finite differences") {
    UNetConfig cfg = tiny_cfg();
    ParamStoreT<double> ps;
    Rng rng(5);
    init_unet(ps, rng, cfg);
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(6).gauss_scaled<double>(w.shape(), 0.1);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);

    auto p = make_probe<double>(cfg, 21, 2, 3);
    TensorD target = Rng(22).gauss<double>(p.x.shape());
    auto loss_fn = [&]() {
        UNetCondT<double> cond;
        cond.context = p.ctx;
        return mse_loss(unet_forward(ps, cfg, p.x, p.t, cond), VarD::leaf(target, false));
    };
    double err = fd_check_store(ps, loss_fn,
                                {"unet.conv_in.weight", "unet.enc.0.0.conv1.weight",
                                 "unet.enc.1.0.temb.weight", "unet.mid.0.conv2.weight",
                                 "unet.enc.1.0.attn.q.weight", "unet.enc.1.0.xattn.k.weight",
                                 "unet.dec.1.1.conv1.weight", "unet.up.1.weight",
                                 "unet.gn_out.gamma", "unet.temb.l0.weight",
                                 "unet.conv_out.bias"});
    CHECK(err < 1e-4);
}

TEST_CASE("spatial branch: copies are bit-identical and the model is unchanged at init") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<float> ps;
    Rng rng(13);
    init_unet(ps, rng, cfg);
    init_controlnet(ps, rng, cfg);

    // Every encoder-side parameter was cloned bit-for-bit.
    int copied = 0;
    for (const auto& [name, v] : ps.items()) {
        if (name.rfind("ctrl.", 0) != 0) continue;
        std::string rest = name.substr(5);
        if (rest.rfind("stem.", 0) == 0 || rest.rfind("zout.", 0) == 0) {
            for (int64_t i = 0; i < v.numel(); i++) CHECK(v.value().ptr()[i] == 0.0f);
            continue;
        }
        CHECK(max_abs_diff_t(v.value(), ps.get("unet." + rest).value()) == 0.0);
        copied++;
    }
    CHECK(copied > 50);

    for (uint64_t seed : {31u, 32u, 33u}) {
        auto p = make_probe<float>(cfg, seed);
        VarT<float> layout =
            VarT<float>::leaf(Rng(seed * 7).gauss<float>({2, kFeatDim, 32, 32}), false);
        UNetCondT<float> cond;
        cond.context = p.ctx;
        TensorT<float> base = unet_forward(ps, cfg, p.x, p.t, cond).value();
        UNetCondT<float> guided = cond;
        guided.skip_residuals = controlnet_residuals(ps, cfg, p.x, p.t, layout, cond);
        TensorT<float> steered = unet_forward(ps, cfg, p.x, p.t, guided).value();
        CHECK(max_abs_diff_t(base, steered) == 0.0);
    }
}

TEST_CASE("spatial branch responds to the layout once a zero conv opens") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<double> ps;
    Rng rng(14);
    init_unet(ps, rng, cfg);
    init_controlnet(ps, rng, cfg);
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(15).gauss_scaled<double>(w.shape(), 0.05);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);

    auto p = make_probe<double>(cfg, 41, 1);
    VarD layout_a = VarD::leaf(Rng(42).gauss<double>({1, kFeatDim, 32, 32}), false);
    VarD layout_b = VarD::leaf(Rng(43).gauss<double>({1, kFeatDim, 32, 32}), false);
    UNetCondT<double> cond;
    cond.context = p.ctx;

    auto run = [&](const VarD& layout) {
        UNetCondT<double> guided = cond;
        guided.skip_residuals = controlnet_residuals(ps, cfg, p.x, p.t, layout, cond);
        return unet_forward(ps, cfg, p.x, p.t, guided).value();
    };
    TensorD base = unet_forward(ps, cfg, p.x, p.t, cond).value();

    // Opening only the stem still changes nothing: the per-skip zero convs
    // remain shut, so no residual reaches the frozen decoder.
    auto& stem = ps.get("ctrl.stem.weight");
    TensorD sr = Rng(16).gauss_scaled<double>(stem.shape(), 0.1);
    for (int64_t i = 0; i < stem.numel(); i++) poke(stem, i, sr.ptr()[i]);
    CHECK(max_abs_diff(run(layout_a), base) == 0.0);

    // Opening one output conv makes the result layout-dependent.
    auto& zw = ps.get("ctrl.zout.7.weight");
    TensorD zr = Rng(17).gauss_scaled<double>(zw.shape(), 0.1);
    for (int64_t i = 0; i < zw.numel(); i++) poke(zw, i, zr.ptr()[i]);
    TensorD oa = run(layout_a);
    CHECK(max_abs_diff(oa, base) > 1e-8);
    CHECK(max_abs_diff(oa, run(layout_b)) > 1e-8);

    CHECK_THROWS_AS(
        controlnet_residuals(ps, cfg, p.x, p.t,
                             VarD::leaf(TensorD::zeros({1, kFeatDim, 16, 16}), false), cond),
        ContractViolation);
}

TEST_CASE("spatial branch gradients agree with finite differences") {
    UNetConfig cfg = tiny_cfg();
    ParamStoreT<double> ps;
    Rng rng(18);
    init_unet(ps, rng, cfg);
    init_controlnet(ps, rng, cfg, /*layout_dim=*/6);
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(19).gauss_scaled<double>(w.shape(), 0.1);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);
    // Open the adapter path so its gradients are non-trivial.
    for (const char* name : {"ctrl.stem.weight", "ctrl.zout.2.weight", "ctrl.zout.3.weight"}) {
        auto& z = ps.get(name);
        TensorD zr = Rng(20).gauss_scaled<double>(z.shape(), 0.2);
        for (int64_t i = 0; i < z.numel(); i++) poke(z, i, zr.ptr()[i]);
    }

    auto p = make_probe<double>(cfg, 51, 1, 3);
    VarD layout = VarD::leaf(Rng(52).gauss<double>({1, 6, 8, 8}), false);
    TensorD target = Rng(53).gauss<double>(p.x.shape());
    auto loss_fn = [&]() {
        UNetCondT<double> cond;
        cond.context = p.ctx;
        UNetCondT<double> guided = cond;
        guided.skip_residuals = controlnet_residuals(ps, cfg, p.x, p.t, layout, cond);
        return mse_loss(unet_forward(ps, cfg, p.x, p.t, guided), VarD::leaf(target, false));
    };
    double err = fd_check_store(ps, loss_fn,
                                {"ctrl.stem.weight", "ctrl.zout.3.weight",
                                 "ctrl.enc.0.0.conv1.weight", "ctrl.conv_in.weight",
                                 "ctrl.enc.1.0.xattn.v.weight", "ctrl.down.0.weight"});
    CHECK(err < 1e-4);
}

TEST_CASE("grounding tokens are row-wise and permutation-equivariant") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<double> ps;
    Rng rng(23);
    init_unet(ps, rng, cfg);
    init_gsa(ps, rng, cfg);

    TensorD ce = Rng(24).gauss<double>({4, kFeatDim});
    TensorD nf = Rng(25).gauss<double>({4, kFeatDim});
    TensorD out =
        ground_tokens(ps, VarD::leaf(ce, false), VarD::leaf(nf, false)).value();
    CHECK(out.shape() == Shape({4, int64_t(cfg.context_dim)}));

    // Permuting rows permutes outputs exactly (row-independent arithmetic).
    std::vector<int64_t> pi = {2, 0, 3, 1};
    TensorD cep({4, kFeatDim}), nfp({4, kFeatDim});
    for (int64_t r = 0; r < 4; r++)
        for (int64_t c = 0; c < kFeatDim; c++) {
            cep.ptr()[r * kFeatDim + c] = ce.ptr()[pi[size_t(r)] * kFeatDim + c];
            nfp.ptr()[r * kFeatDim + c] = nf.ptr()[pi[size_t(r)] * kFeatDim + c];
        }
    TensorD outp =
        ground_tokens(ps, VarD::leaf(cep, false), VarD::leaf(nfp, false)).value();
    for (int64_t r = 0; r < 4; r++)
        for (int64_t c = 0; c < cfg.context_dim; c++)
            CHECK(outp.ptr()[r * cfg.context_dim + c] ==
                  out.ptr()[pi[size_t(r)] * cfg.context_dim + c]);

    CHECK_THROWS_AS(ground_tokens(ps, VarD::leaf(ce, false),
                                  VarD::leaf(TensorD::zeros({3, kFeatDim}), false)),
                    ContractViolation);
}

namespace {

template <typename T>
void check_gsa_identity() {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<T> ps;
    Rng rng(26);
    init_unet(ps, rng, cfg);
    init_gsa(ps, rng, cfg);

    auto p = make_probe<T>(cfg, 61);
    UNetCondT<T> cond;
    cond.context = p.ctx;
    TensorT<T> base = unet_forward(ps, cfg, p.x, p.t, cond).value();

    std::vector<VarT<T>> grounds = {
        VarT<T>::leaf(Rng(62).template gauss<T>({3, int64_t(cfg.context_dim)}), false)};
    UNetCondT<T> gated = cond;
    gated.attn_hook = make_gsa_hook(ps, cfg, grounds);
    TensorT<T> out = unet_forward(ps, cfg, p.x, p.t, gated).value();
    CHECK(max_abs_diff_t(base, out) == 0.0);

    // The hook with no grounding at all is likewise exactly inert.
    UNetCondT<T> hollow = cond;
    hollow.attn_hook = make_gsa_hook(ps, cfg, std::vector<VarT<T>>{});
    CHECK(max_abs_diff_t(base, unet_forward(ps, cfg, p.x, p.t, hollow).value()) == 0.0);
}

}  // namespace

TEST_CASE("gated attention is the bit-exact identity while the gate is closed") {
    check_gsa_identity<float>();
    check_gsa_identity<double>();
}

TEST_CASE("an open gate makes the output grounding-dependent") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<double> ps;
    Rng rng(27);
    init_unet(ps, rng, cfg);
    init_gsa(ps, rng, cfg);
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(28).gauss_scaled<double>(w.shape(), 0.05);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);
    for (const std::string& site : unet_attn_sites(cfg)) poke(ps.get("gsa." + site + ".gamma"), 0, 0.7);

    auto p = make_probe<double>(cfg, 63, 1);
    UNetCondT<double> cond;
    cond.context = p.ctx;
    TensorD base = unet_forward(ps, cfg, p.x, p.t, cond).value();

    auto run = [&](std::vector<VarD> grounds) {
        UNetCondT<double> gated = cond;
        gated.attn_hook = make_gsa_hook(ps, cfg, std::move(grounds));
        return unet_forward(ps, cfg, p.x, p.t, gated).value();
    };
    TensorD ga = run({VarD::leaf(Rng(64).gauss<double>({3, int64_t(cfg.context_dim)}), false)});
    TensorD gb = run({VarD::leaf(Rng(65).gauss<double>({3, int64_t(cfg.context_dim)}), false)});
    TensorD none = run({});
    CHECK(max_abs_diff(ga, base) > 1e-8);
    CHECK(max_abs_diff(ga, gb) > 1e-8);
    // With the gate open, even pure visual self-attention shifts the output.
    CHECK(max_abs_diff(none, base) > 1e-8);
    CHECK(max_abs_diff(none, ga) > 1e-8);
}

TEST_CASE("gated attention gradients agree with finite differences") {
    UNetConfig cfg = tiny_cfg();
    ParamStoreT<double> ps;
    Rng rng(29);
    init_unet(ps, rng, cfg);
    init_gsa(ps, rng, cfg);
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(30).gauss_scaled<double>(w.shape(), 0.1);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);
    for (const std::string& site : unet_attn_sites(cfg)) poke(ps.get("gsa." + site + ".gamma"), 0, 0.4);

    auto p = make_probe<double>(cfg, 66, 1, 3);
    TensorD ce = Rng(67).gauss<double>({3, kFeatDim});
    TensorD nf = Rng(68).gauss<double>({3, kFeatDim});
    TensorD target = Rng(69).gauss<double>(p.x.shape());
    auto loss_fn = [&]() {
        std::vector<VarD> grounds = {
            ground_tokens(ps, VarD::leaf(ce, false), VarD::leaf(nf, false))};
        UNetCondT<double> cond;
        cond.context = p.ctx;
        cond.attn_hook = make_gsa_hook(ps, cfg, grounds);
        return mse_loss(unet_forward(ps, cfg, p.x, p.t, cond), VarD::leaf(target, false));
    };
    const std::string site = unet_attn_sites(cfg)[0];
    double err = fd_check_store(ps, loss_fn,
                                {"gsa." + site + ".q.weight", "gsa." + site + ".proj.weight",
                                 "gsa." + site + ".gamma", "gsa." + site + ".o.bias",
                                 "ground.l0.weight", "ground.l1.weight"});
    CHECK(err < 1e-4);
}

TEST_CASE("low-rank update reproduces a hand-computed product") {
    // W0 = I (2x2), B = [[1],[0]], A = [[0,1]], alpha = r = 1:
    // merged = W0 + B A = [[1,1],[0,1]].
    TensorD w0 = TensorD::zeros({2, 2});
    w0.ptr()[0] = 1.0;
    w0.ptr()[3] = 1.0;
    TensorD b = TensorD::zeros({2, 1});
    b.ptr()[0] = 1.0;
    TensorD a = TensorD::zeros({1, 2});
    a.ptr()[1] = 1.0;
    VarD merged =
        lora_apply(VarD::leaf(w0, false), VarD::leaf(a, false), VarD::leaf(b, false), 1.0);
    const double want[] = {1.0, 1.0, 0.0, 1.0};
    for (int i = 0; i < 4; i++) CHECK(merged.value().ptr()[i] == doctest::Approx(want[i]).epsilon(1e-15));

    // Doubling alpha doubles the update term.
    VarD merged2 =
        lora_apply(VarD::leaf(w0, false), VarD::leaf(a, false), VarD::leaf(b, false), 2.0);
    CHECK(merged2.value().ptr()[1] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK_THROWS_AS(lora_apply(VarD::leaf(w0, false), VarD::leaf(a, false),
                               VarD::leaf(TensorD::zeros({3, 1}), false), 1.0),
                    ContractViolation);
}

TEST_CASE("low-rank adapters leave the model bit-identical until B moves") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<float> ps;
    Rng rng(33);
    init_unet(ps, rng, cfg);
    init_lora(ps, rng, cfg, LoraConfig{});

    // B starts at zero, A gaussian; registration covers q and v per site.
    for (const std::string& site : unet_attn_sites(cfg)) {
        CHECK(ps.get("lora." + site + ".q.A").shape() ==
              Shape({4, cfg.widths.back()}));
        const auto& b = ps.get("lora." + site + ".v.B").value();
        CHECK(b.shape() == Shape({int64_t(cfg.context_dim), 4}));
        for (int64_t i = 0; i < b.numel(); i++) CHECK(b.ptr()[i] == 0.0f);
    }

    auto p = make_probe<float>(cfg, 71);
    UNetCondT<float> cond;
    cond.context = p.ctx;
    TensorT<float> base = unet_forward(ps, cfg, p.x, p.t, cond).value();
    auto overrides = lora_overrides(ps, cfg, LoraConfig{});
    CHECK(overrides.size() == unet_attn_sites(cfg).size() * 2);
    UNetCondT<float> tuned = cond;
    tuned.overrides = &overrides;
    CHECK(max_abs_diff_t(base, unet_forward(ps, cfg, p.x, p.t, tuned).value()) == 0.0);

    CHECK_THROWS_AS(init_lora(ps, rng, cfg, LoraConfig{4096, 1.0}), ConfigError);
    CHECK_THROWS_AS(init_lora(ps, rng, cfg, LoraConfig{0, 1.0}), ConfigError);
}

TEST_CASE("merging the low-rank update equals applying it on the fly") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<double> ps;
    Rng rng(34);
    init_unet(ps, rng, cfg);
    init_lora(ps, rng, cfg, LoraConfig{});
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(35).gauss_scaled<double>(w.shape(), 0.05);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);
    // Wake the update up: give every B matrix real values.
    for (const std::string& site : unet_attn_sites(cfg))
        for (const char* leg : {"q", "v"}) {
            auto& b = ps.get("lora." + site + "." + leg + ".B");
            TensorD br = Rng(fnv1a(site) ^ fnv1a(leg)).gauss_scaled<double>(b.shape(), 0.3);
            for (int64_t i = 0; i < b.numel(); i++) poke(b, i, br.ptr()[i]);
        }

    auto p = make_probe<double>(cfg, 72, 1);
    UNetCondT<double> cond;
    cond.context = p.ctx;
    TensorD base = unet_forward(ps, cfg, p.x, p.t, cond).value();

    auto overrides = lora_overrides(ps, cfg, LoraConfig{});
    UNetCondT<double> tuned = cond;
    tuned.overrides = &overrides;
    TensorD on_the_fly = unet_forward(ps, cfg, p.x, p.t, tuned).value();
    CHECK(max_abs_diff(on_the_fly, base) > 1e-9);

    lora_merge_into(ps, cfg, LoraConfig{});
    TensorD merged = unet_forward(ps, cfg, p.x, p.t, cond).value();
    CHECK(max_abs_diff_t(merged, on_the_fly) == 0.0);
}

TEST_CASE("low-rank gradients flow to A and B but not the frozen base") {
    UNetConfig cfg = tiny_cfg();
    ParamStoreT<double> ps;
    Rng rng(36);
    init_unet(ps, rng, cfg);
    init_lora(ps, rng, cfg, LoraConfig{2, 2.0});
    auto& w = ps.get("unet.conv_out.weight");
    TensorD wr = Rng(37).gauss_scaled<double>(w.shape(), 0.1);
    for (int64_t i = 0; i < w.numel(); i++) poke(w, i, wr.ptr()[i]);
    const std::string site = unet_attn_sites(cfg)[0];
    for (const char* leg : {"q", "v"}) {
        auto& b = ps.get("lora." + site + "." + leg + ".B");
        TensorD br = Rng(fnv1a(leg)).gauss_scaled<double>(b.shape(), 0.3);
        for (int64_t i = 0; i < b.numel(); i++) poke(b, i, br.ptr()[i]);
    }
    freeze_partition(ps, "lora");

    auto p = make_probe<double>(cfg, 73, 1, 3);
    TensorD target = Rng(74).gauss<double>(p.x.shape());
    LoraConfig lcfg{2, 2.0};
    auto loss_fn = [&]() {
        auto overrides = lora_overrides(ps, cfg, lcfg);
        UNetCondT<double> cond;
        cond.context = p.ctx;
        cond.overrides = &overrides;
        return mse_loss(unet_forward(ps, cfg, p.x, p.t, cond), VarD::leaf(target, false));
    };
    double err = fd_check_store(ps, loss_fn,
                                {"lora." + site + ".q.A", "lora." + site + ".q.B",
                                 "lora." + site + ".v.A", "lora." + site + ".v.B"});
    CHECK(err < 1e-4);
    // The frozen host weight accumulated nothing.
    CHECK(!ps.get("unet." + site + ".xattn.q.weight").requires_grad());
    CHECK(max_abs_diff_t(ps.get("unet." + site + ".xattn.q.weight").grad_or_zero(),
                         TensorD::zeros(ps.get("unet." + site + ".xattn.q.weight").shape())) ==
          0.0);
}

TEST_CASE("all adapters stacked at init still reproduce the base model bit-for-bit") {
    UNetConfig cfg = desk_cfg();
    ParamStoreT<float> ps;
    Rng rng(38);
    init_unet(ps, rng, cfg);
    init_controlnet(ps, rng, cfg);
    init_gsa(ps, rng, cfg);
    init_lora(ps, rng, cfg, LoraConfig{});

    auto p = make_probe<float>(cfg, 75);
    VarT<float> layout = VarT<float>::leaf(Rng(76).gauss<float>({2, kFeatDim, 32, 32}), false);
    std::vector<VarT<float>> grounds = {
        VarT<float>::leaf(Rng(77).gauss<float>({4, int64_t(cfg.context_dim)}), false)};
    UNetCondT<float> cond;
    cond.context = p.ctx;
    TensorT<float> base = unet_forward(ps, cfg, p.x, p.t, cond).value();

    auto overrides = lora_overrides(ps, cfg, LoraConfig{});
    UNetCondT<float> full = cond;
    full.skip_residuals = controlnet_residuals(ps, cfg, p.x, p.t, layout, cond);
    full.attn_hook = make_gsa_hook(ps, cfg, grounds);
    full.overrides = &overrides;
    CHECK(max_abs_diff_t(base, unet_forward(ps, cfg, p.x, p.t, full).value()) == 0.0);
}

TEST_CASE("freeze partitions are disjoint, exhaustive, and audit-friendly") {
    UNetConfig cfg = tiny_cfg();
    ParamStoreT<float> ps;
    Rng rng(71);
    init_unet(ps, rng, cfg);
    init_controlnet(ps, rng, cfg, 6);
    init_gsa(ps, rng, cfg);
    init_lora(ps, rng, cfg, LoraConfig{2, 2.0});
    ps.add("graph_encoder.dummy.weight", TensorT<float>::zeros({2, 2}));

    auto expect = [&](const std::string& method, const std::vector<std::string>& on,
                      const std::vector<std::string>& off) {
        auto prefixes = freeze_partition(ps, method);
        CHECK(prefixes == on);
        int64_t trainable = 0, frozen = 0;
        for (const auto& [name, v] : ps.items()) {
            bool should = false;
            for (const auto& p : on) should = should || name.rfind(p, 0) == 0;
            CHECK(v.requires_grad() == should);
            (v.requires_grad() ? trainable : frozen)++;
        }
        CHECK(trainable > 0);
        CHECK(frozen > 0);
        CHECK(trainable + frozen == int64_t(ps.size()));
        for (const auto& p : off)
            CHECK(std::find(prefixes.begin(), prefixes.end(), p) == prefixes.end());
    };
    expect("controlnet", {"ctrl.", "graph_encoder."}, {"unet.", "gsa.", "lora."});
    expect("gsa", {"gsa.", "ground.", "graph_encoder."}, {"unet.", "ctrl.", "lora."});
    expect("lora", {"lora."}, {"unet.", "ctrl.", "gsa.", "graph_encoder."});
    CHECK_THROWS_AS(freeze_partition(ps, "adapters"), ConfigError);

    ParamStoreT<float> bare;
    Rng rng2(72);
    init_unet(bare, rng2, cfg);
    CHECK_THROWS_AS(freeze_partition(bare, "lora"), ConfigError);
}
