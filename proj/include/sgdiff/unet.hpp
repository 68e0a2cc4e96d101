#pragma once

// Noise-prediction U-Net.  32x32 inputs pass through an encoder of residual
// blocks with stride-2 downsampling, a bottleneck, and a skip-connected
// decoder; at the 8x8 resolution every block is followed by token-space
// self-attention and cross-attention over a conditioning token sequence.
//
// The forward pass is split into unet_encode / unet_decode so adapter code can
// rerun the encoder under a different parameter prefix (a trainable copy) and
// inject per-skip residuals before the decoder consumes the stack.  Parameters
// are fetched by dotted name at forward time, which lets a caller substitute
// individual weights (e.g. low-rank-updated attention projections) through
// UNetCondT::overrides without touching the stored originals.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sgdiff/autodiff.hpp"
#include "sgdiff/common.hpp"
#include "sgdiff/conv.hpp"
#include "sgdiff/layers.hpp"
#include "sgdiff/ops.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

struct UNetConfig {
    int64_t in_channels = 3;
    int64_t image_size = 32;
    std::vector<int64_t> widths = {64, 128, 256};  // channels per resolution level
    int64_t res_blocks = 2;                       // residual blocks per encoder level
    int64_t temb_dim = 128;                       // sinusoidal timestep embedding width
    int64_t context_dim = 64;                     // conditioning token width
    int64_t attn_size = 8;                        // spatial side where attention runs
    int groups = 8;                               // group-norm groups
    int heads = 4;                                // attention heads

    int64_t levels() const { return static_cast<int64_t>(widths.size()); }
    // Spatial side at a given level (level 0 is full resolution).
    int64_t side_at(int64_t level) const { return image_size >> level; }
    bool attn_at(int64_t level) const { return side_at(level) == attn_size; }
};

// Attention-site identifiers in forward order ("enc.2.0", ..., "mid",
// "dec.2.0", ...).  Adapter parameter groups are keyed by these.
std::vector<std::string> unet_attn_sites(const UNetConfig& cfg);

// Number of entries the encoder pushes onto the skip stack.
inline int64_t unet_skip_count(const UNetConfig& cfg) {
    return 1 + cfg.levels() * cfg.res_blocks + (cfg.levels() - 1);
}

// Conditioning and adapter hooks consumed by the forward pass.
template <typename T>
struct UNetCondT {
    // Cross-attention tokens: [n_ctx, context_dim] shared across the batch,
    // or [N, n_ctx, context_dim] per item.  Always required; an unconditional
    // pass uses the null-token sequence, not an empty one.
    VarT<T> context;
    // Residuals added to the encoder skip stack before decoding (empty, or
    // exactly one entry per skip, shape-matched).
    std::vector<VarT<T>> skip_residuals;
    // Called at every attention site with the visual token tensor [N, HW, C]
    // after self-attention and before cross-attention; the return value
    // replaces the tokens.  Used to splice in gated self-attention.
    std::function<VarT<T>(const VarT<T>& tokens, const std::string& site)> attn_hook;
    // Weight substitutions by fully qualified parameter name.
    const std::map<std::string, VarT<T>>* overrides = nullptr;
};

template <typename T>
struct UNetEncodeT {
    std::vector<VarT<T>> skips;  // unet_skip_count entries, forward order
    VarT<T> h;                   // final encoder feature (bottleneck input)
    VarT<T> temb;                // [N, temb_dim] after the shared MLP
};

// Registers all parameters under `prefix` (default "unet.").  The final output
// convolution is zero-initialized so an untrained net predicts exactly zero.
template <typename T>
void init_unet(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg,
               const std::string& prefix = "unet.");

// Encoder half.  `stem_inject` (optional, [N, w0, S, S]) is added to the
// conv_in output before the first residual block — the entry point for a
// spatial-conditioning branch.
template <typename T>
UNetEncodeT<T> unet_encode(ParamStoreT<T>& ps, const UNetConfig& cfg, const VarT<T>& x,
                           const std::vector<int64_t>& t, const UNetCondT<T>& cond,
                           const std::string& prefix, const VarT<T>* stem_inject = nullptr);

// Bottleneck + decoder half; consumes the skip stack back to front.
template <typename T>
VarT<T> unet_decode(ParamStoreT<T>& ps, const UNetConfig& cfg, const VarT<T>& h,
                    std::vector<VarT<T>> skips, const VarT<T>& temb, const UNetCondT<T>& cond,
                    const std::string& prefix);

// Full pass: encode, add cond.skip_residuals to the stack, decode.  x is
// [N, in_channels, S, S]; t holds one timestep per batch item; the result has
// the shape of x.
template <typename T>
VarT<T> unet_forward(ParamStoreT<T>& ps, const UNetConfig& cfg, const VarT<T>& x,
                     const std::vector<int64_t>& t, const UNetCondT<T>& cond,
                     const std::string& prefix = "unet.");

// x [N,C,H,W] plus a per-sample per-channel bias b [N,C], broadcast over H,W.
template <typename T>
VarT<T> add_channel_rows(const VarT<T>& x, const VarT<T>& b);

// ---------------------------------------------------------------------------
// Implementation
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> add_channel_rows(const VarT<T>& x, const VarT<T>& b) {
    SGDIFF_CHECK(x.shape().size() == 4, "add_channel_rows wants [N,C,H,W]");
    int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    SGDIFF_CHECK(b.shape() == Shape({n, c}), "add_channel_rows: bias ", shape_str(b.shape()),
                 " does not match [", n, ",", c, "]");
    TensorT<T> out(x.shape());
    const T* xp = x.value().ptr();
    const T* bp = b.value().ptr();
    T* op = out.ptr();
    for (int64_t r = 0; r < n * c; r++) {
        T bias = bp[r];
        for (int64_t k = 0; k < hw; k++) op[r * hw + k] = xp[r * hw + k] + bias;
    }
    return make_op_node<T>(std::move(out), {x, b}, [n, c, hw](NodeT<T>& node) {
        const T* g = node.grad.ptr();
        if (node.parents[0]->requires_grad) node.parents[0]->accumulate(node.grad);
        if (node.parents[1]->requires_grad) {
            TensorT<T> db({n, c});
            T* dp = db.ptr();
            for (int64_t r = 0; r < n * c; r++) {
                T acc = T(0);
                for (int64_t k = 0; k < hw; k++) acc += g[r * hw + k];
                dp[r] = acc;
            }
            node.parents[1]->accumulate(db);
        }
    });
}

namespace unet_detail {

// Forward-time parameter accessor honouring UNetCondT::overrides.
template <typename T>
struct Pick {
    ParamStoreT<T>& ps;
    const std::map<std::string, VarT<T>>* overrides = nullptr;
    VarT<T> operator()(const std::string& name) const {
        if (overrides) {
            auto it = overrides->find(name);
            if (it != overrides->end()) return it->second;
        }
        return ps.get(name);
    }
};

// [N,C,H,W] -> token rows [N, H*W, C] and back.
template <typename T>
VarT<T> to_tokens(const VarT<T>& x) {
    int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    return reshape(permute(x, {0, 2, 3, 1}), {n, h * w, c});
}

template <typename T>
VarT<T> from_tokens(const VarT<T>& tok, int64_t h, int64_t w) {
    int64_t n = tok.shape()[0], c = tok.shape()[2];
    return permute(reshape(tok, {n, h, w, c}), {0, 3, 1, 2});
}

template <typename T>
VarT<T> res_block(const Pick<T>& pick, const UNetConfig& cfg, const std::string& base,
                  const VarT<T>& x, const VarT<T>& temb) {
    VarT<T> h = silu(group_norm(x, cfg.groups, pick(base + "gn1.gamma"), pick(base + "gn1.beta")));
    h = conv2d(h, pick(base + "conv1.weight"), pick(base + "conv1.bias"), 1, 1);
    VarT<T> tb = linear(silu(temb), pick(base + "temb.weight"), pick(base + "temb.bias"));
    h = add_channel_rows(h, tb);
    h = silu(group_norm(h, cfg.groups, pick(base + "gn2.gamma"), pick(base + "gn2.beta")));
    h = conv2d(h, pick(base + "conv2.weight"), pick(base + "conv2.bias"), 1, 1);
    VarT<T> sk = x;
    if (x.shape()[1] != h.shape()[1])
        sk = conv2d(x, pick(base + "skip.weight"), pick(base + "skip.bias"), 1, 0);
    return add(sk, h);
}

// Self-attention, the conditioning hook, then cross-attention, all in token
// space with pre-norm residuals.
template <typename T>
VarT<T> attn_block(const Pick<T>& pick, const UNetConfig& cfg, const std::string& prefix,
                   const std::string& site, const VarT<T>& x, const UNetCondT<T>& cond) {
    std::string base = prefix + site + ".";
    int64_t n = x.shape()[0], h = x.shape()[2], w = x.shape()[3];

    VarT<T> gn =
        group_norm(x, cfg.groups, pick(base + "attn.gn.gamma"), pick(base + "attn.gn.beta"));
    VarT<T> tok = to_tokens(x);
    VarT<T> tg = to_tokens(gn);
    VarT<T> a = multihead_attention(linear(tg, pick(base + "attn.q.weight"), pick(base + "attn.q.bias")),
                                    linear(tg, pick(base + "attn.k.weight"), pick(base + "attn.k.bias")),
                                    linear(tg, pick(base + "attn.v.weight"), pick(base + "attn.v.bias")),
                                    cfg.heads);
    tok = add(tok, linear(a, pick(base + "attn.o.weight"), pick(base + "attn.o.bias")));

    if (cond.attn_hook) tok = cond.attn_hook(tok, site);

    SGDIFF_CHECK(cond.context.defined(), "unet: cross-attention needs a context token sequence");
    const Shape& cs = cond.context.shape();
    SGDIFF_CHECK((cs.size() == 2 && cs[1] == cfg.context_dim) ||
                     (cs.size() == 3 && cs[0] == n && cs[2] == cfg.context_dim),
                 "unet: context must be [n_ctx, ", cfg.context_dim, "] shared or [", n, ", n_ctx, ",
                 cfg.context_dim, "] per item, got ", shape_str(cs));
    VarT<T> ctx = cond.context;
    if (cs.size() == 2) {
        ctx = reshape(ctx, {1, cs[0], cfg.context_dim});
        if (n > 1) ctx = concat(std::vector<VarT<T>>(static_cast<size_t>(n), ctx), 0);
    }
    VarT<T> tln = layer_norm(tok, pick(base + "xattn.ln.gamma"), pick(base + "xattn.ln.beta"));
    VarT<T> xa = multihead_attention(
        linear(tln, pick(base + "xattn.q.weight"), pick(base + "xattn.q.bias")),
        linear(ctx, pick(base + "xattn.k.weight"), pick(base + "xattn.k.bias")),
        linear(ctx, pick(base + "xattn.v.weight"), pick(base + "xattn.v.bias")), cfg.heads);
    tok = add(tok, linear(xa, pick(base + "xattn.o.weight"), pick(base + "xattn.o.bias")));
    return from_tokens(tok, h, w);
}

}  // namespace unet_detail

template <typename T>
UNetEncodeT<T> unet_encode(ParamStoreT<T>& ps, const UNetConfig& cfg, const VarT<T>& x,
                           const std::vector<int64_t>& t, const UNetCondT<T>& cond,
                           const std::string& prefix, const VarT<T>* stem_inject) {
    SGDIFF_CHECK(x.shape().size() == 4 && x.shape()[1] == cfg.in_channels &&
                     x.shape()[2] == cfg.image_size && x.shape()[3] == cfg.image_size,
                 "unet: input must be [N,", cfg.in_channels, ",", cfg.image_size, ",",
                 cfg.image_size, "], got ", shape_str(x.shape()));
    SGDIFF_CHECK(static_cast<int64_t>(t.size()) == x.shape()[0], "unet: ", t.size(),
                 " timesteps for batch of ", x.shape()[0]);
    unet_detail::Pick<T> pick{ps, cond.overrides};

    VarT<T> temb = VarT<T>::leaf(timestep_embedding<T>(t, cfg.temb_dim), false);
    temb = linear(temb, pick(prefix + "temb.l0.weight"), pick(prefix + "temb.l0.bias"));
    temb = linear(silu(temb), pick(prefix + "temb.l1.weight"), pick(prefix + "temb.l1.bias"));

    UNetEncodeT<T> out;
    out.temb = temb;
    VarT<T> h = conv2d(x, pick(prefix + "conv_in.weight"), pick(prefix + "conv_in.bias"), 1, 1);
    if (stem_inject) h = add(h, *stem_inject);
    out.skips.push_back(h);
    for (int64_t lvl = 0; lvl < cfg.levels(); lvl++) {
        for (int64_t b = 0; b < cfg.res_blocks; b++) {
            std::string base =
                prefix + "enc." + std::to_string(lvl) + "." + std::to_string(b) + ".";
            h = unet_detail::res_block(pick, cfg, base, h, temb);
            if (cfg.attn_at(lvl))
                h = unet_detail::attn_block(
                    pick, cfg, prefix, "enc." + std::to_string(lvl) + "." + std::to_string(b), h,
                    cond);
            out.skips.push_back(h);
        }
        if (lvl + 1 < cfg.levels()) {
            std::string base = prefix + "down." + std::to_string(lvl);
            h = conv2d(h, pick(base + ".weight"), pick(base + ".bias"), 2, 1);
            out.skips.push_back(h);
        }
    }
    out.h = h;
    return out;
}

template <typename T>
VarT<T> unet_decode(ParamStoreT<T>& ps, const UNetConfig& cfg, const VarT<T>& h_in,
                    std::vector<VarT<T>> skips, const VarT<T>& temb, const UNetCondT<T>& cond,
                    const std::string& prefix) {
    SGDIFF_CHECK(static_cast<int64_t>(skips.size()) == unet_skip_count(cfg),
                 "unet: got ", skips.size(), " skips, want ", unet_skip_count(cfg));
    unet_detail::Pick<T> pick{ps, cond.overrides};

    VarT<T> h = unet_detail::res_block(pick, cfg, prefix + "mid.0.", h_in, temb);
    h = unet_detail::attn_block(pick, cfg, prefix, "mid", h, cond);
    h = unet_detail::res_block(pick, cfg, prefix + "mid.1.", h, temb);

    for (int64_t lvl = cfg.levels() - 1; lvl >= 0; lvl--) {
        for (int64_t b = 0; b <= cfg.res_blocks; b++) {
            VarT<T> sk = skips.back();
            skips.pop_back();
            std::string base =
                prefix + "dec." + std::to_string(lvl) + "." + std::to_string(b) + ".";
            h = unet_detail::res_block(pick, cfg, base,
                                       concat(std::vector<VarT<T>>{h, sk}, 1), temb);
            if (cfg.attn_at(lvl))
                h = unet_detail::attn_block(
                    pick, cfg, prefix, "dec." + std::to_string(lvl) + "." + std::to_string(b), h,
                    cond);
        }
        if (lvl > 0) {
            h = bilinear_resize(h, h.shape()[2] * 2, h.shape()[3] * 2);
            std::string base = prefix + "up." + std::to_string(lvl);
            h = conv2d(h, pick(base + ".weight"), pick(base + ".bias"), 1, 1);
        }
    }
    h = silu(group_norm(h, cfg.groups, pick(prefix + "gn_out.gamma"),
                        pick(prefix + "gn_out.beta")));
    return conv2d(h, pick(prefix + "conv_out.weight"), pick(prefix + "conv_out.bias"), 1, 1);
}

template <typename T>
VarT<T> unet_forward(ParamStoreT<T>& ps, const UNetConfig& cfg, const VarT<T>& x,
                     const std::vector<int64_t>& t, const UNetCondT<T>& cond,
                     const std::string& prefix) {
    UNetEncodeT<T> enc = unet_encode(ps, cfg, x, t, cond, prefix);
    if (!cond.skip_residuals.empty()) {
        SGDIFF_CHECK(cond.skip_residuals.size() == enc.skips.size(), "unet: ",
                     cond.skip_residuals.size(), " skip residuals for ", enc.skips.size(),
                     " skips");
        for (size_t i = 0; i < enc.skips.size(); i++)
            enc.skips[i] = add(enc.skips[i], cond.skip_residuals[i]);
    }
    return unet_decode(ps, cfg, enc.h, std::move(enc.skips), enc.temb, cond, prefix);
}

}  // namespace sgdiff
