#pragma once

// Adapter-style conditioning for a frozen noise-prediction U-Net.  Three
// mechanisms, each registering its parameters under a dedicated prefix so a
// freeze partition can select exactly the adapter weights:
//
//   ctrl.*   trainable copy of the U-Net encoder fed a spatial layout map
//            through a zero 1x1 stem; its per-skip zero 1x1 output convs
//            produce residuals for the frozen decoder's skip stack.
//   gsa.*    gated self-attention over [visual tokens ; grounding tokens] at
//            every attention site, blended in through a tanh gate that starts
//            at zero.  ground.* holds the shared MLP that fuses a token
//            embedding with its graph-node feature into a grounding token.
//   lora.*   low-rank A/B factors for the cross-attention q/v projection
//            weights, applied as W0 + (alpha/r) * B*A through the forward
//            override table.
//
// All three are exact no-ops at initialization: zero convs, zero gates, and
// B = 0 leave the base model's output bit-identical.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sgdiff/graph_encoder.hpp"
#include "sgdiff/unet.hpp"

namespace sgdiff {

// ---------------------------------------------------------------------------
// Spatial-conditioning branch (trainable encoder copy)
// ---------------------------------------------------------------------------

// Channel widths of the encoder skip stack, in push order.
std::vector<int64_t> unet_skip_channels(const UNetConfig& cfg);

// Clones every encoder-side parameter (conv_in, temb MLP, enc.*, down.*, and
// the encoder-level attention blocks) from src_prefix into prefix with
// bit-identical values, then registers the zero stem (layout_dim -> first
// width, 1x1) and one zero 1x1 output conv per skip entry.
template <typename T>
void init_controlnet(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg,
                     int64_t layout_dim = kFeatDim, const std::string& src_prefix = "unet.",
                     const std::string& prefix = "ctrl.");

// Runs the copied encoder on x with the stem-projected layout map added after
// conv_in, and returns one residual per skip entry.  `cond` supplies the
// context token sequence for the copy's cross-attention; its hook, residuals
// and overrides are ignored (adapters do not stack inside this branch).
template <typename T>
std::vector<VarT<T>> controlnet_residuals(ParamStoreT<T>& ps, const UNetConfig& cfg,
                                          const VarT<T>& x, const std::vector<int64_t>& t,
                                          const VarT<T>& layout_map, const UNetCondT<T>& cond,
                                          const std::string& prefix = "ctrl.");

// ---------------------------------------------------------------------------
// Gated self-attention over grounding tokens
// ---------------------------------------------------------------------------

// Registers per-site attention parameters ("gsa.<site>.{proj,q,k,v,o,gamma}")
// for every attention site of the U-Net, plus the shared grounding MLP
// ("ground.l0", "ground.l1").
template <typename T>
void init_gsa(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg,
              const std::string& prefix = "gsa.", const std::string& ground_prefix = "ground.");

// vis [N, HW, C] -> [N, HW, C]:
//   vis + tanh(gamma) * visual_part(SelfAttn([vis ; proj(ground)])).
// `ground` is [n_g, context_dim], shared across the batch; undefined or
// zero-row ground degrades to gated self-attention over the visual tokens
// alone (not the identity — the gate still opens as gamma trains).
template <typename T>
VarT<T> gated_self_attention(ParamStoreT<T>& ps, const std::string& site, const VarT<T>& vis,
                             const VarT<T>& ground, int heads,
                             const std::string& prefix = "gsa.");

// Fuses per-object token embeddings [n, D] with their graph-node features
// [n, D] into grounding tokens [n, context_dim] through the shared two-layer
// MLP.  Row counts must match; rows are processed independently, so a row
// permutation of the inputs permutes the output identically.
template <typename T>
VarT<T> ground_tokens(ParamStoreT<T>& ps, const VarT<T>& token_embed, const VarT<T>& node_feats,
                      const std::string& prefix = "ground.");

// Attention hook for UNetCondT splicing gated self-attention before
// cross-attention at every site.  `grounds` holds one grounding token tensor
// per batch item (or a single entry shared by all items).
template <typename T>
std::function<VarT<T>(const VarT<T>&, const std::string&)> make_gsa_hook(
    ParamStoreT<T>& ps, const UNetConfig& cfg, std::vector<VarT<T>> grounds,
    const std::string& prefix = "gsa.");

// ---------------------------------------------------------------------------
// Low-rank attention updates
// ---------------------------------------------------------------------------

struct LoraConfig {
    int64_t rank = 4;
    double alpha = 4.0;
};

// Registers "lora.<site>.{q,v}.{A,B}" for the cross-attention q and v weights
// of every attention site.  A ~ N(0, 0.02^2) [r, out], B = 0 [in, r].
// rank > min(in, out) for any target is a ConfigError.
template <typename T>
void init_lora(ParamStoreT<T>& ps, Rng& rng, const UNetConfig& cfg, const LoraConfig& lc,
               const std::string& prefix = "lora.");

// W0 + (alpha/r) * B*A, differentiable in all three operands.
template <typename T>
VarT<T> lora_apply(const VarT<T>& w0, const VarT<T>& a, const VarT<T>& b, double alpha);

// Override table mapping each adapted weight's fully qualified name to its
// low-rank-updated value; hand the result to UNetCondT::overrides.
template <typename T>
std::map<std::string, VarT<T>> lora_overrides(ParamStoreT<T>& ps, const UNetConfig& cfg,
                                              const LoraConfig& lc,
                                              const std::string& target_prefix = "unet.",
                                              const std::string& prefix = "lora.");

// Folds the low-rank updates into the base weights in place (the factors stay
// registered but become redundant); used when exporting a merged model.
template <typename T>
void lora_merge_into(ParamStoreT<T>& ps, const UNetConfig& cfg, const LoraConfig& lc,
                     const std::string& target_prefix = "unet.",
                     const std::string& prefix = "lora.");

// ---------------------------------------------------------------------------
// Freeze partitions
// ---------------------------------------------------------------------------

// Marks exactly the parameter groups trained by `method` as trainable and
// everything else frozen.  Returns the trainable prefixes:
//   controlnet  ctrl.* and the graph encoder (its layout heads included)
//   gsa         gsa.*, ground.*, and the graph encoder
//   lora        lora.* only
// Unknown method names are a ConfigError, as is a prefix with no parameters.
template <typename T>
std::vector<std::string> freeze_partition(ParamStoreT<T>& ps, const std::string& method);

// ---------------------------------------------------------------------------
// Implementation
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> ground_tokens(ParamStoreT<T>& ps, const VarT<T>& token_embed, const VarT<T>& node_feats,
                      const std::string& prefix) {
    SGDIFF_CHECK(token_embed.shape().size() == 2 && node_feats.shape().size() == 2 &&
                     token_embed.shape()[0] == node_feats.shape()[0],
                 "ground_tokens: ", shape_str(token_embed.shape()), " vs ",
                 shape_str(node_feats.shape()), " rows must match");
    VarT<T> h = concat(std::vector<VarT<T>>{token_embed, node_feats}, 1);
    h = silu(linear_rowwise(h, ps.get(prefix + "l0.weight"), ps.get(prefix + "l0.bias")));
    return linear_rowwise(h, ps.get(prefix + "l1.weight"), ps.get(prefix + "l1.bias"));
}

template <typename T>
VarT<T> gated_self_attention(ParamStoreT<T>& ps, const std::string& site, const VarT<T>& vis,
                             const VarT<T>& ground, int heads, const std::string& prefix) {
    SGDIFF_CHECK(vis.shape().size() == 3, "gated_self_attention: vis must be [N, HW, C]");
    std::string base = prefix + site + ".";
    int64_t n = vis.shape()[0], hw = vis.shape()[1];

    VarT<T> joint = vis;
    if (ground.defined() && ground.shape()[0] > 0) {
        SGDIFF_CHECK(ground.shape().size() == 2, "gated_self_attention: ground must be [n, D]");
        VarT<T> g = linear(ground, ps.get(base + "proj.weight"), ps.get(base + "proj.bias"));
        g = reshape(g, {1, g.shape()[0], g.shape()[1]});
        if (n > 1) g = concat(std::vector<VarT<T>>(static_cast<size_t>(n), g), 0);
        joint = concat(std::vector<VarT<T>>{vis, g}, 1);
    }
    VarT<T> a = multihead_attention(
        linear(joint, ps.get(base + "q.weight"), ps.get(base + "q.bias")),
        linear(joint, ps.get(base + "k.weight"), ps.get(base + "k.bias")),
        linear(joint, ps.get(base + "v.weight"), ps.get(base + "v.bias")), heads);
    a = linear(a, ps.get(base + "o.weight"), ps.get(base + "o.bias"));
    VarT<T> sel = joint.shape()[1] == hw ? a : slice(a, 1, 0, hw);
    return add(vis, mul_scalar_var(sel, tanh_op(ps.get(base + "gamma"))));
}

template <typename T>
std::function<VarT<T>(const VarT<T>&, const std::string&)> make_gsa_hook(
    ParamStoreT<T>& ps, const UNetConfig& cfg, std::vector<VarT<T>> grounds,
    const std::string& prefix) {
    return [&ps, cfg, grounds = std::move(grounds), prefix](const VarT<T>& tok,
                                                           const std::string& site) -> VarT<T> {
        int64_t n = tok.shape()[0];
        if (grounds.size() <= 1) {
            VarT<T> g = grounds.empty() ? VarT<T>() : grounds[0];
            return gated_self_attention(ps, site, tok, g, cfg.heads, prefix);
        }
        SGDIFF_CHECK(static_cast<int64_t>(grounds.size()) == n, "gsa hook: ", grounds.size(),
                     " grounding sets for batch of ", n);
        std::vector<VarT<T>> rows;
        rows.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; i++)
            rows.push_back(gated_self_attention(ps, site, slice(tok, 0, i, 1),
                                                grounds[static_cast<size_t>(i)], cfg.heads,
                                                prefix));
        return concat(rows, 0);
    };
}

template <typename T>
VarT<T> lora_apply(const VarT<T>& w0, const VarT<T>& a, const VarT<T>& b, double alpha) {
    SGDIFF_CHECK(w0.shape().size() == 2 && a.shape().size() == 2 && b.shape().size() == 2,
                 "lora_apply wants matrices");
    int64_t in = w0.shape()[0], out = w0.shape()[1], r = a.shape()[0];
    SGDIFF_CHECK(b.shape() == Shape({in, r}) && a.shape() == Shape({r, out}),
                 "lora_apply: factors ", shape_str(b.shape()), " x ", shape_str(a.shape()),
                 " do not fit weight ", shape_str(w0.shape()));
    return add(w0, scale(matmul(b, a), T(alpha / double(r))));
}

template <typename T>
std::map<std::string, VarT<T>> lora_overrides(ParamStoreT<T>& ps, const UNetConfig& cfg,
                                              const LoraConfig& lc,
                                              const std::string& target_prefix,
                                              const std::string& prefix) {
    std::map<std::string, VarT<T>> out;
    for (const std::string& site : unet_attn_sites(cfg)) {
        for (const char* which : {"q", "v"}) {
            std::string target = target_prefix + site + ".xattn." + which + ".weight";
            std::string base = prefix + site + "." + which + ".";
            out.emplace(target, lora_apply(ps.get(target), ps.get(base + "A"),
                                           ps.get(base + "B"), lc.alpha));
        }
    }
    return out;
}

template <typename T>
void lora_merge_into(ParamStoreT<T>& ps, const UNetConfig& cfg, const LoraConfig& lc,
                     const std::string& target_prefix, const std::string& prefix) {
    NoGradGuard ng;
    for (auto& [name, merged] : lora_overrides(ps, cfg, lc, target_prefix, prefix))
        ps.get(name).assign_value(merged.value().clone());
}

template <typename T>
std::vector<VarT<T>> controlnet_residuals(ParamStoreT<T>& ps, const UNetConfig& cfg,
                                          const VarT<T>& x, const std::vector<int64_t>& t,
                                          const VarT<T>& layout_map, const UNetCondT<T>& cond,
                                          const std::string& prefix) {
    SGDIFF_CHECK(layout_map.shape().size() == 4 && layout_map.shape()[0] == x.shape()[0] &&
                     layout_map.shape()[2] == cfg.image_size &&
                     layout_map.shape()[3] == cfg.image_size,
                 "controlnet: layout map ", shape_str(layout_map.shape()),
                 " does not match input ", shape_str(x.shape()));
    VarT<T> stem =
        conv2d(layout_map, ps.get(prefix + "stem.weight"), ps.get(prefix + "stem.bias"), 1, 0);
    UNetCondT<T> branch;
    branch.context = cond.context;
    UNetEncodeT<T> enc = unet_encode(ps, cfg, x, t, branch, prefix, &stem);
    std::vector<VarT<T>> res;
    res.reserve(enc.skips.size());
    for (size_t i = 0; i < enc.skips.size(); i++) {
        std::string base = prefix + "zout." + std::to_string(i);
        res.push_back(conv2d(enc.skips[i], ps.get(base + ".weight"), ps.get(base + ".bias"), 1, 0));
    }
    return res;
}

}  // namespace sgdiff
